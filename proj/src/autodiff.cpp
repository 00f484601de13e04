#include "tak/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "tak/gemm.hpp"

namespace tak {

namespace {

thread_local bool g_grad_enabled = true;

// Scratch buffers for im2col/col2im, reused across calls on the same thread.
thread_local std::vector<double> g_col_scratch;
thread_local std::vector<double> g_col_scratch2;

using BackwardImpl = std::function<void(Node*)>;

Var new_op(Tensor value, std::vector<Var> inputs, BackwardImpl bw) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool rg = false;
  if (g_grad_enabled)
    for (const auto& in : inputs)
      if (in->requires_grad) rg = true;
  n->requires_grad = rg;
  if (rg) {
    n->inputs = std::move(inputs);
    Node* self = n.get();
    n->backward_fn = [self, bw = std::move(bw)]() { bw(self); };
  }
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw ShapeError(std::string(op) + ": shape mismatch " + a->value.shape_str() + " vs " +
                     b->value.shape_str());
}

}  // namespace

Var make_leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

Var make_constant(Tensor value) { return make_leaf(std::move(value), false); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void backward(const Var& root) {
  if (root->value.numel() != 1) throw ShapeError("backward: root must be scalar");
  if (!root->requires_grad) return;

  // Iterative post-order DFS; reversed post-order is a topological order, so
  // every node's consumers run before the node itself.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->inputs.size()) {
      Node* c = n->inputs[i++].get();
      if (c->requires_grad && !visited.count(c)) {
        visited.insert(c);
        stack.emplace_back(c, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad.data[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn();
}

namespace ops {

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return new_op(std::move(out), {a, b}, [](Node* self) {
    const Tensor& g = self->grad;
    for (int k = 0; k < 2; ++k) {
      Node* in = self->inputs[static_cast<size_t>(k)].get();
      if (!in->requires_grad) continue;
      Tensor& gi = in->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) gi[i] += g[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return new_op(std::move(out), {a, b}, [](Node* self) {
    const Tensor& g = self->grad;
    Node* a_ = self->inputs[0].get();
    Node* b_ = self->inputs[1].get();
    if (a_->requires_grad) {
      Tensor& ga = a_->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (b_->requires_grad) {
      Tensor& gb = b_->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return new_op(std::move(out), {a, b}, [](Node* self) {
    const Tensor& g = self->grad;
    Node* a_ = self->inputs[0].get();
    Node* b_ = self->inputs[1].get();
    if (a_->requires_grad) {
      Tensor& ga = a_->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * b_->value[i];
    }
    if (b_->requires_grad) {
      Tensor& gb = b_->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * a_->value[i];
    }
  });
}

Var scale(const Var& a, double c) {
  Tensor out = a->value;
  for (double& v : out.data) v *= c;
  return new_op(std::move(out), {a}, [c](Node* self) {
    Node* in = self->inputs[0].get();
    Tensor& gi = in->ensure_grad();
    for (int64_t i = 0; i < self->grad.numel(); ++i) gi[i] += c * self->grad[i];
  });
}

Var add_scalar(const Var& a, double c) {
  Tensor out = a->value;
  for (double& v : out.data) v += c;
  return new_op(std::move(out), {a}, [](Node* self) {
    Node* in = self->inputs[0].get();
    Tensor& gi = in->ensure_grad();
    for (int64_t i = 0; i < self->grad.numel(); ++i) gi[i] += self->grad[i];
  });
}

Var relu(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.data)
    if (v < 0.0) v = 0.0;
  return new_op(std::move(out), {a}, [](Node* self) {
    Node* in = self->inputs[0].get();
    Tensor& gi = in->ensure_grad();
    const Tensor& x = in->value;
    for (int64_t i = 0; i < self->grad.numel(); ++i)
      if (x[i] > 0.0) gi[i] += self->grad[i];
  });
}

Var tanh_(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.data) v = std::tanh(v);
  return new_op(std::move(out), {a}, [](Node* self) {
    Node* in = self->inputs[0].get();
    Tensor& gi = in->ensure_grad();
    const Tensor& y = self->value;
    for (int64_t i = 0; i < self->grad.numel(); ++i) gi[i] += self->grad[i] * (1.0 - y[i] * y[i]);
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a->value.data) s += v;
  return new_op(Tensor::scalar(s), {a}, [](Node* self) {
    Node* in = self->inputs[0].get();
    Tensor& gi = in->ensure_grad();
    const double g = self->grad[0];
    for (double& v : gi.data) v += g;
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a->value.numel());
  double s = 0.0;
  for (double v : a->value.data) s += v;
  return new_op(Tensor::scalar(s / n), {a}, [n](Node* self) {
    Node* in = self->inputs[0].get();
    Tensor& gi = in->ensure_grad();
    const double g = self->grad[0] / n;
    for (double& v : gi.data) v += g;
  });
}

Var weighted_sum(const Var& a, const Tensor& w) {
  if (!a->value.same_shape(w)) throw ShapeError("weighted_sum: weight shape mismatch");
  double s = 0.0;
  for (int64_t i = 0; i < w.numel(); ++i) s += a->value[i] * w[i];
  return new_op(Tensor::scalar(s), {a}, [w](Node* self) {
    Node* in = self->inputs[0].get();
    Tensor& gi = in->ensure_grad();
    const double g = self->grad[0];
    for (int64_t i = 0; i < w.numel(); ++i) gi[i] += g * w[i];
  });
}

Var reshape(const Var& a, std::vector<int> shape) {
  if (Tensor::numel_of(shape) != a->value.numel())
    throw ShapeError("reshape: numel mismatch for " + a->value.shape_str());
  Tensor out(std::move(shape), a->value.data);
  return new_op(std::move(out), {a}, [](Node* self) {
    Node* in = self->inputs[0].get();
    Tensor& gi = in->ensure_grad();
    for (int64_t i = 0; i < self->grad.numel(); ++i) gi[i] += self->grad[i];
  });
}

Var concat(const std::vector<Var>& parts, int dim) {
  if (parts.empty()) throw ShapeError("concat: no parts");
  if (dim == 0) {
    std::vector<int> shape = parts[0]->value.shape;
    for (size_t i = 1; i < parts.size(); ++i) {
      const auto& s = parts[i]->value.shape;
      if (s.size() != shape.size()) throw ShapeError("concat: rank mismatch");
      for (size_t d = 1; d < s.size(); ++d)
        if (s[d] != shape[d]) throw ShapeError("concat: trailing dim mismatch");
      shape[0] += s[0];
    }
    Tensor out(shape);
    int64_t off = 0;
    for (const auto& p : parts) {
      std::memcpy(out.data.data() + off, p->value.data.data(),
                  sizeof(double) * static_cast<size_t>(p->value.numel()));
      off += p->value.numel();
    }
    return new_op(std::move(out), parts, [](Node* self) {
      int64_t off2 = 0;
      for (auto& inp : self->inputs) {
        Node* in = inp.get();
        const int64_t n = in->value.numel();
        if (in->requires_grad) {
          Tensor& gi = in->ensure_grad();
          for (int64_t i = 0; i < n; ++i) gi[i] += self->grad[off2 + i];
        }
        off2 += n;
      }
    });
  }
  if (dim != 1) throw ShapeError("concat: dim must be 0 or 1");
  const int rows = parts[0]->value.dim(0);
  int total_cols = 0;
  for (const auto& p : parts) {
    if (p->value.ndim() != 2 || p->value.dim(0) != rows)
      throw ShapeError("concat dim 1: expects rank-2 parts with equal rows");
    total_cols += p->value.dim(1);
  }
  Tensor out({rows, total_cols});
  std::vector<int> offsets;
  int col = 0;
  for (const auto& p : parts) {
    offsets.push_back(col);
    const int pc = p->value.dim(1);
    for (int r = 0; r < rows; ++r)
      std::memcpy(out.data.data() + static_cast<int64_t>(r) * total_cols + col,
                  p->value.data.data() + static_cast<int64_t>(r) * pc,
                  sizeof(double) * static_cast<size_t>(pc));
    col += pc;
  }
  return new_op(std::move(out), parts, [rows, total_cols, offsets](Node* self) {
    for (size_t pi = 0; pi < self->inputs.size(); ++pi) {
      Node* in = self->inputs[pi].get();
      if (!in->requires_grad) continue;
      Tensor& gi = in->ensure_grad();
      const int pc = in->value.dim(1);
      const int off = offsets[pi];
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < pc; ++j)
          gi[static_cast<int64_t>(r) * pc + j] +=
              self->grad[static_cast<int64_t>(r) * total_cols + off + j];
    }
  });
}

Var concat_channels(const std::vector<Var>& parts) { return concat(parts, 0); }

Var narrow(const Var& a, int64_t start, int64_t len) {
  if (start < 0 || start + len > a->value.numel()) throw ShapeError("narrow: range out of bounds");
  Tensor out({static_cast<int>(len)});
  std::memcpy(out.data.data(), a->value.data.data() + start, sizeof(double) * static_cast<size_t>(len));
  return new_op(std::move(out), {a}, [start, len](Node* self) {
    Node* in = self->inputs[0].get();
    Tensor& gi = in->ensure_grad();
    for (int64_t i = 0; i < len; ++i) gi[start + i] += self->grad[i];
  });
}

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0))
    throw ShapeError("matmul: incompatible " + av.shape_str() + " x " + bv.shape_str());
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  gemm(false, false, m, n, k, 1.0, av.data.data(), k, bv.data.data(), n, 0.0, out.data.data(), n);
  return new_op(std::move(out), {a, b}, [m, k, n](Node* self) {
    Node* a_ = self->inputs[0].get();
    Node* b_ = self->inputs[1].get();
    const double* g = self->grad.data.data();
    if (a_->requires_grad) {
      Tensor& ga = a_->ensure_grad();
      gemm(false, true, m, k, n, 1.0, g, n, b_->value.data.data(), n, 1.0, ga.data.data(), k);
    }
    if (b_->requires_grad) {
      Tensor& gb = b_->ensure_grad();
      gemm(true, false, k, n, m, 1.0, a_->value.data.data(), k, g, n, 1.0, gb.data.data(), n);
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x->value;
  const Tensor& wv = w->value;
  if (xv.ndim() != 1 && xv.ndim() != 2)
    throw ShapeError("linear: input must be rank 1 or 2, got " + xv.shape_str());
  const bool vector_input = xv.ndim() == 1;
  const int n = vector_input ? 1 : xv.dim(0);
  const int din = vector_input ? xv.dim(0) : xv.dim(1);
  if (wv.ndim() != 2 || wv.dim(1) != din)
    throw ShapeError("linear: weight " + wv.shape_str() + " does not accept input " + xv.shape_str());
  const int dout = wv.dim(0);
  if (b->value.numel() != dout) throw ShapeError("linear: bias size mismatch");
  Tensor out(vector_input ? std::vector<int>{dout} : std::vector<int>{n, dout});
  gemm(false, true, n, dout, din, 1.0, xv.data.data(), din, wv.data.data(), din, 0.0,
       out.data.data(), dout);
  for (int r = 0; r < n; ++r)
    for (int j = 0; j < dout; ++j) out[static_cast<int64_t>(r) * dout + j] += b->value[j];
  return new_op(std::move(out), {x, w, b}, [n, din, dout](Node* self) {
    Node* x_ = self->inputs[0].get();
    Node* w_ = self->inputs[1].get();
    Node* b_ = self->inputs[2].get();
    const double* g = self->grad.data.data();
    if (x_->requires_grad) {
      Tensor& gx = x_->ensure_grad();
      gemm(false, false, n, din, dout, 1.0, g, dout, w_->value.data.data(), din, 1.0,
           gx.data.data(), din);
    }
    if (w_->requires_grad) {
      Tensor& gw = w_->ensure_grad();
      gemm(true, false, dout, din, n, 1.0, g, dout, x_->value.data.data(), din, 1.0,
           gw.data.data(), din);
    }
    if (b_->requires_grad) {
      Tensor& gb = b_->ensure_grad();
      for (int r = 0; r < n; ++r)
        for (int j = 0; j < dout; ++j) gb[j] += g[static_cast<int64_t>(r) * dout + j];
    }
  });
}

Var add_bias_rows(const Var& a, const Var& b) {
  const Tensor& av = a->value;
  if (av.ndim() != 2 || b->value.numel() != av.dim(0))
    throw ShapeError("add_bias_rows: bias length must equal row count");
  const int m = av.dim(0), n = av.dim(1);
  Tensor out = av;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<int64_t>(i) * n + j] += b->value[i];
  return new_op(std::move(out), {a, b}, [m, n](Node* self) {
    Node* a_ = self->inputs[0].get();
    Node* b_ = self->inputs[1].get();
    const Tensor& g = self->grad;
    if (a_->requires_grad) {
      Tensor& ga = a_->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (b_->requires_grad) {
      Tensor& gb = b_->ensure_grad();
      for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += g[static_cast<int64_t>(i) * n + j];
        gb[i] += s;
      }
    }
  });
}

Var gram(const Var& b, double inv_scale) {
  const Tensor& bv = b->value;
  if (bv.ndim() != 2) throw ShapeError("gram: expects (n, c)");
  const int n = bv.dim(0), c = bv.dim(1);
  Tensor out({n, n});
  gemm(false, true, n, n, c, inv_scale, bv.data.data(), c, bv.data.data(), c, 0.0,
       out.data.data(), n);
  return new_op(std::move(out), {b}, [n, c, inv_scale](Node* self) {
    Node* b_ = self->inputs[0].get();
    Tensor& gb = b_->ensure_grad();
    // dB = inv_scale * (G + G^T) B
    Tensor sym({n, n});
    const Tensor& g = self->grad;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        sym[static_cast<int64_t>(i) * n + j] =
            g[static_cast<int64_t>(i) * n + j] + g[static_cast<int64_t>(j) * n + i];
    gemm(false, false, n, c, n, inv_scale, sym.data.data(), n, b_->value.data.data(), c, 1.0,
         gb.data.data(), c);
  });
}

Var l2_normalize_rows(const Var& a, double eps) {
  const Tensor& av = a->value;
  if (av.ndim() != 2) throw ShapeError("l2_normalize_rows: expects (n, c)");
  const int n = av.dim(0), c = av.dim(1);
  Tensor out({n, c});
  std::vector<double> norms(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = eps;
    const double* row = av.data.data() + static_cast<int64_t>(i) * c;
    for (int j = 0; j < c; ++j) s += row[j] * row[j];
    const double nm = std::sqrt(s);
    norms[static_cast<size_t>(i)] = nm;
    double* orow = out.data.data() + static_cast<int64_t>(i) * c;
    for (int j = 0; j < c; ++j) orow[j] = row[j] / nm;
  }
  return new_op(std::move(out), {a}, [n, c, norms](Node* self) {
    Node* in = self->inputs[0].get();
    Tensor& gi = in->ensure_grad();
    for (int i = 0; i < n; ++i) {
      const double* y = self->value.data.data() + static_cast<int64_t>(i) * c;
      const double* g = self->grad.data.data() + static_cast<int64_t>(i) * c;
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += y[j] * g[j];
      const double inv = 1.0 / norms[static_cast<size_t>(i)];
      double* gr = gi.data.data() + static_cast<int64_t>(i) * c;
      for (int j = 0; j < c; ++j) gr[j] += (g[j] - y[j] * dot) * inv;
    }
  });
}

namespace {

struct ConvDims {
  int cin, d, h, w;
  int cout, k;
  int stride, pad;
  int od, oh, ow;
  int64_t nout() const { return static_cast<int64_t>(od) * oh * ow; }
  int64_t rows() const { return static_cast<int64_t>(cin) * k * k * k; }
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.ndim() != 4) throw ShapeError("conv3d: input must be (C,D,H,W)");
  if (w.ndim() != 5) throw ShapeError("conv3d: weight must be (Cout,Cin,k,k,k)");
  ConvDims cd{};
  cd.cin = x.dim(0);
  cd.d = x.dim(1);
  cd.h = x.dim(2);
  cd.w = x.dim(3);
  cd.cout = w.dim(0);
  cd.k = w.dim(2);
  if (w.dim(1) != cd.cin || w.dim(3) != cd.k || w.dim(4) != cd.k)
    throw ShapeError("conv3d: weight/input channel or kernel mismatch");
  cd.stride = stride;
  cd.pad = pad;
  auto osz = [&](int in) { return (in + 2 * pad - cd.k) / stride + 1; };
  cd.od = osz(cd.d);
  cd.oh = osz(cd.h);
  cd.ow = osz(cd.w);
  if (cd.od <= 0 || cd.oh <= 0 || cd.ow <= 0) throw ShapeError("conv3d: output dims non-positive");
  return cd;
}

void im2col(const Tensor& x, const ConvDims& cd, std::vector<double>& col) {
  const int64_t n = cd.nout();
  col.assign(static_cast<size_t>(cd.rows() * n), 0.0);
  int64_t r = 0;
  for (int ci = 0; ci < cd.cin; ++ci) {
    const double* xc = x.data.data() + static_cast<int64_t>(ci) * cd.d * cd.h * cd.w;
    for (int kz = 0; kz < cd.k; ++kz)
      for (int ky = 0; ky < cd.k; ++ky)
        for (int kx = 0; kx < cd.k; ++kx, ++r) {
          double* crow = col.data() + r * n;
          int64_t o = 0;
          for (int oz = 0; oz < cd.od; ++oz) {
            const int z = oz * cd.stride - cd.pad + kz;
            if (z < 0 || z >= cd.d) {
              o += static_cast<int64_t>(cd.oh) * cd.ow;
              continue;
            }
            for (int oy = 0; oy < cd.oh; ++oy) {
              const int y = oy * cd.stride - cd.pad + ky;
              if (y < 0 || y >= cd.h) {
                o += cd.ow;
                continue;
              }
              const double* xrow = xc + (static_cast<int64_t>(z) * cd.h + y) * cd.w;
              for (int ox = 0; ox < cd.ow; ++ox, ++o) {
                const int xx = ox * cd.stride - cd.pad + kx;
                if (xx >= 0 && xx < cd.w) crow[o] = xrow[xx];
              }
            }
          }
        }
  }
}

void col2im_accumulate(const std::vector<double>& col, const ConvDims& cd, Tensor& dx) {
  const int64_t n = cd.nout();
  int64_t r = 0;
  for (int ci = 0; ci < cd.cin; ++ci) {
    double* xc = dx.data.data() + static_cast<int64_t>(ci) * cd.d * cd.h * cd.w;
    for (int kz = 0; kz < cd.k; ++kz)
      for (int ky = 0; ky < cd.k; ++ky)
        for (int kx = 0; kx < cd.k; ++kx, ++r) {
          const double* crow = col.data() + r * n;
          int64_t o = 0;
          for (int oz = 0; oz < cd.od; ++oz) {
            const int z = oz * cd.stride - cd.pad + kz;
            if (z < 0 || z >= cd.d) {
              o += static_cast<int64_t>(cd.oh) * cd.ow;
              continue;
            }
            for (int oy = 0; oy < cd.oh; ++oy) {
              const int y = oy * cd.stride - cd.pad + ky;
              if (y < 0 || y >= cd.h) {
                o += cd.ow;
                continue;
              }
              double* xrow = xc + (static_cast<int64_t>(z) * cd.h + y) * cd.w;
              for (int ox = 0; ox < cd.ow; ++ox, ++o) {
                const int xx = ox * cd.stride - cd.pad + kx;
                if (xx >= 0 && xx < cd.w) xrow[xx] += crow[o];
              }
            }
          }
        }
  }
}

}  // namespace

Var conv3d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const ConvDims cd = conv_dims(x->value, w->value, stride, pad);
  if (b->value.numel() != cd.cout) throw ShapeError("conv3d: bias size mismatch");
  const int64_t n = cd.nout();
  im2col(x->value, cd, g_col_scratch);
  Tensor out({cd.cout, cd.od, cd.oh, cd.ow});
  gemm(false, false, cd.cout, static_cast<int>(n), static_cast<int>(cd.rows()), 1.0,
       w->value.data.data(), static_cast<int>(cd.rows()), g_col_scratch.data(),
       static_cast<int>(n), 0.0, out.data.data(), static_cast<int>(n));
  for (int co = 0; co < cd.cout; ++co) {
    double* orow = out.data.data() + static_cast<int64_t>(co) * n;
    const double bias = b->value[co];
    for (int64_t i = 0; i < n; ++i) orow[i] += bias;
  }
  return new_op(std::move(out), {x, w, b}, [cd, n](Node* self) {
    Node* x_ = self->inputs[0].get();
    Node* w_ = self->inputs[1].get();
    Node* b_ = self->inputs[2].get();
    const double* g = self->grad.data.data();
    if (b_->requires_grad) {
      Tensor& gb = b_->ensure_grad();
      for (int co = 0; co < cd.cout; ++co) {
        double s = 0.0;
        const double* grow = g + static_cast<int64_t>(co) * n;
        for (int64_t i = 0; i < n; ++i) s += grow[i];
        gb[co] += s;
      }
    }
    if (w_->requires_grad) {
      // dW += dY @ col^T; col recomputed from the saved input.
      im2col(x_->value, cd, g_col_scratch);
      Tensor& gw = w_->ensure_grad();
      gemm(false, true, cd.cout, static_cast<int>(cd.rows()), static_cast<int>(n), 1.0, g,
           static_cast<int>(n), g_col_scratch.data(), static_cast<int>(n), 1.0, gw.data.data(),
           static_cast<int>(cd.rows()));
    }
    if (x_->requires_grad) {
      // dcol = W^T @ dY, then scatter back.
      g_col_scratch2.assign(static_cast<size_t>(cd.rows() * n), 0.0);
      gemm(true, false, static_cast<int>(cd.rows()), static_cast<int>(n), cd.cout, 1.0,
           w_->value.data.data(), static_cast<int>(cd.rows()), g, static_cast<int>(n), 0.0,
           g_col_scratch2.data(), static_cast<int>(n));
      col2im_accumulate(g_col_scratch2, cd, x_->ensure_grad());
    }
  });
}

Var conv_transpose3d_k2s2(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x->value;
  const Tensor& wv = w->value;
  if (xv.ndim() != 4) throw ShapeError("conv_transpose3d: input must be (C,D,H,W)");
  if (wv.ndim() != 5 || wv.dim(2) != 2 || wv.dim(3) != 2 || wv.dim(4) != 2 ||
      wv.dim(0) != xv.dim(0))
    throw ShapeError("conv_transpose3d: weight must be (Cin,Cout,2,2,2)");
  const int cin = xv.dim(0), d = xv.dim(1), h = xv.dim(2), ww = xv.dim(3);
  const int cout = wv.dim(1);
  if (b->value.numel() != cout) throw ShapeError("conv_transpose3d: bias size mismatch");
  const int64_t n = static_cast<int64_t>(d) * h * ww;

  // Ycol (Cout*8, n) = W^T (Cout*8, Cin) @ X (Cin, n); then scatter (disjoint).
  g_col_scratch.assign(static_cast<size_t>(cout) * 8 * static_cast<size_t>(n), 0.0);
  gemm(true, false, cout * 8, static_cast<int>(n), cin, 1.0, wv.data.data(), cout * 8,
       xv.data.data(), static_cast<int>(n), 0.0, g_col_scratch.data(), static_cast<int>(n));
  Tensor out({cout, 2 * d, 2 * h, 2 * ww});
  const int od = 2 * d, oh = 2 * h, ow = 2 * ww;
  for (int co = 0; co < cout; ++co) {
    const double bias = b->value[co];
    double* oc = out.data.data() + static_cast<int64_t>(co) * od * oh * ow;
    for (int kz = 0; kz < 2; ++kz)
      for (int ky = 0; ky < 2; ++ky)
        for (int kx = 0; kx < 2; ++kx) {
          const double* yrow =
              g_col_scratch.data() + (static_cast<int64_t>(co) * 8 + kz * 4 + ky * 2 + kx) * n;
          int64_t i = 0;
          for (int z = 0; z < d; ++z)
            for (int y = 0; y < h; ++y) {
              double* orow = oc + (static_cast<int64_t>(2 * z + kz) * oh + 2 * y + ky) * ow;
              for (int xx = 0; xx < ww; ++xx, ++i) orow[2 * xx + kx] = yrow[i] + bias;
            }
        }
  }
  return new_op(std::move(out), {x, w, b}, [cin, cout, d, h, ww, n](Node* self) {
    Node* x_ = self->inputs[0].get();
    Node* w_ = self->inputs[1].get();
    Node* b_ = self->inputs[2].get();
    const Tensor& g = self->grad;
    const int od = 2 * d, oh = 2 * h, ow = 2 * ww;
    if (b_->requires_grad) {
      Tensor& gb = b_->ensure_grad();
      for (int co = 0; co < cout; ++co) {
        double s = 0.0;
        const double* gc = g.data.data() + static_cast<int64_t>(co) * od * oh * ow;
        for (int64_t i = 0; i < static_cast<int64_t>(od) * oh * ow; ++i) s += gc[i];
        gb[co] += s;
      }
    }
    // Gather dYcol (Cout*8, n) from the output grad.
    g_col_scratch.assign(static_cast<size_t>(cout) * 8 * static_cast<size_t>(n), 0.0);
    for (int co = 0; co < cout; ++co) {
      const double* gc = g.data.data() + static_cast<int64_t>(co) * od * oh * ow;
      for (int kz = 0; kz < 2; ++kz)
        for (int ky = 0; ky < 2; ++ky)
          for (int kx = 0; kx < 2; ++kx) {
            double* yrow =
                g_col_scratch.data() + (static_cast<int64_t>(co) * 8 + kz * 4 + ky * 2 + kx) * n;
            int64_t i = 0;
            for (int z = 0; z < d; ++z)
              for (int y = 0; y < h; ++y) {
                const double* grow = gc + (static_cast<int64_t>(2 * z + kz) * oh + 2 * y + ky) * ow;
                for (int xx = 0; xx < ww; ++xx, ++i) yrow[i] = grow[2 * xx + kx];
              }
          }
    }
    if (x_->requires_grad) {
      Tensor& gx = x_->ensure_grad();
      gemm(false, false, cin, static_cast<int>(n), cout * 8, 1.0, w_->value.data.data(), cout * 8,
           g_col_scratch.data(), static_cast<int>(n), 1.0, gx.data.data(), static_cast<int>(n));
    }
    if (w_->requires_grad) {
      Tensor& gw = w_->ensure_grad();
      gemm(false, true, cin, cout * 8, static_cast<int>(n), 1.0, x_->value.data.data(),
           static_cast<int>(n), g_col_scratch.data(), static_cast<int>(n), 1.0, gw.data.data(),
           cout * 8);
    }
  });
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& xv = x->value;
  if (xv.ndim() != 4) throw ShapeError("instance_norm: input must be (C,D,H,W)");
  const int c = xv.dim(0);
  const int64_t m = static_cast<int64_t>(xv.dim(1)) * xv.dim(2) * xv.dim(3);
  if (gamma->value.numel() != c || beta->value.numel() != c)
    throw ShapeError("instance_norm: gamma/beta size mismatch");
  Tensor out(xv.shape);
  std::vector<double> mu(static_cast<size_t>(c)), inv_sigma(static_cast<size_t>(c));
  for (int ci = 0; ci < c; ++ci) {
    const double* xc = xv.data.data() + ci * m;
    double s = 0.0;
    for (int64_t i = 0; i < m; ++i) s += xc[i];
    const double mean_c = s / static_cast<double>(m);
    double v = 0.0;
    for (int64_t i = 0; i < m; ++i) {
      const double dvi = xc[i] - mean_c;
      v += dvi * dvi;
    }
    const double inv = 1.0 / std::sqrt(v / static_cast<double>(m) + eps);
    mu[static_cast<size_t>(ci)] = mean_c;
    inv_sigma[static_cast<size_t>(ci)] = inv;
    const double ga = gamma->value[ci], be = beta->value[ci];
    double* oc = out.data.data() + ci * m;
    for (int64_t i = 0; i < m; ++i) oc[i] = ga * (xc[i] - mean_c) * inv + be;
  }
  return new_op(std::move(out), {x, gamma, beta}, [c, m, mu, inv_sigma](Node* self) {
    Node* x_ = self->inputs[0].get();
    Node* gamma_ = self->inputs[1].get();
    Node* beta_ = self->inputs[2].get();
    const Tensor& g = self->grad;
    for (int ci = 0; ci < c; ++ci) {
      const double* xc = x_->value.data.data() + ci * m;
      const double* gc = g.data.data() + ci * m;
      const double mean_c = mu[static_cast<size_t>(ci)];
      const double inv = inv_sigma[static_cast<size_t>(ci)];
      const double ga = gamma_->value[ci];
      double sum_g = 0.0, sum_gx = 0.0;
      for (int64_t i = 0; i < m; ++i) {
        const double xh = (xc[i] - mean_c) * inv;
        sum_g += gc[i];
        sum_gx += gc[i] * xh;
      }
      if (gamma_->requires_grad) gamma_->ensure_grad()[ci] += sum_gx;
      if (beta_->requires_grad) beta_->ensure_grad()[ci] += sum_g;
      if (x_->requires_grad) {
        Tensor& gx = x_->ensure_grad();
        double* gxc = gx.data.data() + ci * m;
        const double mg = sum_g / static_cast<double>(m);
        const double mgx = sum_gx / static_cast<double>(m);
        for (int64_t i = 0; i < m; ++i) {
          const double xh = (xc[i] - mean_c) * inv;
          gxc[i] += ga * inv * (gc[i] - mg - xh * mgx);
        }
      }
    }
  });
}

Var global_mean_pool(const Var& x) {
  const Tensor& xv = x->value;
  if (xv.ndim() != 4) throw ShapeError("global_mean_pool: input must be (C,D,H,W)");
  const int c = xv.dim(0);
  const int64_t m = static_cast<int64_t>(xv.dim(1)) * xv.dim(2) * xv.dim(3);
  Tensor out({c});
  for (int ci = 0; ci < c; ++ci) {
    const double* xc = xv.data.data() + ci * m;
    double s = 0.0;
    for (int64_t i = 0; i < m; ++i) s += xc[i];
    out[ci] = s / static_cast<double>(m);
  }
  return new_op(std::move(out), {x}, [c, m](Node* self) {
    Node* in = self->inputs[0].get();
    Tensor& gi = in->ensure_grad();
    for (int ci = 0; ci < c; ++ci) {
      const double g = self->grad[ci] / static_cast<double>(m);
      double* gc = gi.data.data() + ci * m;
      for (int64_t i = 0; i < m; ++i) gc[i] += g;
    }
  });
}

Var softmax_channels(const Var& x) {
  const Tensor& xv = x->value;
  if (xv.ndim() < 1) throw ShapeError("softmax_channels: empty input");
  const int c = xv.dim(0);
  const int64_t m = xv.numel() / c;
  Tensor out(xv.shape);
  for (int64_t i = 0; i < m; ++i) {
    double mx = xv[i];
    for (int ci = 1; ci < c; ++ci) mx = std::max(mx, xv[ci * m + i]);
    double z = 0.0;
    for (int ci = 0; ci < c; ++ci) {
      const double e = std::exp(xv[ci * m + i] - mx);
      out[ci * m + i] = e;
      z += e;
    }
    const double inv = 1.0 / z;
    for (int ci = 0; ci < c; ++ci) out[ci * m + i] *= inv;
  }
  return new_op(std::move(out), {x}, [c, m](Node* self) {
    Node* in = self->inputs[0].get();
    Tensor& gi = in->ensure_grad();
    const Tensor& p = self->value;
    const Tensor& g = self->grad;
    for (int64_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (int ci = 0; ci < c; ++ci) dot += g[ci * m + i] * p[ci * m + i];
      for (int ci = 0; ci < c; ++ci) gi[ci * m + i] += p[ci * m + i] * (g[ci * m + i] - dot);
    }
  });
}

Var cross_entropy_with_labels(const Var& logits, const IntGrid& labels) {
  const Tensor& zv = logits->value;
  if (zv.ndim() != 4) throw ShapeError("cross_entropy: logits must be (C,D,H,W)");
  const int c = zv.dim(0);
  const int64_t m = zv.numel() / c;
  if (labels.numel() != m) throw ShapeError("cross_entropy: label grid size mismatch");
  for (int64_t i = 0; i < m; ++i)
    if (labels.v[static_cast<size_t>(i)] < 0 || labels.v[static_cast<size_t>(i)] >= c)
      throw LabelError("label " + std::to_string(labels.v[static_cast<size_t>(i)]) +
                       " out of range [0," + std::to_string(c - 1) + "]");
  double total = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    double mx = zv[i];
    for (int ci = 1; ci < c; ++ci) mx = std::max(mx, zv[ci * m + i]);
    double z = 0.0;
    for (int ci = 0; ci < c; ++ci) z += std::exp(zv[ci * m + i] - mx);
    total += mx + std::log(z) - zv[static_cast<int64_t>(labels.v[static_cast<size_t>(i)]) * m + i];
  }
  const double inv_m = 1.0 / static_cast<double>(m);
  return new_op(Tensor::scalar(total * inv_m), {logits}, [c, m, labels, inv_m](Node* self) {
    Node* in = self->inputs[0].get();
    Tensor& gi = in->ensure_grad();
    const Tensor& zv2 = in->value;
    const double g = self->grad[0] * inv_m;
    for (int64_t i = 0; i < m; ++i) {
      double mx = zv2[i];
      for (int ci = 1; ci < c; ++ci) mx = std::max(mx, zv2[ci * m + i]);
      double z = 0.0;
      for (int ci = 0; ci < c; ++ci) z += std::exp(zv2[ci * m + i] - mx);
      const double inv_z = 1.0 / z;
      const int y = labels.v[static_cast<size_t>(i)];
      for (int ci = 0; ci < c; ++ci) {
        const double p = std::exp(zv2[ci * m + i] - mx) * inv_z;
        gi[ci * m + i] += g * (p - (ci == y ? 1.0 : 0.0));
      }
    }
  });
}

Var nll_with_labels(const Var& probs, const IntGrid& labels) {
  const Tensor& pv = probs->value;
  if (pv.ndim() != 4) throw ShapeError("nll_with_labels: probs must be (C,D,H,W)");
  const int c = pv.dim(0);
  const int64_t m = pv.numel() / c;
  if (labels.numel() != m) throw ShapeError("nll_with_labels: label grid size mismatch");
  double total = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    const int y = labels.v[static_cast<size_t>(i)];
    if (y < 0 || y >= c)
      throw LabelError("label " + std::to_string(y) + " out of range [0," + std::to_string(c - 1) +
                       "]");
    total -= std::log(pv[static_cast<int64_t>(y) * m + i]);
  }
  const double inv_m = 1.0 / static_cast<double>(m);
  return new_op(Tensor::scalar(total * inv_m), {probs}, [m, labels, inv_m](Node* self) {
    Node* in = self->inputs[0].get();
    Tensor& gi = in->ensure_grad();
    const double g = self->grad[0] * inv_m;
    for (int64_t i = 0; i < m; ++i) {
      const int64_t at = static_cast<int64_t>(labels.v[static_cast<size_t>(i)]) * m + i;
      gi[at] -= g / in->value[at];
    }
  });
}

Var soft_dice_loss(const Var& probs, const IntGrid& labels, double eps) {
  const Tensor& pv = probs->value;
  if (pv.ndim() != 4) throw ShapeError("soft_dice_loss: probs must be (C,D,H,W)");
  const int c = pv.dim(0);
  const int64_t m = pv.numel() / c;
  if (labels.numel() != m) throw ShapeError("soft_dice_loss: label grid size mismatch");
  std::vector<double> inter(static_cast<size_t>(c), 0.0), psum(static_cast<size_t>(c), 0.0),
      gcount(static_cast<size_t>(c), 0.0);
  for (int64_t i = 0; i < m; ++i) {
    const int y = labels.v[static_cast<size_t>(i)];
    if (y < 0 || y >= c)
      throw LabelError("label " + std::to_string(y) + " out of range [0," + std::to_string(c - 1) + "]");
    gcount[static_cast<size_t>(y)] += 1.0;
    inter[static_cast<size_t>(y)] += pv[static_cast<int64_t>(y) * m + i];
  }
  for (int ci = 0; ci < c; ++ci) {
    const double* pc = pv.data.data() + static_cast<int64_t>(ci) * m;
    double s = 0.0;
    for (int64_t i = 0; i < m; ++i) s += pc[i];
    psum[static_cast<size_t>(ci)] = s;
  }
  double dice_sum = 0.0;
  std::vector<double> den(static_cast<size_t>(c)), num(static_cast<size_t>(c));
  for (int ci = 0; ci < c; ++ci) {
    num[static_cast<size_t>(ci)] = 2.0 * inter[static_cast<size_t>(ci)] + eps;
    den[static_cast<size_t>(ci)] = psum[static_cast<size_t>(ci)] + gcount[static_cast<size_t>(ci)] + eps;
    dice_sum += num[static_cast<size_t>(ci)] / den[static_cast<size_t>(ci)];
  }
  const double loss = 1.0 - dice_sum / static_cast<double>(c);
  return new_op(Tensor::scalar(loss), {probs}, [c, m, labels, num, den](Node* self) {
    Node* in = self->inputs[0].get();
    Tensor& gi = in->ensure_grad();
    const double g = self->grad[0];
    const double inv_c = 1.0 / static_cast<double>(c);
    for (int ci = 0; ci < c; ++ci) {
      const double d = den[static_cast<size_t>(ci)];
      const double nu = num[static_cast<size_t>(ci)];
      const double base = -g * inv_c * (-nu / (d * d));        // d(loss)/d(psum term)
      const double with_hit = -g * inv_c * (2.0 * d - nu) / (d * d);
      double* gc = gi.data.data() + static_cast<int64_t>(ci) * m;
      for (int64_t i = 0; i < m; ++i)
        gc[i] += (labels.v[static_cast<size_t>(i)] == ci) ? with_hit : base;
    }
  });
}

Var gather_voxels(const Var& x, const std::vector<int64_t>& spatial_indices) {
  const Tensor& xv = x->value;
  if (xv.ndim() != 4) throw ShapeError("gather_voxels: input must be (C,D,H,W)");
  const int c = xv.dim(0);
  const int64_t m = xv.numel() / c;
  const int n = static_cast<int>(spatial_indices.size());
  for (int64_t idx : spatial_indices)
    if (idx < 0 || idx >= m) throw ShapeError("gather_voxels: index out of range");
  Tensor out({n, c});
  for (int j = 0; j < n; ++j)
    for (int ci = 0; ci < c; ++ci)
      out[static_cast<int64_t>(j) * c + ci] = xv[static_cast<int64_t>(ci) * m + spatial_indices[static_cast<size_t>(j)]];
  return new_op(std::move(out), {x}, [c, m, spatial_indices, n](Node* self) {
    Node* in = self->inputs[0].get();
    Tensor& gi = in->ensure_grad();
    for (int j = 0; j < n; ++j)
      for (int ci = 0; ci < c; ++ci)
        gi[static_cast<int64_t>(ci) * m + spatial_indices[static_cast<size_t>(j)]] +=
            self->grad[static_cast<int64_t>(j) * c + ci];
  });
}

Var gather_logsumexp(const Var& s, const std::vector<RowSubset>& subsets) {
  const Tensor& sv = s->value;
  if (sv.ndim() != 2) throw ShapeError("gather_logsumexp: expects square similarity matrix");
  const int n = sv.dim(0);
  const int cols_n = sv.dim(1);
  const int k = static_cast<int>(subsets.size());
  Tensor out({k});
  for (int j = 0; j < k; ++j) {
    const auto& ss = subsets[static_cast<size_t>(j)];
    if (ss.row < 0 || ss.row >= n) throw ShapeError("gather_logsumexp: row out of range");
    if (ss.cols.empty()) throw ShapeError("gather_logsumexp: empty column set");
    const double* row = sv.data.data() + static_cast<int64_t>(ss.row) * cols_n;
    double mx = row[ss.cols[0]];
    for (int cidx : ss.cols) {
      if (cidx < 0 || cidx >= cols_n) throw ShapeError("gather_logsumexp: col out of range");
      mx = std::max(mx, row[cidx]);
    }
    double z = 0.0;
    for (int cidx : ss.cols) z += std::exp(row[cidx] - mx);
    out[j] = mx + std::log(z);
  }
  return new_op(std::move(out), {s}, [subsets, cols_n, k](Node* self) {
    Node* in = self->inputs[0].get();
    Tensor& gi = in->ensure_grad();
    for (int j = 0; j < k; ++j) {
      const auto& ss = subsets[static_cast<size_t>(j)];
      const double* row = in->value.data.data() + static_cast<int64_t>(ss.row) * cols_n;
      const double lse = self->value[j];
      const double g = self->grad[j];
      double* grow = gi.data.data() + static_cast<int64_t>(ss.row) * cols_n;
      for (int cidx : ss.cols) grow[cidx] += g * std::exp(row[cidx] - lse);
    }
  });
}

}  // namespace ops

double central_difference(const std::function<double()>& f, Var leaf, int64_t i, double h) {
  const double orig = leaf->value[i];
  leaf->value[i] = orig + h;
  const double fp = f();
  leaf->value[i] = orig - h;
  const double fm = f();
  leaf->value[i] = orig;
  return (fp - fm) / (2.0 * h);
}

}  // namespace tak
