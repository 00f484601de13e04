#include "tak/dynamic_head.hpp"

#include "tak/autodiff.hpp"
#include "tak/errors.hpp"

namespace tak {

namespace O = ops;

Controller::Controller(int d_text, int c_enc_top, const HeadShape& shape, int hidden,
                       ParamRegistry& reg, Rng& rng, const std::string& prefix)
    : shape_(shape), d_text_(d_text), c_top_(c_enc_top) {
  if (d_text <= 0 || c_enc_top <= 0 || hidden <= 0)
    throw ConfigError("controller: d_text, c_enc_top, hidden must be positive");
  if (shape_.widths.size() < 2) throw ConfigError("controller: head needs at least one layer");
  for (int w : shape_.widths)
    if (w <= 0) throw ConfigError("controller: head widths must be positive");
  const int in_dim = 2 * d_text + c_enc_top;
  fc1_ = make_linear(reg, prefix + "/fc1", in_dim, hidden, rng);
  fc2_ = make_linear(reg, prefix + "/fc2", hidden, shape_.theta_len(), rng);
  Tensor bg({2 * d_text});
  for (auto& v : bg.data) v = rng.normal() * 0.02;
  bg_embed_ = reg.add(prefix + "/background_embed", bg);
}

Var Controller::generate_params(const Var& t_p, const Var& t_s, const Var& f) const {
  if (t_p->value.shape != std::vector<int>{d_text_} || t_s->value.shape != std::vector<int>{d_text_})
    throw ShapeError("controller: text embedding must be (" + std::to_string(d_text_) + "), got " +
                     t_p->value.shape_str() + " / " + t_s->value.shape_str());
  if (f->value.shape != std::vector<int>{c_top_})
    throw ShapeError("controller: global feature must be (" + std::to_string(c_top_) + "), got " +
                     f->value.shape_str());
  Var x = O::concat({t_p, t_s, f}, 0);
  Var h = O::relu(fc1_(x));
  return fc2_(h);
}

Var Controller::generate_background_params(const Var& f) const {
  if (f->value.shape != std::vector<int>{c_top_})
    throw ShapeError("controller: global feature must be (" + std::to_string(c_top_) + "), got " +
                     f->value.shape_str());
  Var x = O::concat({bg_embed_, f}, 0);
  Var h = O::relu(fc1_(x));
  return fc2_(h);
}

Var apply_heads(const Var& decoder_map, const std::vector<Var>& thetas, const HeadShape& shape) {
  const auto& ds = decoder_map->value.shape;
  if (ds.size() != 4)
    throw ShapeError("apply_heads: decoder map must be (C, D, H, W), got " +
                     decoder_map->value.shape_str());
  if (ds[0] != shape.widths.front())
    throw ShapeError("apply_heads: decoder map has " + std::to_string(ds[0]) +
                     " channels, head expects " + std::to_string(shape.widths.front()));
  if (shape.widths.back() != 1)
    throw ShapeError("apply_heads: head must end in a single logit channel");
  if (thetas.empty()) throw ShapeError("apply_heads: no head parameters given");

  const int n = ds[1] * ds[2] * ds[3];
  Var x0 = O::reshape(decoder_map, {ds[0], n});

  std::vector<Var> per_class;
  per_class.reserve(thetas.size());
  for (size_t k = 0; k < thetas.size(); ++k) {
    if (!thetas[k]) throw MissingHead(static_cast<int>(k));
    const auto& ts = thetas[k]->value.shape;
    if (ts != std::vector<int>{shape.theta_len()})
      throw ShapeError("apply_heads: theta for class " + std::to_string(k) + " must be (" +
                       std::to_string(shape.theta_len()) + "), got " + thetas[k]->value.shape_str());
    Var x = x0;
    int off = 0;
    for (int l = 0; l + 1 < static_cast<int>(shape.widths.size()); ++l) {
      const int ci = shape.widths[l], co = shape.widths[l + 1];
      Var w = O::reshape(O::narrow(thetas[k], off, ci * co), {co, ci});
      off += ci * co;
      Var b = O::narrow(thetas[k], off, co);
      off += co;
      x = O::add_bias_rows(O::matmul(w, x), b);
      if (l + 2 < static_cast<int>(shape.widths.size())) x = O::relu(x);
    }
    per_class.push_back(x);  // (1, n)
  }
  Var logits = per_class.size() == 1 ? per_class[0] : O::concat(per_class, 0);
  return O::reshape(logits, {static_cast<int>(thetas.size()), ds[1], ds[2], ds[3]});
}

}  // namespace tak
