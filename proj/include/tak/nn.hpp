#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tak/autodiff.hpp"
#include "tak/rng.hpp"

namespace tak {

// Named trainable parameters. Registration order is canonical: optimizer
// state, EMA pairing, and checkpoint layout all follow it.
class ParamRegistry {
 public:
  Var add(const std::string& name, Tensor init);
  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
  Var find(const std::string& name) const;  // nullptr when absent
  int64_t parameter_count() const;
  void zero_grad() const;

 private:
  std::vector<std::pair<std::string, Var>> entries_;
};

// He-style init: N(0, sqrt(2/fan_in)) elementwise.
Tensor kaiming_normal(std::vector<int> shape, int fan_in, Rng& rng);

struct Conv3dLayer {
  Var w, b;
  int stride = 1, pad = 1;
  Var operator()(const Var& x) const { return ops::conv3d(x, w, b, stride, pad); }
};
Conv3dLayer make_conv3d(ParamRegistry& reg, const std::string& name, int cin, int cout, int k,
                        int stride, int pad, Rng& rng);

struct ConvTranspose3dLayer {
  Var w, b;
  Var operator()(const Var& x) const { return ops::conv_transpose3d_k2s2(x, w, b); }
};
ConvTranspose3dLayer make_conv_transpose3d(ParamRegistry& reg, const std::string& name, int cin,
                                           int cout, Rng& rng);

struct InstanceNormLayer {
  Var gamma, beta;
  Var operator()(const Var& x) const { return ops::instance_norm(x, gamma, beta); }
};
InstanceNormLayer make_instance_norm(ParamRegistry& reg, const std::string& name, int channels);

struct LinearLayer {
  Var w, b;
  Var operator()(const Var& x) const { return ops::linear(x, w, b); }
};
LinearLayer make_linear(ParamRegistry& reg, const std::string& name, int din, int dout, Rng& rng);

// Checkpoint archive: magic "TAKC", version, a JSON metadata blob, then named
// float64 arrays in registry order. Stable names make archives portable
// across code versions.
void save_archive(const std::string& path, const std::string& meta_json,
                  const std::vector<std::pair<std::string, const Tensor*>>& arrays);
struct Archive {
  std::string meta_json;
  std::vector<std::pair<std::string, Tensor>> arrays;
  const Tensor* find(const std::string& name) const;
};
Archive load_archive(const std::string& path);

}  // namespace tak
