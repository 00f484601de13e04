#include "tak/backbone.hpp"

#include "tak/errors.hpp"

namespace tak {

namespace O = ops;

Backbone::Backbone(const BackboneConfig& cfg, ParamRegistry& reg, Rng& rng,
                   const std::string& prefix)
    : cfg_(cfg) {
  if (cfg.stages < 2) throw ConfigError("backbone needs at least 2 stages");
  for (int i = 1; i <= cfg.stages; ++i) {
    const int w = cfg.stage_width(i);
    const int cin = (i == 1) ? cfg.in_channels : w;
    const std::string name = prefix + "/enc" + std::to_string(i);
    enc_.push_back({make_conv3d(reg, name + "/conv", cin, w, 3, 1, 1, rng),
                    make_instance_norm(reg, name + "/norm", w)});
    if (i < cfg.stages) {
      const std::string dname = prefix + "/down" + std::to_string(i);
      down_.push_back({make_conv3d(reg, dname + "/conv", w, cfg.stage_width(i + 1), 3, 2, 1, rng),
                       make_instance_norm(reg, dname + "/norm", cfg.stage_width(i + 1))});
    }
  }
  for (int i = cfg.stages - 1; i >= 1; --i) {
    const int w = cfg.stage_width(i);
    const std::string uname = prefix + "/up" + std::to_string(i);
    up_.push_back(make_conv_transpose3d(reg, uname, cfg.stage_width(i + 1), w, rng));
    const std::string dname = prefix + "/dec" + std::to_string(i);
    dec_.push_back({make_conv3d(reg, dname + "/conv", 2 * w, w, 3, 1, 1, rng),
                    make_instance_norm(reg, dname + "/norm", w)});
  }
}

MultiScaleFeatures Backbone::forward(const Var& patch) const {
  const Tensor& pv = patch->value;
  if (pv.ndim() != 4 || pv.dim(0) != cfg_.in_channels)
    throw ShapeError("backbone: patch must be (" + std::to_string(cfg_.in_channels) +
                     ",D,H,W), got " + pv.shape_str());
  const int divisor = 1 << (cfg_.stages - 1);
  for (int d = 1; d <= 3; ++d)
    if (pv.dim(d) % divisor != 0)
      throw ShapeError("backbone: patch dims must be divisible by " + std::to_string(divisor) +
                       ", got " + pv.shape_str());

  MultiScaleFeatures out;
  Var x = patch;
  std::vector<Var> skips;
  for (int i = 1; i <= cfg_.stages; ++i) {
    const Block& blk = enc_[static_cast<size_t>(i - 1)];
    x = O::relu(blk.norm(blk.conv(x)));
    out.stages[i] = x;
    skips.push_back(x);
    if (i < cfg_.stages) {
      const Block& dn = down_[static_cast<size_t>(i - 1)];
      x = O::relu(dn.norm(dn.conv(x)));
    }
  }
  out.global_F = O::global_mean_pool(out.stages.at(cfg_.stages));

  Var d = out.stages.at(cfg_.stages);
  for (int i = cfg_.stages - 1; i >= 1; --i) {
    const size_t j = static_cast<size_t>(cfg_.stages - 1 - i);
    d = up_[j](d);
    d = O::concat_channels({d, skips[static_cast<size_t>(i - 1)]});
    const Block& blk = dec_[j];
    d = O::relu(blk.norm(blk.conv(d)));
  }
  out.decoder_map = d;
  return out;
}

}  // namespace tak
