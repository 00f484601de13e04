#pragma once

#include <map>
#include <string>
#include <vector>

#include "tak/nn.hpp"

namespace tak {

struct BackboneConfig {
  int stages = 4;
  int base_width = 8;
  int in_channels = 1;

  // Channel width of encoder stage i (1-based; stage 1 is input resolution).
  int stage_width(int i) const { return base_width << (i - 1); }
  int top_width() const { return stage_width(stages); }
};

// Multi-scale encoder features E^i, the decoder feature map the dynamic heads
// consume, and the pooled global feature F.
struct MultiScaleFeatures {
  std::map<int, Var> stages;  // i -> (C^i, D^i, H^i, W^i); dims halve per stage
  Var decoder_map;            // (C_dec, D, H, W) at input resolution
  Var global_F;               // (C_top), spatial mean of the top stage
};

// Miniature V-Net-style encoder-decoder: stride-2 convolutions down,
// transposed convolutions up, skip concatenation, instance normalization.
class Backbone {
 public:
  Backbone(const BackboneConfig& cfg, ParamRegistry& reg, Rng& rng,
           const std::string& prefix = "backbone");

  // patch: (in_channels, D, H, W); D, H, W divisible by 2^(stages-1).
  MultiScaleFeatures forward(const Var& patch) const;

  const BackboneConfig& config() const { return cfg_; }
  int decoder_channels() const { return cfg_.base_width; }

 private:
  struct Block {
    Conv3dLayer conv;
    InstanceNormLayer norm;
  };

  BackboneConfig cfg_;
  std::vector<Block> enc_;                  // one refinement block per stage
  std::vector<Block> down_;                 // stride-2 transitions, stages-1 of them
  std::vector<ConvTranspose3dLayer> up_;    // decoder upsampling, stages-1
  std::vector<Block> dec_;                  // post-skip refinement, stages-1
};

}  // namespace tak
