#pragma once

#include <string>
#include <vector>

#include "tak/nn.hpp"

namespace tak {

// Widths of the per-class segmentation head: pointwise-convolution layers
// widths[0] -> widths[1] -> ... -> widths.back(), ReLU between layers, none
// after the last. widths[0] must equal the decoder channel count and
// widths.back() is 1 (one logit channel per class).
struct HeadShape {
  std::vector<int> widths{8, 8, 8, 1};

  int layers() const { return static_cast<int>(widths.size()) - 1; }
  int theta_len() const {
    int n = 0;
    for (size_t l = 0; l + 1 < widths.size(); ++l) n += widths[l] * widths[l + 1] + widths[l + 1];
    return n;
  }
};

// Text-based controller: an MLP from concat(T_p, T_s, F) to the flat head
// parameter vector θ_k. Background (class 0) carries no text prior; a
// learnable placeholder embedding stands in for (T_p, T_s) through the same
// controller.
class Controller {
 public:
  Controller(int d_text, int c_enc_top, const HeadShape& shape, int hidden, ParamRegistry& reg,
             Rng& rng, const std::string& prefix = "controller");

  // t_p, t_s: (d_text); f: (c_enc_top) -> θ of length shape.theta_len().
  Var generate_params(const Var& t_p, const Var& t_s, const Var& f) const;
  Var generate_background_params(const Var& f) const;

  const HeadShape& head_shape() const { return shape_; }
  int d_text() const { return d_text_; }

 private:
  HeadShape shape_;
  int d_text_ = 0;
  int c_top_ = 0;
  LinearLayer fc1_, fc2_;
  Var bg_embed_;  // (2*d_text), learnable
};

// Apply per-class head parameters to the decoder feature map. thetas[k] is
// the flat θ for class k (index 0 = background); result is a logit grid
// (K+1, D, H, W). A null theta raises MissingHead(k).
Var apply_heads(const Var& decoder_map, const std::vector<Var>& thetas, const HeadShape& shape);

}  // namespace tak
