#include "tak/inference.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tak/autodiff.hpp"
#include "tak/errors.hpp"

namespace tak {

namespace {

std::vector<int> axis_corners(int dim, int window, int stride) {
  std::vector<int> corners;
  for (int c = 0;; c += stride) {
    if (c + window >= dim) {
      corners.push_back(dim - window);
      break;
    }
    corners.push_back(c);
  }
  return corners;
}

Tensor crop(const Tensor& vol, const std::array<int, 3>& corner, const std::array<int, 3>& size) {
  Tensor out({size[0], size[1], size[2]});
  const int h = vol.dim(1), w = vol.dim(2);
  int64_t dst = 0;
  for (int z = 0; z < size[0]; ++z)
    for (int y = 0; y < size[1]; ++y) {
      const int64_t src = (static_cast<int64_t>(corner[0] + z) * h + (corner[1] + y)) * w + corner[2];
      std::copy_n(vol.data.begin() + src, size[2], out.data.begin() + dst);
      dst += size[2];
    }
  return out;
}

}  // namespace

WindowPlan plan_windows(const std::array<int, 3>& dims, const std::array<int, 3>& window,
                        const std::array<int, 3>& stride) {
  for (int a = 0; a < 3; ++a) {
    if (window[a] < 1) throw ConfigError("window size must be positive on every axis");
    if (stride[a] < 1) throw ConfigError("stride must be positive on every axis");
    if (dims[a] < window[a])
      throw ShapeError("volume extent " + std::to_string(dims[a]) + " on axis " +
                       std::to_string(a) + " is smaller than the window " +
                       std::to_string(window[a]));
  }
  WindowPlan plan;
  plan.window = window;
  plan.stride = stride;
  const std::vector<int> zs = axis_corners(dims[0], window[0], stride[0]);
  const std::vector<int> ys = axis_corners(dims[1], window[1], stride[1]);
  const std::vector<int> xs = axis_corners(dims[2], window[2], stride[2]);
  for (int z : zs)
    for (int y : ys)
      for (int x : xs) plan.corners.push_back({z, y, x});
  return plan;
}

Tensor sliding_window_infer(const Tensor& volume, const WindowModel& model,
                            const WindowPlan& plan) {
  if (volume.ndim() != 3)
    throw ShapeError("sliding-window inference expects a (D, H, W) volume, got " +
                     volume.shape_str());
  const std::array<int, 3> dims{volume.dim(0), volume.dim(1), volume.dim(2)};
  const std::array<int, 3>& win = plan.window;
  for (int a = 0; a < 3; ++a)
    if (dims[a] < win[a])
      throw ShapeError("volume " + volume.shape_str() + " is smaller than the window on axis " +
                       std::to_string(a));
  if (plan.corners.empty()) throw ConfigError("window plan holds no corners");
  for (const auto& c : plan.corners)
    for (int a = 0; a < 3; ++a)
      if (c[a] < 0 || c[a] + win[a] > dims[a])
        throw ConfigError("window corner leaves the volume on axis " + std::to_string(a));

  Tensor sum;  // (C, D, H, W), allocated once the channel count is known
  std::vector<int> cover(static_cast<size_t>(volume.numel()), 0);
  int channels = 0;
  const int64_t m = volume.numel();
  for (const auto& corner : plan.corners) {
    const Tensor patch = crop(volume, corner, win);
    const Tensor logits = model(patch);
    if (logits.ndim() != 4 || logits.dim(1) != win[0] || logits.dim(2) != win[1] ||
        logits.dim(3) != win[2])
      throw ShapeError("window model returned " + logits.shape_str() + " for a " +
                       patch.shape_str() + " patch");
    if (channels == 0) {
      channels = logits.dim(0);
      if (channels < 1) throw ShapeError("window model returned no channels");
      sum = Tensor({channels, dims[0], dims[1], dims[2]});
    } else if (logits.dim(0) != channels) {
      throw ShapeError("window model changed its channel count between windows");
    }
    const int64_t wm = static_cast<int64_t>(win[0]) * win[1] * win[2];
    int64_t p = 0;
    for (int z = 0; z < win[0]; ++z)
      for (int y = 0; y < win[1]; ++y)
        for (int x = 0; x < win[2]; ++x, ++p) {
          const int64_t at =
              (static_cast<int64_t>(corner[0] + z) * dims[1] + (corner[1] + y)) * dims[2] +
              (corner[2] + x);
          for (int k = 0; k < channels; ++k) sum[k * m + at] += logits[k * wm + p];
          ++cover[static_cast<size_t>(at)];
        }
  }
  for (int64_t i = 0; i < m; ++i)
    if (cover[static_cast<size_t>(i)] == 0)
      throw ConfigError("window plan leaves voxel " + std::to_string(i) + " uncovered");

  // Mean logits, then a numerically stable per-voxel softmax.
  Tensor out({channels, dims[0], dims[1], dims[2]});
  for (int64_t i = 0; i < m; ++i) {
    const double n = cover[static_cast<size_t>(i)];
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < channels; ++k) mx = std::max(mx, sum[k * m + i] / n);
    double denom = 0.0;
    for (int k = 0; k < channels; ++k) {
      const double e = std::exp(sum[k * m + i] / n - mx);
      out[k * m + i] = e;
      denom += e;
    }
    for (int k = 0; k < channels; ++k) out[k * m + i] /= denom;
  }
  return out;
}

Tensor sliding_window_infer(const Tensor& volume, const SegmentationModel& model,
                            const PriorEmbeddingSet& priors, const WindowPlan& plan) {
  const int cin = model.config().backbone.in_channels;
  if (cin != 1) throw ConfigError("volume inference supports single-channel networks");
  WindowModel wm = [&](const Tensor& patch) {
    NoGradGuard ng;
    Tensor x({1, patch.dim(0), patch.dim(1), patch.dim(2)}, patch.data);
    return model.forward(make_constant(std::move(x)), priors).logits->value;
  };
  return sliding_window_infer(volume, wm, plan);
}

}  // namespace tak
