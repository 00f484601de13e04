#pragma once

#include <array>
#include <functional>
#include <vector>

#include "tak/tensor.hpp"
#include "tak/trainer.hpp"

namespace tak {

// Sliding-window tiling of a volume. Corners advance by the stride on every
// axis; the final corner per axis is clamped so the last window ends exactly
// at the volume boundary. The union of windows covers every voxel.
struct WindowPlan {
  std::array<int, 3> window{96, 96, 96};
  std::array<int, 3> stride{32, 32, 16};
  std::vector<std::array<int, 3>> corners;  // (z, y, x), row-major enumeration
};

// Throws ShapeError when the volume is smaller than the window on any axis
// (the caller pads), ConfigError on non-positive window or stride.
WindowPlan plan_windows(const std::array<int, 3>& dims, const std::array<int, 3>& window,
                        const std::array<int, 3>& stride);

// Maps a (D, H, W) patch to a logit grid (C, D, H, W).
using WindowModel = std::function<Tensor(const Tensor&)>;

// Full-volume prediction: mean of logits over all covering windows, then a
// per-voxel softmax. Result (C, D, H, W) with channel sums 1 ± 1e-6.
// Deterministic, and invariant to the enumeration order of the windows.
Tensor sliding_window_infer(const Tensor& volume, const WindowModel& model,
                            const WindowPlan& plan);

// Convenience overload running a segmentation network (no gradient graph).
Tensor sliding_window_infer(const Tensor& volume, const SegmentationModel& model,
                            const PriorEmbeddingSet& priors, const WindowPlan& plan);

// Hard labels from a probability grid: per-voxel argmax, ties toward the
// lower class (same rule the trainer uses for pseudo-labels).
inline IntGrid hard_labels(const Tensor& probs) { return pseudo_labels(probs); }

}  // namespace tak
