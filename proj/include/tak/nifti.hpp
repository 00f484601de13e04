#pragma once

#include <string>

#include "tak/metrics.hpp"
#include "tak/tensor.hpp"

namespace tak {

// NIfTI-1 volume IO. Data is stored x-fastest, matching the (D, H, W) = (z,
// y, x) layout of Tensor and IntGrid; pixdim carries the (x, y, z) spacing.
// Paths ending in .gz are zlib-compressed. Malformed files raise FormatError.

struct Volume {
  Tensor data;  // (D, H, W)
  Spacing spacing{1.0, 1.0, 1.0};
};

struct LabelVolume {
  IntGrid labels;
  Spacing spacing{1.0, 1.0, 1.0};
};

// Intensities as float64 (bit-exact round trip).
void save_volume(const std::string& path, const Tensor& vol, const Spacing& spacing);
Volume load_volume(const std::string& path);

// Labels as int32. Loading accepts any integer-typed NIfTI file.
void save_labels(const std::string& path, const IntGrid& labels, const Spacing& spacing);
LabelVolume load_labels(const std::string& path);

}  // namespace tak
