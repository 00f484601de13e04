#pragma once

#include <array>
#include <string>
#include <vector>

#include "tak/nn.hpp"
#include "tak/tensor.hpp"

namespace tak {

// Voxel spacing in (z, y, x) order, matching IntGrid dims.
using Spacing = std::array<double, 3>;

// Dice coefficient 2|A∩B| / (|A|+|B|) over 0/1 masks; both empty -> 1.0.
double dice(const IntGrid& pred, const IntGrid& gt);

// Boundary voxels under 6-connectivity: mask voxels with at least one face
// neighbor outside the mask (the volume edge counts as outside).
std::vector<std::array<int, 3>> boundary_voxels(const IntGrid& mask);

// Average surface distance: symmetric mean of nearest boundary-center
// distances, anisotropic spacing. Either mask empty -> UndefinedSurface.
double asd(const IntGrid& pred, const IntGrid& gt, const Spacing& spacing);

// Ratio of the volume of the convex hull of all occupied-voxel corner points
// to the occupied voxel count (unit voxels). >= 1; empty mask -> EmptyMask.
double convex_hull_volume_ratio(const IntGrid& mask);

struct ClassReport {
  int class_id = 0;
  std::string class_name;
  double dice = 0.0;
  double asd = 0.0;              // NaN sentinel when a surface is undefined
  double voxel_proportion = 0.0;  // share of foreground ground-truth voxels
  std::string size_group;         // "large" iff proportion >= 0.05 else "small"
  double chvr = 0.0;              // of the ground-truth mask; NaN when empty
};

// Per-class metrics for one case. class_names[k-1] names class k; labels run
// 0..K with 0 = background. Proportions are over foreground gt voxels only.
std::vector<ClassReport> class_report(const IntGrid& pred, const IntGrid& gt,
                                      const Spacing& spacing,
                                      const std::vector<std::string>& class_names);

// Learnable parameter elements across the registry.
int64_t parameter_count(const ParamRegistry& reg);

struct ReportRow {
  std::string case_id;
  ClassReport metrics;
};

// CSV with columns case_id, class_id, class_name, dice, asd,
// voxel_proportion, size_group, chvr. Undefined values print as nan.
void write_report_csv(const std::string& path, const std::vector<ReportRow>& rows);

// Mean dice/asd for All, L. (large), and S. (small) groups plus per-class
// means; NaN asd entries are excluded from means. Serialized JSON text.
std::string summarize_report(const std::vector<ReportRow>& rows);

struct ScatterEntry {
  std::string class_name;
  double voxel_proportion = 0.0;
  double chvr = 0.0;
  double dice_delta = 0.0;
};

// CSV (class_name, voxel_proportion, chvr, dice_delta) for hull-ratio versus
// accuracy-drop scatter plots.
void write_scatter_csv(const std::string& path, const std::vector<ScatterEntry>& entries);

}  // namespace tak
