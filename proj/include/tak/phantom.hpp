#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tak/metrics.hpp"
#include "tak/rng.hpp"
#include "tak/tensor.hpp"

namespace tak {

// Procedural multi-organ phantoms. Axis convention: dims (D, H, W) = (z, y,
// x) with x = right, y = anterior, z = superior. A relation "subject
// <direction> object" requires the subject's measured centroid coordinate on
// that direction's axis to be strictly smaller for right/anterior/superior
// and strictly larger for left/posterior/inferior.

struct ClassSpec {
  int class_id = 0;
  std::string class_name;
  std::string primitive;  // ellipsoid | tube | l_solid
  double size_min = 0.0, size_max = 0.0;  // occupied fraction of the grid
  double intensity_mean = 0.0, intensity_sigma = 0.0;
};

struct RelationConstraint {
  int subject = 0;
  std::string direction;  // right | left | anterior | posterior | superior | inferior
  int object = 0;
};

struct PhantomSpec {
  std::array<int, 3> grid{64, 64, 64};  // (D, H, W)
  Spacing spacing{1.0, 1.0, 1.0};
  double background_mean = 0.1, background_sigma = 0.05;
  double noise_sigma = 0.0;  // added on top of every class's own sigma
  std::vector<ClassSpec> classes;
  std::vector<RelationConstraint> relations;
  uint64_t seed = 0;
  int max_retries = 100;
};

// (axis index into (z, y, x), required sign of subject - object). UnknownClass
// is not involved here; a bad word raises SchemaError.
std::pair<int, int> direction_axis_sign(const std::string& direction);

PhantomSpec parse_phantom_spec(const std::string& json_text);
PhantomSpec load_phantom_spec(const std::string& path);
std::string phantom_spec_to_json(const PhantomSpec& spec);

struct Phantom {
  Tensor intensity;  // (D, H, W)
  IntGrid labels;    // values 0..K
  std::vector<std::array<double, 3>> centroids;  // class k at index k-1, (z, y, x)
  std::vector<int64_t> class_voxels;             // class k at index k-1
};

// Deterministic in (spec, case_seed). Placement honors size ranges (measured
// occupied fraction within [size_min, size_max]), non-overlap, in-grid fit,
// and every relation constraint; retries are bounded by spec.max_retries and
// exhaustion raises PlacementFailed.
Phantom generate_phantom(const PhantomSpec& spec, uint64_t case_seed);

struct PatchPair {
  Tensor image;   // (d, h, w)
  IntGrid labels;
  std::array<int, 3> corner{0, 0, 0};
};

// Uniformly random axis-aligned crop; size must fit inside the volume.
PatchPair random_patch(const Tensor& volume, const IntGrid& labels,
                       const std::array<int, 3>& size, Rng& rng);
PatchPair random_patch(const Tensor& volume, const IntGrid& labels,
                       const std::array<int, 3>& size, uint64_t seed);

struct DatasetSplit {
  std::vector<std::string> labeled, unlabeled, val, test;
  double labeled_fraction = 0.0;
};

// Case ids case_000... partitioned into train (labeled + unlabeled by the
// given fraction of the training set, at least one labeled), val, test.
DatasetSplit make_split(int n_train, int n_val, int n_test, double labeled_fraction,
                        uint64_t seed);

struct CaseEntry {
  std::string id;
  uint64_t seed = 0;
  std::string split;  // labeled | unlabeled | val | test
};

struct CorpusManifest {
  PhantomSpec spec;
  std::vector<CaseEntry> cases;
};

std::string manifest_to_json(const CorpusManifest& m);
CorpusManifest parse_manifest(const std::string& json_text);
CorpusManifest load_manifest(const std::string& path);

std::string case_image_path(const std::string& dir, const std::string& id);
std::string case_label_path(const std::string& dir, const std::string& id);

// Generates every case volume (<id>_img.nii.gz, <id>_lbl.nii.gz) plus
// manifest.json under out_dir. Case seeds derive from spec.seed and the case
// index, so a corpus regenerates bit-identically from its spec.
CorpusManifest generate_corpus(const PhantomSpec& spec, int n_train, int n_val, int n_test,
                               double labeled_fraction, const std::string& out_dir);

}  // namespace tak
