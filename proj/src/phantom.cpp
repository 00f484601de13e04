#include "tak/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <numeric>

#include "tak/nifti.hpp"

namespace tak {

using nlohmann::json;

std::pair<int, int> direction_axis_sign(const std::string& direction) {
  // Axes (z, y, x) carry the names (superior, anterior, right); a subject
  // lying toward the named direction has the strictly smaller coordinate on
  // that axis, the opposite word the strictly larger one.
  if (direction == "superior") return {0, -1};
  if (direction == "inferior") return {0, +1};
  if (direction == "anterior") return {1, -1};
  if (direction == "posterior") return {1, +1};
  if (direction == "right") return {2, -1};
  if (direction == "left") return {2, +1};
  throw SchemaError("/relations", "unknown direction '" + direction + "'");
}

namespace {

constexpr double kPi = 3.14159265358979323846;

constexpr const char* kDirections[] = {"right",     "left",     "anterior",
                                       "posterior", "superior", "inferior"};

void validate_spec(const PhantomSpec& s, const std::string& ptr) {
  for (int i = 0; i < 3; ++i) {
    if (s.grid[i] < 8 || s.grid[i] > 1024)
      throw SchemaError(ptr + "/grid/" + std::to_string(i), "grid extent must be in [8, 1024]");
    if (!(s.spacing[i] > 0.0))
      throw SchemaError(ptr + "/spacing/" + std::to_string(i), "spacing must be positive");
  }
  if (s.background_sigma < 0.0) throw SchemaError(ptr + "/background_sigma", "must be >= 0");
  if (s.noise_sigma < 0.0) throw SchemaError(ptr + "/noise_sigma", "must be >= 0");
  if (s.max_retries < 1) throw SchemaError(ptr + "/max_retries", "must be >= 1");
  if (s.classes.empty()) throw SchemaError(ptr + "/classes", "must be nonempty");

  std::vector<std::string> names;
  for (size_t i = 0; i < s.classes.size(); ++i) {
    const std::string cptr = ptr + "/classes/" + std::to_string(i);
    const ClassSpec& c = s.classes[i];
    if (c.class_id != static_cast<int>(i) + 1)
      throw SchemaError(cptr + "/class_id", "class ids must cover 1..K contiguously");
    if (c.class_name.empty()) throw SchemaError(cptr + "/class_name", "must be nonempty");
    if (std::find(names.begin(), names.end(), c.class_name) != names.end())
      throw SchemaError(cptr + "/class_name", "duplicate class name");
    names.push_back(c.class_name);
    if (c.primitive != "ellipsoid" && c.primitive != "tube" && c.primitive != "l_solid")
      throw SchemaError(cptr + "/primitive", "must be one of ellipsoid|tube|l_solid");
    if (!(c.size_min > 0.0) || c.size_max < c.size_min || c.size_max >= 1.0)
      throw SchemaError(cptr + "/size_min", "need 0 < size_min <= size_max < 1");
    if (c.intensity_sigma < 0.0) throw SchemaError(cptr + "/intensity_sigma", "must be >= 0");
  }

  const int K = static_cast<int>(s.classes.size());
  std::vector<std::vector<int>> adj(static_cast<size_t>(K) + 1);
  for (size_t i = 0; i < s.relations.size(); ++i) {
    const std::string rptr = ptr + "/relations/" + std::to_string(i);
    const RelationConstraint& r = s.relations[i];
    if (r.subject < 1 || r.subject > K) throw SchemaError(rptr + "/subject", "unknown class id");
    if (r.object < 1 || r.object > K) throw SchemaError(rptr + "/object", "unknown class id");
    if (std::find(std::begin(kDirections), std::end(kDirections), r.direction) ==
        std::end(kDirections))
      throw SchemaError(rptr + "/direction",
                        "must be one of right|left|anterior|posterior|superior|inferior");
    if (r.subject == r.object) throw SchemaError(rptr, "subject and object must differ");
    adj[static_cast<size_t>(r.subject)].push_back(r.object);
  }
  // The relation digraph (subject -> object) must be acyclic.
  std::vector<int> color(static_cast<size_t>(K) + 1, 0);
  std::function<void(int)> dfs = [&](int u) {
    color[static_cast<size_t>(u)] = 1;
    for (int v : adj[static_cast<size_t>(u)]) {
      if (color[static_cast<size_t>(v)] == 1)
        throw SchemaError(ptr + "/relations", "relation constraints form a cycle");
      if (color[static_cast<size_t>(v)] == 0) dfs(v);
    }
    color[static_cast<size_t>(u)] = 2;
  };
  for (int k = 1; k <= K; ++k)
    if (color[static_cast<size_t>(k)] == 0) dfs(k);
}

void reject_unknown_keys(const json& o, std::initializer_list<const char*> allowed,
                         const std::string& ptr) {
  for (auto it = o.begin(); it != o.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known) throw SchemaError(ptr + "/" + it.key(), "unknown key");
  }
}

double require_number(const json& o, const char* key, const std::string& ptr) {
  if (!o.contains(key) || !o[key].is_number())
    throw SchemaError(ptr + "/" + key, "missing or not a number");
  return o[key].get<double>();
}

int require_int(const json& o, const char* key, const std::string& ptr) {
  if (!o.contains(key) || !o[key].is_number_integer())
    throw SchemaError(ptr + "/" + key, "missing or not an integer");
  return o[key].get<int>();
}

std::string require_str(const json& o, const char* key, const std::string& ptr) {
  if (!o.contains(key) || !o[key].is_string())
    throw SchemaError(ptr + "/" + key, "missing or not a string");
  return o[key].get<std::string>();
}

PhantomSpec parse_spec_obj(const json& top, const std::string& ptr) {
  if (!top.is_object()) throw SchemaError(ptr.empty() ? "/" : ptr, "spec must be an object");
  reject_unknown_keys(top,
                      {"grid", "spacing", "background_mean", "background_sigma", "noise_sigma",
                       "seed", "max_retries", "classes", "relations"},
                      ptr);
  PhantomSpec s;
  if (!top.contains("grid") || !top["grid"].is_array() || top["grid"].size() != 3)
    throw SchemaError(ptr + "/grid", "must be an array of 3 integers (D, H, W)");
  for (int i = 0; i < 3; ++i) {
    const json& g = top["grid"][static_cast<size_t>(i)];
    if (!g.is_number_integer())
      throw SchemaError(ptr + "/grid/" + std::to_string(i), "not an integer");
    s.grid[static_cast<size_t>(i)] = g.get<int>();
  }
  if (top.contains("spacing")) {
    if (!top["spacing"].is_array() || top["spacing"].size() != 3)
      throw SchemaError(ptr + "/spacing", "must be an array of 3 numbers (z, y, x)");
    for (int i = 0; i < 3; ++i) {
      const json& sp = top["spacing"][static_cast<size_t>(i)];
      if (!sp.is_number())
        throw SchemaError(ptr + "/spacing/" + std::to_string(i), "not a number");
      s.spacing[static_cast<size_t>(i)] = sp.get<double>();
    }
  }
  s.background_mean = require_number(top, "background_mean", ptr);
  s.background_sigma = require_number(top, "background_sigma", ptr);
  if (top.contains("noise_sigma")) s.noise_sigma = require_number(top, "noise_sigma", ptr);
  if (top.contains("seed")) {
    const json& sd = top["seed"];
    if (!sd.is_number_integer() || (!sd.is_number_unsigned() && sd.get<int64_t>() < 0))
      throw SchemaError(ptr + "/seed", "must be a nonnegative integer");
    s.seed = sd.get<uint64_t>();
  }
  if (top.contains("max_retries")) s.max_retries = require_int(top, "max_retries", ptr);

  if (!top.contains("classes") || !top["classes"].is_array())
    throw SchemaError(ptr + "/classes", "missing or not an array");
  for (size_t i = 0; i < top["classes"].size(); ++i) {
    const std::string cptr = ptr + "/classes/" + std::to_string(i);
    const json& c = top["classes"][i];
    if (!c.is_object()) throw SchemaError(cptr, "not an object");
    reject_unknown_keys(c,
                        {"class_id", "class_name", "primitive", "size_min", "size_max",
                         "intensity_mean", "intensity_sigma"},
                        cptr);
    ClassSpec cs;
    cs.class_id = require_int(c, "class_id", cptr);
    cs.class_name = require_str(c, "class_name", cptr);
    cs.primitive = require_str(c, "primitive", cptr);
    cs.size_min = require_number(c, "size_min", cptr);
    cs.size_max = require_number(c, "size_max", cptr);
    cs.intensity_mean = require_number(c, "intensity_mean", cptr);
    cs.intensity_sigma = require_number(c, "intensity_sigma", cptr);
    s.classes.push_back(std::move(cs));
  }
  if (top.contains("relations")) {
    if (!top["relations"].is_array()) throw SchemaError(ptr + "/relations", "not an array");
    for (size_t i = 0; i < top["relations"].size(); ++i) {
      const std::string rptr = ptr + "/relations/" + std::to_string(i);
      const json& r = top["relations"][i];
      if (!r.is_object()) throw SchemaError(rptr, "not an object");
      reject_unknown_keys(r, {"subject", "direction", "object"}, rptr);
      RelationConstraint rc;
      rc.subject = require_int(r, "subject", rptr);
      rc.direction = require_str(r, "direction", rptr);
      rc.object = require_int(r, "object", rptr);
      s.relations.push_back(std::move(rc));
    }
  }
  validate_spec(s, ptr);
  return s;
}

json spec_obj(const PhantomSpec& s) {
  json top;
  top["grid"] = {s.grid[0], s.grid[1], s.grid[2]};
  top["spacing"] = {s.spacing[0], s.spacing[1], s.spacing[2]};
  top["background_mean"] = s.background_mean;
  top["background_sigma"] = s.background_sigma;
  top["noise_sigma"] = s.noise_sigma;
  top["seed"] = s.seed;
  top["max_retries"] = s.max_retries;
  json classes = json::array();
  for (const ClassSpec& c : s.classes) {
    json o;
    o["class_id"] = c.class_id;
    o["class_name"] = c.class_name;
    o["primitive"] = c.primitive;
    o["size_min"] = c.size_min;
    o["size_max"] = c.size_max;
    o["intensity_mean"] = c.intensity_mean;
    o["intensity_sigma"] = c.intensity_sigma;
    classes.push_back(o);
  }
  top["classes"] = classes;
  json rels = json::array();
  for (const RelationConstraint& r : s.relations) {
    json o;
    o["subject"] = r.subject;
    o["direction"] = r.direction;
    o["object"] = r.object;
    rels.push_back(o);
  }
  top["relations"] = rels;
  return top;
}

}  // namespace

PhantomSpec parse_phantom_spec(const std::string& json_text) {
  json top;
  try {
    top = json::parse(json_text);
  } catch (const json::exception& e) {
    throw SchemaError("/", std::string("invalid JSON: ") + e.what());
  }
  return parse_spec_obj(top, "");
}

PhantomSpec load_phantom_spec(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open phantom spec '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_phantom_spec(text);
}

std::string phantom_spec_to_json(const PhantomSpec& spec) {
  return spec_obj(spec).dump(2) + "\n";
}

namespace {

struct Placement {
  std::vector<int64_t> voxels;
  std::array<double, 3> centroid{0.0, 0.0, 0.0};
};

// Intersects the in-grid fit window for a shape of bbox half-extent `half`
// with half-spaces steering toward already-placed relation partners. The
// 2-voxel margin biases sampling; the strict check happens on measured
// centroids afterward.
bool center_interval(const PhantomSpec& spec, int class_id, const std::array<double, 3>& half,
                     const std::vector<bool>& placed,
                     const std::vector<std::array<double, 3>>& centroids,
                     std::array<double, 3>& lo, std::array<double, 3>& hi) {
  for (int i = 0; i < 3; ++i) {
    lo[static_cast<size_t>(i)] = half[static_cast<size_t>(i)] + 1.0;
    hi[static_cast<size_t>(i)] = spec.grid[static_cast<size_t>(i)] - 2.0 -
                                 half[static_cast<size_t>(i)];
  }
  const double margin = 2.0;
  for (const RelationConstraint& r : spec.relations) {
    const auto [axis, sign] = direction_axis_sign(r.direction);
    const size_t a = static_cast<size_t>(axis);
    if (r.subject == class_id && placed[static_cast<size_t>(r.object)]) {
      const double oc = centroids[static_cast<size_t>(r.object) - 1][a];
      if (sign < 0)
        hi[a] = std::min(hi[a], oc - margin);
      else
        lo[a] = std::max(lo[a], oc + margin);
    } else if (r.object == class_id && placed[static_cast<size_t>(r.subject)]) {
      const double sc = centroids[static_cast<size_t>(r.subject) - 1][a];
      if (sign < 0)
        lo[a] = std::max(lo[a], sc + margin);
      else
        hi[a] = std::min(hi[a], sc - margin);
    }
  }
  for (int i = 0; i < 3; ++i)
    if (!(lo[static_cast<size_t>(i)] <= hi[static_cast<size_t>(i)])) return false;
  return true;
}

// Scans the bounding box, keeping member voxels. Fails on overlap with an
// existing label or a measured occupied fraction outside the class window.
template <typename Pred>
bool collect(const PhantomSpec& spec, const ClassSpec& cls, const IntGrid& labels,
             const std::array<int, 3>& lo, const std::array<int, 3>& hi, Pred&& member,
             Placement& out) {
  const int H = spec.grid[1], W = spec.grid[2];
  out.voxels.clear();
  double sz = 0.0, sy = 0.0, sx = 0.0;
  for (int z = lo[0]; z <= hi[0]; ++z)
    for (int y = lo[1]; y <= hi[1]; ++y)
      for (int x = lo[2]; x <= hi[2]; ++x) {
        if (!member(z, y, x)) continue;
        const int64_t f = (static_cast<int64_t>(z) * H + y) * W + x;
        if (labels.v[static_cast<size_t>(f)] != 0) return false;
        out.voxels.push_back(f);
        sz += z;
        sy += y;
        sx += x;
      }
  const double total = static_cast<double>(spec.grid[0]) * spec.grid[1] * spec.grid[2];
  const double n = static_cast<double>(out.voxels.size());
  if (out.voxels.empty()) return false;
  const double frac = n / total;
  if (frac < cls.size_min || frac > cls.size_max) return false;
  out.centroid = {sz / n, sy / n, sx / n};
  return true;
}

// One placement try: samples a target size, derives primitive parameters
// analytically, samples a center inside the biased interval, rasterizes, and
// verifies every relation against classes already on the grid.
bool try_place_class(const PhantomSpec& spec, const ClassSpec& cls, const IntGrid& labels,
                     const std::vector<bool>& placed,
                     const std::vector<std::array<double, 3>>& centroids, Rng& rng,
                     Placement& out) {
  const double total = static_cast<double>(spec.grid[0]) * spec.grid[1] * spec.grid[2];
  const double target = total * rng.uniform(cls.size_min, cls.size_max);
  std::array<double, 3> half{}, clo{}, chi{};
  bool collected = false;

  if (cls.primitive == "ellipsoid") {
    std::array<double, 3> radii{};
    double prod = 1.0;
    for (double& a : radii) {
      a = rng.uniform(0.7, 1.4);
      prod *= a;
    }
    const double r = std::cbrt(target * 3.0 / (4.0 * kPi * prod));
    for (int i = 0; i < 3; ++i) half[static_cast<size_t>(i)] = r * radii[static_cast<size_t>(i)];
    if (!center_interval(spec, cls.class_id, half, placed, centroids, clo, chi)) return false;
    std::array<double, 3> c{};
    std::array<int, 3> lo{}, hi{};
    for (int i = 0; i < 3; ++i) {
      const size_t a = static_cast<size_t>(i);
      c[a] = rng.uniform(clo[a], chi[a]);
      lo[a] = static_cast<int>(std::ceil(c[a] - half[a]));
      hi[a] = static_cast<int>(std::floor(c[a] + half[a]));
    }
    collected = collect(spec, cls, labels, lo, hi,
                        [&](int z, int y, int x) {
                          const double dz = (z - c[0]) / half[0];
                          const double dy = (y - c[1]) / half[1];
                          const double dx = (x - c[2]) / half[2];
                          return dz * dz + dy * dy + dx * dx <= 1.0;
                        },
                        out);
  } else if (cls.primitive == "tube") {
    const int axis = static_cast<int>(rng.uniform_index(3));
    const double aspect = rng.uniform(2.0, 4.0);
    const double r = std::cbrt(target / (2.0 * kPi * aspect));
    const double hlen = aspect * r;
    for (int i = 0; i < 3; ++i) half[static_cast<size_t>(i)] = (i == axis) ? hlen : r;
    if (!center_interval(spec, cls.class_id, half, placed, centroids, clo, chi)) return false;
    std::array<double, 3> c{};
    std::array<int, 3> lo{}, hi{};
    for (int i = 0; i < 3; ++i) {
      const size_t a = static_cast<size_t>(i);
      c[a] = rng.uniform(clo[a], chi[a]);
      lo[a] = static_cast<int>(std::ceil(c[a] - half[a]));
      hi[a] = static_cast<int>(std::floor(c[a] + half[a]));
    }
    collected = collect(spec, cls, labels, lo, hi,
                        [&](int z, int y, int x) {
                          const double d[3] = {z - c[0], y - c[1], x - c[2]};
                          double s = 0.0;
                          for (int i = 0; i < 3; ++i)
                            if (i != axis) s += d[i] * d[i];
                          return std::abs(d[axis]) <= hlen && s <= r * r;
                        },
                        out);
  } else {  // l_solid: two orthogonal arms of length L, square section T
    const double rho = rng.uniform(0.3, 0.5);
    const double l = std::cbrt(target / (rho * rho * (2.0 - rho)));
    const int L = std::max(3, static_cast<int>(std::lround(l)));
    const int T = std::max(2, static_cast<int>(std::lround(rho * l)));
    if (T >= L) return false;
    const int a1 = static_cast<int>(rng.uniform_index(3));
    const int a2 = (a1 + 1 + static_cast<int>(rng.uniform_index(2))) % 3;
    std::array<int, 3> ext{T, T, T};
    ext[static_cast<size_t>(a1)] = L;
    ext[static_cast<size_t>(a2)] = L;
    for (int i = 0; i < 3; ++i) half[static_cast<size_t>(i)] = ext[static_cast<size_t>(i)] / 2.0;
    if (!center_interval(spec, cls.class_id, half, placed, centroids, clo, chi)) return false;
    std::array<int, 3> corner{}, lo{}, hi{};
    for (int i = 0; i < 3; ++i) {
      const size_t a = static_cast<size_t>(i);
      const double c = rng.uniform(clo[a], chi[a]);
      corner[a] = std::clamp(static_cast<int>(std::lround(c - (ext[a] - 1) / 2.0)), 0,
                             spec.grid[a] - ext[a]);
      lo[a] = corner[a];
      hi[a] = corner[a] + ext[a] - 1;
    }
    collected = collect(spec, cls, labels, lo, hi,
                        [&](int z, int y, int x) {
                          const int p[3] = {z - corner[0], y - corner[1], x - corner[2]};
                          return p[a1] < T || p[a2] < T;
                        },
                        out);
  }
  if (!collected) return false;

  // Strict relation check against everything already placed; constraints
  // whose partner arrives later are checked at the partner's placement.
  for (const RelationConstraint& r : spec.relations) {
    double diff;
    if (r.subject == cls.class_id && placed[static_cast<size_t>(r.object)]) {
      const auto [axis, sign] = direction_axis_sign(r.direction);
      diff = sign * (out.centroid[static_cast<size_t>(axis)] -
                     centroids[static_cast<size_t>(r.object) - 1][static_cast<size_t>(axis)]);
    } else if (r.object == cls.class_id && placed[static_cast<size_t>(r.subject)]) {
      const auto [axis, sign] = direction_axis_sign(r.direction);
      diff = sign * (centroids[static_cast<size_t>(r.subject) - 1][static_cast<size_t>(axis)] -
                     out.centroid[static_cast<size_t>(axis)]);
    } else {
      continue;
    }
    if (!(diff > 0.0)) return false;
  }
  return true;
}

bool relations_hold(const PhantomSpec& spec,
                    const std::vector<std::array<double, 3>>& centroids) {
  for (const RelationConstraint& r : spec.relations) {
    const auto [axis, sign] = direction_axis_sign(r.direction);
    const double d = centroids[static_cast<size_t>(r.subject) - 1][static_cast<size_t>(axis)] -
                     centroids[static_cast<size_t>(r.object) - 1][static_cast<size_t>(axis)];
    if (!(sign * d > 0.0)) return false;
  }
  return true;
}

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec, uint64_t case_seed) {
  validate_spec(spec, "");
  const int D = spec.grid[0], H = spec.grid[1], W = spec.grid[2];
  const int K = static_cast<int>(spec.classes.size());
  const uint64_t mix[2] = {spec.seed, case_seed};
  Rng rng(fnv1a64(mix, sizeof mix));

  for (int attempt = 0; attempt < spec.max_retries; ++attempt) {
    IntGrid labels(D, H, W);
    std::vector<std::array<double, 3>> centroids(static_cast<size_t>(K));
    std::vector<int64_t> counts(static_cast<size_t>(K), 0);
    std::vector<bool> placed(static_cast<size_t>(K) + 1, false);
    bool all_placed = true;
    for (int k = 1; k <= K && all_placed; ++k) {
      bool done = false;
      for (int t = 0; t < spec.max_retries && !done; ++t) {
        Placement p;
        if (!try_place_class(spec, spec.classes[static_cast<size_t>(k) - 1], labels, placed,
                             centroids, rng, p))
          continue;
        for (int64_t f : p.voxels) labels.v[static_cast<size_t>(f)] = k;
        centroids[static_cast<size_t>(k) - 1] = p.centroid;
        counts[static_cast<size_t>(k) - 1] = static_cast<int64_t>(p.voxels.size());
        placed[static_cast<size_t>(k)] = true;
        done = true;
      }
      all_placed = done;
    }
    if (!all_placed || !relations_hold(spec, centroids)) continue;

    Tensor img({D, H, W});
    for (int64_t i = 0; i < labels.numel(); ++i) {
      const int32_t k = labels.v[static_cast<size_t>(i)];
      double v = (k == 0)
                     ? rng.normal(spec.background_mean, spec.background_sigma)
                     : rng.normal(spec.classes[static_cast<size_t>(k) - 1].intensity_mean,
                                  spec.classes[static_cast<size_t>(k) - 1].intensity_sigma);
      if (spec.noise_sigma > 0.0) v += rng.normal(0.0, spec.noise_sigma);
      img[i] = v;
    }
    Phantom out;
    out.intensity = std::move(img);
    out.labels = std::move(labels);
    out.centroids = std::move(centroids);
    out.class_voxels = std::move(counts);
    return out;
  }
  throw PlacementFailed("no placement satisfied the phantom spec after " +
                        std::to_string(spec.max_retries) + " attempts");
}

PatchPair random_patch(const Tensor& volume, const IntGrid& labels,
                       const std::array<int, 3>& size, Rng& rng) {
  if (volume.ndim() != 3) throw ShapeError("random_patch: volume must be rank 3");
  if (volume.dim(0) != labels.dims[0] || volume.dim(1) != labels.dims[1] ||
      volume.dim(2) != labels.dims[2])
    throw ShapeError("random_patch: volume and labels disagree on dims");
  for (int i = 0; i < 3; ++i) {
    if (size[static_cast<size_t>(i)] < 1)
      throw ShapeError("random_patch: patch size must be positive");
    if (size[static_cast<size_t>(i)] > volume.dim(i))
      throw ShapeError("random_patch: patch size exceeds volume dims");
  }
  PatchPair out;
  for (int i = 0; i < 3; ++i)
    out.corner[static_cast<size_t>(i)] = static_cast<int>(
        rng.uniform_index(static_cast<uint64_t>(volume.dim(i) - size[static_cast<size_t>(i)] + 1)));
  out.image = Tensor({size[0], size[1], size[2]});
  out.labels = IntGrid(size[0], size[1], size[2]);
  const int H = volume.dim(1), W = volume.dim(2);
  for (int z = 0; z < size[0]; ++z)
    for (int y = 0; y < size[1]; ++y) {
      const size_t src = static_cast<size_t>(
          (static_cast<int64_t>(out.corner[0] + z) * H + (out.corner[1] + y)) * W +
          out.corner[2]);
      const size_t dst = static_cast<size_t>((static_cast<int64_t>(z) * size[1] + y) * size[2]);
      std::copy_n(volume.data.begin() + static_cast<int64_t>(src), size[2],
                  out.image.data.begin() + static_cast<int64_t>(dst));
      std::copy_n(labels.v.begin() + static_cast<int64_t>(src), size[2],
                  out.labels.v.begin() + static_cast<int64_t>(dst));
    }
  return out;
}

PatchPair random_patch(const Tensor& volume, const IntGrid& labels,
                       const std::array<int, 3>& size, uint64_t seed) {
  Rng rng(seed);
  return random_patch(volume, labels, size, rng);
}

DatasetSplit make_split(int n_train, int n_val, int n_test, double labeled_fraction,
                        uint64_t seed) {
  if (n_train < 1 || n_val < 0 || n_test < 0)
    throw ConfigError("make_split: need n_train >= 1 and nonnegative n_val/n_test");
  if (!(labeled_fraction > 0.0) || labeled_fraction > 1.0)
    throw ConfigError("make_split: labeled_fraction must lie in (0, 1]");
  auto id_of = [](int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "case_%03d", i);
    return std::string(buf);
  };
  std::vector<int> train_idx(static_cast<size_t>(n_train));
  std::iota(train_idx.begin(), train_idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(train_idx);
  const int n_labeled = std::clamp(
      static_cast<int>(std::lround(labeled_fraction * n_train)), 1, n_train);
  std::vector<int> lab(train_idx.begin(), train_idx.begin() + n_labeled);
  std::vector<int> unlab(train_idx.begin() + n_labeled, train_idx.end());
  std::sort(lab.begin(), lab.end());
  std::sort(unlab.begin(), unlab.end());

  DatasetSplit split;
  split.labeled_fraction = labeled_fraction;
  for (int i : lab) split.labeled.push_back(id_of(i));
  for (int i : unlab) split.unlabeled.push_back(id_of(i));
  for (int i = 0; i < n_val; ++i) split.val.push_back(id_of(n_train + i));
  for (int i = 0; i < n_test; ++i) split.test.push_back(id_of(n_train + n_val + i));
  return split;
}

std::string manifest_to_json(const CorpusManifest& m) {
  json top;
  top["spec"] = spec_obj(m.spec);
  json arr = json::array();
  for (const CaseEntry& c : m.cases) {
    json o;
    o["id"] = c.id;
    o["seed"] = c.seed;
    o["split"] = c.split;
    arr.push_back(o);
  }
  top["cases"] = arr;
  return top.dump(2) + "\n";
}

CorpusManifest parse_manifest(const std::string& json_text) {
  json top;
  try {
    top = json::parse(json_text);
  } catch (const json::exception& e) {
    throw SchemaError("/", std::string("invalid JSON: ") + e.what());
  }
  if (!top.is_object()) throw SchemaError("/", "manifest must be an object");
  reject_unknown_keys(top, {"spec", "cases"}, "");
  if (!top.contains("spec")) throw SchemaError("/spec", "missing");
  CorpusManifest m;
  m.spec = parse_spec_obj(top["spec"], "/spec");
  if (!top.contains("cases") || !top["cases"].is_array())
    throw SchemaError("/cases", "missing or not an array");
  std::vector<std::string> seen;
  for (size_t i = 0; i < top["cases"].size(); ++i) {
    const std::string cptr = "/cases/" + std::to_string(i);
    const json& c = top["cases"][i];
    if (!c.is_object()) throw SchemaError(cptr, "not an object");
    reject_unknown_keys(c, {"id", "seed", "split"}, cptr);
    CaseEntry e;
    e.id = require_str(c, "id", cptr);
    if (e.id.empty()) throw SchemaError(cptr + "/id", "must be nonempty");
    if (std::find(seen.begin(), seen.end(), e.id) != seen.end())
      throw SchemaError(cptr + "/id", "duplicate case id");
    seen.push_back(e.id);
    if (!c.contains("seed") || !c["seed"].is_number_integer() ||
        (!c["seed"].is_number_unsigned() && c["seed"].get<int64_t>() < 0))
      throw SchemaError(cptr + "/seed", "must be a nonnegative integer");
    e.seed = c["seed"].get<uint64_t>();
    e.split = require_str(c, "split", cptr);
    if (e.split != "labeled" && e.split != "unlabeled" && e.split != "val" && e.split != "test")
      throw SchemaError(cptr + "/split", "must be one of labeled|unlabeled|val|test");
    m.cases.push_back(std::move(e));
  }
  return m;
}

CorpusManifest load_manifest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open manifest '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_manifest(text);
}

std::string case_image_path(const std::string& dir, const std::string& id) {
  return dir + "/" + id + "_img.nii.gz";
}

std::string case_label_path(const std::string& dir, const std::string& id) {
  return dir + "/" + id + "_lbl.nii.gz";
}

CorpusManifest generate_corpus(const PhantomSpec& spec, int n_train, int n_val, int n_test,
                               double labeled_fraction, const std::string& out_dir) {
  validate_spec(spec, "");
  const DatasetSplit split = make_split(n_train, n_val, n_test, labeled_fraction, spec.seed);
  std::filesystem::create_directories(out_dir);

  CorpusManifest m;
  m.spec = spec;
  auto add_cases = [&](const std::vector<std::string>& ids, const char* tag) {
    for (const std::string& id : ids) m.cases.push_back({id, 0, tag});
  };
  add_cases(split.labeled, "labeled");
  add_cases(split.unlabeled, "unlabeled");
  add_cases(split.val, "val");
  add_cases(split.test, "test");
  std::sort(m.cases.begin(), m.cases.end(),
            [](const CaseEntry& a, const CaseEntry& b) { return a.id < b.id; });

  // Seeds derive from (spec seed, case id), so the corpus regenerates
  // bit-identically from the manifest alone.
  const uint64_t base = fnv1a64(&spec.seed, sizeof spec.seed);
  for (CaseEntry& c : m.cases) {
    c.seed = fnv1a64(c.id, base);
    const Phantom ph = generate_phantom(spec, c.seed);
    save_volume(case_image_path(out_dir, c.id), ph.intensity, spec.spacing);
    save_labels(case_label_path(out_dir, c.id), ph.labels, spec.spacing);
  }
  std::ofstream f(out_dir + "/manifest.json", std::ios::binary);
  if (!f) throw DataError("cannot write manifest in '" + out_dir + "'");
  f << manifest_to_json(m);
  if (!f) throw DataError("manifest write failed in '" + out_dir + "'");
  return m;
}

}  // namespace tak
