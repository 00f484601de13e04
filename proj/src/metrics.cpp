#include "tak/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <map>
#include <unordered_set>

#include "tak/errors.hpp"

namespace tak {

namespace {

constexpr double kInf = 1e20;

void check_same_dims(const IntGrid& a, const IntGrid& b) {
  if (!a.same_dims(b))
    throw ShapeError("metric: grids (" + std::to_string(a.dims[0]) + "," +
                     std::to_string(a.dims[1]) + "," + std::to_string(a.dims[2]) + ") vs (" +
                     std::to_string(b.dims[0]) + "," + std::to_string(b.dims[1]) + "," +
                     std::to_string(b.dims[2]) + ") differ");
}

// 1-D squared-distance transform (lower envelope of parabolas); spacing w
// scales the axis. In-place over a strided line.
void dt1d(double* f, int n, int64_t stride, double w, std::vector<double>& val,
          std::vector<int>& apex, std::vector<double>& z) {
  val.resize(static_cast<size_t>(n));
  apex.resize(static_cast<size_t>(n));
  z.resize(static_cast<size_t>(n) + 1);
  for (int i = 0; i < n; ++i) val[static_cast<size_t>(i)] = f[stride * i];
  const double w2 = w * w;
  const double inf = std::numeric_limits<double>::infinity();
  int k = 0;
  apex[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (int q = 1; q < n; ++q) {
    double s;
    while (true) {
      const int v = apex[static_cast<size_t>(k)];
      s = (val[static_cast<size_t>(q)] + w2 * q * q - (val[static_cast<size_t>(v)] + w2 * v * v)) /
          (2.0 * w2 * (q - v));
      if (s <= z[static_cast<size_t>(k)]) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    apex[static_cast<size_t>(k)] = q;
    z[static_cast<size_t>(k)] = s;
    z[static_cast<size_t>(k) + 1] = inf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<size_t>(k) + 1] < q) ++k;
    const int v = apex[static_cast<size_t>(k)];
    f[stride * q] = w2 * (q - v) * (q - v) + val[static_cast<size_t>(v)];
  }
}

// Exact squared Euclidean distance (anisotropic) from every voxel center to
// the nearest seed voxel center.
std::vector<double> squared_edt(const IntGrid& dims_like, const std::vector<std::array<int, 3>>& seeds,
                                const Spacing& sp) {
  const int D = dims_like.dims[0], H = dims_like.dims[1], W = dims_like.dims[2];
  std::vector<double> d(static_cast<size_t>(D) * H * W, kInf);
  for (const auto& s : seeds)
    d[(static_cast<size_t>(s[0]) * H + s[1]) * W + s[2]] = 0.0;
  std::vector<double> val, z;
  std::vector<int> apex;
  // x lines
  for (int zi = 0; zi < D; ++zi)
    for (int y = 0; y < H; ++y)
      dt1d(&d[(static_cast<size_t>(zi) * H + y) * W], W, 1, sp[2], val, apex, z);
  // y lines
  for (int zi = 0; zi < D; ++zi)
    for (int x = 0; x < W; ++x)
      dt1d(&d[static_cast<size_t>(zi) * H * W + x], H, W, sp[1], val, apex, z);
  // z lines
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      dt1d(&d[static_cast<size_t>(y) * W + x], D, static_cast<int64_t>(H) * W, sp[0], val, apex, z);
  return d;
}

}  // namespace

double dice(const IntGrid& pred, const IntGrid& gt) {
  check_same_dims(pred, gt);
  int64_t a = 0, b = 0, inter = 0;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    const bool pa = pred.v[i] != 0, pb = gt.v[i] != 0;
    a += pa;
    b += pb;
    inter += pa && pb;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

std::vector<std::array<int, 3>> boundary_voxels(const IntGrid& mask) {
  const int D = mask.dims[0], H = mask.dims[1], W = mask.dims[2];
  std::vector<std::array<int, 3>> out;
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (mask.at(z, y, x) == 0) continue;
        const bool edge = z == 0 || z == D - 1 || y == 0 || y == H - 1 || x == 0 || x == W - 1;
        if (edge || mask.at(z - 1, y, x) == 0 || mask.at(z + 1, y, x) == 0 ||
            mask.at(z, y - 1, x) == 0 || mask.at(z, y + 1, x) == 0 ||
            mask.at(z, y, x - 1) == 0 || mask.at(z, y, x + 1) == 0)
          out.push_back({z, y, x});
      }
  return out;
}

double asd(const IntGrid& pred, const IntGrid& gt, const Spacing& spacing) {
  check_same_dims(pred, gt);
  const auto ba = boundary_voxels(pred);
  const auto bb = boundary_voxels(gt);
  if (ba.empty() || bb.empty())
    throw UndefinedSurface(ba.empty() ? "prediction mask has no surface"
                                      : "ground-truth mask has no surface");
  const int H = pred.dims[1], W = pred.dims[2];
  const auto d_to_b = squared_edt(pred, bb, spacing);
  const auto d_to_a = squared_edt(pred, ba, spacing);
  double total = 0.0;
  for (const auto& v : ba)
    total += std::sqrt(d_to_b[(static_cast<size_t>(v[0]) * H + v[1]) * W + v[2]]);
  for (const auto& v : bb)
    total += std::sqrt(d_to_a[(static_cast<size_t>(v[0]) * H + v[1]) * W + v[2]]);
  return total / static_cast<double>(ba.size() + bb.size());
}

namespace {

struct P3 {
  double x, y, z;
};

P3 sub3(const P3& a, const P3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
P3 cross3(const P3& a, const P3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
double dot3(const P3& a, const P3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

// Signed volume of the parallelepiped (b-a, c-a, d-a). Inputs are integer
// lattice points, so the value is exact in double.
double orient3d(const P3& a, const P3& b, const P3& c, const P3& d) {
  return dot3(cross3(sub3(b, a), sub3(c, a)), sub3(d, a));
}

// Incremental convex hull over integer lattice points (affine dimension 3
// guaranteed by the caller). Returns twice nothing -- the enclosed volume.
double hull_volume(std::vector<P3> pts) {
  struct Face {
    int a, b, c;
    bool alive = true;
  };
  const size_t n = pts.size();

  // Initial simplex: extreme point pairs, then max area, then max volume.
  size_t i0 = 0;
  for (size_t i = 1; i < n; ++i) {
    const P3 &p = pts[i], &q = pts[i0];
    if (p.x < q.x || (p.x == q.x && (p.y < q.y || (p.y == q.y && p.z < q.z)))) i0 = i;
  }
  size_t i1 = i0 == 0 ? 1 : 0;
  double best = -1.0;
  for (size_t i = 0; i < n; ++i) {
    if (i == i0) continue;
    const P3 d = sub3(pts[i], pts[i0]);
    const double l = dot3(d, d);
    if (l > best) {
      best = l;
      i1 = i;
    }
  }
  size_t i2 = n;
  best = 0.0;
  for (size_t i = 0; i < n; ++i) {
    if (i == i0 || i == i1) continue;
    const P3 c = cross3(sub3(pts[i1], pts[i0]), sub3(pts[i], pts[i0]));
    const double a2 = dot3(c, c);
    if (a2 > best) {
      best = a2;
      i2 = i;
    }
  }
  if (i2 == n) throw EmptyMask("hull: points are collinear");
  size_t i3 = n;
  best = 0.0;
  for (size_t i = 0; i < n; ++i) {
    if (i == i0 || i == i1 || i == i2) continue;
    const double v = std::abs(orient3d(pts[i0], pts[i1], pts[i2], pts[i]));
    if (v > best) {
      best = v;
      i3 = i;
    }
  }
  if (i3 == n || best == 0.0) throw EmptyMask("hull: points are coplanar");
  if (orient3d(pts[i0], pts[i1], pts[i2], pts[i3]) > 0) std::swap(i1, i2);

  std::vector<Face> faces = {{static_cast<int>(i0), static_cast<int>(i1), static_cast<int>(i2)},
                             {static_cast<int>(i0), static_cast<int>(i2), static_cast<int>(i3)},
                             {static_cast<int>(i0), static_cast<int>(i3), static_cast<int>(i1)},
                             {static_cast<int>(i1), static_cast<int>(i3), static_cast<int>(i2)}};

  std::vector<int> visible;
  size_t dead = 0;
  for (size_t p = 0; p < n; ++p) {
    if (p == i0 || p == i1 || p == i2 || p == i3) continue;
    if (dead > faces.size() / 2) {
      faces.erase(std::remove_if(faces.begin(), faces.end(),
                                 [](const Face& f) { return !f.alive; }),
                  faces.end());
      dead = 0;
    }
    visible.clear();
    for (size_t f = 0; f < faces.size(); ++f) {
      if (!faces[f].alive) continue;
      if (orient3d(pts[static_cast<size_t>(faces[f].a)], pts[static_cast<size_t>(faces[f].b)],
                   pts[static_cast<size_t>(faces[f].c)], pts[p]) > 0)
        visible.push_back(static_cast<int>(f));
    }
    if (visible.empty()) continue;
    // Horizon: directed edges of visible faces whose reverse edge is not
    // itself part of a visible face.
    std::unordered_set<int64_t> vis_edges;
    auto key = [](int u, int v) { return (static_cast<int64_t>(u) << 32) | static_cast<uint32_t>(v); };
    for (int f : visible) {
      const Face& fc = faces[static_cast<size_t>(f)];
      vis_edges.insert(key(fc.a, fc.b));
      vis_edges.insert(key(fc.b, fc.c));
      vis_edges.insert(key(fc.c, fc.a));
    }
    for (int f : visible) faces[static_cast<size_t>(f)].alive = false;
    dead += visible.size();
    for (int f : visible) {
      const Face fc = faces[static_cast<size_t>(f)];
      const int e[3][2] = {{fc.a, fc.b}, {fc.b, fc.c}, {fc.c, fc.a}};
      for (const auto& uv : e)
        if (!vis_edges.count(key(uv[1], uv[0])))
          faces.push_back({uv[0], uv[1], static_cast<int>(p)});
    }
  }

  double six_v = 0.0;
  for (const Face& f : faces) {
    if (!f.alive) continue;
    six_v += orient3d(P3{0, 0, 0}, pts[static_cast<size_t>(f.a)], pts[static_cast<size_t>(f.b)],
                      pts[static_cast<size_t>(f.c)]);
  }
  return std::abs(six_v) / 6.0;
}

}  // namespace

double convex_hull_volume_ratio(const IntGrid& mask) {
  int64_t count = 0;
  for (int32_t m : mask.v) count += m != 0;
  if (count == 0) throw EmptyMask("convex hull of an empty mask");

  // Corners of interior voxels can never be hull vertices, so the corners of
  // the 6-connectivity boundary voxels suffice.
  const auto boundary = boundary_voxels(mask);
  std::unordered_set<int64_t> seen;
  std::vector<P3> pts;
  pts.reserve(boundary.size() * 2);
  for (const auto& v : boundary)
    for (int dz = 0; dz <= 1; ++dz)
      for (int dy = 0; dy <= 1; ++dy)
        for (int dx = 0; dx <= 1; ++dx) {
          const int z = v[0] + dz, y = v[1] + dy, x = v[2] + dx;
          const int64_t k = (static_cast<int64_t>(z) << 42) | (static_cast<int64_t>(y) << 21) | x;
          if (seen.insert(k).second)
            pts.push_back({static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)});
        }
  return hull_volume(std::move(pts)) / static_cast<double>(count);
}

std::vector<ClassReport> class_report(const IntGrid& pred, const IntGrid& gt,
                                      const Spacing& spacing,
                                      const std::vector<std::string>& class_names) {
  check_same_dims(pred, gt);
  const int k_max = static_cast<int>(class_names.size());
  std::vector<int64_t> gt_count(static_cast<size_t>(k_max) + 1, 0);
  int64_t fg_total = 0;
  for (int32_t v : gt.v) {
    if (v < 0 || v > k_max)
      throw LabelError("class_report: label " + std::to_string(v) + " outside [0, " +
                       std::to_string(k_max) + "]");
    if (v > 0) {
      gt_count[static_cast<size_t>(v)]++;
      ++fg_total;
    }
  }
  for (int32_t v : pred.v)
    if (v < 0 || v > k_max)
      throw LabelError("class_report: prediction label " + std::to_string(v) + " outside [0, " +
                       std::to_string(k_max) + "]");

  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<ClassReport> out;
  for (int k = 1; k <= k_max; ++k) {
    IntGrid pk(pred.dims[0], pred.dims[1], pred.dims[2]);
    IntGrid gk(pred.dims[0], pred.dims[1], pred.dims[2]);
    for (size_t i = 0; i < gt.v.size(); ++i) {
      pk.v[i] = pred.v[i] == k;
      gk.v[i] = gt.v[i] == k;
    }
    ClassReport r;
    r.class_id = k;
    r.class_name = class_names[static_cast<size_t>(k - 1)];
    r.dice = dice(pk, gk);
    try {
      r.asd = asd(pk, gk, spacing);
    } catch (const UndefinedSurface&) {
      r.asd = nan;
    }
    r.voxel_proportion =
        fg_total == 0 ? 0.0
                      : static_cast<double>(gt_count[static_cast<size_t>(k)]) /
                            static_cast<double>(fg_total);
    r.size_group = r.voxel_proportion >= 0.05 ? "large" : "small";
    try {
      r.chvr = convex_hull_volume_ratio(gk);
    } catch (const EmptyMask&) {
      r.chvr = nan;
    }
    out.push_back(std::move(r));
  }
  return out;
}

int64_t parameter_count(const ParamRegistry& reg) { return reg.parameter_count(); }

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;  // shortest round-trip form
  }
  return buf;
}

}  // namespace

void write_report_csv(const std::string& path, const std::vector<ReportRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "case_id,class_id,class_name,dice,asd,voxel_proportion,size_group,chvr\n";
  for (const auto& row : rows) {
    const ClassReport& m = row.metrics;
    out << row.case_id << ',' << m.class_id << ',' << m.class_name << ',' << fmt(m.dice) << ','
        << fmt(m.asd) << ',' << fmt(m.voxel_proportion) << ',' << m.size_group << ','
        << fmt(m.chvr) << '\n';
  }
  if (!out) throw DataError("short write to " + path);
}

std::string summarize_report(const std::vector<ReportRow>& rows) {
  struct Acc {
    double dice_sum = 0, asd_sum = 0;
    int64_t dice_n = 0, asd_n = 0;
    void add(const ClassReport& m) {
      dice_sum += m.dice;
      ++dice_n;
      if (!std::isnan(m.asd)) {
        asd_sum += m.asd;
        ++asd_n;
      }
    }
    nlohmann::json json() const {
      nlohmann::json j;
      j["cases"] = dice_n;
      j["dice"] = dice_n ? nlohmann::json(dice_sum / static_cast<double>(dice_n))
                         : nlohmann::json(nullptr);
      j["asd"] = asd_n ? nlohmann::json(asd_sum / static_cast<double>(asd_n))
                       : nlohmann::json(nullptr);
      return j;
    }
  };
  Acc all, large, small;
  std::map<std::string, Acc> per_class;
  for (const auto& row : rows) {
    all.add(row.metrics);
    (row.metrics.size_group == "large" ? large : small).add(row.metrics);
    per_class[row.metrics.class_name].add(row.metrics);
  }
  nlohmann::json j;
  j["All"] = all.json();
  j["L."] = large.json();
  j["S."] = small.json();
  for (const auto& [name, acc] : per_class) j["per_class"][name] = acc.json();
  return j.dump(2) + "\n";
}

void write_scatter_csv(const std::string& path, const std::vector<ScatterEntry>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "class_name,voxel_proportion,chvr,dice_delta\n";
  for (const auto& e : entries)
    out << e.class_name << ',' << fmt(e.voxel_proportion) << ',' << fmt(e.chvr) << ','
        << fmt(e.dice_delta) << '\n';
  if (!out) throw DataError("short write to " + path);
}

}  // namespace tak
