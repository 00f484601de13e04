#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "tak/errors.hpp"
#include "tak/metrics.hpp"
#include "tak/rng.hpp"

using namespace tak;

namespace {

IntGrid grid_of(int d, int h, int w, const std::vector<int32_t>& v) {
  IntGrid g(d, h, w);
  g.v = v;
  return g;
}

// ---------------------------------------------------------------------------
// Independent ASD oracle: own boundary definition, exhaustive pair distances.
std::vector<std::array<int, 3>> oracle_boundary(const IntGrid& m) {
  std::vector<std::array<int, 3>> out;
  auto inside = [&](int z, int y, int x) {
    if (z < 0 || y < 0 || x < 0 || z >= m.dims[0] || y >= m.dims[1] || x >= m.dims[2]) return false;
    return m.at(z, y, x) != 0;
  };
  for (int z = 0; z < m.dims[0]; ++z)
    for (int y = 0; y < m.dims[1]; ++y)
      for (int x = 0; x < m.dims[2]; ++x) {
        if (!inside(z, y, x)) continue;
        if (!inside(z - 1, y, x) || !inside(z + 1, y, x) || !inside(z, y - 1, x) ||
            !inside(z, y + 1, x) || !inside(z, y, x - 1) || !inside(z, y, x + 1))
          out.push_back({z, y, x});
      }
  return out;
}

double oracle_asd(const IntGrid& a, const IntGrid& b, const Spacing& sp) {
  const auto ba = oracle_boundary(a);
  const auto bb = oracle_boundary(b);
  auto nearest = [&](const std::array<int, 3>& p, const std::vector<std::array<int, 3>>& set) {
    double best = 1e300;
    for (const auto& q : set) {
      const double dz = (p[0] - q[0]) * sp[0];
      const double dy = (p[1] - q[1]) * sp[1];
      const double dx = (p[2] - q[2]) * sp[2];
      best = std::min(best, std::sqrt(dz * dz + dy * dy + dx * dx));
    }
    return best;
  };
  double total = 0;
  for (const auto& p : ba) total += nearest(p, bb);
  for (const auto& p : bb) total += nearest(p, ba);
  return total / static_cast<double>(ba.size() + bb.size());
}

IntGrid random_mask(Rng& rng, int d, int h, int w, double fill) {
  IntGrid g(d, h, w);
  bool any = false;
  for (auto& v : g.v) {
    v = rng.uniform() < fill ? 1 : 0;
    any = any || v;
  }
  if (!any) g.v[rng.uniform_index(g.v.size())] = 1;
  return g;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("dice: closed forms, symmetry, errors") {
  IntGrid a = grid_of(1, 1, 4, {1, 1, 0, 0});
  IntGrid b = grid_of(1, 1, 4, {0, 1, 1, 0});
  CHECK(dice(a, a) == doctest::Approx(1.0));
  CHECK(dice(a, b) == doctest::Approx(0.5));  // |A|=2, |B|=2, intersection 1
  CHECK(dice(b, a) == doctest::Approx(dice(a, b)));
  IntGrid disjoint = grid_of(1, 1, 4, {0, 0, 1, 1});
  CHECK(dice(a, disjoint) == doctest::Approx(0.0));
  IntGrid empty(1, 1, 4);
  CHECK(dice(empty, empty) == doctest::Approx(1.0));  // both-empty convention
  CHECK(dice(a, empty) == doctest::Approx(0.0));
  IntGrid other(1, 2, 4);
  CHECK_THROWS_AS(dice(a, other), ShapeError);
}

TEST_CASE("dice: monotone under growing intersection") {
  IntGrid gt(1, 1, 8);
  for (int i = 0; i < 4; ++i) gt.v[static_cast<size_t>(i)] = 1;
  double prev = -1;
  IntGrid pred(1, 1, 8);
  for (int i = 0; i < 4; ++i) {
    pred.v[static_cast<size_t>(i)] = 1;  // one more correct voxel each round
    const double d = dice(pred, gt);
    CHECK(d > prev);
    prev = d;
  }
  CHECK(prev == doctest::Approx(1.0));
}

TEST_CASE("boundary: erosion difference under 6-connectivity") {
  // Solid 3x3x3 cube: all voxels except the center are boundary.
  IntGrid cube(5, 5, 5);
  for (int z = 1; z <= 3; ++z)
    for (int y = 1; y <= 3; ++y)
      for (int x = 1; x <= 3; ++x) cube.at(z, y, x) = 1;
  CHECK(boundary_voxels(cube).size() == 26);
  // A mask touching the volume edge is boundary there.
  IntGrid corner(2, 2, 2);
  for (auto& v : corner.v) v = 1;
  CHECK(boundary_voxels(corner).size() == 8);
  IntGrid single(3, 3, 3);
  single.at(1, 1, 1) = 1;
  REQUIRE(boundary_voxels(single).size() == 1);
  CHECK(boundary_voxels(single)[0] == std::array<int, 3>{1, 1, 1});
}

TEST_CASE("asd: closed forms") {
  IntGrid a(3, 3, 7);
  a.at(1, 1, 1) = 1;
  IntGrid b(3, 3, 7);
  b.at(1, 1, 4) = 1;  // 3 voxels apart on x
  CHECK(asd(a, a, {1, 1, 1}) == doctest::Approx(0.0));
  CHECK(asd(a, b, {1, 1, 1}) == doctest::Approx(3.0));
  CHECK(asd(a, b, {1, 1, 0.5}) == doctest::Approx(1.5));  // spacing scales distances
  IntGrid empty(3, 3, 7);
  CHECK_THROWS_AS(asd(a, empty, {1, 1, 1}), UndefinedSurface);
  CHECK_THROWS_AS(asd(empty, b, {1, 1, 1}), UndefinedSurface);
}

TEST_CASE("asd: matches the exhaustive oracle on random masks") {
  Rng rng(2024);
  for (int rep = 0; rep < 20; ++rep) {
    const int d = 3 + static_cast<int>(rng.uniform_index(4));
    const int h = 3 + static_cast<int>(rng.uniform_index(4));
    const int w = 3 + static_cast<int>(rng.uniform_index(4));
    IntGrid a = random_mask(rng, d, h, w, 0.3);
    IntGrid b = random_mask(rng, d, h, w, 0.3);
    const Spacing sp = {0.5 + rng.uniform() * 2.0, 0.5 + rng.uniform() * 2.0,
                        0.5 + rng.uniform() * 2.0};
    const double got = asd(a, b, sp);
    const double want = oracle_asd(a, b, sp);
    CHECK(got == doctest::Approx(want).epsilon(1e-9));
    CHECK(asd(b, a, sp) == doctest::Approx(got).epsilon(1e-12));  // symmetry
  }
}

TEST_CASE("chvr: solids that are their own hull") {
  // Solid cuboid: ratio exactly 1.
  IntGrid cuboid(6, 5, 7);
  for (int z = 1; z <= 3; ++z)
    for (int y = 0; y <= 4; ++y)
      for (int x = 2; x <= 5; ++x) cuboid.at(z, y, x) = 1;
  CHECK(convex_hull_volume_ratio(cuboid) == doctest::Approx(1.0).epsilon(1e-12));
  IntGrid single(3, 3, 3);
  single.at(1, 1, 1) = 1;
  CHECK(convex_hull_volume_ratio(single) == doctest::Approx(1.0).epsilon(1e-12));
  IntGrid rod(1, 1, 9);
  for (auto& v : rod.v) v = 1;
  CHECK(convex_hull_volume_ratio(rod) == doctest::Approx(1.0).epsilon(1e-12));
  IntGrid empty(2, 2, 2);
  CHECK_THROWS_AS(convex_hull_volume_ratio(empty), EmptyMask);
}

TEST_CASE("chvr: L-shape against analytic value and Monte-Carlo oracle") {
  // Three unit voxels forming an L in the y-x plane: (y,x) in {(0,0), (1,0),
  // (0,1)}, one layer thick. Hull = prism over the pentagon with vertices
  // (0,0), (2,0), (2,1), (1,2), (0,2); area 3.5, so ratio 3.5/3.
  IntGrid L(1, 4, 4);
  L.at(0, 0, 0) = 1;
  L.at(0, 1, 0) = 1;
  L.at(0, 0, 1) = 1;
  const double got = convex_hull_volume_ratio(L);
  CHECK(got == doctest::Approx(3.5 / 3.0).epsilon(1e-12));
  CHECK(got > 1.0);

  // Monte-Carlo containment oracle from the hand-derived half-spaces
  // 0<=z<=1, x>=0, y>=0, x<=2, y<=2, x+y<=3 over the box [0,2]^2 x [0,1].
  Rng rng(7);
  const int n = 400000;
  int inside = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform() * 2.0, y = rng.uniform() * 2.0, z = rng.uniform();
    (void)z;
    if (x + y <= 3.0) ++inside;
  }
  const double mc_volume = 4.0 * static_cast<double>(inside) / n;  // box volume 2*2*1
  CHECK(got * 3.0 == doctest::Approx(mc_volume).epsilon(0.01));
}

TEST_CASE("chvr: plus-sign fixture against analytic value and Monte-Carlo oracle") {
  // Five voxels in a plus: center (1,1) plus four arms, one layer thick.
  // Hull = prism over the octagon cut from [0,3]^2 by the four unit corner
  // triangles: area 9 - 2 = 7, so ratio 7/5.
  IntGrid plus(1, 4, 4);
  plus.at(0, 1, 1) = 1;
  plus.at(0, 0, 1) = 1;
  plus.at(0, 2, 1) = 1;
  plus.at(0, 1, 0) = 1;
  plus.at(0, 1, 2) = 1;
  const double got = convex_hull_volume_ratio(plus);
  CHECK(got == doctest::Approx(7.0 / 5.0).epsilon(1e-12));

  Rng rng(8);
  const int n = 400000;
  int inside = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform() * 3.0, y = rng.uniform() * 3.0;
    if (x + y >= 1.0 && x + y <= 5.0 && x - y <= 2.0 && y - x <= 2.0) ++inside;
  }
  const double mc_volume = 9.0 * static_cast<double>(inside) / n;
  CHECK(got * 5.0 == doctest::Approx(mc_volume).epsilon(0.01));
}

TEST_CASE("chvr: invariant under axis permutation and translation") {
  Rng rng(99);
  IntGrid blob(6, 6, 6);
  for (int z = 1; z < 5; ++z)
    for (int y = 1; y < 5; ++y)
      for (int x = 1; x < 5; ++x)
        if (rng.uniform() < 0.5) blob.at(z, y, x) = 1;
  blob.at(2, 2, 2) = 1;  // nonempty
  const double base = convex_hull_volume_ratio(blob);
  CHECK(base >= 1.0 - 1e-12);

  IntGrid permuted(6, 6, 6);  // (z,y,x) -> (x,z,y)
  for (int z = 0; z < 6; ++z)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) permuted.at(x, z, y) = blob.at(z, y, x);
  CHECK(convex_hull_volume_ratio(permuted) == doctest::Approx(base).epsilon(1e-12));

  IntGrid shifted(9, 9, 9);
  for (int z = 0; z < 6; ++z)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) shifted.at(z + 2, y + 1, x + 3) = blob.at(z, y, x);
  CHECK(convex_hull_volume_ratio(shifted) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("class_report: proportions, the 5% rule, sentinels") {
  // Ground truth: 95 voxels of class 1, 5 of class 2 in a 10x10x1 slab.
  IntGrid gt(1, 10, 10);
  for (int i = 0; i < 95; ++i) gt.v[static_cast<size_t>(i)] = 1;
  for (int i = 95; i < 100; ++i) gt.v[static_cast<size_t>(i)] = 2;
  IntGrid pred = gt;

  auto reports = class_report(pred, gt, {1, 1, 1}, {"alpha", "beta"});
  REQUIRE(reports.size() == 2);
  CHECK(reports[0].voxel_proportion == doctest::Approx(0.95));
  CHECK(reports[1].voxel_proportion == doctest::Approx(0.05));
  CHECK(reports[0].size_group == "large");
  CHECK(reports[1].size_group == "large");  // 0.05 is not below 5%
  CHECK(reports[0].dice == doctest::Approx(1.0));
  CHECK(reports[0].voxel_proportion + reports[1].voxel_proportion == doctest::Approx(1.0));

  // 96/4 split: the small class drops below the threshold.
  IntGrid gt2 = gt;
  gt2.v[95] = 1;  // 96 vs 4
  auto reports2 = class_report(gt2, gt2, {1, 1, 1}, {"alpha", "beta"});
  CHECK(reports2[0].size_group == "large");
  CHECK(reports2[1].size_group == "small");

  // Single-class ground truth.
  IntGrid solo(1, 2, 2);
  for (auto& v : solo.v) v = 1;
  auto reports3 = class_report(solo, solo, {1, 1, 1}, {"alpha"});
  CHECK(reports3[0].voxel_proportion == doctest::Approx(1.0));
  CHECK(reports3[0].size_group == "large");

  // Class present in gt but absent from pred: dice 0, asd undefined -> NaN.
  IntGrid blank(1, 10, 10);
  auto reports4 = class_report(blank, gt, {1, 1, 1}, {"alpha", "beta"});
  CHECK(reports4[0].dice == doctest::Approx(0.0));
  CHECK(std::isnan(reports4[0].asd));
  CHECK(std::isfinite(reports4[0].chvr));  // gt mask is nonempty

  // Class in the name list but absent from gt entirely: chvr NaN.
  auto reports5 = class_report(gt, gt, {1, 1, 1}, {"alpha", "beta", "gamma"});
  CHECK(std::isnan(reports5[2].chvr));
  CHECK(reports5[2].voxel_proportion == doctest::Approx(0.0));

  CHECK_THROWS_AS(class_report(gt, gt, {1, 1, 1}, {"alpha"}), LabelError);
}

TEST_CASE("parameter_count: learnable elements only") {
  ParamRegistry reg;
  Rng rng(1);
  make_linear(reg, "probe", 4, 3, rng);
  CHECK(parameter_count(reg) == 15);  // 12 weights + 3 biases
  // A frozen text encoder contributes nothing to the registry.
  CHECK(parameter_count(reg) == reg.parameter_count());
}

TEST_CASE("report writers: CSV bytes and JSON summary") {
  std::vector<ReportRow> rows;
  ClassReport a;
  a.class_id = 1;
  a.class_name = "alpha";
  a.dice = 0.5;
  a.asd = 2.0;
  a.voxel_proportion = 0.95;
  a.size_group = "large";
  a.chvr = 1.25;
  ClassReport b;
  b.class_id = 2;
  b.class_name = "beta";
  b.dice = 0.25;
  b.asd = std::numeric_limits<double>::quiet_NaN();
  b.voxel_proportion = 0.05;
  b.size_group = "small";
  b.chvr = 2.0;
  rows.push_back({"case_000", a});
  rows.push_back({"case_000", b});
  ClassReport a2 = a;
  a2.dice = 0.7;
  a2.asd = 1.0;
  rows.push_back({"case_001", a2});

  const std::string path = "test_report_out.csv";
  write_report_csv(path, rows);
  const std::string expect =
      "case_id,class_id,class_name,dice,asd,voxel_proportion,size_group,chvr\n"
      "case_000,1,alpha,0.5,2,0.95,large,1.25\n"
      "case_000,2,beta,0.25,nan,0.05,small,2\n"
      "case_001,1,alpha,0.7,1,0.95,large,1.25\n";
  CHECK(slurp(path) == expect);
  std::remove(path.c_str());

  const auto j = nlohmann::json::parse(summarize_report(rows));
  CHECK(j["All"]["cases"] == 3);
  CHECK(j["All"]["dice"].get<double>() == doctest::Approx((0.5 + 0.25 + 0.7) / 3.0));
  CHECK(j["All"]["asd"].get<double>() == doctest::Approx(1.5));  // NaN excluded
  CHECK(j["L."]["dice"].get<double>() == doctest::Approx(0.6));
  CHECK(j["S."]["dice"].get<double>() == doctest::Approx(0.25));
  CHECK(j["S."]["asd"].is_null());  // the only small-class asd was NaN
  CHECK(j["per_class"]["alpha"]["dice"].get<double>() == doctest::Approx(0.6));

  write_scatter_csv("test_scatter_out.csv", {{"alpha", 0.95, 1.25, -0.125}});
  CHECK(slurp("test_scatter_out.csv") ==
        "class_name,voxel_proportion,chvr,dice_delta\nalpha,0.95,1.25,-0.125\n");
  std::remove("test_scatter_out.csv");
}
