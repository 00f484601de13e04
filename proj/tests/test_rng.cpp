#include <doctest.h>

#include <algorithm>
#include <cstdint>
#include <vector>

#include "tak/rng.hpp"

using namespace tak;

TEST_CASE("uniform stays in [0,1) and matches Monte-Carlo moments") {
  Rng rng(123);
  const int n = 200000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
    sum2 += u * u;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  // E[U]=1/2, Var[U]=1/12; n=2e5 gives ~0.0006 std error on the mean.
  CHECK(mean == doctest::Approx(0.5).epsilon(0.01));
  CHECK(var == doctest::Approx(1.0 / 12.0).epsilon(0.02));
}

TEST_CASE("normal matches standard moments") {
  Rng rng(7);
  const int n = 200000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sum2 += x * x;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  CHECK(mean == doctest::Approx(0.0).epsilon(1.0).scale(0.01));
  CHECK(var == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("uniform_index is in range and roughly uniform") {
  Rng rng(99);
  const uint64_t n = 7;
  std::vector<int> counts(n, 0);
  const int draws = 70000;
  for (int i = 0; i < draws; ++i) {
    const uint64_t k = rng.uniform_index(n);
    REQUIRE(k < n);
    counts[k]++;
  }
  for (int c : counts) CHECK(c == doctest::Approx(draws / static_cast<double>(n)).epsilon(0.05));
}

TEST_CASE("shuffle produces a permutation; same seed reproduces it") {
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[static_cast<size_t>(i)] = i;
  std::vector<int> a = v, b = v;
  Rng r1(42), r2(42);
  r1.shuffle(a);
  r2.shuffle(b);
  CHECK(a == b);
  std::vector<int> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == v);
}

TEST_CASE("sample_without_replacement yields k distinct indices in range") {
  Rng rng(5);
  auto s = rng.sample_without_replacement(20, 8);
  REQUIRE(s.size() == 8);
  std::sort(s.begin(), s.end());
  for (size_t i = 0; i < s.size(); ++i) {
    CHECK(s[i] >= 0);
    CHECK(s[i] < 20);
    if (i) CHECK(s[i] != s[i - 1]);
  }
}

TEST_CASE("seeding is deterministic and seed-sensitive") {
  Rng a(1), b(1), c(2);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 100; ++i) {
    const uint64_t xa = a.next_u64(), xb = b.next_u64(), xc = c.next_u64();
    all_equal = all_equal && (xa == xb);
    any_diff = any_diff || (xa != xc);
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("fnv1a64 matches published test vectors") {
  // Reference values from the FNV specification (64-bit FNV-1a).
  CHECK(fnv1a64(std::string("")) == 0xcbf29ce484222325ull);
  CHECK(fnv1a64(std::string("a")) == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a64(std::string("foobar")) == 0x85944171f73967e8ull);
}
