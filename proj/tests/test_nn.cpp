#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "tak/nn.hpp"

using namespace tak;

TEST_CASE("registry counts parameters and rejects duplicate names") {
  ParamRegistry reg;
  Rng rng(1);
  make_linear(reg, "fc", 4, 3, rng);
  CHECK(reg.parameter_count() == 15);  // 4*3 weights + 3 biases
  CHECK(reg.find("fc/w") != nullptr);
  CHECK(reg.find("fc/b") != nullptr);
  CHECK(reg.find("nope") == nullptr);
  CHECK_THROWS_AS(reg.add("fc/w", Tensor({2})), ConfigError);
}

TEST_CASE("zero_grad clears accumulated gradients") {
  ParamRegistry reg;
  Rng rng(2);
  LinearLayer fc = make_linear(reg, "fc", 3, 2, rng);
  Var x = make_constant(Tensor({3}, {1.0, 2.0, 3.0}));
  backward(ops::sum(fc(x)));
  bool any_nonzero = false;
  for (double g : fc.w->grad.data) any_nonzero = any_nonzero || g != 0.0;
  CHECK(any_nonzero);
  reg.zero_grad();
  for (double g : fc.w->grad.data) CHECK(g == 0.0);
}

TEST_CASE("same seed produces identical initialization") {
  ParamRegistry r1, r2;
  Rng a(7), b(7);
  LinearLayer f1 = make_linear(r1, "fc", 8, 8, a);
  LinearLayer f2 = make_linear(r2, "fc", 8, 8, b);
  CHECK(f1.w->value.data == f2.w->value.data);
}

TEST_CASE("archive round-trips named arrays bit-exactly") {
  const std::string path = "test_archive.takc";
  Tensor t1({2, 3}, {1.5, -2.25, 0.0, 1e-300, 3.14159, -0.5});
  Tensor t2({4}, {1.0, 2.0, 3.0, 4.0});
  save_archive(path, "{\"epoch\":3}", {{"layer/w", &t1}, {"layer/b", &t2}});
  Archive a = load_archive(path);
  CHECK(a.meta_json == "{\"epoch\":3}");
  REQUIRE(a.arrays.size() == 2);
  REQUIRE(a.find("layer/w") != nullptr);
  CHECK(a.find("layer/w")->shape == t1.shape);
  CHECK(a.find("layer/w")->data == t1.data);
  CHECK(a.find("layer/b")->data == t2.data);
  CHECK(a.find("missing") == nullptr);
  std::remove(path.c_str());
}

TEST_CASE("archive rejects wrong magic and truncation") {
  const std::string path = "test_bad.takc";
  {
    std::ofstream f(path, std::ios::binary);
    f << "NOPE-this-is-not-an-archive";
  }
  CHECK_THROWS_AS(load_archive(path), FormatError);
  {
    std::ofstream f(path, std::ios::binary);
    f << "TAKC";  // magic only, then EOF
  }
  CHECK_THROWS_AS(load_archive(path), FormatError);
  CHECK_THROWS_AS(load_archive("no_such_file.takc"), FormatError);
  std::remove(path.c_str());
}
