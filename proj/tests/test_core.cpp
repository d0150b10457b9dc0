#include "protossl/core.hpp"
#include "protossl/tensorio.hpp"

#include <nlohmann/json.hpp>
#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace protossl;
namespace fs = std::filesystem;

namespace {

Vec vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("cosine_sim basic values") {
  CHECK(cosine_sim(vec2(1, 0), vec2(1, 0)) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cosine_sim(vec2(1, 0), vec2(0, 1)) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(cosine_sim(vec2(3, 4), vec2(4, 3)) == doctest::Approx(24.0 / 25.0).epsilon(1e-15));
}

TEST_CASE("cosine_sim self and negation exact") {
  Rng rng(7, "cos");
  for (int t = 0; t < 50; ++t) {
    Vec u(5);
    for (int i = 0; i < 5; ++i) u(i) = rng.uniform(-2, 2);
    if (u.norm() == 0.0) continue;
    CHECK(std::abs(cosine_sim(u, u) - 1.0) < 1e-12);
    CHECK(std::abs(cosine_sim(u, Vec(-u)) + 1.0) < 1e-12);
    const double alpha = rng.uniform(0.1, 5.0);
    Vec v(5);
    for (int i = 0; i < 5; ++i) v(i) = rng.uniform(-2, 2);
    if (v.norm() == 0.0) continue;
    CHECK(std::abs(cosine_sim(Vec(alpha * u), v) - cosine_sim(u, v)) < 1e-12);
  }
}

TEST_CASE("cosine_sim zero-norm errors name the operand") {
  CHECK_THROWS_WITH_AS(cosine_sim(vec2(0, 0), vec2(1, 0)),
                       doctest::Contains("operand u"), std::domain_error);
  CHECK_THROWS_WITH_AS(cosine_sim(vec2(1, 0), vec2(0, 0)),
                       doctest::Contains("operand v"), std::domain_error);
}

TEST_CASE("zscore population statistics") {
  Mat train(2, 1);
  train << 0, 2;
  auto z = zscore_fit_apply(train, train);
  CHECK(z.means(0) == doctest::Approx(1.0));
  CHECK(z.stds(0) == doctest::Approx(1.0));  // population std
  CHECK(z.applied(0, 0) == doctest::Approx(-1.0));
  CHECK(z.applied(1, 0) == doctest::Approx(1.0));

  Mat at_mean(1, 1);
  at_mean << 1.0;
  CHECK(zscore_apply(at_mean, z.means, z.stds)(0, 0) == doctest::Approx(0.0));
}

TEST_CASE("zscore constant column passes through epsilon floor") {
  Mat train(3, 1);
  train << 5, 5, 5;
  auto z = zscore_fit_apply(train, train);
  CHECK(z.applied.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("zscore on own train matrix gives mean 0 std 1") {
  Rng rng(11, "zscore");
  Mat train(40, 6);
  for (Index r = 0; r < train.rows(); ++r)
    for (Index c = 0; c < train.cols(); ++c) train(r, c) = rng.gaussian() * (1.0 + c);
  auto z = zscore_fit_apply(train, train);
  Vec mu = z.applied.colwise().mean();
  CHECK(mu.cwiseAbs().maxCoeff() < 1e-10);
  for (Index c = 0; c < train.cols(); ++c) {
    if (z.stds(c) > kEps) {
      double sd = std::sqrt(z.applied.col(c).array().square().mean());
      CHECK(sd == doctest::Approx(1.0).epsilon(1e-10));
    }
  }
}

TEST_CASE("rng determinism and stream separation") {
  Rng a(42, "perm");
  Rng b(42, "perm");
  auto pa = a.permutation(100);
  auto pb = b.permutation(100);
  CHECK(pa == pb);

  auto pc = Rng(43, "perm").permutation(100);
  CHECK(pa != pc);

  auto pd = Rng(42, "other").permutation(100);
  CHECK(pa != pd);

  CHECK(Rng(1, "x").permutation(1) == std::vector<Index>{0});
  CHECK_THROWS_AS(Rng(1, "x").permutation(0), std::domain_error);
  CHECK_THROWS_AS(Rng(1, "x").bounded(0), std::domain_error);
}

TEST_CASE("rng substream is draw-count independent") {
  Rng a(9, "root");
  Rng b(9, "root");
  (void)b.next_u64();
  (void)b.next_u64();
  CHECK(a.substream("child").next_u64() == b.substream("child").next_u64());
}

TEST_CASE("rng bounded stays in range and covers values") {
  Rng rng(3, "bounded");
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 2000; ++i) hits[rng.bounded(7)]++;
  for (int h : hits) CHECK(h > 0);
}

TEST_CASE("tensor directory round-trips bit-exactly") {
  Rng rng(5, "io");
  Mat m(7, 3);
  for (Index r = 0; r < 7; ++r)
    for (Index c = 0; c < 3; ++c) m(r, c) = rng.gaussian();

  const fs::path dir = fs::temp_directory_path() / "protossl_tio_test";
  fs::remove_all(dir);

  TensorWriter w;
  w.add("m", m);
  w.add("cube", {2, 3, 4}, std::vector<double>(24, 1.5));
  w.set_extra({{"split", "train"}, {"seed", 5}});
  w.save(dir);

  auto td = TensorDir::load(dir);
  CHECK(td.has("m"));
  CHECK(td.extra().at("split") == "train");
  Mat back = td.matrix("m");
  // f32 storage: value equality against the f32-rounded original.
  for (Index r = 0; r < 7; ++r)
    for (Index c = 0; c < 3; ++c)
      CHECK(back(r, c) == static_cast<double>(static_cast<float>(m(r, c))));
  CHECK(td.matrix("cube").rows() == 2);
  CHECK(td.matrix("cube").cols() == 12);

  // Byte-exact re-save.
  const std::string manifest1 = slurp(dir / "manifest.json");
  const std::string blob1 = slurp(dir / "data.bin");
  TensorWriter w2;
  w2.add("m", back);
  w2.add("cube", {2, 3, 4}, td.raw("cube"));
  w2.set_extra({{"split", "train"}, {"seed", 5}});
  const fs::path dir2 = fs::temp_directory_path() / "protossl_tio_test2";
  fs::remove_all(dir2);
  w2.save(dir2);
  CHECK(slurp(dir2 / "manifest.json") == manifest1);
  CHECK(slurp(dir2 / "data.bin") == blob1);

  fs::remove_all(dir);
  fs::remove_all(dir2);
}
