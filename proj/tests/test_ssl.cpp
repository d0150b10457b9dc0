#include "protossl/ssl.hpp"

#include "fd_check.hpp"

#include <doctest.h>

using namespace protossl;
using protossl::testing::fd_check;

namespace {

Mat random_mat(Index r, Index c, Rng& rng) {
  Mat m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = rng.gaussian();
  return m;
}

Model tiny_model_k(Index prototypes, std::uint64_t seed = 21) {
  ModelConfig mc;
  mc.prototypes = prototypes;
  mc.hidden = 24;
  mc.emb_dim = 8;
  return make_model(mc, WindowSpec{20, 10}, 3, 200, Rng(seed, "model"));
}

GenConfig tiny_gen() {
  GenConfig cfg;
  cfg.pretrain_groups = 24;
  cfg.pretrain_val_groups = 6;
  cfg.target_train = 32;
  cfg.target_val = 16;
  cfg.target_test = 16;
  return cfg;
}

SslConfig tiny_ssl() {
  SslConfig cfg;
  cfg.batch_groups = 8;
  cfg.max_epochs = 4;
  cfg.seed = 5;
  return cfg;
}

Model tiny_model(std::uint64_t seed = 21) { return tiny_model_k(16, seed); }

}  // namespace

TEST_CASE("nt_xent with a single pair is zero") {
  Mat z(2, 4);
  z << 1, 0, 0, 0, 0.5, 0.5, 0, 0;
  auto loss = nt_xent(ad::constant(z), 0.7);
  CHECK(ad::scalar_value(loss) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("nt_xent closed form: identical pairs, orthogonal across") {
  // rows: pair 0 = (u,u), pair 1 = (v,v), u orthogonal to v
  Mat z(4, 2);
  z << 1, 0, 1, 0, 0, 1, 0, 1;
  auto loss = nt_xent(ad::constant(z), 0.5);
  const double expected = std::log(std::exp(2.0) + 2.0) - 2.0;
  CHECK(std::abs(ad::scalar_value(loss) - expected) <= 1e-9);
}

TEST_CASE("nt_xent is invariant to swapping views within pairs") {
  Rng rng(3, "ntx");
  Mat z = random_mat(8, 5, rng);
  Mat swapped = z;
  for (Index n = 0; n < 4; ++n) swapped.row(2 * n).swap(swapped.row(2 * n + 1));
  const double a = ad::scalar_value(nt_xent(ad::constant(z), 0.2));
  const double b = ad::scalar_value(nt_xent(ad::constant(swapped), 0.2));
  CHECK(std::abs(a - b) < 1e-12);
}

TEST_CASE("nt_xent rejects odd row counts") {
  CHECK_THROWS_AS(nt_xent(ad::constant(Mat::Ones(3, 2)), 0.5), std::invalid_argument);
}

TEST_CASE("koleo analytic values") {
  Mat p(2, 2);
  p << 1, 0, 0, 1;
  CHECK(std::abs(ad::scalar_value(koleo(ad::constant(p))) - (-std::log(std::sqrt(2.0)))) <= 1e-9);

  // normalized duplicates hit the epsilon floor
  Mat dup(2, 2);
  dup << 1, 0, 2, 0;
  CHECK(ad::scalar_value(koleo(ad::constant(dup))) ==
        doctest::Approx(-std::log(1e-8)).epsilon(1e-9));

  // positive row scaling is invisible
  Rng rng(6, "koleo");
  Mat q = random_mat(5, 3, rng);
  const double base = ad::scalar_value(koleo(ad::constant(q)));
  Mat scaled = 3.0 * q;
  CHECK(std::abs(ad::scalar_value(koleo(ad::constant(scaled))) - base) < 1e-12);
  CHECK_THROWS_AS(koleo(ad::constant(Mat::Ones(1, 3))), std::invalid_argument);
}

TEST_CASE("nt_xent and koleo gradients match finite differences") {
  Rng rng(9, "fd");
  double worst = 0;
  for (int t = 0; t < 5; ++t) {
    auto z = ad::leaf(random_mat(6, 4, rng), "z");
    worst = std::max(worst, fd_check({z}, [&] { return nt_xent(z, 0.3); }).max_rel_err);
    auto p = ad::leaf(random_mat(5, 4, rng), "p");
    worst = std::max(worst, fd_check({p}, [&] { return koleo(p); }).max_rel_err);
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("pretrain: zero epochs leaves the model unchanged") {
  auto data = generate(tiny_gen(), Rng(4, "gen"));
  Model m = tiny_model();
  Model before = m;
  SslConfig cfg = tiny_ssl();
  cfg.max_epochs = 0;
  auto res = pretrain(m, data.pretrain_train, data.pretrain_val, cfg);
  CHECK(res.epochs_run == 0);
  CHECK(m.bank.P == before.bank.P);
  CHECK(m.enc.w1 == before.enc.w1);
  CHECK(m.head.w1 == before.head.w1);
}

TEST_CASE("pretrain improves validation loss and spreads prototypes") {
  GenConfig g = tiny_gen();
  g.pretrain_groups = 96;
  g.pretrain_val_groups = 24;
  g.noise_sigma = 0.2;
  g.distractor_motifs = 0;  // keep the miniature task learnable in a few epochs
  auto data = generate(g, Rng(4, "gen"));
  Model m = tiny_model_k(24);

  auto min_pairwise_dist = [](const Mat& P) {
    Mat pn = P;
    for (Index r = 0; r < pn.rows(); ++r) pn.row(r) /= std::max(pn.row(r).norm(), kEps);
    double best = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < pn.rows(); ++i)
      for (Index j = i + 1; j < pn.rows(); ++j)
        best = std::min(best, (pn.row(i) - pn.row(j)).norm());
    return best;
  };
  const double dist0 = min_pairwise_dist(m.bank.P);

  SslConfig cfg = tiny_ssl();
  cfg.batch_groups = 16;
  cfg.max_epochs = 10;
  auto res = pretrain(m, data.pretrain_train, data.pretrain_val, cfg);
  REQUIRE(res.curve.size() >= 2);
  CHECK(res.best_val < res.initial_val);
  CHECK(res.curve.back().train_ntxent < res.curve.front().train_ntxent);
  CHECK(min_pairwise_dist(m.bank.P) > dist0);
}

TEST_CASE("pretrain is bit-reproducible") {
  auto data = generate(tiny_gen(), Rng(4, "gen"));
  Model a = tiny_model();
  Model b = tiny_model();
  SslConfig cfg = tiny_ssl();
  auto ra = pretrain(a, data.pretrain_train, data.pretrain_val, cfg);
  auto rb = pretrain(b, data.pretrain_train, data.pretrain_val, cfg);
  CHECK(a.bank.P == b.bank.P);
  CHECK(a.enc.w1 == b.enc.w1);
  CHECK(a.enc.w2 == b.enc.w2);
  CHECK(a.head.w1 == b.head.w1);
  CHECK(ra.curve.size() == rb.curve.size());
  for (std::size_t i = 0; i < ra.curve.size(); ++i) {
    CHECK(ra.curve[i].val_ntxent == rb.curve[i].val_ntxent);
  }
}
