#include "protossl/eval.hpp"

#include <doctest.h>

using namespace protossl;

namespace {

Vec vec(std::initializer_list<double> v) {
  Vec out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

// RNG stub whose bounded() walks 0,1,2,... per stratum: the identity resample.
struct SequentialStub {
  std::uint64_t at{0};
  std::uint64_t bounded(std::uint64_t n) { return at++ % n; }
};

}  // namespace

TEST_CASE("auroc pinned values") {
  CHECK(auroc(vec({0.9, 0.8, 0.2, 0.1}), vec({1, 1, 0, 0})) == 1.0);
  CHECK(auroc(vec({0.9, 0.4, 0.6, 0.1}), vec({1, 1, 0, 0})) == doctest::Approx(0.75));
  CHECK(auroc(vec({0.5, 0.5, 0.5, 0.5}), vec({1, 1, 0, 0})) == doctest::Approx(0.5));
  CHECK_THROWS_AS(auroc(vec({0.5, 0.5}), vec({1, 1})), std::invalid_argument);
}

TEST_CASE("auroc is invariant under strictly increasing transforms") {
  Rng rng(3, "auroc");
  for (int t = 0; t < 30; ++t) {
    Vec s(40), y(40);
    for (Index i = 0; i < 40; ++i) {
      s(i) = rng.gaussian();
      y(i) = rng.bounded(2) ? 1.0 : 0.0;
    }
    if (y.sum() == 0 || y.sum() == 40) continue;
    Vec warped = (3.0 * s.array() + 1.0).exp();  // strictly increasing
    CHECK(auroc(s, y) == doctest::Approx(auroc(warped, y)).epsilon(1e-12));
  }
}

TEST_CASE("macro auroc is the unweighted mean of per-label aurocs") {
  Rng rng(5, "macro");
  Mat s(30, 3), y(30, 3);
  for (Index i = 0; i < 30; ++i) {
    for (Index l = 0; l < 3; ++l) {
      s(i, l) = rng.gaussian();
      y(i, l) = (i + l) % (2 + l) == 0 ? 1.0 : 0.0;
    }
  }
  Vec per = per_label_auroc(s, y);
  CHECK(std::abs(macro_auroc(s, y) - per.mean()) <= 1e-12);
}

TEST_CASE("bootstrap ci basics") {
  Mat s(8, 1), y(8, 1);
  s << 0.9, 0.8, 0.7, 0.6, 0.4, 0.3, 0.2, 0.1;
  y << 1, 1, 1, 1, 0, 0, 0, 0;

  SUBCASE("perfect scores collapse to 1") {
    Rng rng(1, "boot");
    auto ci = bootstrap_ci(s, y, 50, rng);
    CHECK(ci.point == 1.0);
    CHECK(ci.lo == 1.0);
    CHECK(ci.hi == 1.0);
  }

  SUBCASE("one identity resample collapses to the point value") {
    SequentialStub stub;
    auto ci = bootstrap_ci(s, y, 1, stub);
    CHECK(ci.lo == ci.point);
    CHECK(ci.hi == ci.point);
  }

  SUBCASE("point estimate lies inside its own interval") {
    Rng data_rng(9, "boot");
    Mat sr(60, 2), yr(60, 2);
    for (Index i = 0; i < 60; ++i) {
      for (Index l = 0; l < 2; ++l) {
        yr(i, l) = (i % (3 + l) == 0) ? 1.0 : 0.0;
        sr(i, l) = yr(i, l) + 1.5 * data_rng.gaussian();
      }
    }
    Rng rng(2, "boot");
    auto ci = bootstrap_ci(sr, yr, 400, rng);
    CHECK(ci.lo <= ci.point);
    CHECK(ci.point <= ci.hi);
    CHECK(ci.lo < ci.hi);
  }
}

TEST_CASE("sign test tail probabilities") {
  CHECK(sign_test_p_greater(10, 10) == doctest::Approx(std::pow(0.5, 10)));
  CHECK(sign_test_p_greater(0, 10) == doctest::Approx(1.0));
  CHECK(sign_test_p_greater(9, 10) == doctest::Approx(11.0 / 1024.0));
  CHECK(sign_test_p_greater(9, 10) < 0.05);  // the A9 direction check
}

TEST_CASE("bench_assign on a small instance") {
  PoolConfig pc;
  pc.steps = 5;
  auto rows = bench_assign(24, 3, 2, 200, 8, {0, 1}, pc);
  REQUIRE(rows.size() == 2);
  for (const auto& r : rows) {
    CHECK(r.score_ms >= 0);
    CHECK(r.solve_ms >= 0);
    CHECK(r.pool_ms > 0);
  }
  // K = L*M minimal instance: both paths must use every prototype
  PoolConfig pc0;
  pc0.steps = 0;
  auto minimal = bench_assign(6, 3, 2, 100, 4, {7}, pc0);
  CHECK(minimal[0].lap_objective == minimal[0].lap_objective);  // finite
}

TEST_CASE("run_matrix end to end on a miniature corpus") {
  GenConfig gen;
  gen.pretrain_groups = 48;
  gen.pretrain_val_groups = 8;
  gen.target_train = 96;
  gen.target_val = 48;
  gen.target_test = 64;
  gen.with_source = true;
  gen.source_train = 96;
  gen.source_val = 48;
  auto data = generate(gen, Rng(31, "gen"));

  EvalPlan plan;
  plan.sizes = {96, 48};
  plan.seeds = {0};
  plan.bootstrap_resamples = 20;
  plan.slots_per_label = 2;
  plan.model_cfg.prototypes = 24;
  plan.model_cfg.hidden = 24;
  plan.model_cfg.emb_dim = 8;
  plan.finetune_cfg.max_epochs = 2;
  plan.supproto_cfg.max_epochs = 2;

  int provider_calls = 0;
  auto provider = [&](std::uint64_t seed) {
    ++provider_calls;
    Model m = make_model(plan.model_cfg, WindowSpec{20, 10}, gen.channels, gen.timesteps,
                         Rng(seed, "model"));
    SslConfig ssl;
    ssl.batch_groups = 16;
    ssl.max_epochs = 2;
    ssl.seed = seed;
    pretrain(m, data.pretrain_train, data.pretrain_val, ssl);
    return m;
  };

  auto matrix = run_matrix(data, plan, provider);
  CHECK(matrix.cells.size() == 7 * 2);  // |conditions| x |sizes| x |seeds|
  CHECK(provider_calls == 1);           // cached across cells
  for (const auto& c : matrix.cells) {
    INFO(to_string(c.condition), " size ", c.train_size, ": ", c.error);
    CHECK(c.ok);
    CHECK(c.macro >= 0.0);
    CHECK(c.macro <= 1.0);
    CHECK(c.ci_lo <= c.macro);
    CHECK(c.macro <= c.ci_hi);
  }
  CHECK(matrix.all_ok());

  // per-cell determinism: a rerun reproduces every AUROC bit-exactly
  auto matrix2 = run_matrix(data, plan, provider);
  for (std::size_t i = 0; i < matrix.cells.size(); ++i) {
    CHECK(matrix.cells[i].macro == matrix2.cells[i].macro);
  }

  // schema: stable column set
  auto csv = eval_csv(matrix, data.target_train.label_names);
  CHECK(csv.find("condition,train_size,seed,ok,macro_auroc,ci_lo,ci_hi,mean_coef_ratio,"
                 "auroc_label_0") == 0);

  // a missing dependency fails that cell and continues
  GenOutput no_source = data;
  no_source.source_train.reset();
  auto broken = run_matrix(no_source, plan, provider);
  int failed = 0, passed = 0;
  for (const auto& c : broken.cells) {
    if (c.ok) ++passed;
    else ++failed;
  }
  CHECK(failed == 2);  // supproto_pretrained cells only
  CHECK(passed == 12);
  CHECK_FALSE(broken.all_ok());
}
