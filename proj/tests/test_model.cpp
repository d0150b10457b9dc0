#include "protossl/model.hpp"

#include <nlohmann/json.hpp>
#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace protossl;
namespace fs = std::filesystem;

namespace {

Model tiny_model(Index prototypes = 8) {
  ModelConfig mc;
  mc.prototypes = prototypes;
  mc.hidden = 16;
  mc.emb_dim = 6;
  return make_model(mc, WindowSpec{10, 5}, 2, 40, Rng(21, "model"));
}

Mat random_samples(Index n, Index cols, Rng& rng) {
  Mat x(n, cols);
  for (Index r = 0; r < n; ++r)
    for (Index c = 0; c < cols; ++c) x(r, c) = rng.gaussian();
  return x;
}

}  // namespace

TEST_CASE("patch_embed shapes and degenerate weights") {
  Model m = tiny_model();
  Rng rng(4, "x");
  Mat X = random_samples(3, 2 * 40, rng);

  Mat emb = patch_embed(m, X.row(0));
  CHECK(emb.rows() == m.window.count(40));  // 7 windows
  CHECK(emb.cols() == 6);

  // zero weights, zero bias -> all-zero embeddings
  Model z = tiny_model();
  z.enc.w1.setZero();
  z.enc.w2.setZero();
  CHECK(patch_embed(z, X.row(0)).cwiseAbs().maxCoeff() == 0.0);

  // identical windows -> identical rows
  Mat flat = Mat::Zero(1, 2 * 40);
  Mat emb2 = patch_embed(m, flat.row(0));
  for (Index w = 1; w < emb2.rows(); ++w) CHECK(emb2.row(w) == emb2.row(0));
}

TEST_CASE("first-layer preactivation reproduces the raw window under identity weights") {
  ModelConfig mc;
  mc.prototypes = 4;
  mc.hidden = 10;  // = C*W
  mc.emb_dim = 10;
  Model m = make_model(mc, WindowSpec{10, 5}, 1, 20, Rng(3, "model"));
  m.enc.w1 = Mat::Identity(10, 10);
  m.enc.b1.setZero();
  m.enc.w2 = Mat::Identity(10, 10);
  m.enc.b2.setZero();
  Vec sample = Vec::LinSpaced(20, 1.0, 20.0);  // positive, so ReLU is transparent
  Mat emb = patch_embed(m, sample);
  CHECK(emb.row(0).transpose() == sample.head(10));
}

TEST_CASE("activations: range, argmax bookkeeping, prototype scale invariance") {
  Model m = tiny_model();
  Rng rng(8, "x");
  Mat X = random_samples(5, 2 * 40, rng);

  Activations act = activations(m, X);
  CHECK(act.A.rows() == 5);
  CHECK(act.A.cols() == 8);
  CHECK(act.A.maxCoeff() <= 1.0);
  CHECK(act.A.minCoeff() >= -1.0);

  // recompute each recorded (sample, argmax-window) similarity independently
  for (Index n = 0; n < X.rows(); ++n) {
    Mat emb = patch_embed(m, X.row(n));
    for (Index k = 0; k < m.bank.size(); ++k) {
      const Index w = act.argmax(n, k);
      const double direct = cosine_sim(emb.row(w).transpose(), m.bank.P.row(k).transpose());
      CHECK(std::abs(act.A(n, k) - direct) < 1e-12);
      for (Index ww = 0; ww < emb.rows(); ++ww) {
        CHECK(cosine_sim(emb.row(ww).transpose(), m.bank.P.row(k).transpose()) <=
              act.A(n, k) + 1e-12);
      }
    }
  }

  // scaling one prototype row leaves its activation column unchanged
  Model scaled = m;
  scaled.bank.P.row(3) *= 7.5;
  Activations act2 = activations(scaled, X);
  CHECK((act2.A.col(3) - act.A.col(3)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("prototype equal to a window embedding activates at exactly 1") {
  Model m = tiny_model();
  Rng rng(9, "x");
  Mat X = random_samples(2, 2 * 40, rng);
  Mat emb = patch_embed(m, X.row(1));
  m.bank.P.row(0) = emb.row(3);
  Activations act = activations(m, X);
  CHECK(act.A(1, 0) == 1.0);

  // prototype orthogonal to every window embedding of an all-zero sample: zero
  // embeddings have floored norms, cosine 0
  Mat Z = Mat::Zero(1, 2 * 40);
  Model zm = tiny_model();
  zm.enc.w1.setZero();
  zm.enc.w2.setZero();
  zm.enc.b1.setZero();
  zm.enc.b2.setZero();
  Activations za = activations(zm, Z);
  CHECK(za.A.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("head shapes and degenerate weights") {
  Model m = tiny_model(8);
  CHECK(m.head.w2.cols() == 4);  // K/2

  Model m2 = tiny_model(2);
  CHECK(m2.head.w2.cols() == 1);  // floor(2/2)

  Rng rng(2, "a");
  Mat A = random_samples(6, 8, rng);
  Mat Z = head_forward(m.head, A);
  CHECK(Z.rows() == 6);
  CHECK(Z.cols() == 4);

  Model zh = tiny_model(8);
  zh.head.w1.setZero();
  zh.head.w2.setZero();
  zh.head.b1.setZero();
  zh.head.b2.setZero();
  CHECK(head_forward(zh.head, A).cwiseAbs().maxCoeff() == 0.0);

  Mat A2 = A;
  A2.row(3) = A2.row(0);
  Mat Z2 = head_forward(m.head, A2);
  CHECK(Z2.row(3) == Z2.row(0));

  CHECK_THROWS_AS(head_forward(m.head, random_samples(2, 5, rng)), std::invalid_argument);
}

TEST_CASE("training graph matches the inference path") {
  Model m = tiny_model();
  Rng rng(14, "x");
  Mat X = random_samples(4, 2 * 40, rng);

  Activations ref = activations(m, X);
  auto enc = encoder_leaves(m.enc, "enc");
  auto bank = ad::leaf(m.bank.P, "bank.P");
  Mat wins = all_windows(X, m.channels, m.timesteps, m.window);
  auto node = graph_activations(enc, bank, wins, m.window.count(m.timesteps));
  CHECK((node->value - ref.A).cwiseAbs().maxCoeff() < 1e-12);

  auto head = head_leaves(m.head, "head");
  auto z = graph_head(head, node);
  Mat zref = head_forward(m.head, ref.A);
  CHECK((z->value - zref).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  Model m = tiny_model();
  m.bank.records[2].label = 1;
  m.bank.records[2].slot = 0;
  m.bank.records[2].sample = 17;
  m.bank.records[2].window = 3;

  const fs::path d1 = fs::temp_directory_path() / "protossl_ckpt_a";
  const fs::path d2 = fs::temp_directory_path() / "protossl_ckpt_b";
  fs::remove_all(d1);
  fs::remove_all(d2);
  save_model(m, d1, {{"stage", "test"}});
  Model r = load_model(d1);
  save_model(r, d2, {{"stage", "test"}});

  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  };
  CHECK(slurp(d1 / "data.bin") == slurp(d2 / "data.bin"));
  CHECK(slurp(d1 / "manifest.json") == slurp(d2 / "manifest.json"));
  CHECK(r.bank.records[2].label == 1);
  CHECK(r.bank.records[2].sample == 17);
  CHECK(r.window.width == m.window.width);
  fs::remove_all(d1);
  fs::remove_all(d2);
}
