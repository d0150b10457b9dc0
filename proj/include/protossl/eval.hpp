#pragma once

#include "protossl/adapt.hpp"
#include "protossl/ssl.hpp"

#include <functional>
#include <map>

namespace protossl {

/// Rank-based AUROC with midrank tie handling. Throws when labels are single-class.
double auroc(const Eigen::Ref<const Vec>& scores, const Eigen::Ref<const Vec>& labels);

Vec per_label_auroc(const Eigen::Ref<const Mat>& scores, const Eigen::Ref<const Mat>& Y);

/// Unweighted mean of per-label AUROCs.
double macro_auroc(const Eigen::Ref<const Mat>& scores, const Eigen::Ref<const Mat>& Y);

struct BootstrapCi {
  double point{0};
  double lo{0};
  double hi{0};
};

/// P(X >= successes) for X ~ Binomial(n, 1/2); the one-sided sign test.
double sign_test_p_greater(int successes, int n);

// Stratified bootstrap of macro AUROC: strata are groups of identical label
// rows, each resampled with replacement at its own size, so no resample can
// lose a class. RngLike needs `std::uint64_t bounded(std::uint64_t)`.
template <typename RngLike>
BootstrapCi bootstrap_ci(const Eigen::Ref<const Mat>& scores, const Eigen::Ref<const Mat>& Y,
                         int resamples, RngLike& rng) {
  if (resamples < 1) throw std::invalid_argument("bootstrap_ci: resamples must be >= 1");
  BootstrapCi ci;
  ci.point = macro_auroc(scores, Y);

  // strata keyed by the exact label pattern
  std::map<std::vector<int>, std::vector<Index>> strata;
  for (Index n = 0; n < Y.rows(); ++n) {
    std::vector<int> key(static_cast<std::size_t>(Y.cols()));
    for (Index l = 0; l < Y.cols(); ++l) key[static_cast<std::size_t>(l)] = Y(n, l) > 0;
    strata[key].push_back(n);
  }

  std::vector<double> macros;
  macros.reserve(static_cast<std::size_t>(resamples));
  Mat rs(scores.rows(), scores.cols());
  Mat ry(Y.rows(), Y.cols());
  for (int r = 0; r < resamples; ++r) {
    Index at = 0;
    for (const auto& [key, members] : strata) {
      for (std::size_t i = 0; i < members.size(); ++i) {
        const Index pick = members[static_cast<std::size_t>(
            rng.bounded(static_cast<std::uint64_t>(members.size())))];
        rs.row(at) = scores.row(pick);
        ry.row(at) = Y.row(pick);
        ++at;
      }
    }
    macros.push_back(macro_auroc(rs, ry));
  }
  std::sort(macros.begin(), macros.end());
  const auto rank = [&](double q) {
    const auto idx = static_cast<std::size_t>(
        std::min<double>(static_cast<double>(macros.size()) - 1,
                         std::max(0.0, std::ceil(q * static_cast<double>(macros.size())) - 1)));
    return macros[idx];
  };
  ci.lo = rank(0.025);
  ci.hi = rank(0.975);
  return ci;
}

// --- benchmark: LAP-based assignment vs the Pool ablation --------------------

struct BenchRow {
  std::uint64_t seed{0};
  double score_ms{0};
  double solve_ms{0};
  double pool_ms{0};
  double lap_objective{0};
  double pool_objective{0};
};

/// Times score+solve_lap against pool_assign on identical synthetic
/// activation matrices (cosines of random embeddings vs random prototypes).
std::vector<BenchRow> bench_assign(Index prototypes, Index num_labels, Index slots_per_label,
                                   Index samples, Index emb_dim,
                                   const std::vector<std::uint64_t>& seeds,
                                   const PoolConfig& pool_cfg, bool balance = true);

std::string bench_csv(const std::vector<BenchRow>& rows);

// --- the evaluation matrix ----------------------------------------------------

enum class Condition {
  protossl_probe,
  protossl_tuned,
  supproto_direct,
  supproto_pretrained,
  random_assign,
  pit,
  pip,
};

Condition condition_from_string(const std::string& s);
std::string to_string(Condition c);
std::vector<Condition> all_conditions();

/// From-scratch supervised prototype training (baselines) wants a stronger
/// schedule than gentle fine-tuning of a pretrained bank.
inline FinetuneConfig supproto_defaults() {
  FinetuneConfig f;
  f.lr = 1e-3;
  f.max_epochs = 30;
  return f;
}

struct EvalPlan {
  std::vector<Condition> conditions = all_conditions();
  std::vector<Index> sizes;  // descending nested subset sizes; empty = full train
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  int bootstrap_resamples{1000};
  Index slots_per_label{2};
  bool balance{true};
  SupLossWeights sup_weights{};
  FinetuneConfig finetune_cfg{};
  ProbeConfig probe_cfg{};
  FinetuneConfig supproto_cfg = supproto_defaults();
  ModelConfig model_cfg{};        // architecture for from-scratch baselines
  bool source_projection{true};   // project the supervised source bank before transfer
};

struct EvalCell {
  Condition condition{};
  Index train_size{0};
  std::uint64_t seed{0};
  bool ok{false};
  std::string error;
  double macro{0}, ci_lo{0}, ci_hi{0};
  Vec label_auroc;
  double mean_coef_ratio{std::numeric_limits<double>::quiet_NaN()};
  double runtime_ms{0};
};

struct EvalMatrix {
  std::vector<EvalCell> cells;
  bool all_ok() const;
};

/// Provides the seed's SSL-pretrained model; throws when unavailable (the
/// cell fails and the matrix continues).
using ModelProvider = std::function<Model(std::uint64_t seed)>;

/// Runs every (condition, size, seed) cell on the generated corpus. Source
/// corpora are required only by supproto_pretrained.
EvalMatrix run_matrix(const GenOutput& data, const EvalPlan& plan,
                      const ModelProvider& pretrained);

std::string eval_csv(const EvalMatrix& m, const std::vector<std::string>& label_names);
std::string eval_timing_csv(const EvalMatrix& m);

}  // namespace protossl
