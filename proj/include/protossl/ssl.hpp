#pragma once

#include "protossl/model.hpp"

namespace protossl {

struct SslConfig {
  double temperature{0.1};
  double koleo_weight{1.0};
  Index batch_groups{64};  // view pairs per step
  double lr{1e-3};
  double weight_decay{0.01};
  int max_epochs{30};
  int plateau_patience{3};
  double plateau_factor{0.1};
  int early_stop_patience{10};
  std::uint64_t seed{0};

  void validate() const;
};

/// NT-Xent over projected activations. Rows of z are view pairs (2n, 2n+1);
/// similarity is cosine; the mean runs over both directions of every pair.
/// A single pair is legal (no negatives, loss 0).
ad::NodePtr nt_xent(const ad::NodePtr& z, double temperature);

/// Mean negative log nearest-neighbour distance of row-normalized prototypes.
/// Distances are floored at kEps inside the log, so duplicate rows give
/// -log(kEps) instead of an infinity.
ad::NodePtr koleo(const ad::NodePtr& prototypes);

struct EpochRow {
  int epoch{0};
  double train_ntxent{0};
  double train_koleo{0};
  double val_ntxent{0};
  double lr{0};
};

struct PretrainResult {
  std::vector<EpochRow> curve;
  int epochs_run{0};
  double initial_val{std::numeric_limits<double>::infinity()};  // before any update
  double best_val{std::numeric_limits<double>::infinity()};
};

/// Joint self-supervised training of encoder, bank and head. Views are the
/// two members of each corpus group. Validation NT-Xent drives the plateau
/// LR schedule and early stopping; the best-validation weights are restored
/// on exit. Throws after restoring the last finite state if a loss goes
/// non-finite.
PretrainResult pretrain(Model& m, const Dataset& corpus_train, const Dataset& corpus_val,
                        const SslConfig& cfg);

/// Loss curve as CSV text (epoch, train_ntxent, train_koleo, val_ntxent, lr).
std::string curve_csv(const std::vector<EpochRow>& curve);

}  // namespace protossl
