#pragma once

#include "protossl/assign.hpp"

namespace protossl {

struct SupLossWeights {
  double clst{0.004};
  double sep{0.0004};
  double div{250.0};
  double cntrst{300.0};

  void validate() const;
};

/// Pairwise label co-occurrence frequencies from a training label matrix:
/// f(l,l') = mean_n Y(n,l)*Y(n,l'), diagonal zeroed.
Mat cooccurrence(const Eigen::Ref<const Mat>& Y);

struct SupLossParts {
  ad::NodePtr total, ce, clst, sep, div, cntrst;
};

// Label-supervised prototype objective over a batch. `slots` holds the
// assigned prototype rows ordered by (label, slot); `head_w`/`head_b` is the
// trainable linear classifier producing per-label logits.
//   ce      mean binary cross-entropy of the head logits
//   clst    mean over positive (sample,label) of 1 - best in-label activation
//   sep     mean over negative (sample,label) of max(0, best in-label activation)
//   div     mean over same-label slot pairs of max(0, cos - 0.3)^2
//   cntrst  co-occurrence-weighted sum over label pairs of 1 - mean cross cosine
SupLossParts sup_losses(const EncoderLeaves& enc, const ad::NodePtr& slots,
                        const ad::NodePtr& head_w, const ad::NodePtr& head_b,
                        const Mat& window_rows, Index windows_per_sample,
                        const Mat& y_batch, Index slots_per_label,
                        const Mat& cooccur, const SupLossWeights& weights);

struct FinetuneConfig {
  double lr{1e-4};
  double weight_decay{0.01};
  Index batch{128};
  int max_epochs{20};
  int plateau_patience{3};
  double plateau_factor{0.1};
  int early_stop_patience{10};
  std::uint64_t seed{0};
};

struct FinetuneRow {
  int epoch{0};
  double train_loss{0};
  double val_loss{0};
  double lr{0};
};

struct FinetuneResult {
  std::vector<FinetuneRow> curve;
  int epochs_run{0};
  double initial_val{0};
  double best_val{0};
};

/// Joint label-supervised update of encoder and assigned slot prototypes.
/// Unassigned prototypes are untouched; the contrastive projection head is
/// frozen. Best-validation weights are restored on exit.
FinetuneResult finetune(Model& m, const Dataset& train, const Dataset& val,
                        const SlotAssignment& assignment, const SupLossWeights& weights,
                        const FinetuneConfig& cfg);

enum class ProjectionMode { label_supervised, pit, pip };

ProjectionMode projection_mode_from_string(const std::string& s);
std::string to_string(ProjectionMode mode);

struct ProjectionEntry {
  Index prototype{0};
  int label{-1};
  int slot{-1};
  Index sample{0};
  Index window{0};
  double activation{0};
};

/// Ground each assigned slot onto its most-activating training window:
/// label_supervised restricts candidates to windows of samples positive for
/// the slot's label; pit scans all target windows; pip scans the pretrain
/// corpus (required for that mode). Ties break to the lowest
/// (sample, window). The bank rows are replaced by the chosen window
/// embeddings, bit-exact, and provenance is recorded.
std::vector<ProjectionEntry> project(Model& m, const Dataset& target_train,
                                     const SlotAssignment& assignment, ProjectionMode mode,
                                     const Dataset* pretrain_corpus = nullptr);

/// Label-free projection of the entire bank (the no-assignment ablations).
std::vector<ProjectionEntry> project_bank(Model& m, const Dataset& corpus);

// Per-label L2-regularized logistic probe over z-scored activations.
struct Classifier {
  Mat W;  // features x labels
  Vec b;  // labels
  Vec means, stds;  // z-score statistics from training activations
  Mat predict(const Eigen::Ref<const Mat>& a_raw) const;  // probabilities
};

struct ProbeConfig {
  double c{0.0005};  // inverse regularization strength
  int max_iter{100};
  double tol{1e-8};
};

/// Deterministic Newton optimization of mean BCE + ||w||^2 / (2 C N) per
/// label, zero-initialized, bias unpenalized. Throws on a single-class label.
Classifier train_probe(const Eigen::Ref<const Mat>& a_raw, const Eigen::Ref<const Mat>& Y,
                       const ProbeConfig& cfg);

struct CoefficientRow {
  int label{0};
  double or_pos{1};   // exp(mean beta+)
  double or_neg{1};   // exp(mean beta-)
  double ratio{std::numeric_limits<double>::quiet_NaN()};  // NaN when no beta-
};

struct CoefficientReport {
  std::vector<CoefficientRow> rows;
  double mean_ratio{std::numeric_limits<double>::quiet_NaN()};
};

/// Partition probe coefficients by whether the feature's slot is assigned to
/// the predicted label. feature_labels[f] = label of slot feature f.
CoefficientReport coefficient_report(const Classifier& clf,
                                     const std::vector<int>& feature_labels);

}  // namespace protossl
