#pragma once

#include "protossl/model.hpp"

namespace protossl {

// Prototype-label association scores: a standardized effect size comparing
// each prototype's activation on label-positive vs label-negative samples.
struct ScoreMatrix {
  Mat Q;  // K x L
  Mat mean_pos, mean_neg, var_pos, var_neg;
  int balance_replicates{0};  // 0 when balancing was off
};

/// Q = (mean+ - mean-) / sqrt(0.5*(var+ + var-) + kEps), population variances.
/// With balance on, the majority side of each label is resampled with
/// replacement down to the minority count, `replicates` times, and the
/// resampled statistics averaged. Throws std::invalid_argument naming any
/// label that is all-positive or all-negative.
ScoreMatrix score(const Eigen::Ref<const Mat>& A, const Eigen::Ref<const Mat>& Y,
                  const Rng& rng, bool balance, int replicates = 8);

struct SlotEntry {
  int label{0};
  int slot{0};
  Index prototype{0};
  double q{0};
};

struct SlotAssignment {
  std::vector<SlotEntry> slots;  // ordered by (label, slot)
  double objective{0};           // sum of q over chosen cells
};

/// Exact rectangular assignment maximizing total q over an injective map of
/// L*M label-slots to prototypes (each label column replicated M times).
/// Ties between equal-objective optima break to the lexicographically
/// smallest prototype vector in (label, slot) order. Throws a capacity error
/// when K < L*M.
SlotAssignment solve_lap(const Eigen::Ref<const Mat>& Q, Index num_labels,
                         Index slots_per_label);

/// Same, but with one score column per slot (K x L*M), as produced by
/// pool_assign's learned weights.
SlotAssignment solve_lap_slots(const Eigen::Ref<const Mat>& Qslots, Index num_labels,
                               Index slots_per_label);

/// Record the assignment in the bank: chosen prototypes get (label, slot),
/// all others are marked unassigned. Projection provenance is untouched.
void apply(PrototypeBank& bank, const SlotAssignment& assignment);

/// Prototype rows of the assigned slots, ordered by (label, slot).
Mat slot_matrix(const PrototypeBank& bank, const SlotAssignment& assignment);

// ProtoPool-style gradient assignment ablation: a per-slot softmax over the
// frozen prototype pool, trained on cross-entropy plus in-label slot
// orthogonality, then hardened to an injective map via the LAP solver.
struct PoolConfig {
  int steps{60};
  double lr{0.05};
  double orth_weight{1.0};
  std::uint64_t seed{0};
};

struct PoolResult {
  SlotAssignment assignment;
  double train_ms{0};
  std::vector<double> loss_curve;
};

PoolResult pool_assign_acts(const Eigen::Ref<const Mat>& A, const Eigen::Ref<const Mat>& Y,
                            Index num_labels, Index slots_per_label, const PoolConfig& cfg);
PoolResult pool_assign(const Model& m, const Dataset& target_train, Index slots_per_label,
                       const PoolConfig& cfg);

}  // namespace protossl
