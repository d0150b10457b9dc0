#pragma once

#include "protossl/core.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace protossl {

// Sliding-window inventory over a multichannel series.
struct WindowSpec {
  Index width{20};
  Index stride{10};

  void validate(Index timesteps) const;
  Index count(Index timesteps) const { return (timesteps - width) / stride + 1; }
};

/// Windows of one flattened sample (layout [c*T + t]); row t of the result is
/// the channel-major flattening [c*W + tau] of the slice starting at t*stride.
Mat window_matrix(const Eigen::Ref<const Vec>& sample, Index channels, Index timesteps,
                  const WindowSpec& spec);

struct Motif {
  Mat waveform;             // channels x width, unit peak amplitude
  std::vector<int> labels;  // labels marked positive when planted
};

struct MotifLibrary {
  std::vector<Motif> motifs;
  Index num_labels{0};
};

// One corpus split. X rows are samples flattened channel-major.
struct Dataset {
  Mat X;  // N x (C*T)
  Mat Y;  // N x L, entries {0,1}
  std::vector<std::int64_t> group_ids;
  std::vector<std::string> label_names;
  std::string split;
  Index channels{0};
  Index timesteps{0};

  Index size() const { return X.rows(); }
  Index num_labels() const { return Y.cols(); }
  Dataset rows(const std::vector<Index>& idx) const;
};

struct GenConfig {
  Index channels{3};
  Index timesteps{200};
  Index num_labels{6};
  WindowSpec window{};
  double noise_sigma{0.3};
  double amp_jitter_lo{0.8};
  double amp_jitter_hi{1.25};
  Index onset_jitter{5};
  int variants_per_label{2};
  bool shared_confounder{true};  // one extra motif mapped to labels 0 and 1
  int distractor_motifs{12};     // label-silent motifs: pretrain structure beyond the task
  int min_motifs{1};
  int max_motifs{3};

  Index pretrain_groups{4096};
  Index pretrain_val_groups{256};
  Index target_train{1024};
  Index target_val{256};
  Index target_test{512};

  bool with_source{false};  // disjoint-label corpus for supervised-pretrain baselines
  Index source_labels{6};
  Index source_train{1024};
  Index source_val{256};

  void validate() const;  // throws std::invalid_argument on an infeasible config
};

struct GenOutput {
  MotifLibrary library;
  Dataset pretrain_train;  // paired views, 2 samples per group
  Dataset pretrain_val;
  Dataset target_train;
  Dataset target_val;
  Dataset target_test;
  std::optional<MotifLibrary> source_library;
  std::optional<Dataset> source_train;
  std::optional<Dataset> source_val;
};

/// Deterministic synthetic corpus: Gaussian background plus 1..3 planted
/// motifs per sample with shared-placement paired views in the pretrain split.
GenOutput generate(const GenConfig& cfg, const Rng& rng);

/// Nested, approximately label-stratified subsets of 0..train.size()-1.
/// Sizes must be descending; the smallest must be >= L. Every label keeps at
/// least one positive in every subset (one injected if stratification
/// dropped them all).
std::vector<std::vector<Index>> nested_subsets(const Dataset& train,
                                               const std::vector<Index>& sizes,
                                               const Rng& rng);

// Dataset persistence in the repo tensor format (X, Y in the blob; labels,
// group ids, split and config echo in the manifest).
void save_dataset(const Dataset& ds, const std::filesystem::path& dir,
                  const nlohmann::json& config_echo);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace protossl
