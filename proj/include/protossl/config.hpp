#pragma once

#include "protossl/eval.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>

namespace protossl {

// One JSON document drives the whole pipeline. Unknown keys are rejected
// with their field path; every default is echoed back into the effective
// config written next to each output.
struct PipelineConfig {
  std::uint64_t seed{0};
  std::string root{"runs/default"};

  GenConfig gen{};
  ModelConfig model{};
  SslConfig ssl{};

  struct AssignSection {
    Index slots_per_label{2};
    bool balance{true};
    int replicates{8};
  } assign;

  SupLossWeights sup_weights{};
  FinetuneConfig finetune{};

  struct ProjectSection {
    ProjectionMode mode{ProjectionMode::label_supervised};
    std::string source_stage{"assign"};  // assign | finetune
  } project;

  ProbeConfig probe{};

  struct EvalSection {
    std::vector<Condition> conditions = all_conditions();
    std::vector<Index> sizes{1024, 256, 64};
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    int bootstrap_resamples{1000};
    bool source_projection{true};
    FinetuneConfig supproto = supproto_defaults();
  } eval;

  struct BenchSection {
    Index prototypes{1000};
    Index labels{12};
    Index slots_per_label{14};
    Index samples{10000};
    Index emb_dim{32};
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    PoolConfig pool{};
    bool balance{true};
  } bench;

  EvalPlan eval_plan() const;
};

/// Strict parse: throws std::invalid_argument with the offending field path.
PipelineConfig parse_config(const nlohmann::json& j);
PipelineConfig load_config_file(const std::filesystem::path& file);

/// Every effective value, defaults resolved.
nlohmann::json config_echo(const PipelineConfig& cfg);

/// Raised when a required input artifact is absent (CLI exit code 3).
struct MissingInput : std::runtime_error {
  explicit MissingInput(const std::string& path)
      : std::runtime_error("missing input artifact: " + path) {}
};

}  // namespace protossl
