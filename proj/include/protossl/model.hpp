#pragma once

#include "protossl/autodiff.hpp"
#include "protossl/core.hpp"
#include "protossl/datagen.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>

namespace protossl {

// Windowed MLP encoder: flattened C*W window -> hidden (ReLU) -> D.
struct Encoder {
  Mat w1, b1, w2, b2;
  Index in_dim() const { return w1.rows(); }
  Index out_dim() const { return w2.cols(); }
};

struct PrototypeRecord {
  int label{-1};             // assigned downstream label, -1 = unassigned
  int slot{-1};              // slot index within the label
  std::int64_t sample{-1};   // projection source sample, -1 = latent
  std::int64_t window{-1};   // projection source window
  bool assigned() const { return label >= 0; }
  bool projected() const { return sample >= 0; }
};

struct PrototypeBank {
  Mat P;  // K x D
  std::vector<PrototypeRecord> records;
  Index size() const { return P.rows(); }
  Index dim() const { return P.cols(); }
};

// Contrastive projection head: K -> K (ReLU) -> floor(K/2). Biases included.
struct ProjectionHead {
  Mat w1, b1, w2, b2;
};

struct ModelConfig {
  Index prototypes{256};
  Index hidden{64};
  Index emb_dim{32};
};

struct Model {
  Encoder enc;
  PrototypeBank bank;
  ProjectionHead head;
  WindowSpec window;
  Index channels{0};
  Index timesteps{0};
};

Encoder make_encoder(Index in, Index hidden, Index out, Rng rng);
PrototypeBank make_bank(Index prototypes, Index dim, Rng rng);  // rows uniform on the sphere
ProjectionHead make_head(Index prototypes, Rng rng);
Model make_model(const ModelConfig& cfg, const WindowSpec& window, Index channels,
                 Index timesteps, const Rng& rng);

/// Rows-in, rows-out MLP forward.
Mat encode(const Encoder& enc, const Eigen::Ref<const Mat>& rows);

/// Window embeddings of a single flattened sample: (windows x D).
Mat patch_embed(const Model& m, const Eigen::Ref<const Vec>& sample);

/// All windows of all samples, stacked: (N * windows_per_sample) x (C*W).
Mat all_windows(const Eigen::Ref<const Mat>& X, Index channels, Index timesteps,
                const WindowSpec& spec);

/// Cosine similarities between row sets with kEps-floored norms (never NaN).
Mat cosine_matrix(const Eigen::Ref<const Mat>& a, const Eigen::Ref<const Mat>& b);

struct Activations {
  Mat A;  // N x K, max-over-windows cosine
  Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic> argmax;  // winning window per (n,k)
};

/// Max-over-window prototype activations against an arbitrary prototype row set.
Activations activations_vs(const Model& m, const Eigen::Ref<const Mat>& X,
                           const Eigen::Ref<const Mat>& P);
/// Against the model's own bank.
Activations activations(const Model& m, const Eigen::Ref<const Mat>& X);

Mat head_forward(const ProjectionHead& head, const Eigen::Ref<const Mat>& A);

// --- autodiff mirrors for training -----------------------------------------

struct EncoderLeaves {
  ad::NodePtr w1, b1, w2, b2;
  std::vector<ad::NodePtr> all() const { return {w1, b1, w2, b2}; }
};
struct HeadLeaves {
  ad::NodePtr w1, b1, w2, b2;
  std::vector<ad::NodePtr> all() const { return {w1, b1, w2, b2}; }
};

EncoderLeaves encoder_leaves(const Encoder& enc, const std::string& prefix);
HeadLeaves head_leaves(const ProjectionHead& head, const std::string& prefix);
void write_back(Encoder& enc, const EncoderLeaves& l);
void write_back(ProjectionHead& head, const HeadLeaves& l);

ad::NodePtr graph_encode(const EncoderLeaves& l, const Mat& rows);
/// Activations for stacked window rows: ((B*wps) x CW) -> B x K.
ad::NodePtr graph_activations(const EncoderLeaves& enc, const ad::NodePtr& bank,
                              const Mat& window_rows, Index windows_per_sample);
ad::NodePtr graph_head(const HeadLeaves& head, const ad::NodePtr& acts);

// --- checkpoints ------------------------------------------------------------

void save_model(const Model& m, const std::filesystem::path& dir,
                const nlohmann::json& extra);
Model load_model(const std::filesystem::path& dir);

}  // namespace protossl
