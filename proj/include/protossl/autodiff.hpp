#pragma once

#include "protossl/core.hpp"

#include <functional>
#include <memory>

namespace protossl::ad {

// Reverse-mode autodiff over dense matrices. Graphs are DAGs of shared_ptr
// nodes; backward() zeroes every gradient in the graph, seeds the scalar
// root with 1 and sweeps once in reverse topological order, so repeated
// calls on the same graph are bit-identical. One graph per thread.

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Mat value;
  Mat grad;  // same shape as value once backward has run
  bool requires_grad{false};
  std::string name;  // set on leaves, used in optimizer diagnostics
  const char* op{"leaf"};
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;  // scatters node.grad into parents
};

/// Trainable leaf.
NodePtr leaf(Mat value, std::string name);
/// Non-trainable input.
NodePtr constant(Mat value);

NodePtr add(const NodePtr& a, const NodePtr& b);
/// Broadcast a 1 x C bias over every row of a.
NodePtr add_rowvec(const NodePtr& a, const NodePtr& bias);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);  // elementwise
NodePtr matmul(const NodePtr& a, const NodePtr& b);
NodePtr transpose(const NodePtr& a);
NodePtr scale(const NodePtr& a, double s);
NodePtr add_scalar(const NodePtr& a, double s);
NodePtr add_const(const NodePtr& a, const Mat& c);  // c carries no gradient
NodePtr mul_const(const NodePtr& a, const Mat& c);
NodePtr relu(const NodePtr& a);
NodePtr sigmoid(const NodePtr& a);
/// log(1 + e^x), computed stably.
NodePtr softplus(const NodePtr& a);
NodePtr exp(const NodePtr& a);
NodePtr log(const NodePtr& a);
NodePtr sqrt(const NodePtr& a);
NodePtr square(const NodePtr& a);
NodePtr clamp_min(const NodePtr& a, double lo);
NodePtr row_l2_normalize(const NodePtr& a);
/// Cosine similarities between rows of a and rows of b (norms floored at kEps).
NodePtr cosine_sim_matrix(const NodePtr& a, const NodePtr& b);
/// N x K -> N x 1 max over columns; gradient routes to the lowest-index argmax.
NodePtr rowwise_max(const NodePtr& a);
/// (B*block) x K -> B x K, max over each group of `block` consecutive rows.
NodePtr rowblock_max(const NodePtr& a, Index block);
/// N x (L*block) -> N x L, max over each group of `block` consecutive columns.
NodePtr colblock_max(const NodePtr& a, Index block);
/// N x K -> N x 1 log(sum(exp(row))), stable.
NodePtr logsumexp_rows(const NodePtr& a);
NodePtr sum(const NodePtr& a);   // 1x1
NodePtr mean(const NodePtr& a);  // 1x1

/// Scalar cosine similarity of two row (or column) vector nodes.
NodePtr cosine_sim(const NodePtr& u, const NodePtr& v);

double scalar_value(const NodePtr& n);

/// Reverse sweep from a 1x1 root. Throws on a non-scalar root.
void backward(const NodePtr& root);

// Decoupled-weight-decay Adam. State per parameter; lr and weight_decay are
// per-step arguments so schedules stay outside.
struct AdamState {
  Mat m, v;
  long step{0};
};

struct AdamConfig {
  double lr{1e-3};
  double beta1{0.9};
  double beta2{0.999};
  double eps{1e-8};
  double weight_decay{0.0};
};

/// One AdamW update over params (reading each param's .grad). Throws
/// std::runtime_error naming the parameter on a non-finite gradient.
void adamw_step(const std::vector<NodePtr>& params, std::vector<AdamState>& states,
                const AdamConfig& cfg);

}  // namespace protossl::ad
