#include "protossl/autodiff.hpp"

#include <cmath>
#include <unordered_set>

namespace protossl::ad {

namespace {

NodePtr make(Mat value, const char* op, std::vector<NodePtr> parents,
             std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  n->requires_grad = needs;
  if (needs) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

void ensure_grad(Node& n) {
  if (n.grad.rows() != n.value.rows() || n.grad.cols() != n.value.cols()) {
    n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  }
}

[[noreturn]] void shape_error(const char* op, const Mat& a, const Mat& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                              std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                              " vs " + std::to_string(b.rows()) + "x" +
                              std::to_string(b.cols()));
}

}  // namespace

NodePtr leaf(Mat value, std::string name) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->name = std::move(name);
  return n;
}

NodePtr constant(Mat value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

NodePtr add(const NodePtr& a, const NodePtr& b) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols()) {
    shape_error("add", a->value, b->value);
  }
  return make(a->value + b->value, "add", {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad) { ensure_grad(*n.parents[0]); n.parents[0]->grad += n.grad; }
    if (n.parents[1]->requires_grad) { ensure_grad(*n.parents[1]); n.parents[1]->grad += n.grad; }
  });
}

NodePtr add_rowvec(const NodePtr& a, const NodePtr& bias) {
  if (bias->value.rows() != 1 || bias->value.cols() != a->value.cols()) {
    shape_error("add_rowvec", a->value, bias->value);
  }
  Mat v = a->value.rowwise() + bias->value.row(0);
  return make(std::move(v), "add_rowvec", {a, bias}, [](Node& n) {
    if (n.parents[0]->requires_grad) { ensure_grad(*n.parents[0]); n.parents[0]->grad += n.grad; }
    if (n.parents[1]->requires_grad) {
      ensure_grad(*n.parents[1]);
      n.parents[1]->grad.row(0) += n.grad.colwise().sum();
    }
  });
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols()) {
    shape_error("sub", a->value, b->value);
  }
  return make(a->value - b->value, "sub", {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad) { ensure_grad(*n.parents[0]); n.parents[0]->grad += n.grad; }
    if (n.parents[1]->requires_grad) { ensure_grad(*n.parents[1]); n.parents[1]->grad -= n.grad; }
  });
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols()) {
    shape_error("mul", a->value, b->value);
  }
  return make(a->value.cwiseProduct(b->value), "mul", {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad) {
      ensure_grad(*n.parents[0]);
      n.parents[0]->grad += n.grad.cwiseProduct(n.parents[1]->value);
    }
    if (n.parents[1]->requires_grad) {
      ensure_grad(*n.parents[1]);
      n.parents[1]->grad += n.grad.cwiseProduct(n.parents[0]->value);
    }
  });
}

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
  if (a->value.cols() != b->value.rows()) shape_error("matmul", a->value, b->value);
  return make(a->value * b->value, "matmul", {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad) {
      ensure_grad(*n.parents[0]);
      n.parents[0]->grad.noalias() += n.grad * n.parents[1]->value.transpose();
    }
    if (n.parents[1]->requires_grad) {
      ensure_grad(*n.parents[1]);
      n.parents[1]->grad.noalias() += n.parents[0]->value.transpose() * n.grad;
    }
  });
}

NodePtr transpose(const NodePtr& a) {
  return make(a->value.transpose(), "transpose", {a}, [](Node& n) {
    ensure_grad(*n.parents[0]);
    n.parents[0]->grad += n.grad.transpose();
  });
}

NodePtr scale(const NodePtr& a, double s) {
  return make(a->value * s, "scale", {a}, [s](Node& n) {
    ensure_grad(*n.parents[0]);
    n.parents[0]->grad += n.grad * s;
  });
}

NodePtr add_scalar(const NodePtr& a, double s) {
  return make(a->value.array() + s, "add_scalar", {a}, [](Node& n) {
    ensure_grad(*n.parents[0]);
    n.parents[0]->grad += n.grad;
  });
}

NodePtr add_const(const NodePtr& a, const Mat& c) {
  if (a->value.rows() != c.rows() || a->value.cols() != c.cols()) {
    shape_error("add_const", a->value, c);
  }
  return make(a->value + c, "add_const", {a}, [](Node& n) {
    ensure_grad(*n.parents[0]);
    n.parents[0]->grad += n.grad;
  });
}

NodePtr mul_const(const NodePtr& a, const Mat& c) {
  if (a->value.rows() != c.rows() || a->value.cols() != c.cols()) {
    shape_error("mul_const", a->value, c);
  }
  Mat cc = c;
  return make(a->value.cwiseProduct(c), "mul_const", {a}, [cc](Node& n) {
    ensure_grad(*n.parents[0]);
    n.parents[0]->grad += n.grad.cwiseProduct(cc);
  });
}

NodePtr relu(const NodePtr& a) {
  return make(a->value.cwiseMax(0.0), "relu", {a}, [](Node& n) {
    ensure_grad(*n.parents[0]);
    n.parents[0]->grad.array() +=
        n.grad.array() * (n.parents[0]->value.array() > 0.0).cast<double>();
  });
}

NodePtr sigmoid(const NodePtr& a) {
  Mat v = (1.0 / (1.0 + (-a->value.array()).exp())).matrix();
  Mat vv = v;
  return make(std::move(v), "sigmoid", {a}, [vv](Node& n) {
    ensure_grad(*n.parents[0]);
    n.parents[0]->grad.array() += n.grad.array() * vv.array() * (1.0 - vv.array());
  });
}

NodePtr softplus(const NodePtr& a) {
  // max(x,0) + log1p(exp(-|x|))
  Mat v = a->value.array().max(0.0) +
          (-(a->value.array().abs())).exp().log1p();
  return make(std::move(v), "softplus", {a}, [](Node& n) {
    ensure_grad(*n.parents[0]);
    Eigen::ArrayXXd sig = 1.0 / (1.0 + (-n.parents[0]->value.array()).exp());
    n.parents[0]->grad.array() += n.grad.array() * sig;
  });
}

NodePtr exp(const NodePtr& a) {
  Mat v = a->value.array().exp();
  Mat vv = v;
  return make(std::move(v), "exp", {a}, [vv](Node& n) {
    ensure_grad(*n.parents[0]);
    n.parents[0]->grad.array() += n.grad.array() * vv.array();
  });
}

NodePtr log(const NodePtr& a) {
  return make(a->value.array().log(), "log", {a}, [](Node& n) {
    ensure_grad(*n.parents[0]);
    n.parents[0]->grad.array() += n.grad.array() / n.parents[0]->value.array();
  });
}

NodePtr sqrt(const NodePtr& a) {
  Mat v = a->value.array().sqrt();
  Mat vv = v;
  return make(std::move(v), "sqrt", {a}, [vv](Node& n) {
    ensure_grad(*n.parents[0]);
    n.parents[0]->grad.array() += n.grad.array() / (2.0 * vv.array());
  });
}

NodePtr square(const NodePtr& a) {
  return make(a->value.array().square(), "square", {a}, [](Node& n) {
    ensure_grad(*n.parents[0]);
    n.parents[0]->grad.array() += n.grad.array() * 2.0 * n.parents[0]->value.array();
  });
}

NodePtr clamp_min(const NodePtr& a, double lo) {
  return make(a->value.cwiseMax(lo), "clamp_min", {a}, [lo](Node& n) {
    ensure_grad(*n.parents[0]);
    n.parents[0]->grad.array() +=
        n.grad.array() * (n.parents[0]->value.array() > lo).cast<double>();
  });
}

NodePtr row_l2_normalize(const NodePtr& a) {
  Vec norms = a->value.rowwise().norm().cwiseMax(kEps);
  Mat v = a->value.array().colwise() / norms.array();
  Mat vhat = v;
  return make(std::move(v), "row_l2_normalize", {a}, [norms, vhat](Node& n) {
    ensure_grad(*n.parents[0]);
    // d/dx (x/|x|) : (g - (g . xhat) xhat) / |x|
    for (Index r = 0; r < n.grad.rows(); ++r) {
      const double dot = n.grad.row(r).dot(vhat.row(r));
      n.parents[0]->grad.row(r) += (n.grad.row(r) - dot * vhat.row(r)) / norms(r);
    }
  });
}

NodePtr cosine_sim_matrix(const NodePtr& a, const NodePtr& b) {
  if (a->value.cols() != b->value.cols()) shape_error("cosine_sim_matrix", a->value, b->value);
  return matmul(row_l2_normalize(a), transpose(row_l2_normalize(b)));
}

NodePtr rowwise_max(const NodePtr& a) {
  const Index rows = a->value.rows();
  const Index cols = a->value.cols();
  Mat v(rows, 1);
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    Index best = 0;
    double m = a->value(r, 0);
    for (Index c = 1; c < cols; ++c) {
      if (a->value(r, c) > m) { m = a->value(r, c); best = c; }
    }
    v(r, 0) = m;
    (*argmax)[static_cast<std::size_t>(r)] = best;
  }
  return make(std::move(v), "rowwise_max", {a}, [argmax](Node& n) {
    ensure_grad(*n.parents[0]);
    for (Index r = 0; r < n.grad.rows(); ++r) {
      n.parents[0]->grad(r, (*argmax)[static_cast<std::size_t>(r)]) += n.grad(r, 0);
    }
  });
}

NodePtr rowblock_max(const NodePtr& a, Index block) {
  const Index rows = a->value.rows();
  const Index cols = a->value.cols();
  if (block < 1 || rows % block != 0) {
    throw std::invalid_argument("rowblock_max: " + std::to_string(rows) +
                                " rows not divisible by block " + std::to_string(block));
  }
  const Index groups = rows / block;
  Mat v(groups, cols);
  auto argmax = std::make_shared<std::vector<Index>>(
      static_cast<std::size_t>(groups * cols));
  for (Index g = 0; g < groups; ++g) {
    for (Index c = 0; c < cols; ++c) {
      Index best = g * block;
      double m = a->value(best, c);
      for (Index r = g * block + 1; r < (g + 1) * block; ++r) {
        if (a->value(r, c) > m) { m = a->value(r, c); best = r; }
      }
      v(g, c) = m;
      (*argmax)[static_cast<std::size_t>(g * cols + c)] = best;
    }
  }
  return make(std::move(v), "rowblock_max", {a}, [argmax](Node& n) {
    ensure_grad(*n.parents[0]);
    const Index cols = n.grad.cols();
    for (Index g = 0; g < n.grad.rows(); ++g) {
      for (Index c = 0; c < cols; ++c) {
        n.parents[0]->grad((*argmax)[static_cast<std::size_t>(g * cols + c)], c) +=
            n.grad(g, c);
      }
    }
  });
}

NodePtr colblock_max(const NodePtr& a, Index block) {
  const Index rows = a->value.rows();
  const Index cols = a->value.cols();
  if (block < 1 || cols % block != 0) {
    throw std::invalid_argument("colblock_max: " + std::to_string(cols) +
                                " cols not divisible by block " + std::to_string(block));
  }
  const Index groups = cols / block;
  Mat v(rows, groups);
  auto argmax = std::make_shared<std::vector<Index>>(
      static_cast<std::size_t>(rows * groups));
  for (Index r = 0; r < rows; ++r) {
    for (Index g = 0; g < groups; ++g) {
      Index best = g * block;
      double m = a->value(r, best);
      for (Index c = g * block + 1; c < (g + 1) * block; ++c) {
        if (a->value(r, c) > m) { m = a->value(r, c); best = c; }
      }
      v(r, g) = m;
      (*argmax)[static_cast<std::size_t>(r * groups + g)] = best;
    }
  }
  return make(std::move(v), "colblock_max", {a}, [argmax](Node& n) {
    ensure_grad(*n.parents[0]);
    const Index groups = n.grad.cols();
    for (Index r = 0; r < n.grad.rows(); ++r) {
      for (Index g = 0; g < groups; ++g) {
        n.parents[0]->grad(r, (*argmax)[static_cast<std::size_t>(r * groups + g)]) +=
            n.grad(r, g);
      }
    }
  });
}

NodePtr logsumexp_rows(const NodePtr& a) {
  const Index rows = a->value.rows();
  Mat v(rows, 1);
  Vec rowmax = a->value.rowwise().maxCoeff();
  for (Index r = 0; r < rows; ++r) {
    v(r, 0) = rowmax(r) + std::log((a->value.row(r).array() - rowmax(r)).exp().sum());
  }
  Mat vv = v;
  return make(std::move(v), "logsumexp_rows", {a}, [vv](Node& n) {
    ensure_grad(*n.parents[0]);
    for (Index r = 0; r < n.parents[0]->value.rows(); ++r) {
      n.parents[0]->grad.row(r).array() +=
          n.grad(r, 0) * (n.parents[0]->value.row(r).array() - vv(r, 0)).exp();
    }
  });
}

NodePtr sum(const NodePtr& a) {
  Mat v(1, 1);
  v(0, 0) = a->value.sum();
  return make(std::move(v), "sum", {a}, [](Node& n) {
    ensure_grad(*n.parents[0]);
    n.parents[0]->grad.array() += n.grad(0, 0);
  });
}

NodePtr mean(const NodePtr& a) {
  const double inv = 1.0 / static_cast<double>(a->value.size());
  Mat v(1, 1);
  v(0, 0) = a->value.sum() * inv;
  return make(std::move(v), "mean", {a}, [inv](Node& n) {
    ensure_grad(*n.parents[0]);
    n.parents[0]->grad.array() += n.grad(0, 0) * inv;
  });
}

NodePtr cosine_sim(const NodePtr& u, const NodePtr& v) {
  auto row = [](const NodePtr& x) {
    return x->value.rows() == 1 ? x : transpose(x);
  };
  return cosine_sim_matrix(row(u), row(v));  // 1x1
}

double scalar_value(const NodePtr& n) {
  if (n->value.size() != 1) {
    throw std::invalid_argument("scalar_value: node is " + std::to_string(n->value.rows()) +
                                "x" + std::to_string(n->value.cols()));
  }
  return n->value(0, 0);
}

void backward(const NodePtr& root) {
  if (root->value.rows() != 1 || root->value.cols() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got " +
                                std::to_string(root->value.rows()) + "x" +
                                std::to_string(root->value.cols()));
  }
  // Iterative post-order DFS; deterministic order (parents visited in index order).
  std::vector<Node*> topo;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next].get();
      ++next;
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : topo) n->grad = Mat::Zero(n->value.rows(), n->value.cols());
  root->grad(0, 0) = 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

void adamw_step(const std::vector<NodePtr>& params, std::vector<AdamState>& states,
                const AdamConfig& cfg) {
  if (states.size() != params.size()) states.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    Node& p = *params[i];
    AdamState& st = states[i];
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) {
      p.grad = Mat::Zero(p.value.rows(), p.value.cols());
    }
    if (!p.grad.allFinite()) {
      throw std::runtime_error("adamw_step: non-finite gradient for parameter '" +
                               (p.name.empty() ? std::string("<unnamed>") : p.name) + "'");
    }
    if (st.m.size() == 0) {
      st.m = Mat::Zero(p.value.rows(), p.value.cols());
      st.v = Mat::Zero(p.value.rows(), p.value.cols());
    }
    st.step += 1;
    st.m = cfg.beta1 * st.m + (1.0 - cfg.beta1) * p.grad;
    st.v = cfg.beta2 * st.v.array() + (1.0 - cfg.beta2) * p.grad.array().square();
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    // Decoupled decay, then the Adam move.
    p.value *= (1.0 - cfg.lr * cfg.weight_decay);
    p.value.array() -=
        cfg.lr * (st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + cfg.eps);
  }
}

}  // namespace protossl::ad
