#include "protossl/assign.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

namespace protossl {

namespace {

void check_label_classes(const Eigen::Ref<const Mat>& Y) {
  const double n = static_cast<double>(Y.rows());
  for (Index l = 0; l < Y.cols(); ++l) {
    const double pos = Y.col(l).sum();
    if (pos == 0.0) throw std::invalid_argument("score: label " + std::to_string(l) + " is all-negative");
    if (pos == n) throw std::invalid_argument("score: label " + std::to_string(l) + " is all-positive");
  }
}

struct SideStats {
  Vec mean;  // K
  Vec var;
};

SideStats full_stats(const Eigen::Ref<const Mat>& A, const std::vector<Index>& idx) {
  SideStats s;
  s.mean = Vec::Zero(A.cols());
  s.var = Vec::Zero(A.cols());
  for (Index i : idx) s.mean += A.row(i).transpose();
  s.mean /= static_cast<double>(idx.size());
  for (Index i : idx) s.var += (A.row(i).transpose() - s.mean).array().square().matrix();
  s.var /= static_cast<double>(idx.size());
  return s;
}

SideStats resampled_stats(const Eigen::Ref<const Mat>& A, const std::vector<Index>& members,
                          Index draw, int replicates, Rng& rng) {
  SideStats acc;
  acc.mean = Vec::Zero(A.cols());
  acc.var = Vec::Zero(A.cols());
  Vec m(A.cols());
  Vec m2(A.cols());
  for (int r = 0; r < replicates; ++r) {
    m.setZero();
    m2.setZero();
    for (Index d = 0; d < draw; ++d) {
      const Index i = members[rng.bounded(members.size())];
      m += A.row(i).transpose();
      m2 += A.row(i).transpose().array().square().matrix();
    }
    m /= static_cast<double>(draw);
    m2 /= static_cast<double>(draw);
    acc.mean += m;
    acc.var += (m2.array() - m.array().square()).matrix();
  }
  acc.mean /= replicates;
  acc.var /= replicates;
  return acc;
}

}  // namespace

ScoreMatrix score(const Eigen::Ref<const Mat>& A, const Eigen::Ref<const Mat>& Y,
                  const Rng& rng, bool balance, int replicates) {
  if (A.rows() != Y.rows()) {
    throw std::invalid_argument("score: A has " + std::to_string(A.rows()) + " rows, Y has " +
                                std::to_string(Y.rows()));
  }
  check_label_classes(Y);
  const Index num_k = A.cols();
  const Index num_l = Y.cols();

  ScoreMatrix s;
  s.mean_pos.resize(num_k, num_l);
  s.mean_neg.resize(num_k, num_l);
  s.var_pos.resize(num_k, num_l);
  s.var_neg.resize(num_k, num_l);
  s.balance_replicates = balance ? replicates : 0;

  if (!balance) {
    const double n = static_cast<double>(A.rows());
    Vec tpos = Y.colwise().sum();
    Vec tneg = Vec::Constant(num_l, n) - tpos;
    Mat at_y = A.transpose() * Y;                       // K x L
    Mat at_1my = A.transpose() * (Mat::Ones(Y.rows(), num_l) - Y);
    Mat a2 = A.array().square();
    Mat a2t_y = a2.transpose() * Y;
    Mat a2t_1my = a2.transpose() * (Mat::Ones(Y.rows(), num_l) - Y);
    s.mean_pos = at_y.array().rowwise() / tpos.transpose().array();
    s.mean_neg = at_1my.array().rowwise() / tneg.transpose().array();
    s.var_pos = (a2t_y.array().rowwise() / tpos.transpose().array()) -
                s.mean_pos.array().square();
    s.var_neg = (a2t_1my.array().rowwise() / tneg.transpose().array()) -
                s.mean_neg.array().square();
  } else {
    for (Index l = 0; l < num_l; ++l) {
      std::vector<Index> pos, neg;
      for (Index i = 0; i < Y.rows(); ++i) {
        (Y(i, l) > 0 ? pos : neg).push_back(i);
      }
      Rng lrng = rng.substream("balance.label" + std::to_string(l));
      const Index minority = static_cast<Index>(std::min(pos.size(), neg.size()));
      SideStats ps, ns;
      if (pos.size() == neg.size()) {
        ps = full_stats(A, pos);
        ns = full_stats(A, neg);
      } else if (pos.size() > neg.size()) {
        ps = resampled_stats(A, pos, minority, replicates, lrng);
        ns = full_stats(A, neg);
      } else {
        ps = full_stats(A, pos);
        ns = resampled_stats(A, neg, minority, replicates, lrng);
      }
      s.mean_pos.col(l) = ps.mean;
      s.var_pos.col(l) = ps.var;
      s.mean_neg.col(l) = ns.mean;
      s.var_neg.col(l) = ns.var;
    }
  }

  s.Q = (s.mean_pos - s.mean_neg).array() /
        (0.5 * (s.var_pos + s.var_neg).array() + kEps).sqrt();
  return s;
}

namespace {

// Rectangular Jonker-Volgenant shortest augmenting path, minimizing.
// rows <= cols required; costs shifted nonnegative by the caller.
struct JvResult {
  std::vector<Index> col4row;
  std::vector<Index> row4col;
  Vec u, v;  // optimal duals of the shifted problem
};

JvResult jv_solve(const Mat& cost) {
  const Index n = cost.rows();
  const Index m = cost.cols();
  JvResult res;
  res.col4row.assign(static_cast<std::size_t>(n), -1);
  res.row4col.assign(static_cast<std::size_t>(m), -1);
  res.u = Vec::Zero(n);
  res.v = Vec::Zero(m);

  std::vector<Index> path(static_cast<std::size_t>(m), -1);
  std::vector<char> in_sr(static_cast<std::size_t>(n));
  std::vector<char> in_sc(static_cast<std::size_t>(m));
  Vec shortest(m);
  std::vector<Index> remaining(static_cast<std::size_t>(m));

  for (Index cur_row = 0; cur_row < n; ++cur_row) {
    std::fill(in_sr.begin(), in_sr.end(), 0);
    std::fill(in_sc.begin(), in_sc.end(), 0);
    shortest.setConstant(std::numeric_limits<double>::infinity());
    std::iota(remaining.begin(), remaining.end(), Index{0});
    Index num_remaining = m;

    double min_val = 0;
    Index i = cur_row;
    Index sink = -1;
    while (sink == -1) {
      in_sr[static_cast<std::size_t>(i)] = 1;
      Index index = -1;
      double lowest = std::numeric_limits<double>::infinity();
      for (Index it = 0; it < num_remaining; ++it) {
        const Index j = remaining[static_cast<std::size_t>(it)];
        const double r = min_val + cost(i, j) - res.u(i) - res.v(j);
        if (r < shortest(j)) {
          path[static_cast<std::size_t>(j)] = i;
          shortest(j) = r;
        }
        if (shortest(j) < lowest ||
            (shortest(j) == lowest && res.row4col[static_cast<std::size_t>(j)] == -1)) {
          lowest = shortest(j);
          index = it;
        }
      }
      min_val = lowest;
      if (!std::isfinite(min_val)) throw std::runtime_error("solve_lap: infeasible instance");
      const Index j = remaining[static_cast<std::size_t>(index)];
      if (res.row4col[static_cast<std::size_t>(j)] == -1) {
        sink = j;
      } else {
        i = res.row4col[static_cast<std::size_t>(j)];
      }
      in_sc[static_cast<std::size_t>(j)] = 1;
      remaining[static_cast<std::size_t>(index)] = remaining[static_cast<std::size_t>(--num_remaining)];
    }

    res.u(cur_row) += min_val;
    for (Index r = 0; r < n; ++r) {
      if (in_sr[static_cast<std::size_t>(r)] && r != cur_row) {
        res.u(r) += min_val - shortest(res.col4row[static_cast<std::size_t>(r)]);
      }
    }
    for (Index j = 0; j < m; ++j) {
      if (in_sc[static_cast<std::size_t>(j)]) res.v(j) -= min_val - shortest(j);
    }

    // augment along the alternating path back to cur_row
    Index j = sink;
    for (;;) {
      const Index pi = path[static_cast<std::size_t>(j)];
      res.row4col[static_cast<std::size_t>(j)] = pi;
      std::swap(res.col4row[static_cast<std::size_t>(pi)], j);
      if (pi == cur_row) break;
    }
  }
  return res;
}

double jv_objective(const Mat& cost, const std::vector<Index>& col4row) {
  double total = 0;
  for (Index r = 0; r < static_cast<Index>(col4row.size()); ++r) {
    total += cost(r, col4row[static_cast<std::size_t>(r)]);
  }
  return total;
}

// Lexicographically smallest optimal assignment: sequentially fix each slot
// to the smallest zero-reduced-cost prototype that still completes to the
// optimal objective. Skipped entirely when the optimum is unique.
std::vector<Index> lex_refine(const Mat& cost, const JvResult& first, double tol) {
  const Index n = cost.rows();
  const Index m = cost.cols();
  std::vector<std::vector<Index>> cand(static_cast<std::size_t>(n));
  bool any_tie = false;
  for (Index s = 0; s < n; ++s) {
    for (Index k = 0; k < m; ++k) {
      if (cost(s, k) - first.u(s) - first.v(k) <= tol) {
        cand[static_cast<std::size_t>(s)].push_back(k);
      }
    }
    if (cand[static_cast<std::size_t>(s)].size() > 1) any_tie = true;
  }
  if (!any_tie) return first.col4row;

  const double best_total = jv_objective(cost, first.col4row);
  std::vector<Index> fixed(static_cast<std::size_t>(n), -1);
  std::set<Index> used;
  double fixed_cost = 0;

  for (Index s = 0; s < n; ++s) {
    for (Index k : cand[static_cast<std::size_t>(s)]) {
      if (used.count(k)) continue;
      // complete the remaining slots over the remaining prototypes
      std::vector<Index> rest_cols;
      for (Index c = 0; c < m; ++c) {
        if (c != k && !used.count(c)) rest_cols.push_back(c);
      }
      const Index rem_rows = n - s - 1;
      double completion = 0;
      if (rem_rows > 0) {
        Mat sub(rem_rows, static_cast<Index>(rest_cols.size()));
        for (Index r = 0; r < rem_rows; ++r) {
          for (std::size_t c = 0; c < rest_cols.size(); ++c) {
            sub(r, static_cast<Index>(c)) = cost(s + 1 + r, rest_cols[c]);
          }
        }
        auto sol = jv_solve(sub);
        completion = jv_objective(sub, sol.col4row);
      }
      if (fixed_cost + cost(s, k) + completion <= best_total + tol) {
        fixed[static_cast<std::size_t>(s)] = k;
        used.insert(k);
        fixed_cost += cost(s, k);
        break;
      }
    }
    if (fixed[static_cast<std::size_t>(s)] < 0) {
      // numerical safety net: keep the solver's choice
      fixed[static_cast<std::size_t>(s)] = first.col4row[static_cast<std::size_t>(s)];
      used.insert(fixed[static_cast<std::size_t>(s)]);
      fixed_cost += cost(s, fixed[static_cast<std::size_t>(s)]);
    }
  }
  return fixed;
}

SlotAssignment assign_from_cols(const Eigen::Ref<const Mat>& slot_scores, Index num_labels,
                                Index slots_per_label) {
  const Index k = slot_scores.rows();
  const Index total_slots = num_labels * slots_per_label;
  if (num_labels < 1 || slots_per_label < 1) {
    throw std::invalid_argument("solve_lap: need at least one label and one slot");
  }
  if (k < total_slots) {
    throw std::invalid_argument("solve_lap: capacity violated, need K >= L*M but K=" +
                                std::to_string(k) + " < L*M=" + std::to_string(total_slots));
  }
  if (!slot_scores.allFinite()) throw std::invalid_argument("solve_lap: non-finite scores");

  // maximize q == minimize shifted -q
  Mat cost(total_slots, k);
  for (Index s = 0; s < total_slots; ++s) cost.row(s) = -slot_scores.col(s).transpose();
  const double shift = cost.minCoeff();
  cost.array() -= shift;

  auto sol = jv_solve(cost);
  const double tol = 1e-9 * (1.0 + cost.cwiseAbs().maxCoeff());
  auto col4row = lex_refine(cost, sol, tol);

  SlotAssignment out;
  for (Index s = 0; s < total_slots; ++s) {
    SlotEntry e;
    e.label = static_cast<int>(s / slots_per_label);
    e.slot = static_cast<int>(s % slots_per_label);
    e.prototype = col4row[static_cast<std::size_t>(s)];
    e.q = slot_scores(e.prototype, s);
    out.slots.push_back(e);
    out.objective += e.q;
  }
  return out;
}

}  // namespace

SlotAssignment solve_lap(const Eigen::Ref<const Mat>& Q, Index num_labels,
                         Index slots_per_label) {
  if (Q.cols() != num_labels) {
    throw std::invalid_argument("solve_lap: Q has " + std::to_string(Q.cols()) +
                                " columns, expected " + std::to_string(num_labels));
  }
  // replicate each label column M times -> one column per slot
  Mat slot_scores(Q.rows(), num_labels * slots_per_label);
  for (Index l = 0; l < num_labels; ++l) {
    for (Index mslot = 0; mslot < slots_per_label; ++mslot) {
      slot_scores.col(l * slots_per_label + mslot) = Q.col(l);
    }
  }
  return assign_from_cols(slot_scores, num_labels, slots_per_label);
}

SlotAssignment solve_lap_slots(const Eigen::Ref<const Mat>& Qslots, Index num_labels,
                               Index slots_per_label) {
  if (Qslots.cols() != num_labels * slots_per_label) {
    throw std::invalid_argument("solve_lap_slots: expected " +
                                std::to_string(num_labels * slots_per_label) + " columns");
  }
  return assign_from_cols(Qslots, num_labels, slots_per_label);
}

void apply(PrototypeBank& bank, const SlotAssignment& assignment) {
  for (auto& rec : bank.records) {
    rec.label = -1;
    rec.slot = -1;
  }
  for (const auto& e : assignment.slots) {
    if (e.prototype < 0 || e.prototype >= bank.size()) {
      throw std::invalid_argument("apply: prototype index out of range");
    }
    auto& rec = bank.records[static_cast<std::size_t>(e.prototype)];
    rec.label = e.label;
    rec.slot = e.slot;
  }
}

Mat slot_matrix(const PrototypeBank& bank, const SlotAssignment& assignment) {
  Mat out(static_cast<Index>(assignment.slots.size()), bank.dim());
  for (std::size_t i = 0; i < assignment.slots.size(); ++i) {
    out.row(static_cast<Index>(i)) = bank.P.row(assignment.slots[i].prototype);
  }
  return out;
}

PoolResult pool_assign_acts(const Eigen::Ref<const Mat>& A, const Eigen::Ref<const Mat>& Y,
                            Index num_labels, Index slots_per_label, const PoolConfig& cfg) {
  const Index k = A.cols();
  const Index total_slots = num_labels * slots_per_label;
  if (k < total_slots) {
    throw std::invalid_argument("pool_assign: capacity violated, K=" + std::to_string(k) +
                                " < L*M=" + std::to_string(total_slots));
  }
  const auto t0 = std::chrono::steady_clock::now();

  Rng rng(cfg.seed, "pool_assign");
  Mat w0(k, total_slots);
  for (Index r = 0; r < k; ++r)
    for (Index c = 0; c < total_slots; ++c) w0(r, c) = 0.01 * rng.gaussian();
  auto w = ad::leaf(w0, "pool.w");
  Mat h0(total_slots, num_labels);
  for (Index r = 0; r < total_slots; ++r)
    for (Index c = 0; c < num_labels; ++c) h0(r, c) = 0.01 * rng.gaussian();
  auto head_w = ad::leaf(h0, "pool.head_w");
  auto head_b = ad::leaf(Mat::Zero(1, num_labels), "pool.head_b");

  auto a_const = ad::constant(A);
  Mat ones_k = Mat::Ones(1, k);

  // same-label off-diagonal slot pairs
  Mat same_label = Mat::Zero(total_slots, total_slots);
  double pair_count = 0;
  for (Index i = 0; i < total_slots; ++i) {
    for (Index j = 0; j < total_slots; ++j) {
      if (i != j && i / slots_per_label == j / slots_per_label) {
        same_label(i, j) = 1.0;
        pair_count += 1.0;
      }
    }
  }

  auto softmax_cols_t = [&] {
    // softmax over K within each slot column; returned transposed (slots x K)
    auto wt = ad::transpose(w);
    auto lse = ad::logsumexp_rows(wt);
    auto spread = ad::matmul(lse, ad::constant(ones_k));
    return ad::exp(ad::sub(wt, spread));
  };

  auto forward = [&] {
    auto smax_t = softmax_cols_t();
    auto slot_acts = ad::matmul(a_const, ad::transpose(smax_t));  // N x LM
    auto logits = ad::add_rowvec(ad::matmul(slot_acts, head_w), head_b);
    auto ce = ad::mean(ad::sub(ad::softplus(logits), ad::mul_const(logits, Y)));
    ad::NodePtr loss = ce;
    if (pair_count > 0 && cfg.orth_weight != 0) {
      auto slot_cos = ad::cosine_sim_matrix(smax_t, smax_t);
      auto orth = ad::scale(ad::sum(ad::mul_const(slot_cos, same_label)), 1.0 / pair_count);
      loss = ad::add(ce, ad::scale(orth, cfg.orth_weight));
    }
    return loss;
  };

  PoolResult result;
  std::vector<ad::NodePtr> params{w, head_w, head_b};
  std::vector<ad::AdamState> state;
  ad::AdamConfig adam;
  adam.lr = cfg.lr;
  for (int step = 0; step < cfg.steps; ++step) {
    auto loss = forward();
    const double lv = ad::scalar_value(loss);
    if (!std::isfinite(lv)) throw std::runtime_error("pool_assign: non-finite loss at step " +
                                                     std::to_string(step));
    result.loss_curve.push_back(lv);
    ad::backward(loss);
    ad::adamw_step(params, state, adam);
  }

  // harden on the learned soft-assignment matrix
  Mat wt = w->value.transpose();
  Mat smax(k, total_slots);
  for (Index s = 0; s < total_slots; ++s) {
    const double mx = wt.row(s).maxCoeff();
    Vec e = (wt.row(s).array() - mx).exp();
    smax.col(s) = e / e.sum();
  }
  result.assignment = solve_lap_slots(smax, num_labels, slots_per_label);
  result.train_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0).count();
  return result;
}

PoolResult pool_assign(const Model& m, const Dataset& target_train, Index slots_per_label,
                       const PoolConfig& cfg) {
  Activations act = activations(m, target_train.X);
  return pool_assign_acts(act.A, target_train.Y, target_train.num_labels(), slots_per_label,
                          cfg);
}

}  // namespace protossl
