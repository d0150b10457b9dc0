#include "protossl/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <numeric>

namespace protossl {

namespace {

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch()).count();
}

}  // namespace

double auroc(const Eigen::Ref<const Vec>& scores, const Eigen::Ref<const Vec>& labels) {
  const Index n = scores.size();
  if (labels.size() != n) throw std::invalid_argument("auroc: length mismatch");
  double npos = 0;
  for (Index i = 0; i < n; ++i) npos += labels(i) > 0 ? 1 : 0;
  const double nneg = static_cast<double>(n) - npos;
  if (npos == 0 || nneg == 0) throw std::invalid_argument("auroc: labels are single-class");

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::sort(order.begin(), order.end(),
            [&](Index a, Index b) { return scores(a) < scores(b); });

  // midranks over tie groups
  double rank_sum_pos = 0;
  Index i = 0;
  while (i < n) {
    Index j = i;
    while (j + 1 < n && scores(order[static_cast<std::size_t>(j + 1)]) ==
                            scores(order[static_cast<std::size_t>(i)])) {
      ++j;
    }
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based
    for (Index t = i; t <= j; ++t) {
      if (labels(order[static_cast<std::size_t>(t)]) > 0) rank_sum_pos += midrank;
    }
    i = j + 1;
  }
  return (rank_sum_pos - npos * (npos + 1) / 2.0) / (npos * nneg);
}

Vec per_label_auroc(const Eigen::Ref<const Mat>& scores, const Eigen::Ref<const Mat>& Y) {
  if (scores.rows() != Y.rows() || scores.cols() != Y.cols()) {
    throw std::invalid_argument("per_label_auroc: shape mismatch");
  }
  Vec out(Y.cols());
  for (Index l = 0; l < Y.cols(); ++l) out(l) = auroc(scores.col(l), Y.col(l));
  return out;
}

double macro_auroc(const Eigen::Ref<const Mat>& scores, const Eigen::Ref<const Mat>& Y) {
  return per_label_auroc(scores, Y).mean();
}

double sign_test_p_greater(int successes, int n) {
  if (n < 0 || successes < 0 || successes > n) {
    throw std::invalid_argument("sign_test_p_greater: bad counts");
  }
  // P(X >= k), X ~ Bin(n, 1/2); exact with log-free arithmetic for small n
  double p = 0;
  double coeff = 1;  // C(n, 0)
  std::vector<double> binom(static_cast<std::size_t>(n) + 1);
  for (int k = 0; k <= n; ++k) {
    binom[static_cast<std::size_t>(k)] = coeff;
    coeff = coeff * (n - k) / (k + 1);
  }
  const double denom = std::pow(2.0, n);
  for (int k = successes; k <= n; ++k) p += binom[static_cast<std::size_t>(k)] / denom;
  return p;
}

std::vector<BenchRow> bench_assign(Index prototypes, Index num_labels, Index slots_per_label,
                                   Index samples, Index emb_dim,
                                   const std::vector<std::uint64_t>& seeds,
                                   const PoolConfig& pool_cfg, bool balance) {
  if (prototypes < num_labels * slots_per_label) {
    throw std::invalid_argument("bench_assign: capacity violated, K=" +
                                std::to_string(prototypes) + " < L*M=" +
                                std::to_string(num_labels * slots_per_label));
  }
  std::vector<BenchRow> rows;
  for (std::uint64_t seed : seeds) {
    Rng rng(seed, "bench");
    Mat h(samples, emb_dim);
    Mat p(prototypes, emb_dim);
    for (Index r = 0; r < samples; ++r)
      for (Index c = 0; c < emb_dim; ++c) h(r, c) = rng.gaussian();
    for (Index r = 0; r < prototypes; ++r)
      for (Index c = 0; c < emb_dim; ++c) p(r, c) = rng.gaussian();
    Mat a = cosine_matrix(h, p);

    // labels loosely driven by a few prototype activations
    Mat y(samples, num_labels);
    for (Index l = 0; l < num_labels; ++l) {
      const Index anchor = (l * 37) % prototypes;
      for (Index n = 0; n < samples; ++n) {
        y(n, l) = (a(n, anchor) + 0.25 * rng.gaussian() > 0.1) ? 1.0 : 0.0;
      }
      if (y.col(l).sum() == 0) y(0, l) = 1;
      if (y.col(l).sum() == static_cast<double>(samples)) y(0, l) = 0;
    }

    BenchRow row;
    row.seed = seed;
    double t0 = now_ms();
    auto s = score(a, y, rng.substream("score"), balance);
    double t1 = now_ms();
    auto lap = solve_lap(s.Q, num_labels, slots_per_label);
    double t2 = now_ms();
    row.score_ms = t1 - t0;
    row.solve_ms = t2 - t1;
    row.lap_objective = lap.objective;

    PoolConfig pc = pool_cfg;
    pc.seed = seed;
    auto pool = pool_assign_acts(a, y, num_labels, slots_per_label, pc);
    row.pool_ms = pool.train_ms;
    row.pool_objective = pool.assignment.objective;
    rows.push_back(row);
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = "seed,score_ms,solve_ms,lap_total_ms,pool_ms\n";
  char buf[200];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%llu,%.3f,%.3f,%.3f,%.3f\n",
                  static_cast<unsigned long long>(r.seed), r.score_ms, r.solve_ms,
                  r.score_ms + r.solve_ms, r.pool_ms);
    out += buf;
  }
  return out;
}

Condition condition_from_string(const std::string& s) {
  for (Condition c : all_conditions()) {
    if (to_string(c) == s) return c;
  }
  throw std::invalid_argument("unknown condition '" + s + "'");
}

std::string to_string(Condition c) {
  switch (c) {
    case Condition::protossl_probe: return "protossl_probe";
    case Condition::protossl_tuned: return "protossl_tuned";
    case Condition::supproto_direct: return "supproto_direct";
    case Condition::supproto_pretrained: return "supproto_pretrained";
    case Condition::random_assign: return "random_assign";
    case Condition::pit: return "pit";
    default: return "pip";
  }
}

std::vector<Condition> all_conditions() {
  return {Condition::protossl_probe, Condition::protossl_tuned, Condition::supproto_direct,
          Condition::supproto_pretrained, Condition::random_assign, Condition::pit,
          Condition::pip};
}

bool EvalMatrix::all_ok() const {
  for (const auto& c : cells) {
    if (!c.ok) return false;
  }
  return true;
}

namespace {

struct ProbeOutcome {
  double macro, ci_lo, ci_hi;
  Vec label_auroc;
  double mean_coef_ratio;
};

ProbeOutcome probe_and_eval(const Model& m, const Eigen::Ref<const Mat>& features,
                            const std::vector<int>& feature_labels, const Dataset& train,
                            const Dataset& test, const EvalPlan& plan, Rng boot_rng) {
  Activations a_train = activations_vs(m, train.X, features);
  Classifier clf = train_probe(a_train.A, train.Y, plan.probe_cfg);
  Activations a_test = activations_vs(m, test.X, features);
  Mat scores = clf.predict(a_test.A);

  ProbeOutcome out;
  out.label_auroc = per_label_auroc(scores, test.Y);
  auto ci = bootstrap_ci(scores, test.Y, plan.bootstrap_resamples, boot_rng);
  out.macro = ci.point;
  out.ci_lo = ci.lo;
  out.ci_hi = ci.hi;
  out.mean_coef_ratio = coefficient_report(clf, feature_labels).mean_ratio;
  return out;
}

std::vector<int> slot_labels(const SlotAssignment& a) {
  std::vector<int> labels;
  for (const auto& e : a.slots) labels.push_back(e.label);
  return labels;
}

SlotAssignment constructed_assignment(Index num_labels, Index slots_per_label) {
  SlotAssignment a;
  for (Index l = 0; l < num_labels; ++l) {
    for (Index s = 0; s < slots_per_label; ++s) {
      SlotEntry e;
      e.label = static_cast<int>(l);
      e.slot = static_cast<int>(s);
      e.prototype = l * slots_per_label + s;
      a.slots.push_back(e);
    }
  }
  return a;
}

SlotAssignment random_assignment(Index bank_size, Index num_labels, Index slots_per_label,
                                 Rng rng) {
  if (bank_size < num_labels * slots_per_label) {
    throw std::invalid_argument("random_assign: capacity violated");
  }
  auto perm = rng.permutation(bank_size);
  SlotAssignment a;
  for (Index l = 0; l < num_labels; ++l) {
    for (Index s = 0; s < slots_per_label; ++s) {
      SlotEntry e;
      e.label = static_cast<int>(l);
      e.slot = static_cast<int>(s);
      e.prototype = perm[static_cast<std::size_t>(l * slots_per_label + s)];
      a.slots.push_back(e);
    }
  }
  return a;
}

}  // namespace

EvalMatrix run_matrix(const GenOutput& data, const EvalPlan& plan,
                      const ModelProvider& pretrained) {
  EvalMatrix matrix;
  const Index num_labels = data.target_train.num_labels();
  const Index full_train = data.target_train.size();

  std::vector<Index> sizes = plan.sizes;
  if (sizes.empty()) sizes = {full_train};

  std::map<std::uint64_t, Model> base_cache;
  std::map<std::uint64_t, Model> source_cache;

  auto base_model = [&](std::uint64_t seed) -> const Model& {
    auto it = base_cache.find(seed);
    if (it == base_cache.end()) it = base_cache.emplace(seed, pretrained(seed)).first;
    return it->second;
  };

  auto source_model = [&](std::uint64_t seed) -> const Model& {
    auto it = source_cache.find(seed);
    if (it != source_cache.end()) return it->second;
    if (!data.source_train || !data.source_val) {
      throw std::runtime_error("supproto_pretrained: source corpus missing from gen output");
    }
    const Dataset& src_train = *data.source_train;
    const Dataset& src_val = *data.source_val;
    const Index src_labels = src_train.num_labels();
    // match the transfer bank size as closely as an integer slot count allows
    const Index m_src =
        std::max<Index>(1, (plan.model_cfg.prototypes + src_labels / 2) / src_labels);
    ModelConfig mc = plan.model_cfg;
    mc.prototypes = m_src * src_labels;
    const Model& ref = base_model(seed);
    Model m = make_model(mc, ref.window, src_train.channels, src_train.timesteps,
                         Rng(seed, "supproto_source"));
    auto construction = constructed_assignment(src_labels, m_src);
    apply(m.bank, construction);
    FinetuneConfig cfg = plan.supproto_cfg;
    cfg.seed = seed;
    finetune(m, src_train, src_val, construction, plan.sup_weights, cfg);
    if (plan.source_projection) {
      project(m, src_train, construction, ProjectionMode::label_supervised);
    }
    return source_cache.emplace(seed, std::move(m)).first->second;
  };

  for (std::uint64_t seed : plan.seeds) {
    // nested subsets for this seed (largest first)
    std::vector<Index> desc = sizes;
    std::sort(desc.rbegin(), desc.rend());
    std::vector<std::vector<Index>> subset_list;
    try {
      subset_list = nested_subsets(data.target_train, desc, Rng(seed, "eval.subsets"));
    } catch (const std::exception&) {
      subset_list.clear();
    }

    for (std::size_t si = 0; si < desc.size(); ++si) {
      for (Condition cond : plan.conditions) {
        EvalCell cell;
        cell.condition = cond;
        cell.train_size = desc[si];
        cell.seed = seed;
        const double t0 = now_ms();
        try {
          if (subset_list.empty()) throw std::runtime_error("nested subset construction failed");
          Dataset train = data.target_train.rows(subset_list[si]);
          const Dataset& val = data.target_val;
          const Dataset& test = data.target_test;
          const std::string cell_tag = to_string(cond) + "." + std::to_string(desc[si]);
          Rng cell_rng(seed, "eval." + cell_tag);
          Rng boot_rng = cell_rng.substream("bootstrap");

          ProbeOutcome out{};
          switch (cond) {
            case Condition::protossl_probe:
            case Condition::protossl_tuned: {
              Model m = base_model(seed);
              Activations act = activations(m, train.X);
              auto s = score(act.A, train.Y, cell_rng.substream("score"), plan.balance);
              auto a = solve_lap(s.Q, num_labels, plan.slots_per_label);
              apply(m.bank, a);
              if (cond == Condition::protossl_tuned) {
                FinetuneConfig cfg = plan.finetune_cfg;
                cfg.seed = seed;
                finetune(m, train, val, a, plan.sup_weights, cfg);
              }
              project(m, train, a, ProjectionMode::label_supervised);
              out = probe_and_eval(m, slot_matrix(m.bank, a), slot_labels(a), train, test,
                                   plan, boot_rng);
              break;
            }
            case Condition::random_assign: {
              Model m = base_model(seed);
              auto a = random_assignment(m.bank.size(), num_labels, plan.slots_per_label,
                                         cell_rng.substream("random_assign"));
              apply(m.bank, a);
              project(m, train, a, ProjectionMode::label_supervised);
              out = probe_and_eval(m, slot_matrix(m.bank, a), slot_labels(a), train, test,
                                   plan, boot_rng);
              break;
            }
            case Condition::supproto_direct: {
              const Model& ref = base_model(seed);
              ModelConfig mc = plan.model_cfg;
              mc.prototypes = num_labels * plan.slots_per_label;
              Model m = make_model(mc, ref.window, train.channels, train.timesteps,
                                   Rng(seed, "supproto_direct." + std::to_string(desc[si])));
              auto a = constructed_assignment(num_labels, plan.slots_per_label);
              apply(m.bank, a);
              FinetuneConfig cfg = plan.supproto_cfg;
              cfg.seed = seed;
              finetune(m, train, val, a, plan.sup_weights, cfg);
              project(m, train, a, ProjectionMode::label_supervised);
              out = probe_and_eval(m, slot_matrix(m.bank, a), slot_labels(a), train, test,
                                   plan, boot_rng);
              break;
            }
            case Condition::supproto_pretrained: {
              Model m = source_model(seed);  // copy of the cached source model
              Activations act = activations(m, train.X);
              auto s = score(act.A, train.Y, cell_rng.substream("score"), plan.balance);
              auto a = solve_lap(s.Q, num_labels, plan.slots_per_label);
              apply(m.bank, a);
              project(m, train, a, ProjectionMode::label_supervised);
              out = probe_and_eval(m, slot_matrix(m.bank, a), slot_labels(a), train, test,
                                   plan, boot_rng);
              break;
            }
            case Condition::pit:
            case Condition::pip: {
              Model m = base_model(seed);
              const Dataset& corpus =
                  (cond == Condition::pit) ? train : data.pretrain_train;
              project_bank(m, corpus);
              std::vector<int> unlabeled(static_cast<std::size_t>(m.bank.size()), -1);
              out = probe_and_eval(m, m.bank.P, unlabeled, train, test, plan, boot_rng);
              break;
            }
          }
          cell.ok = true;
          cell.macro = out.macro;
          cell.ci_lo = out.ci_lo;
          cell.ci_hi = out.ci_hi;
          cell.label_auroc = out.label_auroc;
          cell.mean_coef_ratio = out.mean_coef_ratio;
        } catch (const std::exception& e) {
          cell.ok = false;
          cell.error = e.what();
        }
        cell.runtime_ms = now_ms() - t0;
        matrix.cells.push_back(std::move(cell));
      }
    }
  }
  return matrix;
}

std::string eval_csv(const EvalMatrix& m, const std::vector<std::string>& label_names) {
  std::string out = "condition,train_size,seed,ok,macro_auroc,ci_lo,ci_hi,mean_coef_ratio";
  for (const auto& name : label_names) out += ",auroc_" + name;
  out += "\n";
  char buf[256];
  for (const auto& c : m.cells) {
    std::snprintf(buf, sizeof(buf), "%s,%lld,%llu,%d", to_string(c.condition).c_str(),
                  static_cast<long long>(c.train_size),
                  static_cast<unsigned long long>(c.seed), c.ok ? 1 : 0);
    out += buf;
    if (c.ok) {
      std::snprintf(buf, sizeof(buf), ",%.17g,%.17g,%.17g,%.17g", c.macro, c.ci_lo, c.ci_hi,
                    c.mean_coef_ratio);
      out += buf;
      for (Index l = 0; l < c.label_auroc.size(); ++l) {
        std::snprintf(buf, sizeof(buf), ",%.17g", c.label_auroc(l));
        out += buf;
      }
    } else {
      out += ",,,,";
      for (std::size_t l = 0; l < label_names.size(); ++l) out += ",";
    }
    out += "\n";
  }
  return out;
}

std::string eval_timing_csv(const EvalMatrix& m) {
  std::string out = "condition,train_size,seed,ok,runtime_ms,error\n";
  char buf[160];
  for (const auto& c : m.cells) {
    std::snprintf(buf, sizeof(buf), "%s,%lld,%llu,%d,%.3f,", to_string(c.condition).c_str(),
                  static_cast<long long>(c.train_size),
                  static_cast<unsigned long long>(c.seed), c.ok ? 1 : 0, c.runtime_ms);
    out += buf;
    std::string err = c.error;
    for (auto& ch : err) {
      if (ch == ',' || ch == '\n') ch = ';';
    }
    out += err + "\n";
  }
  return out;
}

}  // namespace protossl
