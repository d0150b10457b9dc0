#include "protossl/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace protossl {

void SupLossWeights::validate() const {
  if (clst < 0 || sep < 0 || div < 0 || cntrst < 0) {
    throw std::invalid_argument("sup loss weights must be >= 0");
  }
}

Mat cooccurrence(const Eigen::Ref<const Mat>& Y) {
  Mat f = (Y.transpose() * Y) / static_cast<double>(Y.rows());
  f.diagonal().setZero();
  return f;
}

SupLossParts sup_losses(const EncoderLeaves& enc, const ad::NodePtr& slots,
                        const ad::NodePtr& head_w, const ad::NodePtr& head_b,
                        const Mat& window_rows, Index windows_per_sample,
                        const Mat& y_batch, Index slots_per_label,
                        const Mat& cooccur, const SupLossWeights& weights) {
  weights.validate();
  const Index total_slots = slots->value.rows();
  if (total_slots % slots_per_label != 0) {
    throw std::invalid_argument("sup_losses: slot count not divisible by slots_per_label");
  }
  const Index num_labels = total_slots / slots_per_label;
  if (y_batch.cols() != num_labels) {
    throw std::invalid_argument("sup_losses: label count mismatch");
  }

  auto acts = graph_activations(enc, slots, window_rows, windows_per_sample);  // B x LM
  auto logits = ad::add_rowvec(ad::matmul(acts, head_w), head_b);

  SupLossParts parts;
  parts.ce = ad::mean(ad::sub(ad::softplus(logits), ad::mul_const(logits, y_batch)));

  auto label_best = ad::colblock_max(acts, slots_per_label);  // B x L

  const double npos = y_batch.sum();
  const double nneg = static_cast<double>(y_batch.size()) - npos;
  Mat ones = Mat::Ones(y_batch.rows(), y_batch.cols());
  auto one_minus = ad::add_scalar(ad::scale(label_best, -1.0), 1.0);
  parts.clst = ad::scale(ad::sum(ad::mul_const(one_minus, y_batch)),
                         npos > 0 ? 1.0 / npos : 0.0);
  parts.sep = ad::scale(ad::sum(ad::mul_const(ad::relu(label_best), ones - y_batch)),
                        nneg > 0 ? 1.0 / nneg : 0.0);

  auto slot_cos = ad::cosine_sim_matrix(slots, slots);  // LM x LM
  Mat same_label = Mat::Zero(total_slots, total_slots);
  double same_pairs = 0;
  for (Index i = 0; i < total_slots; ++i) {
    for (Index j = 0; j < total_slots; ++j) {
      if (i != j && i / slots_per_label == j / slots_per_label) {
        same_label(i, j) = 1.0;
        same_pairs += 1.0;
      }
    }
  }
  auto hinge = ad::relu(ad::add_scalar(slot_cos, -0.3));
  parts.div = ad::scale(ad::sum(ad::mul_const(ad::square(hinge), same_label)),
                        same_pairs > 0 ? 1.0 / same_pairs : 0.0);

  // cntrst = sum_{l<l'} f(l,l') * (1 - mean cosine between their slots)
  Mat cross_weight = Mat::Zero(total_slots, total_slots);
  double f_total = 0;
  const double per_pair = 1.0 / static_cast<double>(slots_per_label * slots_per_label);
  for (Index i = 0; i < total_slots; ++i) {
    for (Index j = 0; j < total_slots; ++j) {
      const Index li = i / slots_per_label;
      const Index lj = j / slots_per_label;
      if (li < lj) cross_weight(i, j) = cooccur(li, lj) * per_pair;
    }
  }
  for (Index li = 0; li < num_labels; ++li)
    for (Index lj = li + 1; lj < num_labels; ++lj) f_total += cooccur(li, lj);
  parts.cntrst = ad::add_scalar(
      ad::scale(ad::sum(ad::mul_const(slot_cos, cross_weight)), -1.0), f_total);

  parts.total = parts.ce;
  if (weights.clst != 0) parts.total = ad::add(parts.total, ad::scale(parts.clst, weights.clst));
  if (weights.sep != 0) parts.total = ad::add(parts.total, ad::scale(parts.sep, weights.sep));
  if (weights.div != 0) parts.total = ad::add(parts.total, ad::scale(parts.div, weights.div));
  if (weights.cntrst != 0) {
    parts.total = ad::add(parts.total, ad::scale(parts.cntrst, weights.cntrst));
  }
  return parts;
}

namespace {

Mat sample_windows(const Dataset& ds, const std::vector<Index>& rows, const WindowSpec& spec) {
  const Index wps = spec.count(ds.timesteps);
  Mat out(static_cast<Index>(rows.size()) * wps, ds.channels * spec.width);
  Index at = 0;
  for (Index r : rows) {
    out.middleRows(at, wps) = window_matrix(ds.X.row(r), ds.channels, ds.timesteps, spec);
    at += wps;
  }
  return out;
}

Mat gather_rows(const Mat& y, const std::vector<Index>& rows) {
  Mat out(static_cast<Index>(rows.size()), y.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = y.row(rows[i]);
  return out;
}

}  // namespace

FinetuneResult finetune(Model& m, const Dataset& train, const Dataset& val,
                        const SlotAssignment& assignment, const SupLossWeights& weights,
                        const FinetuneConfig& cfg) {
  if (assignment.slots.empty()) throw std::invalid_argument("finetune: empty assignment");
  for (const auto& e : assignment.slots) {
    if (e.prototype < 0 || e.prototype >= m.bank.size()) {
      throw std::invalid_argument("finetune: assignment references prototype out of range");
    }
  }
  const Index wps = m.window.count(m.timesteps);
  const auto slots_per_label = static_cast<Index>(
      std::count_if(assignment.slots.begin(), assignment.slots.end(),
                    [](const SlotEntry& e) { return e.label == 0; }));
  const Index num_labels = static_cast<Index>(assignment.slots.size()) / slots_per_label;

  auto enc = encoder_leaves(m.enc, "enc");
  auto slots = ad::leaf(slot_matrix(m.bank, assignment), "bank.slots");
  auto head_w = ad::leaf(Mat::Zero(static_cast<Index>(assignment.slots.size()), num_labels),
                         "finetune.head_w");
  auto head_b = ad::leaf(Mat::Zero(1, num_labels), "finetune.head_b");
  std::vector<ad::NodePtr> params = enc.all();
  params.push_back(slots);
  params.push_back(head_w);
  params.push_back(head_b);

  Mat cooccur = cooccurrence(train.Y);

  auto batch_loss = [&](const Dataset& ds, const std::vector<Index>& rows) {
    Mat wins = sample_windows(ds, rows, m.window);
    Mat yb = gather_rows(ds.Y, rows);
    return sup_losses(enc, slots, head_w, head_b, wins, wps, yb, slots_per_label, cooccur,
                      weights);
  };

  std::vector<Index> val_rows(static_cast<std::size_t>(val.size()));
  std::iota(val_rows.begin(), val_rows.end(), Index{0});
  auto val_loss = [&] { return ad::scalar_value(batch_loss(val, val_rows).total); };

  FinetuneResult result;
  result.initial_val = val_loss();
  // the untouched model is a candidate: fine-tuning never ends worse on val
  result.best_val = result.initial_val;

  std::vector<ad::AdamState> state;
  ad::AdamConfig adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;

  std::vector<Mat> last_good, best;
  auto snapshot = [&] {
    std::vector<Mat> s;
    for (auto& p : params) s.push_back(p->value);
    return s;
  };
  auto restore = [&](const std::vector<Mat>& s) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = s[i];
  };
  last_good = snapshot();
  best = last_good;

  Rng order_rng(cfg.seed, "finetune.order");
  int plateau_wait = 0, stop_wait = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    auto perm = order_rng.permutation(train.size());
    double train_sum = 0;
    int steps = 0;
    for (std::size_t at = 0; at < perm.size();) {
      const std::size_t take_n = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch),
                                                       perm.size() - at);
      std::vector<Index> rows(perm.begin() + static_cast<std::ptrdiff_t>(at),
                              perm.begin() + static_cast<std::ptrdiff_t>(at + take_n));
      at += take_n;
      auto parts = batch_loss(train, rows);
      const double lv = ad::scalar_value(parts.total);
      if (!std::isfinite(lv)) {
        restore(last_good);
        write_back(m.enc, enc);
        throw std::runtime_error("finetune: non-finite loss at epoch " + std::to_string(epoch) +
                                 "; restored last finite checkpoint");
      }
      ad::backward(parts.total);
      ad::adamw_step(params, state, adam);
      train_sum += lv;
      ++steps;
    }
    last_good = snapshot();
    const double v = val_loss();
    FinetuneRow row;
    row.epoch = epoch;
    row.train_loss = steps ? train_sum / steps : 0;
    row.val_loss = v;
    row.lr = adam.lr;
    result.curve.push_back(row);
    result.epochs_run = epoch + 1;

    if (v < result.best_val - 1e-12) {
      result.best_val = v;
      best = last_good;
      plateau_wait = 0;
      stop_wait = 0;
    } else {
      ++plateau_wait;
      ++stop_wait;
      if (plateau_wait >= cfg.plateau_patience) {
        adam.lr *= cfg.plateau_factor;
        plateau_wait = 0;
      }
      if (stop_wait >= cfg.early_stop_patience) break;
    }
  }

  if (cfg.max_epochs > 0) restore(best);
  write_back(m.enc, enc);
  for (std::size_t i = 0; i < assignment.slots.size(); ++i) {
    m.bank.P.row(assignment.slots[i].prototype) = slots->value.row(static_cast<Index>(i));
  }
  return result;
}

ProjectionMode projection_mode_from_string(const std::string& s) {
  if (s == "label_supervised") return ProjectionMode::label_supervised;
  if (s == "pit") return ProjectionMode::pit;
  if (s == "pip") return ProjectionMode::pip;
  throw std::invalid_argument("unknown projection mode '" + s + "'");
}

std::string to_string(ProjectionMode mode) {
  switch (mode) {
    case ProjectionMode::label_supervised: return "label_supervised";
    case ProjectionMode::pit: return "pit";
    default: return "pip";
  }
}

namespace {

ProjectionEntry project_one(Model& m, const Dataset& corpus, const Mat& acts,
                            const Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic>& argmax,
                            Index acts_col, Index prototype, const std::vector<Index>& candidates) {
  Index best_sample = -1;
  double best_val = -std::numeric_limits<double>::infinity();
  for (Index n : candidates) {
    if (acts(n, acts_col) > best_val) {
      best_val = acts(n, acts_col);
      best_sample = n;
    }
  }
  const Index win = argmax(best_sample, acts_col);
  Mat emb = patch_embed(m, corpus.X.row(best_sample));
  m.bank.P.row(prototype) = emb.row(win);
  auto& rec = m.bank.records[static_cast<std::size_t>(prototype)];
  rec.sample = best_sample;
  rec.window = win;

  ProjectionEntry entry;
  entry.prototype = prototype;
  entry.label = rec.label;
  entry.slot = rec.slot;
  entry.sample = best_sample;
  entry.window = win;
  entry.activation = best_val;
  return entry;
}

}  // namespace

std::vector<ProjectionEntry> project(Model& m, const Dataset& target_train,
                                     const SlotAssignment& assignment, ProjectionMode mode,
                                     const Dataset* pretrain_corpus) {
  if (mode == ProjectionMode::pip && pretrain_corpus == nullptr) {
    throw std::invalid_argument("project: pip mode needs the pretrain corpus");
  }
  const Dataset& corpus = (mode == ProjectionMode::pip) ? *pretrain_corpus : target_train;

  Mat slot_protos = slot_matrix(m.bank, assignment);
  Activations act = activations_vs(m, corpus.X, slot_protos);

  std::vector<Index> all(static_cast<std::size_t>(corpus.size()));
  std::iota(all.begin(), all.end(), Index{0});

  std::vector<ProjectionEntry> entries;
  for (std::size_t j = 0; j < assignment.slots.size(); ++j) {
    const auto& slot = assignment.slots[j];
    std::vector<Index> candidates;
    if (mode == ProjectionMode::label_supervised) {
      for (Index n = 0; n < corpus.size(); ++n) {
        if (corpus.Y(n, slot.label) > 0) candidates.push_back(n);
      }
      if (candidates.empty()) {
        throw std::invalid_argument("project: label " + std::to_string(slot.label) +
                                    " has no positive training sample");
      }
    } else {
      candidates = all;
    }
    entries.push_back(project_one(m, corpus, act.A, act.argmax, static_cast<Index>(j),
                                  slot.prototype, candidates));
  }
  return entries;
}

std::vector<ProjectionEntry> project_bank(Model& m, const Dataset& corpus) {
  Activations act = activations(m, corpus.X);
  std::vector<Index> all(static_cast<std::size_t>(corpus.size()));
  std::iota(all.begin(), all.end(), Index{0});
  std::vector<ProjectionEntry> entries;
  for (Index k = 0; k < m.bank.size(); ++k) {
    entries.push_back(project_one(m, corpus, act.A, act.argmax, k, k, all));
  }
  return entries;
}

Mat Classifier::predict(const Eigen::Ref<const Mat>& a_raw) const {
  Mat z = zscore_apply(a_raw, means, stds);
  Mat logits = (z * W).rowwise() + b.transpose();
  return (1.0 / (1.0 + (-logits.array()).exp())).matrix();
}

Classifier train_probe(const Eigen::Ref<const Mat>& a_raw, const Eigen::Ref<const Mat>& Y,
                       const ProbeConfig& cfg) {
  if (a_raw.rows() != Y.rows()) throw std::invalid_argument("train_probe: row mismatch");
  if (cfg.c <= 0) throw std::invalid_argument("train_probe: C must be > 0");
  const Index n = a_raw.rows();
  const Index f = a_raw.cols();
  const Index num_labels = Y.cols();
  for (Index l = 0; l < num_labels; ++l) {
    const double pos = Y.col(l).sum();
    if (pos == 0 || pos == static_cast<double>(n)) {
      throw std::invalid_argument("train_probe: label " + std::to_string(l) +
                                  " has a single class");
    }
  }

  Classifier clf;
  auto zs = zscore_fit_apply(a_raw, a_raw);
  clf.means = zs.means;
  clf.stds = zs.stds;
  const Mat& x = zs.applied;
  clf.W = Mat::Zero(f, num_labels);
  clf.b = Vec::Zero(num_labels);

  const double lambda = 1.0 / (2.0 * cfg.c * static_cast<double>(n));  // on ||w||^2

  for (Index l = 0; l < num_labels; ++l) {
    Vec w = Vec::Zero(f + 1);  // bias last, unpenalized
    Vec y = Y.col(l);

    auto objective = [&](const Vec& wb) {
      Vec logits = x * wb.head(f) + Vec::Constant(n, wb(f));
      double obj = 0;
      for (Index i = 0; i < n; ++i) {
        const double z = logits(i);
        obj += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - y(i) * z;
      }
      obj /= static_cast<double>(n);
      obj += lambda * wb.head(f).squaredNorm();
      return obj;
    };

    double obj = objective(w);
    for (int iter = 0; iter < cfg.max_iter; ++iter) {
      Vec logits = x * w.head(f) + Vec::Constant(n, w(f));
      Vec p = (1.0 / (1.0 + (-logits.array()).exp())).matrix();
      Vec resid = p - y;
      Vec grad(f + 1);
      grad.head(f) = x.transpose() * resid / static_cast<double>(n) + 2.0 * lambda * w.head(f);
      grad(f) = resid.mean();
      if (grad.cwiseAbs().maxCoeff() <= cfg.tol) break;

      Vec s = p.array() * (1.0 - p.array());
      Mat h(f + 1, f + 1);
      Mat xs = x.array().colwise() * s.array();
      h.topLeftCorner(f, f) = x.transpose() * xs / static_cast<double>(n);
      h.topLeftCorner(f, f).diagonal().array() += 2.0 * lambda;
      h.topRightCorner(f, 1) = xs.colwise().sum().transpose() / static_cast<double>(n);
      h.bottomLeftCorner(1, f) = h.topRightCorner(f, 1).transpose();
      h(f, f) = s.mean();
      h.diagonal().array() += 1e-12;  // keep the solve well posed

      Vec step = h.ldlt().solve(grad);
      // damped Newton: halve until the objective does not increase
      double t = 1.0;
      Vec w_next = w - t * step;
      double obj_next = objective(w_next);
      int halvings = 0;
      while (obj_next > obj && halvings < 30) {
        t *= 0.5;
        w_next = w - t * step;
        obj_next = objective(w_next);
        ++halvings;
      }
      if (obj_next > obj) break;  // no descent direction left
      w = w_next;
      obj = obj_next;
    }

    clf.W.col(l) = w.head(f);
    clf.b(l) = w(f);
  }
  return clf;
}

CoefficientReport coefficient_report(const Classifier& clf,
                                     const std::vector<int>& feature_labels) {
  if (static_cast<Index>(feature_labels.size()) != clf.W.rows()) {
    throw std::invalid_argument("coefficient_report: feature label count mismatch");
  }
  CoefficientReport report;
  double ratio_sum = 0;
  int ratio_count = 0;
  for (Index l = 0; l < clf.W.cols(); ++l) {
    CoefficientRow row;
    row.label = static_cast<int>(l);
    double pos_sum = 0, neg_sum = 0;
    int pos_n = 0, neg_n = 0;
    for (Index ff = 0; ff < clf.W.rows(); ++ff) {
      if (feature_labels[static_cast<std::size_t>(ff)] == static_cast<int>(l)) {
        pos_sum += clf.W(ff, l);
        ++pos_n;
      } else {
        neg_sum += clf.W(ff, l);
        ++neg_n;
      }
    }
    row.or_pos = pos_n ? std::exp(pos_sum / pos_n) : 1.0;
    if (neg_n > 0) {
      row.or_neg = std::exp(neg_sum / neg_n);
      row.ratio = row.or_pos / row.or_neg;
      ratio_sum += row.ratio;
      ++ratio_count;
    }
    report.rows.push_back(row);
  }
  if (ratio_count > 0) report.mean_ratio = ratio_sum / ratio_count;
  return report;
}

}  // namespace protossl
