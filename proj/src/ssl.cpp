#include "protossl/ssl.hpp"

#include <cstdio>
#include <map>

namespace protossl {

void SslConfig::validate() const {
  if (temperature <= 0) throw std::invalid_argument("ssl: temperature must be > 0");
  if (batch_groups < 2) throw std::invalid_argument("ssl: batch_groups must be >= 2");
  if (lr <= 0) throw std::invalid_argument("ssl: lr must be > 0");
  if (max_epochs < 0) throw std::invalid_argument("ssl: max_epochs must be >= 0");
  if (plateau_factor <= 0 || plateau_factor >= 1) {
    throw std::invalid_argument("ssl: plateau_factor must be in (0,1)");
  }
}

ad::NodePtr nt_xent(const ad::NodePtr& z, double temperature) {
  const Index rows = z->value.rows();
  if (rows < 2 || rows % 2 != 0) {
    throw std::invalid_argument("nt_xent: needs an even number of view rows, got " +
                                std::to_string(rows));
  }
  if (temperature <= 0) throw std::invalid_argument("nt_xent: temperature must be > 0");

  auto zn = ad::row_l2_normalize(z);
  auto sims = ad::scale(ad::matmul(zn, ad::transpose(zn)), 1.0 / temperature);

  // self-similarities leave every denominator
  Mat diag_mask = Mat::Zero(rows, rows);
  diag_mask.diagonal().setConstant(-1e9);
  auto masked = ad::add_const(sims, diag_mask);

  Mat pos_mask = Mat::Zero(rows, rows);
  for (Index n = 0; n < rows / 2; ++n) {
    pos_mask(2 * n, 2 * n + 1) = 1.0;
    pos_mask(2 * n + 1, 2 * n) = 1.0;
  }
  auto pos_sum = ad::sum(ad::mul_const(masked, pos_mask));
  auto lse = ad::logsumexp_rows(masked);
  return ad::sub(ad::mean(lse), ad::scale(pos_sum, 1.0 / static_cast<double>(rows)));
}

ad::NodePtr koleo(const ad::NodePtr& prototypes) {
  const Index k = prototypes->value.rows();
  if (k < 2) throw std::invalid_argument("koleo: needs at least 2 prototypes");
  auto pn = ad::row_l2_normalize(prototypes);
  auto sims = ad::matmul(pn, ad::transpose(pn));
  Mat diag_mask = Mat::Zero(k, k);
  diag_mask.diagonal().setConstant(-3.0);  // below any off-diagonal cosine
  auto nn_cos = ad::rowwise_max(ad::add_const(sims, diag_mask));
  // ||p - q||^2 = 2 - 2 cos for unit rows; floor distance at kEps
  auto dist2 = ad::clamp_min(ad::add_scalar(ad::scale(nn_cos, -2.0), 2.0), kEps * kEps);
  return ad::scale(ad::mean(ad::log(ad::sqrt(dist2))), -1.0);
}

namespace {

struct Snapshot {
  std::vector<Mat> values;
};

Snapshot take(const std::vector<ad::NodePtr>& params) {
  Snapshot s;
  for (const auto& p : params) s.values.push_back(p->value);
  return s;
}

void restore(const std::vector<ad::NodePtr>& params, const Snapshot& s) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = s.values[i];
}

// Deterministic group table: ids in ascending order, first two members each.
std::vector<std::pair<Index, Index>> view_pairs(const Dataset& corpus) {
  std::map<std::int64_t, std::vector<Index>> groups;
  for (Index i = 0; i < corpus.size(); ++i) {
    groups[corpus.group_ids[static_cast<std::size_t>(i)]].push_back(i);
  }
  std::vector<std::pair<Index, Index>> pairs;
  for (const auto& [id, members] : groups) {
    if (members.size() >= 2) pairs.emplace_back(members[0], members[1]);
  }
  if (pairs.empty()) {
    throw std::invalid_argument("pretrain: corpus has no group with >= 2 members");
  }
  return pairs;
}

Mat batch_window_rows(const Dataset& corpus, const std::vector<std::pair<Index, Index>>& pairs,
                      const std::vector<std::size_t>& batch, const WindowSpec& spec) {
  const Index wps = spec.count(corpus.timesteps);
  const Index cw = corpus.channels * spec.width;
  Mat rows(static_cast<Index>(batch.size()) * 2 * wps, cw);
  Index at = 0;
  for (std::size_t b : batch) {
    for (Index sample : {pairs[b].first, pairs[b].second}) {
      rows.middleRows(at, wps) =
          window_matrix(corpus.X.row(sample), corpus.channels, corpus.timesteps, spec);
      at += wps;
    }
  }
  return rows;
}

}  // namespace

PretrainResult pretrain(Model& m, const Dataset& corpus_train, const Dataset& corpus_val,
                        const SslConfig& cfg) {
  cfg.validate();
  auto train_pairs = view_pairs(corpus_train);
  auto val_pairs = view_pairs(corpus_val);
  const Index wps = m.window.count(m.timesteps);

  auto enc = encoder_leaves(m.enc, "enc");
  auto head = head_leaves(m.head, "head");
  auto bank = ad::leaf(m.bank.P, "bank.P");
  std::vector<ad::NodePtr> params = enc.all();
  params.push_back(bank);
  for (auto& p : head.all()) params.push_back(p);

  auto forward = [&](const Dataset& corpus, const std::vector<std::pair<Index, Index>>& pairs,
                     const std::vector<std::size_t>& batch) {
    Mat wins = batch_window_rows(corpus, pairs, batch, m.window);
    auto acts = graph_activations(enc, bank, wins, wps);
    auto z = graph_head(head, acts);
    return nt_xent(z, cfg.temperature);
  };

  auto val_loss = [&]() {
    // deterministic full pass in fixed batches
    double total = 0;
    std::size_t count = 0;
    for (std::size_t at = 0; at < val_pairs.size();) {
      const std::size_t take_n =
          std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_groups), val_pairs.size() - at);
      if (take_n < 2) break;
      std::vector<std::size_t> batch(take_n);
      for (std::size_t i = 0; i < take_n; ++i) batch[i] = at + i;
      total += ad::scalar_value(forward(corpus_val, val_pairs, batch)) * static_cast<double>(take_n);
      count += take_n;
      at += take_n;
    }
    return count ? total / static_cast<double>(count) : 0.0;
  };

  PretrainResult result;
  result.initial_val = val_loss();
  std::vector<ad::AdamState> opt_state;
  ad::AdamConfig adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;

  Rng order_rng = Rng(cfg.seed, "pretrain.order");
  Snapshot last_good = take(params);
  Snapshot best = last_good;
  int plateau_wait = 0;
  int stop_wait = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    auto perm = order_rng.permutation(static_cast<Index>(train_pairs.size()));
    double ntxent_sum = 0, koleo_sum = 0;
    int steps = 0;
    for (std::size_t at = 0; at < perm.size();) {
      const std::size_t take_n =
          std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_groups), perm.size() - at);
      if (take_n < 2) break;  // a single leftover pair has no negatives
      std::vector<std::size_t> batch(take_n);
      for (std::size_t i = 0; i < take_n; ++i) batch[i] = static_cast<std::size_t>(perm[at + i]);
      at += take_n;

      auto ntx = forward(corpus_train, train_pairs, batch);
      auto kol = koleo(bank);
      auto loss = ad::add(ntx, ad::scale(kol, cfg.koleo_weight));
      const double lv = ad::scalar_value(loss);
      if (!std::isfinite(lv)) {
        restore(params, last_good);
        write_back(m.enc, enc);
        write_back(m.head, head);
        m.bank.P = bank->value;
        throw std::runtime_error("pretrain: non-finite loss at epoch " + std::to_string(epoch) +
                                 "; restored last finite checkpoint");
      }
      ad::backward(loss);
      ad::adamw_step(params, opt_state, adam);
      ntxent_sum += ad::scalar_value(ntx);
      koleo_sum += ad::scalar_value(kol);
      ++steps;
    }

    last_good = take(params);
    const double val = val_loss();
    EpochRow row;
    row.epoch = epoch;
    row.train_ntxent = steps ? ntxent_sum / steps : 0.0;
    row.train_koleo = steps ? koleo_sum / steps : 0.0;
    row.val_ntxent = val;
    row.lr = adam.lr;
    result.curve.push_back(row);
    result.epochs_run = epoch + 1;

    if (val < result.best_val - 1e-12) {
      result.best_val = val;
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

  if (cfg.max_epochs > 0 && std::isfinite(result.best_val)) restore(params, best);
  write_back(m.enc, enc);
  write_back(m.head, head);
  m.bank.P = bank->value;
  return result;
}

std::string curve_csv(const std::vector<EpochRow>& curve) {
  std::string out = "epoch,train_ntxent,train_koleo,val_ntxent,lr\n";
  char buf[160];
  for (const auto& r : curve) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.train_ntxent,
                  r.train_koleo, r.val_ntxent, r.lr);
    out += buf;
  }
  return out;
}

}  // namespace protossl
