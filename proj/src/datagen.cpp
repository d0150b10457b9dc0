#include "protossl/datagen.hpp"

#include "protossl/tensorio.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace protossl {

using nlohmann::json;

void WindowSpec::validate(Index timesteps) const {
  if (width < 1 || stride < 1) throw std::invalid_argument("window: width and stride must be >= 1");
  if (stride > width) throw std::invalid_argument("window: stride > width leaves gaps");
  if (timesteps < width) throw std::invalid_argument("window: timesteps < width");
  if ((timesteps - width) % stride != 0) {
    throw std::invalid_argument("window: (T - width) not divisible by stride");
  }
}

Mat window_matrix(const Eigen::Ref<const Vec>& sample, Index channels, Index timesteps,
                  const WindowSpec& spec) {
  spec.validate(timesteps);
  if (sample.size() != channels * timesteps) {
    throw std::invalid_argument("window_matrix: sample length != channels*timesteps");
  }
  const Index n = spec.count(timesteps);
  Mat out(n, channels * spec.width);
  for (Index w = 0; w < n; ++w) {
    const Index start = w * spec.stride;
    for (Index c = 0; c < channels; ++c) {
      for (Index t = 0; t < spec.width; ++t) {
        out(w, c * spec.width + t) = sample(c * timesteps + start + t);
      }
    }
  }
  return out;
}

Dataset Dataset::rows(const std::vector<Index>& idx) const {
  Dataset out;
  out.X.resize(static_cast<Index>(idx.size()), X.cols());
  out.Y.resize(static_cast<Index>(idx.size()), Y.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.X.row(static_cast<Index>(i)) = X.row(idx[i]);
    out.Y.row(static_cast<Index>(i)) = Y.row(idx[i]);
    out.group_ids.push_back(group_ids[static_cast<std::size_t>(idx[i])]);
  }
  out.label_names = label_names;
  out.split = split;
  out.channels = channels;
  out.timesteps = timesteps;
  return out;
}

void GenConfig::validate() const {
  if (channels < 1) throw std::invalid_argument("gen: channels must be >= 1");
  if (num_labels < 1) throw std::invalid_argument("gen: num_labels must be >= 1");
  window.validate(timesteps);
  if (min_motifs < 1 || max_motifs < min_motifs) {
    throw std::invalid_argument("gen: need 1 <= min_motifs <= max_motifs");
  }
  if (distractor_motifs < 0) throw std::invalid_argument("gen: distractor_motifs must be >= 0");
  if (static_cast<Index>(max_motifs) * window.width > timesteps) {
    throw std::invalid_argument("gen: cannot place " + std::to_string(max_motifs) +
                                " non-overlapping motifs of width " +
                                std::to_string(window.width) + " in " +
                                std::to_string(timesteps) + " timesteps");
  }
  if (amp_jitter_lo <= 0 || amp_jitter_hi < amp_jitter_lo) {
    throw std::invalid_argument("gen: bad amplitude jitter range");
  }
  if (noise_sigma < 0) throw std::invalid_argument("gen: noise_sigma must be >= 0");
  for (Index n : {target_train, target_val, target_test}) {
    if (n < num_labels) throw std::invalid_argument("gen: split smaller than label count");
  }
  if (pretrain_groups < 2 || pretrain_val_groups < 1) {
    throw std::invalid_argument("gen: need >= 2 pretrain groups and >= 1 val group");
  }
  if (with_source) {
    if (source_labels < 1) throw std::invalid_argument("gen: source_labels must be >= 1");
    if (source_train < source_labels || source_val < source_labels) {
      throw std::invalid_argument("gen: source split smaller than source label count");
    }
  }
}

namespace {

// Parametric waveform families; all peak-normalized after channel weighting.
Vec base_waveform(int family, Index width, Rng& rng) {
  Vec w(width);
  const double pi = std::numbers::pi;
  const auto u = [&](Index t) { return (static_cast<double>(t) + 0.5) / static_cast<double>(width); };
  switch (family % 5) {
    case 0: {  // gaussian bump
      const double mu = rng.uniform(0.35, 0.65);
      const double sg = rng.uniform(0.08, 0.16);
      for (Index t = 0; t < width; ++t) w(t) = std::exp(-0.5 * std::pow((u(t) - mu) / sg, 2));
      break;
    }
    case 1: {  // biphasic (mexican hat)
      const double mu = rng.uniform(0.4, 0.6);
      const double sg = rng.uniform(0.08, 0.14);
      for (Index t = 0; t < width; ++t) {
        const double z = (u(t) - mu) / sg;
        w(t) = (1.0 - z * z) * std::exp(-0.5 * z * z);
      }
      break;
    }
    case 2: {  // windowed sine burst
      const double f = rng.uniform(1.5, 3.5);
      const double ph = rng.uniform(0, 2 * pi);
      for (Index t = 0; t < width; ++t) {
        const double hann = 0.5 * (1.0 - std::cos(2 * pi * u(t)));
        w(t) = hann * std::sin(2 * pi * f * u(t) + ph);
      }
      break;
    }
    case 3: {  // windowed square
      const double f = rng.uniform(1.0, 2.5);
      const double ph = rng.uniform(0, 2 * pi);
      for (Index t = 0; t < width; ++t) {
        const double hann = 0.5 * (1.0 - std::cos(2 * pi * u(t)));
        const double s = std::sin(2 * pi * f * u(t) + ph);
        w(t) = hann * (s >= 0 ? 1.0 : -1.0);
      }
      break;
    }
    default: {  // chirp
      const double f0 = rng.uniform(0.8, 1.6);
      const double f1 = rng.uniform(3.0, 5.0);
      for (Index t = 0; t < width; ++t) {
        const double x = u(t);
        const double hann = 0.5 * (1.0 - std::cos(2 * pi * x));
        w(t) = hann * std::sin(2 * pi * (f0 * x + 0.5 * (f1 - f0) * x * x));
      }
      break;
    }
  }
  return w;
}

Motif make_motif(int family, std::vector<int> labels, Index channels, Index width, Rng& rng) {
  Motif m;
  m.labels = std::move(labels);
  m.waveform.resize(channels, width);
  Vec base = base_waveform(family, width, rng);
  for (Index c = 0; c < channels; ++c) {
    const double weight = rng.uniform(0.4, 1.0) * (rng.bounded(2) == 0 ? 1.0 : -1.0);
    // small per-channel phase shift: circular rotation
    const auto shift = static_cast<Index>(rng.bounded(static_cast<std::uint64_t>(width / 4 + 1)));
    for (Index t = 0; t < width; ++t) m.waveform(c, t) = weight * base((t + shift) % width);
  }
  const double peak = m.waveform.cwiseAbs().maxCoeff();
  if (peak > 0) m.waveform /= peak;
  return m;
}

MotifLibrary make_library(Index num_labels, int variants, bool confounder, int distractors,
                          Index channels, Index width, Rng rng) {
  MotifLibrary lib;
  lib.num_labels = num_labels;
  int family = 0;
  for (Index l = 0; l < num_labels; ++l) {
    for (int v = 0; v < variants; ++v) {
      lib.motifs.push_back(make_motif(family++, {static_cast<int>(l)}, channels, width, rng));
    }
  }
  if (confounder && num_labels >= 2) {
    lib.motifs.push_back(make_motif(family++, {0, 1}, channels, width, rng));
  }
  for (int d = 0; d < distractors; ++d) {
    lib.motifs.push_back(make_motif(family++, {}, channels, width, rng));
  }
  return lib;
}

struct Placement {
  std::size_t motif;
  Index offset;
  double amp;
};

// A latent instance: motif choices and placements shared by all views.
std::vector<Placement> draw_instance(const GenConfig& cfg, const MotifLibrary& lib, Rng& rng) {
  const int k = cfg.min_motifs +
                static_cast<int>(rng.bounded(static_cast<std::uint64_t>(cfg.max_motifs - cfg.min_motifs + 1)));
  std::vector<Placement> placed;
  const Index w = cfg.window.width;
  for (int attempt = 0; attempt < 32 && static_cast<int>(placed.size()) < k; ++attempt) {
    placed.clear();
    std::set<std::size_t> used_motifs;
    bool ok = true;
    for (int i = 0; i < k && ok; ++i) {
      std::size_t m;
      do {
        m = rng.bounded(lib.motifs.size());
      } while (used_motifs.count(m) && used_motifs.size() < lib.motifs.size());
      used_motifs.insert(m);
      bool found = false;
      for (int tries = 0; tries < 100; ++tries) {
        const Index base = static_cast<Index>(rng.bounded(static_cast<std::uint64_t>(cfg.timesteps - w + 1)));
        const Index jit = static_cast<Index>(rng.bounded(2 * static_cast<std::uint64_t>(cfg.onset_jitter) + 1)) -
                          cfg.onset_jitter;
        const Index off = std::clamp<Index>(base + jit, 0, cfg.timesteps - w);
        bool overlap = false;
        for (const auto& p : placed) {
          if (off < p.offset + w && p.offset < off + w) { overlap = true; break; }
        }
        if (!overlap) {
          placed.push_back({m, off, rng.uniform(cfg.amp_jitter_lo, cfg.amp_jitter_hi)});
          found = true;
          break;
        }
      }
      ok = found;
    }
    if (ok && static_cast<int>(placed.size()) == k) break;
  }
  if (placed.empty()) {
    // validate() guarantees k slots fit; fall back to even spacing
    for (int i = 0; i < k; ++i) {
      placed.push_back({rng.bounded(lib.motifs.size()), static_cast<Index>(i) * w,
                        rng.uniform(cfg.amp_jitter_lo, cfg.amp_jitter_hi)});
    }
  }
  return placed;
}

void render_clean(const GenConfig& cfg, const MotifLibrary& lib,
                  const std::vector<Placement>& inst, Eigen::Ref<Vec> out) {
  out.setZero();
  for (const auto& p : inst) {
    const Mat& wf = lib.motifs[p.motif].waveform;
    for (Index c = 0; c < cfg.channels; ++c) {
      for (Index t = 0; t < cfg.window.width; ++t) {
        out(c * cfg.timesteps + p.offset + t) += p.amp * wf(c, t);
      }
    }
  }
}

void add_noise(const GenConfig& cfg, Rng& rng, Eigen::Ref<Vec> x) {
  for (Index i = 0; i < x.size(); ++i) x(i) += cfg.noise_sigma * rng.gaussian();
}

void mark_labels(const MotifLibrary& lib, const std::vector<Placement>& inst,
                 Eigen::Ref<Eigen::Matrix<double, 1, Eigen::Dynamic>> y) {
  y.setZero();
  for (const auto& p : inst) {
    for (int l : lib.motifs[p.motif].labels) y(l) = 1.0;
  }
}

std::vector<std::string> label_names(const std::string& prefix, Index n) {
  std::vector<std::string> names;
  for (Index l = 0; l < n; ++l) names.push_back(prefix + std::to_string(l));
  return names;
}

Dataset make_paired_split(const GenConfig& cfg, const MotifLibrary& lib, Index groups,
                          std::int64_t& next_group, const std::string& split, Rng rng) {
  Dataset ds;
  ds.split = split;
  ds.channels = cfg.channels;
  ds.timesteps = cfg.timesteps;
  ds.label_names = label_names("label_", lib.num_labels);
  ds.X.resize(2 * groups, cfg.channels * cfg.timesteps);
  ds.Y.resize(2 * groups, lib.num_labels);
  for (Index g = 0; g < groups; ++g) {
    const auto inst = draw_instance(cfg, lib, rng);
    Vec clean(cfg.channels * cfg.timesteps);
    render_clean(cfg, lib, inst, clean);
    for (int view = 0; view < 2; ++view) {
      const Index row = 2 * g + view;
      ds.X.row(row) = clean;
      Vec x = ds.X.row(row);
      add_noise(cfg, rng, x);
      ds.X.row(row) = x;
      mark_labels(lib, inst, ds.Y.row(row));
      ds.group_ids.push_back(next_group);
    }
    ++next_group;
  }
  return ds;
}

Dataset make_single_split(const GenConfig& cfg, const MotifLibrary& lib, Index count,
                          std::int64_t& next_group, const std::string& split, Rng rng) {
  Dataset ds;
  ds.split = split;
  ds.channels = cfg.channels;
  ds.timesteps = cfg.timesteps;
  ds.label_names = label_names(split.rfind("source", 0) == 0 ? "src_" : "label_", lib.num_labels);
  ds.X.resize(count, cfg.channels * cfg.timesteps);
  ds.Y.resize(count, lib.num_labels);
  Rng repair = rng.substream("repair");
  for (Index n = 0; n < count; ++n) {
    const auto inst = draw_instance(cfg, lib, rng);
    Vec x(cfg.channels * cfg.timesteps);
    render_clean(cfg, lib, inst, x);
    add_noise(cfg, rng, x);
    ds.X.row(n) = x;
    mark_labels(lib, inst, ds.Y.row(n));
    ds.group_ids.push_back(next_group++);
  }
  // Coverage repair: every label must have at least one positive per split.
  // Victims rotate from the end so repairs never clobber each other.
  Index next_victim = count - 1;
  for (int pass = 0; pass < 4; ++pass) {
    bool all_covered = true;
    for (Index l = 0; l < lib.num_labels; ++l) {
      if (ds.Y.col(l).sum() > 0) continue;
      all_covered = false;
      const Index victim = next_victim--;
      if (victim < 0) throw std::runtime_error("gen: coverage repair ran out of samples");
      std::vector<std::size_t> candidates;
      for (std::size_t m = 0; m < lib.motifs.size(); ++m) {
        for (int ml : lib.motifs[m].labels) {
          if (ml == static_cast<int>(l)) candidates.push_back(m);
        }
      }
      std::vector<Placement> inst{{candidates[repair.bounded(candidates.size())],
                                   static_cast<Index>(repair.bounded(
                                       static_cast<std::uint64_t>(cfg.timesteps - cfg.window.width + 1))),
                                   repair.uniform(cfg.amp_jitter_lo, cfg.amp_jitter_hi)}};
      Vec x(cfg.channels * cfg.timesteps);
      render_clean(cfg, lib, inst, x);
      add_noise(cfg, repair, x);
      ds.X.row(victim) = x;
      mark_labels(lib, inst, ds.Y.row(victim));
    }
    if (all_covered) break;
  }
  return ds;
}

}  // namespace

GenOutput generate(const GenConfig& cfg, const Rng& rng) {
  cfg.validate();
  GenOutput out;
  out.library = make_library(cfg.num_labels, cfg.variants_per_label, cfg.shared_confounder,
                             cfg.distractor_motifs, cfg.channels, cfg.window.width,
                             rng.substream("motifs"));
  std::int64_t next_group = 0;
  out.pretrain_train = make_paired_split(cfg, out.library, cfg.pretrain_groups, next_group,
                                         "pretrain_train", rng.substream("pretrain_train"));
  out.pretrain_val = make_paired_split(cfg, out.library, cfg.pretrain_val_groups, next_group,
                                       "pretrain_val", rng.substream("pretrain_val"));
  out.target_train = make_single_split(cfg, out.library, cfg.target_train, next_group,
                                       "target_train", rng.substream("target_train"));
  out.target_val = make_single_split(cfg, out.library, cfg.target_val, next_group,
                                     "target_val", rng.substream("target_val"));
  out.target_test = make_single_split(cfg, out.library, cfg.target_test, next_group,
                                      "target_test", rng.substream("target_test"));
  if (cfg.with_source) {
    GenConfig scfg = cfg;
    scfg.num_labels = cfg.source_labels;
    out.source_library = make_library(scfg.num_labels, cfg.variants_per_label,
                                      cfg.shared_confounder, cfg.distractor_motifs,
                                      cfg.channels, cfg.window.width,
                                      rng.substream("source_motifs"));
    out.source_train = make_single_split(scfg, *out.source_library, cfg.source_train,
                                         next_group, "source_train", rng.substream("source_train"));
    out.source_val = make_single_split(scfg, *out.source_library, cfg.source_val, next_group,
                                       "source_val", rng.substream("source_val"));
  }
  return out;
}

std::vector<std::vector<Index>> nested_subsets(const Dataset& train,
                                               const std::vector<Index>& sizes,
                                               const Rng& rng) {
  const Index n = train.size();
  const Index num_labels = train.num_labels();
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    if (sizes[i] <= sizes[i + 1]) throw std::invalid_argument("nested_subsets: sizes must be descending");
  }
  if (sizes.empty()) return {};
  if (sizes.front() > n) throw std::invalid_argument("nested_subsets: largest size exceeds train size");
  if (sizes.back() < num_labels) {
    throw std::invalid_argument("nested_subsets: smallest size " + std::to_string(sizes.back()) +
                                " < label count " + std::to_string(num_labels));
  }

  Vec full_rate = train.Y.colwise().mean();

  std::vector<std::vector<Index>> result;
  std::vector<Index> current(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) current[static_cast<std::size_t>(i)] = i;

  Rng local = rng.substream("nested_subsets");
  for (std::size_t si = 0; si < sizes.size(); ++si) {
    const Index s = sizes[si];
    if (s == static_cast<Index>(current.size())) {
      result.push_back(current);
      continue;
    }
    // Greedy stratified pick: repeatedly serve the label with the largest
    // remaining positive deficit relative to its proportional quota.
    std::vector<double> quota(static_cast<std::size_t>(num_labels));
    for (Index l = 0; l < num_labels; ++l) {
      quota[static_cast<std::size_t>(l)] = full_rate(l) * static_cast<double>(s);
    }
    std::vector<double> have(static_cast<std::size_t>(num_labels), 0.0);
    std::vector<char> picked(static_cast<std::size_t>(n), 0);
    std::vector<Index> selected;
    selected.reserve(static_cast<std::size_t>(s));

    auto pick = [&](Index idx) {
      picked[static_cast<std::size_t>(idx)] = 1;
      selected.push_back(idx);
      for (Index l = 0; l < num_labels; ++l) have[static_cast<std::size_t>(l)] += train.Y(idx, l);
    };

    std::vector<Index> pool = current;
    // deterministic shuffle so candidate scans are unbiased
    {
      auto perm = local.permutation(static_cast<Index>(pool.size()));
      std::vector<Index> shuffled(pool.size());
      for (std::size_t i = 0; i < pool.size(); ++i) shuffled[i] = pool[static_cast<std::size_t>(perm[i])];
      pool = std::move(shuffled);
    }

    while (static_cast<Index>(selected.size()) < s) {
      Index best_label = -1;
      double best_deficit = 0.0;
      for (Index l = 0; l < num_labels; ++l) {
        const double q = quota[static_cast<std::size_t>(l)];
        if (q <= 0) continue;
        const double deficit = (q - have[static_cast<std::size_t>(l)]) / q;
        if (deficit > best_deficit + 1e-12) {
          best_deficit = deficit;
          best_label = l;
        }
      }
      if (best_label >= 0) {
        bool found = false;
        for (Index idx : pool) {
          if (!picked[static_cast<std::size_t>(idx)] && train.Y(idx, best_label) > 0) {
            pick(idx);
            found = true;
            break;
          }
        }
        if (!found) quota[static_cast<std::size_t>(best_label)] = 0;  // exhausted, retry
        continue;
      }
      // no deficit left: fill uniformly
      for (Index idx : pool) {
        if (!picked[static_cast<std::size_t>(idx)]) { pick(idx); break; }
      }
    }

    // Injection: any label that lost all positives gets one back by swapping.
    for (Index l = 0; l < num_labels; ++l) {
      if (have[static_cast<std::size_t>(l)] > 0) continue;
      Index donor = -1;
      std::vector<Index> donors;
      for (Index idx : current) {
        if (!picked[static_cast<std::size_t>(idx)] && train.Y(idx, l) > 0) donors.push_back(idx);
      }
      if (donors.empty()) continue;  // no positive anywhere in parent
      donor = donors[static_cast<std::size_t>(local.bounded(donors.size()))];
      // victim: a selected sample whose removal keeps every label covered
      Index victim = -1;
      for (Index cand : selected) {
        bool safe = true;
        for (Index ll = 0; ll < num_labels; ++ll) {
          if (train.Y(cand, ll) > 0 && have[static_cast<std::size_t>(ll)] <= 1) { safe = false; break; }
        }
        if (safe) { victim = cand; break; }
      }
      if (victim < 0) victim = selected.back();
      for (Index ll = 0; ll < num_labels; ++ll) {
        have[static_cast<std::size_t>(ll)] += train.Y(donor, ll) - train.Y(victim, ll);
      }
      picked[static_cast<std::size_t>(victim)] = 0;
      picked[static_cast<std::size_t>(donor)] = 1;
      *std::find(selected.begin(), selected.end(), victim) = donor;
    }

    std::sort(selected.begin(), selected.end());
    result.push_back(selected);
    current = std::move(selected);
  }
  return result;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir,
                  const json& config_echo) {
  TensorWriter w;
  w.add("X", {ds.size(), ds.channels, ds.timesteps},
        std::vector<double>(ds.X.data(), ds.X.data() + ds.X.size()));
  w.add("Y", ds.Y);
  json extra;
  extra["labels"] = ds.label_names;
  extra["group_ids"] = ds.group_ids;
  extra["split"] = ds.split;
  extra["config"] = config_echo;
  w.set_extra(std::move(extra));
  w.save(dir);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  auto td = TensorDir::load(dir);
  Dataset ds;
  const auto& xinfo = td.info("X");
  if (xinfo.shape.size() != 3) throw std::runtime_error("dataset X must be rank 3");
  ds.channels = xinfo.shape[1];
  ds.timesteps = xinfo.shape[2];
  ds.X = td.matrix("X");
  ds.Y = td.matrix("Y");
  const auto& extra = td.extra();
  ds.label_names = extra.at("labels").get<std::vector<std::string>>();
  ds.group_ids = extra.at("group_ids").get<std::vector<std::int64_t>>();
  ds.split = extra.at("split").get<std::string>();
  return ds;
}

}  // namespace protossl
