#include "protossl/config.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <set>

namespace protossl {

using nlohmann::json;

namespace {

const json kEmpty = json::object();

// Tracks which keys were consumed so leftovers can be reported by path.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) {
      throw std::invalid_argument("config error at " + path_ + ": expected an object");
    }
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw std::invalid_argument("config error at " + path_ + "." + key + ": wrong type");
    }
  }

  Section sub(const std::string& key) {
    seen_.insert(key);
    return Section(j_.contains(key) ? j_.at(key) : kEmpty, path_ + "." + key);
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) {
        throw std::invalid_argument("config error at " + path_ + "." + item.key() +
                                    ": unknown key");
      }
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

GenConfig parse_gen(Section s) {
  GenConfig g;
  g.channels = s.get<Index>("channels", g.channels);
  g.timesteps = s.get<Index>("timesteps", g.timesteps);
  g.num_labels = s.get<Index>("labels", g.num_labels);
  {
    Section w = s.sub("window");
    g.window.width = w.get<Index>("width", g.window.width);
    g.window.stride = w.get<Index>("stride", g.window.stride);
    w.finish();
  }
  g.noise_sigma = s.get<double>("noise_sigma", g.noise_sigma);
  auto amp = s.get<std::vector<double>>("amp_jitter", {g.amp_jitter_lo, g.amp_jitter_hi});
  if (amp.size() != 2) throw std::invalid_argument("config error at gen.amp_jitter: need [lo, hi]");
  g.amp_jitter_lo = amp[0];
  g.amp_jitter_hi = amp[1];
  g.onset_jitter = s.get<Index>("onset_jitter", g.onset_jitter);
  g.variants_per_label = s.get<int>("variants_per_label", g.variants_per_label);
  g.shared_confounder = s.get<bool>("shared_confounder", g.shared_confounder);
  g.distractor_motifs = s.get<int>("distractor_motifs", g.distractor_motifs);
  g.min_motifs = s.get<int>("min_motifs", g.min_motifs);
  g.max_motifs = s.get<int>("max_motifs", g.max_motifs);
  g.pretrain_groups = s.get<Index>("pretrain_groups", g.pretrain_groups);
  g.pretrain_val_groups = s.get<Index>("pretrain_val_groups", g.pretrain_val_groups);
  g.target_train = s.get<Index>("target_train", g.target_train);
  g.target_val = s.get<Index>("target_val", g.target_val);
  g.target_test = s.get<Index>("target_test", g.target_test);
  g.with_source = s.get<bool>("with_source", true);  // eval baselines need it
  g.source_labels = s.get<Index>("source_labels", g.source_labels);
  g.source_train = s.get<Index>("source_train", g.source_train);
  g.source_val = s.get<Index>("source_val", g.source_val);
  s.finish();
  return g;
}

FinetuneConfig parse_finetune_common(Section& s, FinetuneConfig def) {
  FinetuneConfig f = def;
  f.lr = s.get<double>("lr", f.lr);
  f.weight_decay = s.get<double>("weight_decay", f.weight_decay);
  f.batch = s.get<Index>("batch", f.batch);
  f.max_epochs = s.get<int>("max_epochs", f.max_epochs);
  f.plateau_patience = s.get<int>("plateau_patience", f.plateau_patience);
  f.plateau_factor = s.get<double>("plateau_factor", f.plateau_factor);
  f.early_stop_patience = s.get<int>("early_stop_patience", f.early_stop_patience);
  return f;
}

}  // namespace

EvalPlan PipelineConfig::eval_plan() const {
  EvalPlan plan;
  plan.conditions = eval.conditions;
  plan.sizes = eval.sizes;
  plan.seeds = eval.seeds;
  plan.bootstrap_resamples = eval.bootstrap_resamples;
  plan.slots_per_label = assign.slots_per_label;
  plan.balance = assign.balance;
  plan.sup_weights = sup_weights;
  plan.finetune_cfg = finetune;
  plan.probe_cfg = probe;
  plan.supproto_cfg = eval.supproto;
  plan.model_cfg = model;
  plan.source_projection = eval.source_projection;
  return plan;
}

PipelineConfig parse_config(const json& j) {
  PipelineConfig cfg;
  Section root(j, "config");
  cfg.seed = root.get<std::uint64_t>("seed", cfg.seed);
  cfg.root = root.get<std::string>("root", cfg.root);

  cfg.gen = parse_gen(root.sub("gen"));

  {
    Section s = root.sub("model");
    cfg.model.prototypes = s.get<Index>("prototypes", cfg.model.prototypes);
    cfg.model.hidden = s.get<Index>("hidden", cfg.model.hidden);
    cfg.model.emb_dim = s.get<Index>("emb_dim", cfg.model.emb_dim);
    s.finish();
  }
  {
    Section s = root.sub("pretrain");
    cfg.ssl.temperature = s.get<double>("temperature", cfg.ssl.temperature);
    cfg.ssl.koleo_weight = s.get<double>("koleo_weight", cfg.ssl.koleo_weight);
    cfg.ssl.batch_groups = s.get<Index>("batch_groups", cfg.ssl.batch_groups);
    cfg.ssl.lr = s.get<double>("lr", cfg.ssl.lr);
    cfg.ssl.weight_decay = s.get<double>("weight_decay", cfg.ssl.weight_decay);
    cfg.ssl.max_epochs = s.get<int>("max_epochs", cfg.ssl.max_epochs);
    cfg.ssl.plateau_patience = s.get<int>("plateau_patience", cfg.ssl.plateau_patience);
    cfg.ssl.plateau_factor = s.get<double>("plateau_factor", cfg.ssl.plateau_factor);
    cfg.ssl.early_stop_patience = s.get<int>("early_stop_patience", cfg.ssl.early_stop_patience);
    s.finish();
  }
  {
    Section s = root.sub("assign");
    cfg.assign.slots_per_label = s.get<Index>("slots_per_label", cfg.assign.slots_per_label);
    cfg.assign.balance = s.get<bool>("balance", cfg.assign.balance);
    cfg.assign.replicates = s.get<int>("balance_replicates", cfg.assign.replicates);
    s.finish();
  }
  {
    Section s = root.sub("finetune");
    cfg.finetune = parse_finetune_common(s, cfg.finetune);
    cfg.sup_weights.clst = s.get<double>("clst", cfg.sup_weights.clst);
    cfg.sup_weights.sep = s.get<double>("sep", cfg.sup_weights.sep);
    cfg.sup_weights.div = s.get<double>("div", cfg.sup_weights.div);
    cfg.sup_weights.cntrst = s.get<double>("cntrst", cfg.sup_weights.cntrst);
    s.finish();
  }
  {
    Section s = root.sub("project");
    cfg.project.mode = projection_mode_from_string(
        s.get<std::string>("mode", to_string(cfg.project.mode)));
    cfg.project.source_stage = s.get<std::string>("source_stage", cfg.project.source_stage);
    if (cfg.project.source_stage != "assign" && cfg.project.source_stage != "finetune") {
      throw std::invalid_argument(
          "config error at project.source_stage: must be 'assign' or 'finetune'");
    }
    s.finish();
  }
  {
    Section s = root.sub("probe");
    cfg.probe.c = s.get<double>("c", cfg.probe.c);
    cfg.probe.max_iter = s.get<int>("max_iter", cfg.probe.max_iter);
    cfg.probe.tol = s.get<double>("tol", cfg.probe.tol);
    s.finish();
  }
  {
    Section s = root.sub("eval");
    if (s.has("conditions")) {
      cfg.eval.conditions.clear();
      for (const auto& name : s.get<std::vector<std::string>>("conditions", {})) {
        cfg.eval.conditions.push_back(condition_from_string(name));
      }
    }
    cfg.eval.sizes = s.get<std::vector<Index>>("sizes", cfg.eval.sizes);
    cfg.eval.seeds = s.get<std::vector<std::uint64_t>>("seeds", cfg.eval.seeds);
    cfg.eval.bootstrap_resamples = s.get<int>("bootstrap_resamples", cfg.eval.bootstrap_resamples);
    cfg.eval.source_projection = s.get<bool>("source_projection", cfg.eval.source_projection);
    Section sp = s.sub("supproto");
    cfg.eval.supproto = parse_finetune_common(sp, supproto_defaults());
    sp.finish();
    s.finish();
  }
  {
    Section s = root.sub("bench");
    cfg.bench.prototypes = s.get<Index>("prototypes", cfg.bench.prototypes);
    cfg.bench.labels = s.get<Index>("labels", cfg.bench.labels);
    cfg.bench.slots_per_label = s.get<Index>("slots_per_label", cfg.bench.slots_per_label);
    cfg.bench.samples = s.get<Index>("samples", cfg.bench.samples);
    cfg.bench.emb_dim = s.get<Index>("emb_dim", cfg.bench.emb_dim);
    cfg.bench.seeds = s.get<std::vector<std::uint64_t>>("seeds", cfg.bench.seeds);
    cfg.bench.balance = s.get<bool>("balance", cfg.bench.balance);
    cfg.bench.pool.steps = s.get<int>("pool_steps", cfg.bench.pool.steps);
    cfg.bench.pool.lr = s.get<double>("pool_lr", cfg.bench.pool.lr);
    cfg.bench.pool.orth_weight = s.get<double>("pool_orth_weight", cfg.bench.pool.orth_weight);
    s.finish();
  }
  root.finish();
  return cfg;
}

PipelineConfig load_config_file(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw MissingInput(file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config error at " + file.string() + ": " + e.what());
  }
  return parse_config(j);
}

json config_echo(const PipelineConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["root"] = cfg.root;
  j["gen"] = {{"channels", cfg.gen.channels},
              {"timesteps", cfg.gen.timesteps},
              {"labels", cfg.gen.num_labels},
              {"window", {{"width", cfg.gen.window.width}, {"stride", cfg.gen.window.stride}}},
              {"noise_sigma", cfg.gen.noise_sigma},
              {"amp_jitter", {cfg.gen.amp_jitter_lo, cfg.gen.amp_jitter_hi}},
              {"onset_jitter", cfg.gen.onset_jitter},
              {"variants_per_label", cfg.gen.variants_per_label},
              {"shared_confounder", cfg.gen.shared_confounder},
              {"distractor_motifs", cfg.gen.distractor_motifs},
              {"min_motifs", cfg.gen.min_motifs},
              {"max_motifs", cfg.gen.max_motifs},
              {"pretrain_groups", cfg.gen.pretrain_groups},
              {"pretrain_val_groups", cfg.gen.pretrain_val_groups},
              {"target_train", cfg.gen.target_train},
              {"target_val", cfg.gen.target_val},
              {"target_test", cfg.gen.target_test},
              {"with_source", cfg.gen.with_source},
              {"source_labels", cfg.gen.source_labels},
              {"source_train", cfg.gen.source_train},
              {"source_val", cfg.gen.source_val}};
  j["model"] = {{"prototypes", cfg.model.prototypes},
                {"hidden", cfg.model.hidden},
                {"emb_dim", cfg.model.emb_dim}};
  j["pretrain"] = {{"temperature", cfg.ssl.temperature},
                   {"koleo_weight", cfg.ssl.koleo_weight},
                   {"batch_groups", cfg.ssl.batch_groups},
                   {"lr", cfg.ssl.lr},
                   {"weight_decay", cfg.ssl.weight_decay},
                   {"max_epochs", cfg.ssl.max_epochs},
                   {"plateau_patience", cfg.ssl.plateau_patience},
                   {"plateau_factor", cfg.ssl.plateau_factor},
                   {"early_stop_patience", cfg.ssl.early_stop_patience}};
  j["assign"] = {{"slots_per_label", cfg.assign.slots_per_label},
                 {"balance", cfg.assign.balance},
                 {"balance_replicates", cfg.assign.replicates}};
  j["finetune"] = {{"lr", cfg.finetune.lr},
                   {"weight_decay", cfg.finetune.weight_decay},
                   {"batch", cfg.finetune.batch},
                   {"max_epochs", cfg.finetune.max_epochs},
                   {"plateau_patience", cfg.finetune.plateau_patience},
                   {"plateau_factor", cfg.finetune.plateau_factor},
                   {"early_stop_patience", cfg.finetune.early_stop_patience},
                   {"clst", cfg.sup_weights.clst},
                   {"sep", cfg.sup_weights.sep},
                   {"div", cfg.sup_weights.div},
                   {"cntrst", cfg.sup_weights.cntrst}};
  j["project"] = {{"mode", to_string(cfg.project.mode)},
                  {"source_stage", cfg.project.source_stage}};
  j["probe"] = {{"c", cfg.probe.c}, {"max_iter", cfg.probe.max_iter}, {"tol", cfg.probe.tol}};
  std::vector<std::string> conds;
  for (Condition c : cfg.eval.conditions) conds.push_back(to_string(c));
  j["eval"] = {{"conditions", conds},
               {"sizes", cfg.eval.sizes},
               {"seeds", cfg.eval.seeds},
               {"bootstrap_resamples", cfg.eval.bootstrap_resamples},
               {"source_projection", cfg.eval.source_projection},
               {"supproto",
                {{"lr", cfg.eval.supproto.lr},
                 {"weight_decay", cfg.eval.supproto.weight_decay},
                 {"batch", cfg.eval.supproto.batch},
                 {"max_epochs", cfg.eval.supproto.max_epochs},
                 {"plateau_patience", cfg.eval.supproto.plateau_patience},
                 {"plateau_factor", cfg.eval.supproto.plateau_factor},
                 {"early_stop_patience", cfg.eval.supproto.early_stop_patience}}}};
  j["bench"] = {{"prototypes", cfg.bench.prototypes},
                {"labels", cfg.bench.labels},
                {"slots_per_label", cfg.bench.slots_per_label},
                {"samples", cfg.bench.samples},
                {"emb_dim", cfg.bench.emb_dim},
                {"seeds", cfg.bench.seeds},
                {"balance", cfg.bench.balance},
                {"pool_steps", cfg.bench.pool.steps},
                {"pool_lr", cfg.bench.pool.lr},
                {"pool_orth_weight", cfg.bench.pool.orth_weight}};
  return j;
}

}  // namespace protossl
