#include "protossl/config.hpp"
#include "protossl/tensorio.hpp"
#include "protossl/version.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace protossl;

namespace {

struct StageContext {
  PipelineConfig cfg;
  std::uint64_t seed{0};
  fs::path root;

  fs::path data_dir() const { return root / "data"; }
  fs::path stage_dir(const std::string& stage) const {
    return root / stage / ("seed_" + std::to_string(seed));
  }
};

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

void write_effective_config(const StageContext& ctx, const fs::path& dir,
                            const std::string& invocation) {
  json j = config_echo(ctx.cfg);
  j["invocation"] = invocation;
  j["effective_seed"] = ctx.seed;
  j["git_describe"] = kGitDescribe;
  fs::create_directories(dir);
  write_text(dir / "effective_config.json", j.dump(2) + "\n");
}

Dataset load_split(const StageContext& ctx, const std::string& split) {
  const fs::path dir = ctx.data_dir() / split;
  if (!fs::exists(dir / "manifest.json")) throw MissingInput(dir.string());
  return load_dataset(dir);
}

Model load_stage_model(const StageContext& ctx, const std::string& stage) {
  const fs::path dir = ctx.stage_dir(stage) / "model";
  if (!fs::exists(dir / "manifest.json")) throw MissingInput(dir.string());
  return load_model(dir);
}

json assignment_to_json(const SlotAssignment& a, Index num_labels, Index slots_per_label) {
  json slots = json::array();
  for (const auto& e : a.slots) {
    slots.push_back({{"label", e.label}, {"slot", e.slot},
                     {"prototype", e.prototype}, {"q", e.q}});
  }
  return {{"slots", std::move(slots)}, {"objective", a.objective},
          {"num_labels", num_labels}, {"slots_per_label", slots_per_label}};
}

SlotAssignment assignment_from_json(const json& j) {
  SlotAssignment a;
  for (const auto& s : j.at("slots")) {
    SlotEntry e;
    e.label = s.at("label").get<int>();
    e.slot = s.at("slot").get<int>();
    e.prototype = s.at("prototype").get<Index>();
    e.q = s.at("q").get<double>();
    a.slots.push_back(e);
  }
  a.objective = j.at("objective").get<double>();
  return a;
}

SlotAssignment load_assignment(const StageContext& ctx) {
  const fs::path file = ctx.stage_dir("assign") / "assignment.json";
  if (!fs::exists(file)) throw MissingInput(file.string());
  std::ifstream in(file);
  return assignment_from_json(json::parse(in));
}

// ---- subcommands -----------------------------------------------------------

void cmd_gen(const StageContext& ctx) {
  auto out = generate(ctx.cfg.gen, Rng(ctx.seed, "gen"));
  json ds_echo = {{"gen", config_echo(ctx.cfg)["gen"]}, {"seed", ctx.seed}};
  save_dataset(out.pretrain_train, ctx.data_dir() / "pretrain_train", ds_echo);
  save_dataset(out.pretrain_val, ctx.data_dir() / "pretrain_val", ds_echo);
  save_dataset(out.target_train, ctx.data_dir() / "target_train", ds_echo);
  save_dataset(out.target_val, ctx.data_dir() / "target_val", ds_echo);
  save_dataset(out.target_test, ctx.data_dir() / "target_test", ds_echo);
  if (out.source_train) {
    save_dataset(*out.source_train, ctx.data_dir() / "source_train", ds_echo);
    save_dataset(*out.source_val, ctx.data_dir() / "source_val", ds_echo);
  }
  write_effective_config(ctx, ctx.data_dir(), "gen");
  std::cout << "gen: wrote " << ctx.data_dir().string() << "\n";
}

void cmd_pretrain(const StageContext& ctx) {
  Dataset train = load_split(ctx, "pretrain_train");
  Dataset val = load_split(ctx, "pretrain_val");
  Model m = make_model(ctx.cfg.model, ctx.cfg.gen.window, train.channels, train.timesteps,
                       Rng(ctx.seed, "model"));
  SslConfig ssl = ctx.cfg.ssl;
  ssl.seed = ctx.seed;
  auto result = pretrain(m, train, val, ssl);

  const fs::path dir = ctx.stage_dir("pretrain");
  save_model(m, dir / "model", {{"stage", "pretrain"}, {"seed", ctx.seed},
                                {"git_describe", kGitDescribe}});
  write_text(dir / "loss_curve.csv", curve_csv(result.curve));
  write_effective_config(ctx, dir, "pretrain");
  std::cout << "pretrain: " << result.epochs_run << " epochs, best val NT-Xent "
            << result.best_val << "\n";
}

void cmd_assign(const StageContext& ctx) {
  const Index num_labels = ctx.cfg.gen.num_labels;
  const Index slots = ctx.cfg.assign.slots_per_label;
  Model m = load_stage_model(ctx, "pretrain");
  if (m.bank.size() < num_labels * slots) {
    throw std::invalid_argument("assign: capacity violated, need K >= L*M but K=" +
                                std::to_string(m.bank.size()) + " < L*M=" +
                                std::to_string(num_labels * slots));
  }
  Dataset train = load_split(ctx, "target_train");

  const auto t0 = std::chrono::steady_clock::now();
  Activations act = activations(m, train.X);
  auto s = score(act.A, train.Y, Rng(ctx.seed, "assign.score"), ctx.cfg.assign.balance,
                 ctx.cfg.assign.replicates);
  const auto t1 = std::chrono::steady_clock::now();
  auto a = solve_lap(s.Q, num_labels, slots);
  const auto t2 = std::chrono::steady_clock::now();
  apply(m.bank, a);

  const fs::path dir = ctx.stage_dir("assign");
  fs::create_directories(dir);
  write_text(dir / "assignment.json",
             assignment_to_json(a, num_labels, slots).dump(2) + "\n");
  json timing = {{"score_ms", std::chrono::duration<double, std::milli>(t1 - t0).count()},
                 {"solve_ms", std::chrono::duration<double, std::milli>(t2 - t1).count()}};
  write_text(dir / "timing.json", timing.dump(2) + "\n");
  save_model(m, dir / "model", {{"stage", "assign"}, {"seed", ctx.seed},
                                {"git_describe", kGitDescribe}});
  write_effective_config(ctx, dir, "assign");
  std::cout << "assign: objective " << a.objective << " over " << a.slots.size()
            << " slots\n";
}

void cmd_finetune(const StageContext& ctx) {
  Model m = load_stage_model(ctx, "assign");
  auto a = load_assignment(ctx);
  Dataset train = load_split(ctx, "target_train");
  Dataset val = load_split(ctx, "target_val");
  FinetuneConfig cfg = ctx.cfg.finetune;
  cfg.seed = ctx.seed;
  auto result = finetune(m, train, val, a, ctx.cfg.sup_weights, cfg);

  const fs::path dir = ctx.stage_dir("finetune");
  save_model(m, dir / "model", {{"stage", "finetune"}, {"seed", ctx.seed},
                                {"git_describe", kGitDescribe}});
  std::string csv = "epoch,train_loss,val_loss,lr\n";
  char buf[160];
  for (const auto& r : result.curve) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss,
                  r.val_loss, r.lr);
    csv += buf;
  }
  write_text(dir / "loss_curve.csv", csv);
  write_effective_config(ctx, dir, "finetune");
  std::cout << "finetune: " << result.epochs_run << " epochs, val " << result.initial_val
            << " -> " << result.best_val << "\n";
}

void cmd_project(const StageContext& ctx) {
  Model m = load_stage_model(ctx, ctx.cfg.project.source_stage);
  auto a = load_assignment(ctx);
  Dataset train = load_split(ctx, "target_train");
  std::optional<Dataset> pretrain_corpus;
  const Dataset* corpus_ptr = nullptr;
  if (ctx.cfg.project.mode == ProjectionMode::pip) {
    pretrain_corpus = load_split(ctx, "pretrain_train");
    corpus_ptr = &*pretrain_corpus;
  }
  auto entries = project(m, train, a, ctx.cfg.project.mode, corpus_ptr);

  const fs::path dir = ctx.stage_dir("project");
  save_model(m, dir / "model", {{"stage", "project"}, {"seed", ctx.seed},
                                {"mode", to_string(ctx.cfg.project.mode)},
                                {"git_describe", kGitDescribe}});
  json rows = json::array();
  for (const auto& e : entries) {
    rows.push_back({{"prototype", e.prototype}, {"label", e.label}, {"slot", e.slot},
                    {"sample", e.sample}, {"window", e.window},
                    {"activation", e.activation}});
  }
  write_text(dir / "projection.json",
             json{{"mode", to_string(ctx.cfg.project.mode)}, {"entries", rows}}.dump(2) + "\n");
  write_effective_config(ctx, dir, "project");
  std::cout << "project: grounded " << entries.size() << " slots ("
            << to_string(ctx.cfg.project.mode) << ")\n";
}

void cmd_probe(const StageContext& ctx) {
  Model m = load_stage_model(ctx, "project");
  auto a = load_assignment(ctx);
  Dataset train = load_split(ctx, "target_train");
  Dataset test = load_split(ctx, "target_test");

  Mat slots = slot_matrix(m.bank, a);
  Activations a_train = activations_vs(m, train.X, slots);
  Classifier clf = train_probe(a_train.A, train.Y, ctx.cfg.probe);
  Activations a_test = activations_vs(m, test.X, slots);
  Mat scores = clf.predict(a_test.A);
  Vec label_auc = per_label_auroc(scores, test.Y);
  Rng boot(ctx.seed, "probe.bootstrap");
  auto ci = bootstrap_ci(scores, test.Y, ctx.cfg.eval.bootstrap_resamples, boot);

  std::vector<int> feature_labels;
  for (const auto& e : a.slots) feature_labels.push_back(e.label);
  auto coef = coefficient_report(clf, feature_labels);

  const fs::path dir = ctx.stage_dir("probe");
  fs::create_directories(dir);
  TensorWriter w;
  w.add("W", clf.W);
  w.add("b", clf.b.transpose());
  w.add("means", clf.means.transpose());
  w.add("stds", clf.stds.transpose());
  w.set_extra({{"c", ctx.cfg.probe.c}, {"git_describe", kGitDescribe}});
  w.save(dir / "classifier");

  std::string csv = "label,auroc\n";
  char buf[200];
  for (Index l = 0; l < label_auc.size(); ++l) {
    std::snprintf(buf, sizeof(buf), "%s,%.17g\n", test.label_names[static_cast<std::size_t>(l)].c_str(),
                  label_auc(l));
    csv += buf;
  }
  std::snprintf(buf, sizeof(buf), "macro,%.17g\nci_lo,%.17g\nci_hi,%.17g\n", ci.point, ci.lo,
                ci.hi);
  csv += buf;
  write_text(dir / "metrics.csv", csv);

  std::string coef_csv = "label,or_pos,or_neg,ratio\n";
  for (const auto& row : coef.rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", row.label, row.or_pos,
                  row.or_neg, row.ratio);
    coef_csv += buf;
  }
  std::snprintf(buf, sizeof(buf), "mean_ratio,,,%.17g\n", coef.mean_ratio);
  coef_csv += buf;
  write_text(dir / "coefficients.csv", coef_csv);
  write_effective_config(ctx, dir, "probe");
  std::cout << "probe: macro AUROC " << ci.point << " [" << ci.lo << ", " << ci.hi << "]\n";
}

void cmd_eval(const StageContext& ctx) {
  GenOutput data;
  data.pretrain_train = load_split(ctx, "pretrain_train");
  data.pretrain_val = load_split(ctx, "pretrain_val");
  data.target_train = load_split(ctx, "target_train");
  data.target_val = load_split(ctx, "target_val");
  data.target_test = load_split(ctx, "target_test");
  if (fs::exists(ctx.data_dir() / "source_train" / "manifest.json")) {
    data.source_train = load_split(ctx, "source_train");
    data.source_val = load_split(ctx, "source_val");
  }

  EvalPlan plan = ctx.cfg.eval_plan();
  auto provider = [&](std::uint64_t seed) -> Model {
    const fs::path dir = ctx.root / "pretrain" / ("seed_" + std::to_string(seed)) / "model";
    if (!fs::exists(dir / "manifest.json")) throw MissingInput(dir.string());
    return load_model(dir);
  };

  auto matrix = run_matrix(data, plan, provider);
  const fs::path dir = ctx.root / "eval";
  fs::create_directories(dir);
  write_text(dir / "results.csv", eval_csv(matrix, data.target_train.label_names));
  write_text(dir / "timing.csv", eval_timing_csv(matrix));

  json summary;
  int ok = 0, failed = 0;
  for (const auto& c : matrix.cells) (c.ok ? ok : failed)++;
  summary["cells_ok"] = ok;
  summary["cells_failed"] = failed;
  summary["git_describe"] = kGitDescribe;
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  write_effective_config(ctx, dir, "eval");
  std::cout << "eval: " << ok << " cells ok, " << failed << " failed\n";
  if (failed > 0) throw std::runtime_error(std::to_string(failed) + " eval cells failed");
}

void cmd_bench(const StageContext& ctx) {
  const auto& b = ctx.cfg.bench;
  PoolConfig pool = b.pool;
  auto rows = bench_assign(b.prototypes, b.labels, b.slots_per_label, b.samples, b.emb_dim,
                           b.seeds, pool, b.balance);
  const fs::path dir = ctx.root / "bench";
  fs::create_directories(dir);
  write_text(dir / "timing.csv", bench_csv(rows));
  write_effective_config(ctx, dir, "bench-assign");
  for (const auto& r : rows) {
    std::cout << "seed " << r.seed << ": score+lap " << (r.score_ms + r.solve_ms)
              << " ms, pool " << r.pool_ms << " ms\n";
  }
}

// Minimal CSV reader for the files this tool writes (no quoting needed).
std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw MissingInput(p.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(cell);
    if (line.back() == ',') row.push_back("");
    rows.push_back(std::move(row));
  }
  return rows;
}

void cmd_report(const StageContext& ctx) {
  auto rows = read_csv(ctx.root / "eval" / "results.csv");
  if (rows.size() < 2) throw std::runtime_error("report: results.csv has no data rows");

  // aggregate macro AUROC by (condition, size)
  std::map<std::string, std::map<long long, std::vector<double>>> by_cell;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() < 5 || r[3] != "1") continue;
    by_cell[r[0]][std::stoll(r[1])].push_back(std::stod(r[4]));
  }

  json summary;
  std::vector<long long> sizes;
  for (const auto& [cond, per_size] : by_cell) {
    json jc;
    for (const auto& [size, macros] : per_size) {
      double sum = 0;
      for (double v : macros) sum += v;
      const double mean = sum / static_cast<double>(macros.size());
      jc[std::to_string(size)] = {{"mean_macro_auroc", mean},
                                  {"seeds", macros.size()}};
      if (std::find(sizes.begin(), sizes.end(), size) == sizes.end()) sizes.push_back(size);
    }
    summary["conditions"][cond] = std::move(jc);
  }
  std::sort(sizes.begin(), sizes.end());

  // gnuplot-ready label-efficiency curves: size, then one column per condition
  std::string tsv = "train_size";
  for (const auto& [cond, _] : by_cell) tsv += "\t" + cond;
  tsv += "\n";
  for (long long size : sizes) {
    tsv += std::to_string(size);
    for (const auto& [cond, per_size] : by_cell) {
      auto it = per_size.find(size);
      if (it == per_size.end()) {
        tsv += "\tnan";
      } else {
        double sum = 0;
        for (double v : it->second) sum += v;
        char buf[48];
        std::snprintf(buf, sizeof(buf), "\t%.6f", sum / static_cast<double>(it->second.size()));
        tsv += buf;
      }
    }
    tsv += "\n";
  }

  summary["git_describe"] = kGitDescribe;

  const fs::path dir = ctx.root / "report";
  fs::create_directories(dir);
  if (fs::exists(ctx.root / "bench" / "timing.csv")) {
    auto bench_rows = read_csv(ctx.root / "bench" / "timing.csv");
    double lap = 0, pool = 0;
    int n = 0;
    for (std::size_t i = 1; i < bench_rows.size(); ++i) {
      lap += std::stod(bench_rows[i][3]);
      pool += std::stod(bench_rows[i][4]);
      ++n;
    }
    if (n > 0) {
      json bench_summary = {{"mean_lap_ms", lap / n}, {"mean_pool_ms", pool / n},
                            {"replicates", n}};
      write_text(dir / "bench_timing.json", bench_summary.dump(2) + "\n");
    }
  }
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  write_text(dir / "label_efficiency.tsv", tsv);
  write_effective_config(ctx, dir, "report");
  std::cout << "report: wrote " << (dir / "summary.json").string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prototype pretraining, label assignment and evaluation pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_override;
  std::int64_t seed_override = -1;

  const std::vector<std::pair<std::string, void (*)(const StageContext&)>> stages = {
      {"gen", cmd_gen},           {"pretrain", cmd_pretrain}, {"assign", cmd_assign},
      {"finetune", cmd_finetune}, {"project", cmd_project},   {"probe", cmd_probe},
      {"eval", cmd_eval},         {"bench-assign", cmd_bench}, {"report", cmd_report}};

  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, fn] : stages) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "pipeline config JSON")->required();
    sub->add_option("--seed", seed_override, "override the config seed");
    sub->add_option("--out", out_override, "override the output root directory");
    subs[name] = sub;
  }

  CLI11_PARSE(app, argc, argv);

  try {
    StageContext ctx;
    ctx.cfg = load_config_file(config_path);
    ctx.seed = seed_override >= 0 ? static_cast<std::uint64_t>(seed_override) : ctx.cfg.seed;
    ctx.root = out_override.empty() ? fs::path(ctx.cfg.root) : fs::path(out_override);

    for (const auto& [name, fn] : stages) {
      if (subs[name]->parsed()) {
        fn(ctx);
        return 0;
      }
    }
    return 1;
  } catch (const MissingInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
