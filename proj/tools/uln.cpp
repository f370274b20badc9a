// uln: command-line driver for world generation, training, evaluation,
// ablations and reports over one run directory.

#include "uln/artifacts.hpp"
#include "uln/checkpoint.hpp"
#include "uln/errors.hpp"
#include "uln/pipeline.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using namespace uln;

namespace {

struct Common {
  std::string config;
  std::string preset = "benchmark";
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON experiment config (overrides --preset)");
  app->add_option("--preset", c.preset, "built-in config when no file is given")
      ->check(CLI::IsMember({"benchmark", "tiny", "val_subsample"}));
  app->add_option("--seed", c.seed, "overrides the config seed");
  app->add_option("--out", c.out, "run directory (overrides out_dir)");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = !c.config.empty() ? load_config(c.config)
                         : c.preset == "tiny"            ? tiny_config()
                         : c.preset == "val_subsample" ? val_subsample_config()
                                                         : benchmark_config();
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg.validate();
  return cfg;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void log(const std::string& m) { std::cerr << "uln: " << m << "\n"; }

const std::vector<text::Level> kLevels = {text::Level::L0, text::Level::L1, text::Level::L2, text::Level::L3};

std::string study_csv(const std::vector<StudyRow>& rows) {
  std::ostringstream os;
  os << "row,level,count,tl,ne,sr,spl,explorations\n";
  char buf[256];
  auto line = [&](const std::string& name, const std::string& level, const metrics::Summary& s) {
    std::snprintf(buf, sizeof buf, "\"%s\",%s,%zu,%.6f,%.6f,%.6f,%.6f,%.6f\n", name.c_str(), level.c_str(), s.count,
                  s.tl, s.ne, s.sr, s.spl, s.explorations);
    os << buf;
  };
  for (const auto& r : rows) {
    line(r.name, "all", r.report.overall);
    for (const auto& [lv, s] : r.report.per_level) line(r.name, text::to_string(lv), s);
  }
  return os.str();
}

nlohmann::json study_json(const std::vector<StudyRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) j.push_back({{"row", r.name}, {"report", metrics::to_json(r.report)}});
  return j;
}

int cmd_gen_world(const ExperimentConfig& cfg) {
  const RunLayout layout{cfg.out_dir};
  RunLock lock(layout);
  const auto t0 = std::chrono::steady_clock::now();
  const auto files = write_worlds(layout, cfg);
  record_manifest(layout, cfg, "gen-world", files, seconds_since(t0));
  log("wrote " + std::to_string(files.size()) + " worlds to " + layout.worlds().string());
  return 0;
}

int cmd_gen_data(const ExperimentConfig& cfg) {
  const RunLayout layout{cfg.out_dir};
  RunLock lock(layout);
  const auto t0 = std::chrono::steady_clock::now();
  Benchmark b = load_worlds(layout, cfg);
  fill_benchmark_paths(b);
  const auto files = write_datasets(layout, b);
  record_manifest(layout, cfg, "gen-data", files, seconds_since(t0));
  log("wrote " + std::to_string(b.train_low.size()) + " train paths and " + std::to_string(b.val.size()) +
      " validation episodes");
  return 0;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& stage_name) {
  const RunLayout layout{cfg.out_dir};
  RunLock lock(layout);
  std::vector<Stage> stages;
  if (stage_name == "all")
    stages = {Stage::AgentLow, Stage::AgentHighGss, Stage::Classifier, Stage::Uncertainty};
  else
    stages = {stage_from_string(stage_name)};
  const Benchmark b = load_benchmark(layout, cfg);
  for (Stage s : stages) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainedStack st = load_stack(layout, cfg, Needs::for_stage(s));
    log("training " + to_string(s));
    run_stage(b, st, s);
    const auto files = save_stage(layout, cfg, s, st);
    record_manifest(layout, cfg, "train/" + to_string(s), files, seconds_since(t0));
    if (s == Stage::AgentHighGss) std::cout << st.gss_table->markdown();
    if (s == Stage::Classifier) std::printf("held-out classifier accuracy: %.4f\n", st.classifier_accuracy);
    if (s == Stage::Uncertainty)
      std::printf("uncertainty labels: %.4f positive, held-out AUC %.4f\n", st.label_positive_fraction,
                  st.uncertainty_auc);
  }
  return 0;
}

int cmd_evaluate(const ExperimentConfig& cfg, const std::string& which_name, const std::string& name,
                 bool trace) {
  const RunLayout layout{cfg.out_dir};
  RunLock lock(layout);
  const auto t0 = std::chrono::steady_clock::now();
  const Which which = which_from_string(which_name);
  const Benchmark b = load_benchmark(layout, cfg);
  const TrainedStack st = load_stack(layout, cfg, Needs::for_which(which));
  e2e::Policy policy = make_policy(st, which, cfg.exploration);
  policy.record_trace = trace;
  const auto runs = run_policy(policy, b.val);
  const auto results = score_runs(runs, b.val);
  const std::string base = name.empty() ? to_string(which) : name;
  fs::create_directories(layout.results());
  std::vector<fs::path> files = {layout.results() / (base + ".json"), layout.results() / (base + ".csv"),
                                 layout.results() / (base + ".md")};
  write_json_file(files[0], metrics::results_file(results));
  write_text_file(files[1], metrics::results_csv(results));
  const std::string table = metrics::markdown_table({{to_string(which), metrics::aggregate(results)}}, kLevels);
  write_text_file(files[2], table);
  if (trace) {
    std::ostringstream os;
    for (std::size_t i = 0; i < runs.size(); ++i)
      for (const auto& line : e2e::trace_lines(runs[i], b.val[i].path_id)) os << line.dump() << "\n";
    files.push_back(layout.results() / (base + ".trace.jsonl"));
    write_text_file(files.back(), os.str());
  }
  record_manifest(layout, cfg, "evaluate/" + base, files, seconds_since(t0));
  std::cout << table;
  return 0;
}

int cmd_ablate(const ExperimentConfig& cfg, const std::string& study) {
  const RunLayout layout{cfg.out_dir};
  RunLock lock(layout);
  const auto t0 = std::chrono::steady_clock::now();
  const Benchmark b = load_benchmark(layout, cfg);
  const TrainedStack st = load_stack(layout, cfg, Needs::all());
  fs::create_directories(layout.reports());
  std::vector<fs::path> files;
  std::string md;
  auto put = [&](const std::string& file, const std::string& text) {
    files.push_back(layout.reports() / file);
    write_text_file(files.back(), text);
  };
  if (study == "components" || study == "threshold") {
    const auto rows = study == "components" ? ablate_components(b, st) : ablate_threshold(b, st);
    md = study_markdown(rows);
    put(study + ".csv", study_csv(rows));
    put(study + ".json", study_json(rows).dump(1));
  } else if (study == "correction_profile") {
    const auto prof = correction_profile(b, st);
    std::ostringstream os;
    os << "| Correction | Episodes | Mean step | Mean gap |\n|---|---|---|---|\n";
    char buf[128];
    for (std::size_t k = 0; k < prof.mean_gap.size(); ++k) {
      std::snprintf(buf, sizeof buf, "| %zu | %zu | %.3f | %.3f |\n", k + 1, prof.episodes_with[k],
                    prof.mean_step_of_correction[k], prof.mean_gap[k]);
      os << buf;
    }
    os << "\n| Segment | Steps | Accuracy |\n|---|---|---|\n";
    for (std::size_t k = 0; k < prof.segment_accuracy.size(); ++k) {
      std::snprintf(buf, sizeof buf, "| %zu | %zu | %.3f |\n", k + 1, prof.segment_steps[k], prof.segment_accuracy[k]);
      os << buf;
    }
    md = os.str();
    put(study + ".json", metrics::to_json(prof).dump(1));
  } else if (study == "gss_table") {
    if (!st.theta_l || !st.theta_h) throw DependencyError("gss_table study requires stage agent_high_gss");
    const auto table = agent::gss_identify(*st.theta_l, *st.theta_h, b.val_level(text::Level::L3),
                                           agent::gss_metric_from_string(cfg.gss_metric));
    md = table.markdown();
    put(study + ".json", table.to_json().dump(1));
  } else {
    throw ConfigError("unknown study '" + study + "' (components, threshold, correction_profile, gss_table)");
  }
  put(study + ".md", md);
  record_manifest(layout, cfg, "ablate/" + study, files, seconds_since(t0));
  std::cout << md;
  return 0;
}

int cmd_report(const ExperimentConfig& cfg) {
  const RunLayout layout{cfg.out_dir};
  RunLock lock(layout);
  const auto t0 = std::chrono::steady_clock::now();
  std::ostringstream os;
  os << "# Run report\n\nconfig hash `" << cfg.hash() << "`, seed " << cfg.seed << "\n\n";
  if (fs::exists(layout.results())) {
    std::vector<std::pair<std::string, metrics::Report>> rows;
    std::vector<fs::path> found;
    for (const auto& e : fs::directory_iterator(layout.results()))
      if (e.path().extension() == ".json") found.push_back(e.path());
    std::sort(found.begin(), found.end());
    for (const auto& p : found) {
      const auto results = metrics::results_from_json(read_json_file(p));
      rows.push_back({p.stem().string(), metrics::aggregate(results)});
    }
    if (!rows.empty()) os << "## Evaluations\n\n" << metrics::markdown_table(rows, kLevels) << "\n";
  }
  for (const char* study : {"gss_table", "components", "threshold", "correction_profile"}) {
    const fs::path p = layout.reports() / (std::string(study) + ".md");
    if (!fs::exists(p)) continue;
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    os << "## " << study << "\n\n" << ss.str() << "\n";
  }
  const fs::path out = layout.root / "report.md";
  write_text_file(out, os.str());
  record_manifest(layout, cfg, "report", {out}, seconds_since(t0));
  std::cout << os.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"uln: granularity-aware navigation agents on synthetic navigation graphs"};
  app.require_subcommand(1);
  Common common;
  std::string stage, which, study, name;
  bool trace = false;
  std::optional<double> threshold;
  std::optional<int> budget;

  auto* gw = app.add_subcommand("gen-world", "generate world files");
  auto* gd = app.add_subcommand("gen-data", "sample train and validation datasets over the worlds");
  auto* tr = app.add_subcommand("train", "run one training stage");
  auto* ev = app.add_subcommand("evaluate", "evaluate a policy on every validation level");
  auto* ab = app.add_subcommand("ablate", "run an ablation study");
  auto* rp = app.add_subcommand("report", "collect results and studies into report.md");
  for (auto* s : {gw, gd, tr, ev, ab, rp}) add_common(s, common);
  tr->add_option("--stage", stage, "agent_low, agent_high_gss, classifier, uncertainty, or all")->required();
  ev->add_option("--which", which, "greedy, gss, or gss_e2e")->required();
  ev->add_option("--name", name, "basename of the result files (default: --which)");
  ev->add_flag("--trace", trace, "also write per-step JSON lines");
  for (auto* s : {ev, ab}) {
    s->add_option("--threshold", threshold, "overrides exploration.threshold");
    s->add_option("--budget", budget, "overrides exploration.budget");
  }
  ab->add_option("--study", study, "components, threshold, correction_profile, or gss_table")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    ExperimentConfig cfg = resolve(common);
    if (threshold) cfg.exploration.threshold = *threshold;
    if (budget) cfg.exploration.budget = *budget;
    cfg.validate();
    if (gw->parsed()) return cmd_gen_world(cfg);
    if (gd->parsed()) return cmd_gen_data(cfg);
    if (tr->parsed()) return cmd_train(cfg, stage);
    if (ev->parsed()) return cmd_evaluate(cfg, which, name, trace);
    if (ab->parsed()) return cmd_ablate(cfg, study);
    if (rp->parsed()) return cmd_report(cfg);
  } catch (const uln::Error& e) {
    std::cerr << "uln: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
