#include "uln/pipeline.hpp"

#include "uln/errors.hpp"

#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <numbers>
#include <thread>

namespace uln {

namespace {

constexpr int kPathRetries = 1000;

agent::Episode make_episode(const nav::NavigationGraph* g, const SampledPath& sp, const text::Instruction& instr) {
  agent::Episode ep;
  ep.graph = g;
  ep.tokens = instr.tokens;
  ep.path = sp.path;
  ep.start = sp.path.front();
  ep.goal = sp.path.back();
  ep.heading = sp.heading;
  ep.level = instr.level;
  ep.path_id = instr.path_id;
  return ep;
}

std::string path_id(const char* split, int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05d", split, k);
  return buf;
}

}  // namespace

const nav::NavigationGraph* Benchmark::world(const std::string& name) const {
  for (const auto* list : {&worlds, &val_worlds})
    for (const auto& w : *list)
      if (w->name() == name) return w.get();
  throw LookupError("unknown world '" + name + "'");
}

std::vector<agent::Episode> Benchmark::val_level(text::Level level) const {
  std::vector<agent::Episode> out;
  for (const auto& ep : val)
    if (ep.level == level) out.push_back(ep);
  return out;
}

std::vector<nav::NavigationGraph> generate_worlds(const ExperimentConfig& cfg, bool validation) {
  std::vector<nav::NavigationGraph> out;
  const int n = validation ? cfg.val_worlds : cfg.n_worlds;
  for (int i = 0; i < n; ++i) {
    nav::WorldSpec spec = cfg.world;
    spec.seed = derive_seed(cfg.seed, validation ? "val-world" : "world", static_cast<std::uint64_t>(i));
    try {
      out.push_back(nav::generate_world(spec));
    } catch (const Error& e) {
      throw ValidationError("world " + std::to_string(i) + " (seed " + std::to_string(spec.seed) + "): " + e.what());
    }
  }
  return out;
}

SampledPath sample_path(const std::vector<const nav::NavigationGraph*>& worlds, int min_hops, int max_hops, Rng& rng) {
  if (worlds.empty()) throw InfeasibleEpisodeError("sample_path: no worlds");
  for (int attempt = 0; attempt < kPathRetries; ++attempt) {
    const auto w = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(worlds.size()) - 1));
    const auto& g = *worlds[w];
    const auto n = static_cast<std::int64_t>(g.size());
    const int a = static_cast<int>(uniform_int(rng, 0, n - 1));
    const int b = static_cast<int>(uniform_int(rng, 0, n - 1));
    const double heading = (2.0 * uniform01(rng) - 1.0) * std::numbers::pi;
    if (a == b) continue;
    std::vector<int> path = g.shortest_path(a, b);
    const int hops = static_cast<int>(path.size()) - 1;
    if (hops < min_hops || hops > max_hops) continue;
    return {w, std::move(path), heading};
  }
  throw InfeasibleEpisodeError("sample_path: no path with " + std::to_string(min_hops) + ".." +
                               std::to_string(max_hops) + " hops after " + std::to_string(kPathRetries) + " tries");
}

Benchmark make_benchmark(const ExperimentConfig& cfg) {
  cfg.validate();
  Benchmark b;
  b.config = cfg;
  b.vocab = text::Vocabulary::standard(cfg.world.room_labels);
  for (auto& g : generate_worlds(cfg, false)) b.worlds.push_back(std::make_unique<nav::NavigationGraph>(std::move(g)));
  for (auto& g : generate_worlds(cfg, true))
    b.val_worlds.push_back(std::make_unique<nav::NavigationGraph>(std::move(g)));
  fill_benchmark_paths(b);
  return b;
}

void fill_benchmark_paths(Benchmark& b) {
  const ExperimentConfig& cfg = b.config;
  b.train_low.clear();
  b.train_high.clear();
  b.val.clear();
  b.val_high.clear();
  std::vector<const nav::NavigationGraph*> train_w, val_w;
  for (const auto& g : b.worlds) train_w.push_back(g.get());
  for (const auto& g : (b.val_worlds.empty() ? b.worlds : b.val_worlds)) val_w.push_back(g.get());

  Rng rng = make_rng(cfg.seed, "train-paths");
  for (int k = 0; k < cfg.train_paths; ++k) {
    const SampledPath sp = sample_path(train_w, cfg.min_hops, cfg.max_hops, rng);
    const auto* g = train_w[sp.world];
    const auto levels = text::synth_levels(*g, sp.path, sp.heading, derive_seed(cfg.seed, "train-speaker", k), b.vocab,
                                           path_id("train", k));
    b.train_low.push_back(make_episode(g, sp, levels.l0));
    b.train_high.push_back(make_episode(g, sp, text::last_sentence(levels.l0, b.vocab)));
  }
  std::array<int, 4> keep{};
  for (std::size_t l = 0; l < keep.size(); ++l)
    keep[l] = static_cast<int>(std::llround(cfg.val_level_fraction[l] * cfg.val_paths));
  Rng vrng = make_rng(cfg.seed, "val-paths");
  for (int k = 0; k < cfg.val_paths; ++k) {
    const SampledPath sp = sample_path(val_w, cfg.min_hops, cfg.max_hops, vrng);
    const auto* g = val_w[sp.world];
    const auto levels =
        text::synth_levels(*g, sp.path, sp.heading, derive_seed(cfg.seed, "val-speaker", k), b.vocab, path_id("val", k));
    const std::array<const text::Instruction*, 4> instrs = {&levels.l0, &levels.l1, &levels.l2, &levels.l3};
    for (std::size_t l = 0; l < instrs.size(); ++l)
      if (k < keep[l]) b.val.push_back(make_episode(g, sp, *instrs[l]));
    if (k < keep[0]) b.val_high.push_back(make_episode(g, sp, text::last_sentence(levels.l0, b.vocab)));
  }
}

std::vector<text::EpisodeRecord> to_records(const std::vector<agent::Episode>& eps, const text::Vocabulary& vocab) {
  std::vector<text::EpisodeRecord> out;
  for (const auto& ep : eps) {
    if (!out.empty() && out.back().path_id == ep.path_id) {
      out.back().instructions.push_back(text::detokenize(ep.tokens, vocab));
      out.back().levels.push_back(ep.level);
      continue;
    }
    text::EpisodeRecord r;
    r.path_id = ep.path_id;
    r.scan = ep.graph->name();
    r.heading = ep.heading;
    for (int v : ep.path) r.path.push_back(ep.graph->viewpoint(v).id);
    r.instructions.push_back(text::detokenize(ep.tokens, vocab));
    r.levels.push_back(ep.level);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<agent::Episode> from_records(const std::vector<text::EpisodeRecord>& recs, const Benchmark& bench) {
  std::vector<agent::Episode> out;
  for (const auto& r : recs) {
    const auto* g = bench.world(r.scan);
    agent::Episode base;
    base.graph = g;
    for (const auto& id : r.path) base.path.push_back(g->index_of(id));
    if (base.path.empty()) throw ValidationError(r.path_id + ": empty path");
    base.start = base.path.front();
    base.goal = base.path.back();
    base.heading = r.heading;
    base.path_id = r.path_id;
    for (std::size_t i = 0; i < r.instructions.size(); ++i) {
      agent::Episode ep = base;
      ep.tokens = text::tokenize(r.instructions[i], bench.vocab);
      ep.level = i < r.levels.size() ? r.levels[i] : text::Level::Unknown;
      out.push_back(std::move(ep));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

agent::ImitationHparams imitation_hparams(const ExperimentConfig& cfg, const StageSchedule& s, std::string_view tag) {
  agent::ImitationHparams hp;
  hp.lr = s.effective_lr();
  hp.weight_decay = s.weight_decay;
  hp.iterations = s.effective_iterations(cfg.iteration_scale);
  hp.batch_size = s.batch_size;
  hp.seed = derive_seed(cfg.seed, tag);
  return hp;
}

agent::AgentParams train_low_agent(const Benchmark& b, const std::vector<agent::Episode>& data, std::string_view tag,
                                   std::vector<double>* curve) {
  const auto& cfg = b.config;
  agent::AgentParams p = agent::AgentParams::init(b.dims(), cfg.head, cfg.history, derive_seed(cfg.seed, "agent-init"));
  const auto res = agent::train_imitation(p, data, imitation_hparams(cfg, cfg.agent_low, tag));
  if (res.diverged) throw NumericError(std::string(tag) + ": training diverged after " + std::to_string(res.steps_done) + " steps");
  if (curve != nullptr) *curve = res.loss_curve;
  return p;
}

void stage_agent_low(const Benchmark& b, TrainedStack& st) {
  std::vector<double> curve;
  st.theta_l = train_low_agent(b, b.train_low, "agent_low", &curve);
  st.loss_curves["agent_low"] = std::move(curve);
}

void stage_agent_high_gss(const Benchmark& b, TrainedStack& st) {
  if (!st.theta_l) throw DependencyError("agent_high_gss requires stage agent_low");
  const auto& cfg = b.config;
  if (!st.theta_h) {
    agent::AgentParams h = *st.theta_l;
    const auto res = agent::train_imitation(h, b.train_high, imitation_hparams(cfg, cfg.agent_ref, "agent_ref"));
    if (res.diverged) throw NumericError("agent_high_gss: reference fine-tune diverged");
    st.loss_curves["agent_ref"] = res.loss_curve;
    st.theta_h = std::move(h);
  }
  st.gss_table = agent::gss_identify(*st.theta_l, *st.theta_h, b.val_level(text::Level::L3),
                                     agent::gss_metric_from_string(cfg.gss_metric));
  auto hp = imitation_hparams(cfg, cfg.agent_high, "agent_high_gss");
  std::optional<std::uint64_t> init_seed;
  if (cfg.gss_init == "fresh") init_seed = derive_seed(cfg.seed, "gss-init");
  const agent::AgentParams* donor = cfg.gss_init == "donor" ? &*st.theta_h : nullptr;
  auto res = agent::gss_retrain(*st.theta_l, st.gss_table->critical, b.train_high, hp, init_seed, donor);
  if (res.train.diverged) throw NumericError("agent_high_gss: retraining diverged");
  st.loss_curves["agent_high_gss"] = res.train.loss_curve;
  st.theta_gss = std::move(res.params);
}

std::vector<agent::ClassifierSample> classifier_samples(const std::vector<agent::Episode>& low,
                                                        const std::vector<agent::Episode>& high) {
  std::vector<agent::ClassifierSample> out;
  for (const auto& e : low) out.push_back({e.tokens, agent::Granularity::Low});
  for (const auto& e : high) out.push_back({e.tokens, agent::Granularity::High});
  return out;
}

void stage_classifier(const Benchmark& b, TrainedStack& st) {
  const auto& cfg = b.config;
  agent::Classifier clf = agent::Classifier::init(b.vocab.size(), cfg.classifier_dim, derive_seed(cfg.seed, "clf-init"));
  agent::ClassifierHparams hp;
  hp.lr = cfg.classifier_lr;
  hp.epochs = cfg.classifier_epochs;
  hp.batch_size = cfg.classifier_batch;
  hp.seed = derive_seed(cfg.seed, "clf-train");
  st.loss_curves["classifier"] = agent::train_classifier(clf, classifier_samples(b.train_low, b.train_high), hp);
  std::vector<agent::Episode> val_l0 = b.val_level(text::Level::L0);
  st.classifier_accuracy = agent::classifier_accuracy(clf, classifier_samples(val_l0, b.val_high));
  st.classifier = std::move(clf);
}

void stage_uncertainty(const Benchmark& b, TrainedStack& st) {
  if (!st.theta_gss) throw DependencyError("uncertainty requires stage agent_high_gss");
  if (!st.classifier) throw DependencyError("uncertainty requires stage classifier");
  const auto& cfg = b.config;
  const auto labels = e2e::generate_uncertainty_labels(*st.theta_gss, b.train_low, b.vocab, cfg.label_drop_rate,
                                                       derive_seed(cfg.seed, "labels"), &*st.classifier);
  st.label_positive_fraction = labels.positive_fraction();
  e2e::UncertaintyNet net = e2e::UncertaintyNet::init(e2e::UncertaintyShape::for_agent(*st.theta_gss),
                                                      cfg.uncertainty_hidden, derive_seed(cfg.seed, "uncert-init"));
  e2e::UncertaintyHparams hp;
  hp.lr = cfg.uncertainty_lr;
  hp.epochs = cfg.uncertainty_epochs;
  hp.batch_size = cfg.uncertainty_batch;
  hp.balance = cfg.uncertainty_balance;
  hp.seed = derive_seed(cfg.seed, "uncert-train");
  st.loss_curves["uncertainty"] = e2e::train_uncertainty(net, labels.samples, hp).loss_curve;
  const auto held = e2e::generate_uncertainty_labels(*st.theta_gss, b.val_level(text::Level::L0), b.vocab,
                                                     cfg.label_drop_rate, derive_seed(cfg.seed, "labels-val"),
                                                     &*st.classifier);
  st.uncertainty_auc = e2e::auc(net, held.samples);
  st.net = std::move(net);
}

TrainedStack train_all(const Benchmark& b, const std::function<void(const std::string&)>& log) {
  TrainedStack st;
  auto note = [&](const std::string& m) {
    if (log) log(m);
  };
  note("stage agent_low");
  stage_agent_low(b, st);
  note("stage agent_high_gss");
  stage_agent_high_gss(b, st);
  note("stage classifier");
  stage_classifier(b, st);
  note("stage uncertainty");
  stage_uncertainty(b, st);
  return st;
}

// ---------------------------------------------------------------------------

Which which_from_string(std::string_view s) {
  if (s == "greedy") return Which::Greedy;
  if (s == "gss") return Which::Gss;
  if (s == "gss_e2e") return Which::GssE2e;
  throw ConfigError("unknown evaluation '" + std::string(s) + "' (greedy, gss, gss_e2e)");
}

std::string to_string(Which w) {
  switch (w) {
    case Which::Greedy: return "greedy";
    case Which::Gss: return "gss";
    case Which::GssE2e: return "gss_e2e";
  }
  return "?";
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, unsigned workers) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, std::max<std::size_t>(n, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::vector<e2e::EpisodeRun> run_policy(const e2e::Policy& policy, const std::vector<agent::Episode>& episodes) {
  std::vector<e2e::EpisodeRun> runs(episodes.size());
  parallel_for(episodes.size(), [&](std::size_t i) { runs[i] = e2e::run_episode_e2e(policy, episodes[i]); });
  return runs;
}

std::vector<metrics::EpisodeResult> score_runs(const std::vector<e2e::EpisodeRun>& runs,
                                               const std::vector<agent::Episode>& episodes) {
  std::vector<metrics::EpisodeResult> out;
  for (std::size_t i = 0; i < runs.size(); ++i)
    out.push_back(metrics::score(runs[i].trajectory, *episodes[i].graph, episodes[i].level, runs[i].explorations,
                                 episodes[i].path_id));
  return out;
}

e2e::Policy make_policy(const TrainedStack& st, Which which, const e2e::ExplorationConfig& cfg) {
  e2e::Policy p;
  p.cfg = cfg;
  switch (which) {
    case Which::Greedy:
      if (!st.theta_l) throw DependencyError("greedy evaluation requires stage agent_low");
      p.agent = &*st.theta_l;
      p.routing = e2e::RoutingMode::FixedLow;
      break;
    case Which::GssE2e:
      if (!st.net) throw DependencyError("gss_e2e evaluation requires stage uncertainty");
      p.net = &*st.net;
      [[fallthrough]];
    case Which::Gss:
      if (!st.theta_gss) throw DependencyError(to_string(which) + " evaluation requires stage agent_high_gss");
      if (!st.classifier) throw DependencyError(to_string(which) + " evaluation requires stage classifier");
      p.agent = &*st.theta_gss;
      p.classifier = &*st.classifier;
      p.routing = e2e::RoutingMode::Classifier;
      break;
  }
  return p;
}

std::vector<metrics::EpisodeResult> evaluate(const Benchmark& b, const TrainedStack& st, Which which,
                                             const e2e::ExplorationConfig& cfg) {
  return score_runs(run_policy(make_policy(st, which, cfg), b.val), b.val);
}

std::string ComponentRow::label() const {
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += " + ";
    s += name;
  };
  add(classify, "classifier");
  add(gss, "GSS");
  add(lookahead, "lookahead");
  add(freeze, "state freeze");
  return s.empty() ? "base agent" : s;
}

std::vector<ComponentRow> component_rows() {
  return {{false, false, false, false}, {false, true, false, false}, {true, true, false, false},
          {false, false, true, false},  {false, false, true, true},  {true, true, true, false},
          {true, true, true, true}};
}

std::vector<StudyRow> ablate_components(const Benchmark& b, const TrainedStack& st) {
  if (!st.theta_l || !st.theta_gss || !st.classifier || !st.net)
    throw DependencyError("components study requires every training stage");
  std::vector<StudyRow> rows;
  for (const auto& c : component_rows()) {
    e2e::Policy p;
    p.cfg = b.config.exploration;
    p.cfg.freeze = c.freeze;
    p.agent = c.gss ? &*st.theta_gss : &*st.theta_l;
    p.routing = !c.gss ? e2e::RoutingMode::FixedLow
                       : (c.classify ? e2e::RoutingMode::Classifier : e2e::RoutingMode::LevelOracle);
    p.classifier = &*st.classifier;
    p.net = c.lookahead ? &*st.net : nullptr;
    StudyRow r;
    r.name = c.label();
    r.results = score_runs(run_policy(p, b.val), b.val);
    r.report = metrics::aggregate(r.results);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<StudyRow> ablate_threshold(const Benchmark& b, const TrainedStack& st, const std::vector<double>& thresholds) {
  std::vector<StudyRow> rows;
  for (double t : thresholds) {
    e2e::ExplorationConfig cfg = b.config.exploration;
    cfg.threshold = t;
    StudyRow r;
    char buf[32];
    std::snprintf(buf, sizeof buf, "threshold %.2f", t);
    r.name = buf;
    r.results = evaluate(b, st, Which::GssE2e, cfg);
    r.report = metrics::aggregate(r.results);
    rows.push_back(std::move(r));
  }
  return rows;
}

metrics::CorrectionProfile correction_profile(const Benchmark& b, const TrainedStack& st) {
  const e2e::Policy p = make_policy(st, Which::GssE2e, b.config.exploration);
  std::vector<agent::Episode> eps;
  for (const auto& ep : b.val)
    if (ep.level != text::Level::L0) eps.push_back(ep);
  return metrics::summarize_corrections(e2e::correction_rollouts(p, eps));
}

std::string study_markdown(const std::vector<StudyRow>& rows, bool with_tl) {
  std::vector<std::pair<std::string, metrics::Report>> r;
  for (const auto& row : rows) r.push_back({row.name, row.report});
  return metrics::markdown_table(r, {text::Level::L0, text::Level::L1, text::Level::L2, text::Level::L3}, with_tl);
}

}  // namespace uln
