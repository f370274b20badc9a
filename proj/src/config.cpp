#include "uln/config.hpp"

#include "uln/checkpoint.hpp"
#include "uln/errors.hpp"
#include "uln/gss.hpp"
#include "uln/rng.hpp"

#include <cmath>
#include <cstdio>
#include <set>

namespace uln {

namespace {

// Reads keys from one JSON object and rejects anything it was not asked for.
class Section {
 public:
  Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError(name_ + ": expected an object");
  }
  ~Section() = default;

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }
  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.contains(k)) throw ConfigError(name_ + ": unknown key '" + k + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

nlohmann::json schedule_json(const StageSchedule& s) {
  return {{"lr", s.lr},
          {"lr_scale", s.lr_scale},
          {"iterations", s.iterations},
          {"batch_size", s.batch_size},
          {"weight_decay", s.weight_decay}};
}

StageSchedule schedule_from(const nlohmann::json& j, const std::string& name, StageSchedule s) {
  Section sec(j, name);
  sec.read("lr", s.lr);
  sec.read("lr_scale", s.lr_scale);
  sec.read("iterations", s.iterations);
  sec.read("batch_size", s.batch_size);
  sec.read("weight_decay", s.weight_decay);
  sec.finish();
  return s;
}

}  // namespace

int StageSchedule::effective_iterations(double iteration_scale) const {
  return static_cast<int>(std::llround(static_cast<double>(iterations) * iteration_scale));
}

void ExperimentConfig::validate() const {
  world.validate();
  if (n_worlds < 1) throw ConfigError("n_worlds must be >= 1");
  if (train_paths < 1 || val_paths < 1) throw ConfigError("data: path counts must be >= 1");
  if (min_hops < 1 || max_hops < min_hops) throw ConfigError("data: need 1 <= min_hops <= max_hops");
  if (max_hops + 1 > dims.max_steps) throw ConfigError("data: max_hops + 1 must fit within agent.max_steps");
  if (val_worlds < 0) throw ConfigError("data: val_worlds must be >= 0");
  for (double f : val_level_fraction)
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("data.val_level_fraction entries must lie in [0, 1]");
  if (dims.d_h < 1 || dims.heads < 1 || dims.d_h % dims.heads != 0 || dims.layers < 1)
    throw ConfigError("agent: d_h must be a positive multiple of heads and layers >= 1");
  if (!(iteration_scale > 0.0)) throw ConfigError("train.iteration_scale must be positive");
  for (const auto* s : {&agent_low, &agent_high, &agent_ref})
    if (!(s->effective_lr() >= 0.0) || s->batch_size < 1 || s->iterations < 0)
      throw ConfigError("train: invalid stage schedule");
  if (!(classifier_lr >= 0.0) || classifier_epochs < 0 || classifier_batch < 1 || classifier_dim < 1)
    throw ConfigError("train.classifier: invalid settings");
  if (!(uncertainty_lr >= 0.0) || uncertainty_epochs < 0 || uncertainty_hidden < 1 || uncertainty_batch < 1)
    throw ConfigError("uncertainty: invalid settings");
  if (!(label_drop_rate >= 0.0 && label_drop_rate < 1.0)) throw ConfigError("uncertainty.drop_rate must lie in [0, 1)");
  agent::gss_metric_from_string(gss_metric);
  if (gss_init != "donor" && gss_init != "low" && gss_init != "fresh")
    throw ConfigError("train.gss_init must be donor, low, or fresh");
  exploration.validate();
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

nlohmann::json ExperimentConfig::to_json() const {
  return {
      {"seed", seed},
      {"n_worlds", n_worlds},
      {"world", nav::to_json(world)},
      {"data",
       {{"train_paths", train_paths},
        {"val_paths", val_paths},
        {"min_hops", min_hops},
        {"max_hops", max_hops},
        {"val_worlds", val_worlds},
        {"val_level_fraction", val_level_fraction}}},
      {"agent",
       {{"d_h", dims.d_h},
        {"layers", dims.layers},
        {"heads", dims.heads},
        {"d_ff", dims.d_ff},
        {"max_len", dims.max_len},
        {"max_steps", dims.max_steps},
        {"head", std::string(agent::to_string(head))},
        {"history", std::string(agent::to_string(history))}}},
      {"train",
       {{"iteration_scale", iteration_scale},
        {"agent_low", schedule_json(agent_low)},
        {"agent_high", schedule_json(agent_high)},
        {"agent_ref", schedule_json(agent_ref)},
        {"gss_init", gss_init},
        {"classifier",
         {{"lr", classifier_lr}, {"epochs", classifier_epochs}, {"batch_size", classifier_batch}, {"dim", classifier_dim}}}}},
      {"uncertainty",
       {{"lr", uncertainty_lr},
        {"epochs", uncertainty_epochs},
        {"hidden", uncertainty_hidden},
        {"batch_size", uncertainty_batch},
        {"drop_rate", label_drop_rate},
        {"balance", uncertainty_balance}}},
      {"gss_metric", gss_metric},
      {"exploration", e2e::to_json(exploration)},
      {"out_dir", out_dir},
  };
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  Section top(j, "config");
  top.read("seed", c.seed);
  top.read("n_worlds", c.n_worlds);
  top.read("gss_metric", c.gss_metric);
  top.read("out_dir", c.out_dir);
  if (const auto* w = top.child("world")) {
    c.world = nav::world_spec_from_json(*w);
  }
  if (const auto* d = top.child("data")) {
    Section s(*d, "data");
    s.read("train_paths", c.train_paths);
    s.read("val_paths", c.val_paths);
    s.read("min_hops", c.min_hops);
    s.read("max_hops", c.max_hops);
    s.read("val_worlds", c.val_worlds);
    s.read("val_level_fraction", c.val_level_fraction);
    s.finish();
  }
  if (const auto* a = top.child("agent")) {
    Section s(*a, "agent");
    s.read("d_h", c.dims.d_h);
    s.read("layers", c.dims.layers);
    s.read("heads", c.dims.heads);
    s.read("d_ff", c.dims.d_ff);
    s.read("max_len", c.dims.max_len);
    s.read("max_steps", c.dims.max_steps);
    std::string head(agent::to_string(c.head)), hist(agent::to_string(c.history));
    s.read("head", head);
    s.read("history", hist);
    c.head = agent::head_style_from_string(head);
    c.history = agent::history_style_from_string(hist);
    s.finish();
  }
  if (const auto* t = top.child("train")) {
    Section s(*t, "train");
    s.read("iteration_scale", c.iteration_scale);
    if (const auto* x = s.child("agent_low")) c.agent_low = schedule_from(*x, "train.agent_low", c.agent_low);
    if (const auto* x = s.child("agent_high")) c.agent_high = schedule_from(*x, "train.agent_high", c.agent_high);
    if (const auto* x = s.child("agent_ref")) c.agent_ref = schedule_from(*x, "train.agent_ref", c.agent_ref);
    s.read("gss_init", c.gss_init);
    if (const auto* x = s.child("classifier")) {
      Section cs(*x, "train.classifier");
      cs.read("lr", c.classifier_lr);
      cs.read("epochs", c.classifier_epochs);
      cs.read("batch_size", c.classifier_batch);
      cs.read("dim", c.classifier_dim);
      cs.finish();
    }
    s.finish();
  }
  if (const auto* u = top.child("uncertainty")) {
    Section s(*u, "uncertainty");
    s.read("lr", c.uncertainty_lr);
    s.read("epochs", c.uncertainty_epochs);
    s.read("hidden", c.uncertainty_hidden);
    s.read("batch_size", c.uncertainty_batch);
    s.read("drop_rate", c.label_drop_rate);
    s.read("balance", c.uncertainty_balance);
    s.finish();
  }
  if (const auto* e = top.child("exploration")) c.exploration = e2e::exploration_from_json(*e);
  top.finish();
  c.validate();
  return c;
}

std::string ExperimentConfig::hash() const {
  nlohmann::json j = to_json();
  // Evaluation-only settings do not invalidate checkpoints.
  j.erase("out_dir");
  j.erase("exploration");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

agent::AgentDims ExperimentConfig::resolved_dims(int vocab_size) const {
  agent::AgentDims d = dims;
  d.d_v = world.feature_dim;
  d.d_a = world.angle_dim;
  d.max_candidates = world.max_candidates;
  d.vocab = vocab_size;
  return d;
}

ExperimentConfig load_config(const std::filesystem::path& file) {
  try {
    return ExperimentConfig::from_json(read_json_file(file));
  } catch (const ConfigError& e) {
    throw ConfigError(file.string() + ": " + e.what());
  }
}

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.n_worlds = 3;
  c.train_paths = 60;
  c.val_paths = 20;
  c.dims.d_h = 16;
  c.dims.layers = 1;
  c.dims.heads = 2;
  c.dims.d_ff = 32;
  c.iteration_scale = 0.0005;
  c.classifier_epochs = 2;
  c.uncertainty_epochs = 2;
  c.uncertainty_hidden = 8;
  c.out_dir = "runs/tiny";
  return c;
}

ExperimentConfig benchmark_config() {
  // Half-width agent with a matching lr so a full seed fits a few minutes on
  // one core.
  ExperimentConfig c;
  c.dims.d_h = 32;
  c.dims.d_ff = 64;
  for (auto* s : {&c.agent_low, &c.agent_high, &c.agent_ref}) s->lr_scale = 300.0;
  c.out_dir = "runs/benchmark";
  return c;
}

ExperimentConfig val_subsample_config() {
  ExperimentConfig c = benchmark_config();
  c.val_level_fraction = {1.0, 0.3, 0.7, 1.0};
  c.out_dir = "runs/val_subsample";
  return c;
}

}  // namespace uln
