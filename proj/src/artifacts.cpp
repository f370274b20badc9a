#include "uln/artifacts.hpp"

#include "uln/checkpoint.hpp"
#include "uln/errors.hpp"
#include "uln/rng.hpp"

#include <cerrno>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fcntl.h>
#include <unistd.h>

namespace uln {

namespace fs = std::filesystem;

namespace {

constexpr const char* kTrainLow = "train_low.json";
constexpr const char* kTrainHigh = "train_high.json";
constexpr const char* kVal = "val.json";

fs::path ckpt(const RunLayout& l, const char* name) { return l.checkpoints() / name; }

// Non-agent models are wrapped with the config hash that produced them.
nlohmann::json wrap(const ExperimentConfig& cfg, nlohmann::json model, nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json j = {{"config_hash", cfg.hash()}, {"model", std::move(model)}};
  for (auto& [k, v] : extra.items()) j[k] = v;
  return j;
}

nlohmann::json unwrap(const fs::path& file, const ExperimentConfig& cfg) {
  nlohmann::json j = read_json_file(file);
  if (!j.is_object() || !j.contains("model")) throw LoadError(file.string() + ": not a model file");
  if (j.value("config_hash", "") != cfg.hash())
    throw LoadError(file.string() + ": checkpoint was produced by a different configuration");
  return j;
}

std::vector<agent::Episode> read_split(const fs::path& dir, const char* name, const Benchmark& b) {
  const fs::path p = dir / name;
  if (!fs::exists(p)) throw LoadError(p.string() + ": missing; run gen-data first");
  try {
    return from_records(text::dataset_from_json(read_json_file(p)), b);
  } catch (const LoadError&) {
    throw;
  } catch (const Error& e) {
    throw LoadError(p.string() + ": " + e.what());
  }
}

std::vector<agent::Episode> high_of(const std::vector<agent::Episode>& eps, const text::Vocabulary& vocab) {
  std::vector<agent::Episode> out;
  for (const auto& ep : eps) {
    if (ep.level != text::Level::L0) continue;
    text::Instruction in{text::detokenize(ep.tokens, vocab), ep.tokens, ep.level, ep.path_id};
    agent::Episode h = ep;
    const auto last = text::last_sentence(in, vocab);
    h.tokens = last.tokens;
    h.level = last.level;
    out.push_back(std::move(h));
  }
  return out;
}

}  // namespace

RunLock::RunLock(const RunLayout& layout) : path_(layout.lock()) {
  fs::create_directories(layout.root);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST)
      throw ConfigError(layout.root.string() + " is in use by another uln process (remove " + path_.string() +
                        " if that process is gone)");
    throw ConfigError(path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

std::vector<fs::path> write_worlds(const RunLayout& layout, const ExperimentConfig& cfg) {
  std::vector<fs::path> files;
  fs::create_directories(layout.worlds());
  for (bool val : {false, true})
    for (const auto& g : generate_worlds(cfg, val)) {
      const fs::path p = layout.worlds() / (g.name() + ".json");
      write_json_file(p, g.to_json());
      files.push_back(p);
    }
  return files;
}

Benchmark load_worlds(const RunLayout& layout, const ExperimentConfig& cfg) {
  Benchmark b;
  b.config = cfg;
  b.vocab = text::Vocabulary::standard(cfg.world.room_labels);
  for (bool val : {false, true}) {
    const int n = val ? cfg.val_worlds : cfg.n_worlds;
    for (int i = 0; i < n; ++i) {
      // World names are fixed by generation; regenerate the spec seed to find the file.
      nav::WorldSpec spec = cfg.world;
      spec.seed = derive_seed(cfg.seed, val ? "val-world" : "world", static_cast<std::uint64_t>(i));
      const fs::path p = layout.worlds() / (nav::world_name(spec) + ".json");
      if (!fs::exists(p)) throw LoadError(p.string() + ": missing; run gen-world first");
      auto g = std::make_unique<nav::NavigationGraph>(nav::NavigationGraph::from_json(read_json_file(p)));
      (val ? b.val_worlds : b.worlds).push_back(std::move(g));
    }
  }
  return b;
}

std::vector<fs::path> write_datasets(const RunLayout& layout, const Benchmark& b) {
  fs::create_directories(layout.data());
  std::vector<fs::path> files;
  auto put = [&](const char* name, const std::vector<agent::Episode>& eps) {
    const fs::path p = layout.data() / name;
    write_json_file(p, text::dataset_to_json(to_records(eps, b.vocab)));
    files.push_back(p);
  };
  put(kTrainLow, b.train_low);
  put(kTrainHigh, b.train_high);
  put(kVal, b.val);
  return files;
}

Benchmark load_benchmark(const RunLayout& layout, const ExperimentConfig& cfg) {
  Benchmark b = load_worlds(layout, cfg);
  b.train_low = read_split(layout.data(), kTrainLow, b);
  b.train_high = read_split(layout.data(), kTrainHigh, b);
  b.val = read_split(layout.data(), kVal, b);
  b.val_high = high_of(b.val, b.vocab);
  return b;
}

Stage stage_from_string(std::string_view s) {
  if (s == "agent_low") return Stage::AgentLow;
  if (s == "agent_high_gss") return Stage::AgentHighGss;
  if (s == "classifier") return Stage::Classifier;
  if (s == "uncertainty") return Stage::Uncertainty;
  throw ConfigError("unknown stage '" + std::string(s) + "' (agent_low, agent_high_gss, classifier, uncertainty)");
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::AgentLow: return "agent_low";
    case Stage::AgentHighGss: return "agent_high_gss";
    case Stage::Classifier: return "classifier";
    case Stage::Uncertainty: return "uncertainty";
  }
  return "?";
}

void run_stage(const Benchmark& b, TrainedStack& st, Stage s) {
  switch (s) {
    case Stage::AgentLow: stage_agent_low(b, st); break;
    case Stage::AgentHighGss: stage_agent_high_gss(b, st); break;
    case Stage::Classifier: stage_classifier(b, st); break;
    case Stage::Uncertainty: stage_uncertainty(b, st); break;
  }
}

Needs Needs::for_stage(Stage s) {
  switch (s) {
    case Stage::AgentLow:
    case Stage::Classifier: return {};
    case Stage::AgentHighGss: return {true, false, false, false};
    case Stage::Uncertainty: return {false, true, true, false};
  }
  return {};
}

Needs Needs::for_which(Which w) {
  switch (w) {
    case Which::Greedy: return {true, false, false, false};
    case Which::Gss: return {false, true, true, false};
    case Which::GssE2e: return {false, true, true, true};
  }
  return {};
}

TrainedStack load_stack(const RunLayout& layout, const ExperimentConfig& cfg, const Needs& needs) {
  TrainedStack st;
  const std::string h = cfg.hash();
  const text::Vocabulary vocab = text::Vocabulary::standard(cfg.world.room_labels);
  const agent::AgentDims dims = cfg.resolved_dims(vocab.size());
  auto agent_file = [&](const char* name, std::optional<agent::AgentParams>& slot) {
    const fs::path p = ckpt(layout, name);
    if (fs::exists(p)) slot = agent::load_checkpoint(p, &dims, h);
  };
  if (needs.theta_l) agent_file("theta_l.json", st.theta_l);
  if (needs.gss) {
    agent_file("theta_h.json", st.theta_h);
    agent_file("theta_gss.json", st.theta_gss);
    const fs::path t = ckpt(layout, "gss_table.json");
    if (fs::exists(t)) st.gss_table = agent::GssTable::from_json(unwrap(t, cfg).at("model"));
  }
  if (needs.classifier) {
    const fs::path p = ckpt(layout, "classifier.json");
    if (fs::exists(p)) {
      const auto j = unwrap(p, cfg);
      st.classifier = agent::Classifier::from_json(j.at("model"));
      st.classifier_accuracy = j.value("heldout_accuracy", 0.0);
      if (st.classifier->vocab() != vocab.size()) throw LoadError(p.string() + ": vocabulary size mismatch");
    }
  }
  if (needs.uncertainty) {
    const fs::path p = ckpt(layout, "uncertainty.json");
    if (fs::exists(p)) {
      const auto j = unwrap(p, cfg);
      st.net = e2e::UncertaintyNet::from_json(j.at("model"));
      st.uncertainty_auc = j.value("heldout_auc", 0.0);
      st.label_positive_fraction = j.value("label_positive_fraction", 0.0);
    }
  }
  return st;
}

std::string loss_curve_csv(const std::vector<double>& curve) {
  std::ostringstream os;
  os << "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < curve.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i + 1, curve[i]);
    os << buf;
  }
  return os.str();
}

std::vector<fs::path> save_stage(const RunLayout& layout, const ExperimentConfig& cfg, Stage s, const TrainedStack& st) {
  fs::create_directories(layout.checkpoints());
  fs::create_directories(layout.curves());
  std::vector<fs::path> files;
  const std::string h = cfg.hash();
  auto agent_file = [&](const char* name, const std::optional<agent::AgentParams>& p) {
    if (!p) throw InvariantError(to_string(s) + ": stage produced no " + name);
    const fs::path f = ckpt(layout, name);
    agent::save_checkpoint(f, *p, h);
    files.push_back(f);
  };
  auto curve = [&](const std::string& name) {
    const auto it = st.loss_curves.find(name);
    if (it == st.loss_curves.end()) return;
    const fs::path f = layout.curves() / (name + ".csv");
    write_text_file(f, loss_curve_csv(it->second));
    files.push_back(f);
  };
  switch (s) {
    case Stage::AgentLow:
      agent_file("theta_l.json", st.theta_l);
      curve("agent_low");
      break;
    case Stage::AgentHighGss: {
      agent_file("theta_h.json", st.theta_h);
      agent_file("theta_gss.json", st.theta_gss);
      const fs::path t = ckpt(layout, "gss_table.json");
      write_json_file(t, wrap(cfg, st.gss_table->to_json()));
      files.push_back(t);
      curve("agent_ref");
      curve("agent_high_gss");
      break;
    }
    case Stage::Classifier: {
      const fs::path f = ckpt(layout, "classifier.json");
      write_json_file(f, wrap(cfg, st.classifier->to_json(), {{"heldout_accuracy", st.classifier_accuracy}}));
      files.push_back(f);
      curve("classifier");
      break;
    }
    case Stage::Uncertainty: {
      const fs::path f = ckpt(layout, "uncertainty.json");
      write_json_file(f, wrap(cfg, st.net->to_json(),
                              {{"heldout_auc", st.uncertainty_auc},
                               {"label_positive_fraction", st.label_positive_fraction}}));
      files.push_back(f);
      curve("uncertainty");
      break;
    }
  }
  return files;
}

std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw LoadError(p.string() + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(ss.str())));
  return buf;
}

void record_manifest(const RunLayout& layout, const ExperimentConfig& cfg, const std::string& step,
                     const std::vector<fs::path>& files, double seconds) {
  nlohmann::json m;
  if (fs::exists(layout.manifest())) m = read_json_file(layout.manifest());
  if (!m.is_object() || m.value("config_hash", "") != cfg.hash()) {
    m = {{"version", kManifestVersion}, {"config_hash", cfg.hash()}, {"steps", nlohmann::json::object()}};
  }
  m["config"] = cfg.to_json();
  m["artifacts"] = {{"checkpoint", agent::kCheckpointVersion},
                    {"classifier", "uln-clf/1"},
                    {"uncertainty", "uln-uncert/1"},
                    {"results", "uln-results/1"},
                    {"trace", "uln-trace/1"}};
  nlohmann::json fl = nlohmann::json::array();
  for (const auto& f : files)
    fl.push_back({{"path", fs::relative(f, layout.root).generic_string()}, {"hash", file_hash(f)}});
  m["steps"][step] = {{"files", fl}, {"seconds", seconds}};
  write_json_file(layout.manifest(), m);
}

}  // namespace uln
