#pragma once

// On-disk layout of one run directory: worlds, datasets, stage checkpoints,
// results, reports, and the run manifest.

#include "uln/config.hpp"
#include "uln/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace uln {

inline constexpr const char* kManifestVersion = "uln-manifest/1";

struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path worlds() const { return root / "worlds"; }
  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path curves() const { return root / "curves"; }
  std::filesystem::path results() const { return root / "results"; }
  std::filesystem::path reports() const { return root / "reports"; }
  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::filesystem::path lock() const { return root / ".uln.lock"; }
};

// Exclusive lock on a run directory; a second holder gets a ConfigError.
class RunLock {
 public:
  explicit RunLock(const RunLayout& layout);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

std::vector<std::filesystem::path> write_worlds(const RunLayout& layout, const ExperimentConfig& cfg);
std::vector<std::filesystem::path> write_datasets(const RunLayout& layout, const Benchmark& b);
// Rebuilds the benchmark from world and dataset files; throws LoadError when
// a file is missing.
Benchmark load_benchmark(const RunLayout& layout, const ExperimentConfig& cfg);
// Worlds only, for gen-data.
Benchmark load_worlds(const RunLayout& layout, const ExperimentConfig& cfg);

enum class Stage { AgentLow, AgentHighGss, Classifier, Uncertainty };
Stage stage_from_string(std::string_view s);
std::string to_string(Stage s);
void run_stage(const Benchmark& b, TrainedStack& st, Stage s);

// What a command needs from earlier stages.
struct Needs {
  bool theta_l = false, gss = false, classifier = false, uncertainty = false;
  static Needs for_stage(Stage s);
  static Needs for_which(Which w);
  static Needs all() { return {true, true, true, true}; }
};

// Loads the requested checkpoints that exist, each verified against the
// config hash and the agent dims; absent files leave the slot empty.
TrainedStack load_stack(const RunLayout& layout, const ExperimentConfig& cfg, const Needs& needs);
std::vector<std::filesystem::path> save_stage(const RunLayout& layout, const ExperimentConfig& cfg, Stage s,
                                              const TrainedStack& st);

// Records one command's outputs; entries from a different config hash are
// dropped first.
void record_manifest(const RunLayout& layout, const ExperimentConfig& cfg, const std::string& step,
                     const std::vector<std::filesystem::path>& files, double seconds);

std::string file_hash(const std::filesystem::path& p);
std::string loss_curve_csv(const std::vector<double>& curve);

}  // namespace uln
