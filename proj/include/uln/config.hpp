#pragma once

#include "uln/agent.hpp"
#include "uln/e2e.hpp"
#include "uln/navgraph.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

namespace uln {

struct StageSchedule {
  double lr = 1e-5;       // base learning rate before lr_scale
  double lr_scale = 1.0;  // effective lr = lr * lr_scale
  long iterations = 0;    // reference schedule before iteration_scale
  int batch_size = 8;
  double weight_decay = 0.01;

  double effective_lr() const { return lr * lr_scale; }
  int effective_iterations(double iteration_scale) const;
};

struct ExperimentConfig {
  nav::WorldSpec world;
  int n_worlds = 40;
  std::uint64_t seed = 1;

  int train_paths = 2000;
  int val_paths = 400;
  int min_hops = 3;
  int max_hops = 6;
  // 0 keeps validation on the training worlds; otherwise fresh worlds.
  int val_worlds = 0;
  // Share of validation paths kept at L0..L3; the first round(f * val_paths)
  // paths of each level are kept.
  std::array<double, 4> val_level_fraction = {1.0, 1.0, 1.0, 1.0};

  agent::AgentDims dims;
  agent::HeadStyle head = agent::HeadStyle::AttnHead;
  agent::HistoryStyle history = agent::HistoryStyle::StateVector;

  // Reference schedules are 300k iterations for the low-level agent and 10k
  // for the high-level retrain; desk-scale runs multiply them by
  // iteration_scale.
  double iteration_scale = 0.01;
  StageSchedule agent_low{1e-5, 100.0, 300000, 8, 0.01};
  StageSchedule agent_high{1e-5, 100.0, 10000, 8, 0.01};
  // Fine-tune of the low agent on last sentences; only used to identify the
  // critical sub-network.
  StageSchedule agent_ref{1e-5, 100.0, 100000, 8, 0.01};
  double classifier_lr = 1e-2;
  int classifier_epochs = 3;
  int classifier_batch = 32;
  int classifier_dim = 16;

  double uncertainty_lr = 1e-4;
  int uncertainty_epochs = 10;
  int uncertainty_hidden = 64;
  int uncertainty_batch = 32;
  double label_drop_rate = 0.5;
  bool uncertainty_balance = true;

  std::string gss_metric = "SR";
  // Starting point of the retrained high slot: "donor" copies the critical
  // sub-network of the fine-tuned reference agent, "low" copies theta_l's own,
  // "fresh" draws a new initialization.
  std::string gss_init = "donor";
  e2e::ExplorationConfig exploration;
  std::string out_dir = "runs/default";

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  // Hash of the canonical JSON minus out_dir and exploration: everything the
  // checkpoints depend on, so relocating a run or sweeping thresholds keeps it.
  std::string hash() const;
  agent::AgentDims resolved_dims(int vocab_size) const;
};

ExperimentConfig load_config(const std::filesystem::path& file);
// Small preset for tests: few worlds, few paths, tiny model.
ExperimentConfig tiny_config();
// Full benchmark preset.
ExperimentConfig benchmark_config();
// Benchmark with validation subsampled at 100% L0, 30% L1, 70% L2, 100% L3.
ExperimentConfig val_subsample_config();

}  // namespace uln
