#pragma once

// Benchmark construction, training stages, evaluations and ablations, shared
// by the command-line tool and the acceptance suite.

#include "uln/classifier.hpp"
#include "uln/config.hpp"
#include "uln/e2e.hpp"
#include "uln/gss.hpp"
#include "uln/instructions.hpp"
#include "uln/metrics.hpp"
#include "uln/rng.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace uln {

struct Benchmark {
  ExperimentConfig config;
  text::Vocabulary vocab;
  // Stable addresses: episodes point into these.
  std::vector<std::unique_ptr<nav::NavigationGraph>> worlds;
  std::vector<std::unique_ptr<nav::NavigationGraph>> val_worlds;  // empty when validating on training worlds
  std::vector<agent::Episode> train_low;   // full instructions
  std::vector<agent::Episode> train_high;  // last sentences of the same paths
  std::vector<agent::Episode> val;         // every path at L0..L3
  std::vector<agent::Episode> val_high;    // last sentences of the validation paths

  const nav::NavigationGraph* world(const std::string& name) const;
  std::vector<agent::Episode> val_level(text::Level level) const;
  agent::AgentDims dims() const { return config.resolved_dims(vocab.size()); }
};

std::vector<nav::NavigationGraph> generate_worlds(const ExperimentConfig& cfg, bool validation = false);

struct SampledPath {
  std::size_t world = 0;
  std::vector<int> path;
  double heading = 0.0;
};
// Shortest paths of min_hops..max_hops hops between random pairs; throws
// InfeasibleEpisodeError after bounded retries.
SampledPath sample_path(const std::vector<const nav::NavigationGraph*>& worlds, int min_hops, int max_hops, Rng& rng);

Benchmark make_benchmark(const ExperimentConfig& cfg);
// Samples every split over the worlds already held by `b`.
void fill_benchmark_paths(Benchmark& b);

// Dataset files: R2R-style records that reference worlds by name.
std::vector<text::EpisodeRecord> to_records(const std::vector<agent::Episode>& eps, const text::Vocabulary& vocab);
std::vector<agent::Episode> from_records(const std::vector<text::EpisodeRecord>& recs, const Benchmark& bench);

struct TrainedStack {
  std::optional<agent::AgentParams> theta_l;    // low-level agent
  std::optional<agent::AgentParams> theta_h;    // theta_l fine-tuned on last sentences
  std::optional<agent::GssTable> gss_table;
  std::optional<agent::AgentParams> theta_gss;  // theta_l plus the high variant of the critical sub-network
  std::optional<agent::Classifier> classifier;
  std::optional<e2e::UncertaintyNet> net;
  double classifier_accuracy = 0.0;  // held-out, L0 vs last-sentence
  double label_positive_fraction = 0.0;
  double uncertainty_auc = 0.0;
  std::map<std::string, std::vector<double>> loss_curves;
};

agent::ImitationHparams imitation_hparams(const ExperimentConfig& cfg, const StageSchedule& s, std::string_view tag);

agent::AgentParams train_low_agent(const Benchmark& b, const std::vector<agent::Episode>& data, std::string_view tag,
                                   std::vector<double>* curve = nullptr);
void stage_agent_low(const Benchmark& b, TrainedStack& st);
void stage_agent_high_gss(const Benchmark& b, TrainedStack& st);
void stage_classifier(const Benchmark& b, TrainedStack& st);
void stage_uncertainty(const Benchmark& b, TrainedStack& st);
TrainedStack train_all(const Benchmark& b, const std::function<void(const std::string&)>& log = {});

// Classifier split: train paths vs a held-out validation split.
std::vector<agent::ClassifierSample> classifier_samples(const std::vector<agent::Episode>& low,
                                                        const std::vector<agent::Episode>& high);

enum class Which { Greedy, Gss, GssE2e };
Which which_from_string(std::string_view s);
std::string to_string(Which w);

// Runs one policy over episodes; results keep episode order.
std::vector<e2e::EpisodeRun> run_policy(const e2e::Policy& policy, const std::vector<agent::Episode>& episodes);
std::vector<metrics::EpisodeResult> score_runs(const std::vector<e2e::EpisodeRun>& runs,
                                               const std::vector<agent::Episode>& episodes);

e2e::Policy make_policy(const TrainedStack& st, Which which, const e2e::ExplorationConfig& cfg);
std::vector<metrics::EpisodeResult> evaluate(const Benchmark& b, const TrainedStack& st, Which which,
                                             const e2e::ExplorationConfig& cfg);

struct ComponentRow {
  bool classify = false, gss = false, lookahead = false, freeze = false;
  std::string label() const;
};
std::vector<ComponentRow> component_rows();

struct StudyRow {
  std::string name;
  metrics::Report report;
  std::vector<metrics::EpisodeResult> results;
};

std::vector<StudyRow> ablate_components(const Benchmark& b, const TrainedStack& st);
std::vector<StudyRow> ablate_threshold(const Benchmark& b, const TrainedStack& st,
                                       const std::vector<double>& thresholds = {0.0, 0.25, 0.5, 0.75, 1.0});
metrics::CorrectionProfile correction_profile(const Benchmark& b, const TrainedStack& st);

std::string study_markdown(const std::vector<StudyRow>& rows, bool with_tl = true);

// Applies fn(i) for i in [0, n) across worker threads.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, unsigned workers = 0);

}  // namespace uln
