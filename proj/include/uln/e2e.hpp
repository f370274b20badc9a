#pragma once

// Uncertainty-gated lookahead on top of a trained agent.

#include "uln/agent.hpp"
#include "uln/classifier.hpp"
#include "uln/instructions.hpp"
#include "uln/metrics.hpp"
#include "uln/training.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <vector>

namespace uln::e2e {

using agent::Mat;

struct ExplorationConfig {
  double threshold = 0.5;
  int depth = 1;  // K
  double gamma = 1.2;
  int top_c = 2;  // C
  int budget = 3;
  bool freeze = true;

  void validate() const;
};

nlohmann::json to_json(const ExplorationConfig& c);
ExplorationConfig exploration_from_json(const nlohmann::json& j);

// Fixed padding maxima of the flattened (alpha, beta) input.
struct UncertaintyShape {
  int heads = 4;
  int query_slots = 9;  // history rows + N_max
  int text_len = 81;    // sentinel included
  int n_max = 8;

  int input_dim() const { return heads * query_slots * text_len + n_max + 2; }
  static UncertaintyShape for_agent(const agent::AgentParams& p);
  bool operator==(const UncertaintyShape&) const = default;
};

struct UncertaintyNet {
  UncertaintyShape shape;
  Mat W1, b1, W2, b2;  // input x hidden, 1 x hidden, hidden x 1, 1 x 1

  static UncertaintyNet init(const UncertaintyShape& shape, int hidden, std::uint64_t seed);
  std::uint64_t checksum() const;
  nlohmann::json to_json() const;
  static UncertaintyNet from_json(const nlohmann::json& j);
};

// Flattens the final-layer attention and logits; zero-padded to the maxima,
// then the two used lengths (text, candidates) as fractions of their maxima.
Eigen::RowVectorXd uncertainty_features(const UncertaintyShape& shape, const agent::ForwardTrace& trace);
// One logit per feature row.
ad::Var uncertainty_logit(ad::Tape& tape, const UncertaintyNet& net, const Mat& features,
                          UncertaintyNet* grads = nullptr);
double uncertainty_score(const UncertaintyNet& net, const agent::ForwardTrace& trace);
double uncertainty_score(const UncertaintyNet& net, const Eigen::RowVectorXd& features);

struct UncertaintySample {
  Eigen::RowVectorXd features;
  int label = 0;  // 1 when the agent's argmax disagrees with the teacher
};

struct LabelSet {
  std::vector<UncertaintySample> samples;
  std::size_t skipped = 0;
  double positive_fraction() const;
};

// Teacher-forced rollouts on degraded instructions. When `clf` is given the
// degraded instruction is routed the same way inference would route it.
LabelSet generate_uncertainty_labels(const agent::AgentParams& agent, const std::vector<agent::Episode>& episodes,
                                     const text::Vocabulary& vocab, double drop_rate, std::uint64_t seed,
                                     const agent::Classifier* clf = nullptr);

struct UncertaintyHparams {
  double lr = 1e-4;
  int epochs = 10;
  int batch_size = 32;
  double weight_decay = 0.0;
  bool balance = true;  // weight positives by negatives/positives
  std::uint64_t seed = 0;
};

struct UncertaintyTrainResult {
  std::vector<double> loss_curve;
  bool single_class = false;
};

UncertaintyTrainResult train_uncertainty(UncertaintyNet& net, const std::vector<UncertaintySample>& samples,
                                         const UncertaintyHparams& hp);
double auc(const UncertaintyNet& net, const std::vector<UncertaintySample>& samples);

struct Branch {
  int candidate = 0;
  std::vector<double> future_max;  // max beta at t+1..t+K actually reached
  std::vector<int> path;           // viewpoints walked outwards
  double score = 0.0;
};

struct LookaheadResult {
  int chosen = 0;
  std::vector<double> scores;  // one per candidate
  std::vector<Branch> branches;
  std::vector<int> detour;        // physical out-and-back viewpoint sequence
  std::vector<Mat> history_used;  // history input of every in-lookahead pass
  int steps_walked = 0;
};

// One simulator-backed episode context: the agent session plus the world.
struct Explorer {
  agent::Session& session;
  const nav::NavigationGraph& graph;
};

// Scores every candidate by beta plus the discounted best future logits of
// explored branches; state and cursor are left untouched.
LookaheadResult lookahead(Explorer& ex, const agent::AgentState& state, const agent::Session::Step& step,
                          const nav::Observation& obs, const ExplorationConfig& cfg);

// Pure scoring rule, exposed for the exactness tests.
int lookahead_choice(const Eigen::RowVectorXd& beta, const std::vector<std::pair<int, std::vector<double>>>& futures,
                     double gamma, std::vector<double>* scores = nullptr);

enum class RoutingMode { FixedLow, LevelOracle, Classifier };

struct Policy {
  const agent::AgentParams* agent = nullptr;
  RoutingMode routing = RoutingMode::FixedLow;
  const agent::Classifier* classifier = nullptr;
  const UncertaintyNet* net = nullptr;  // null disables lookahead
  ExplorationConfig cfg;
  bool record_trace = false;
};

struct StepRecord {
  int step = 0;
  std::vector<int> candidates;
  std::vector<double> beta;
  double uncertainty = -1.0;  // -1 when no net is attached
  bool explored = false;
  std::vector<double> scores;
  int action = 0;
};

struct EpisodeRun {
  metrics::Trajectory trajectory;
  std::vector<StepRecord> records;
  int explorations = 0;
  agent::Routing routing;
};

agent::Routing choose_routing(const Policy& policy, const agent::Episode& ep);
EpisodeRun run_episode_e2e(const Policy& policy, const agent::Episode& ep);
nlohmann::json trace_lines(const EpisodeRun& run, const std::string& path_id);

// Teacher-corrected rollouts for the correction profile.
std::vector<std::vector<metrics::CorrectionStep>> correction_rollouts(const Policy& policy,
                                                                      const std::vector<agent::Episode>& episodes);

}  // namespace uln::e2e
