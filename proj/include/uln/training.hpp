#pragma once

#include "uln/agent.hpp"
#include "uln/instructions.hpp"
#include "uln/navgraph.hpp"

#include <cstdint>
#include <vector>

namespace uln::agent {

// One navigation episode bound to its world.
struct Episode {
  const nav::NavigationGraph* graph = nullptr;
  std::vector<int> tokens;
  std::vector<int> path;  // reference shortest path, start..goal
  int start = 0;
  int goal = 0;
  double heading = 0.0;
  text::Level level = text::Level::Unknown;
  std::string path_id;
};

// Decoupled weight decay Adam over an ordered list of tensors.
class AdamW {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };
  explicit AdamW(Options opt) : opt_(opt) {}
  // params[i] is updated with grads[i]; the list must keep the same layout
  // across calls.
  void step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads);
  long steps() const { return t_; }

 private:
  Options opt_;
  long t_ = 0;
  std::vector<Mat> m_, v_;
};

struct ImitationHparams {
  double lr = 1e-3;
  double weight_decay = 0.01;
  int iterations = 100;  // optimizer steps
  int batch_size = 8;
  double clip_norm = 5.0;  // 0 disables clipping
  std::uint64_t seed = 0;
  Routing routing = Routing::all(Variant::Low);
  TrainMask mask = TrainMask::all_low();
};

struct TrainResult {
  std::vector<double> loss_curve;  // mean batch loss per optimizer step
  bool diverged = false;           // params hold the last finite state when set
  int steps_done = 0;
};

// Teacher-forced loss of one episode (mean cross-entropy over its steps).
// Accumulates gradients into `grads` when non-null.
double imitation_loss(const AgentParams& params, const Episode& ep, const Routing& routing, AgentParams* grads,
                      const TrainMask& mask);

TrainResult train_imitation(AgentParams& params, const std::vector<Episode>& episodes, const ImitationHparams& hp);

// Greedy rollout without exploration; returns visited viewpoints (start first).
struct Rollout {
  std::vector<int> visited;
  bool stopped = false;  // false when max_steps cut the episode
};
Rollout greedy_rollout(const AgentParams& params, const Episode& ep, const Routing& routing);
Rollout teacher_rollout(const Episode& ep, int max_steps);

// Collects trainable tensors of `params` and matching entries of `grads`.
void collect_trainable(AgentParams& params, AgentParams& grads, const TrainMask& mask, std::vector<Mat*>& p,
                       std::vector<const Mat*>& g);

}  // namespace uln::agent
