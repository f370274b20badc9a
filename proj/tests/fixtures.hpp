#pragma once

// Small worlds, agents, and episodes shared by the model-level tests.

#include "uln/agent.hpp"
#include "uln/instructions.hpp"
#include "uln/navgraph.hpp"
#include "uln/rng.hpp"
#include "uln/training.hpp"

#include <string>
#include <vector>

namespace fixture {

struct Tiny {
  uln::nav::NavigationGraph graph;
  uln::text::Vocabulary vocab;
  uln::agent::AgentDims dims;
};

// d_h = 4 world and agent dims; features and angles are 4 wide.
inline Tiny tiny(std::uint64_t seed = 1, int d_h = 4, int layers = 1, int heads = 1) {
  uln::nav::WorldSpec s;
  s.seed = seed;
  s.n_viewpoints = 14;
  s.feature_dim = 4;
  s.angle_dim = 4;
  s.max_candidates = 6;
  Tiny t{uln::nav::generate_world(s), uln::text::Vocabulary::standard(s.room_labels), {}};
  t.dims.d_h = d_h;
  t.dims.layers = layers;
  t.dims.heads = heads;
  t.dims.d_v = 4;
  t.dims.d_a = 4;
  t.dims.d_ff = 2 * d_h;
  t.dims.vocab = t.vocab.size();
  t.dims.max_len = 80;
  t.dims.max_steps = 8;
  t.dims.max_candidates = s.max_candidates;
  return t;
}

inline uln::agent::Episode episode(const Tiny& t, int start, int goal, uln::text::Level level, std::uint64_t seed,
                                   double heading = 0.0) {
  uln::agent::Episode ep;
  ep.graph = &t.graph;
  ep.path = t.graph.shortest_path(start, goal);
  ep.start = start;
  ep.goal = goal;
  ep.heading = heading;
  ep.level = level;
  ep.path_id = "ep" + std::to_string(start) + "_" + std::to_string(goal);
  ep.tokens = uln::text::synth_speaker(t.graph, ep.path, level, seed, t.vocab, heading).tokens;
  return ep;
}

// Episodes between random pairs whose shortest path has 1..max_hops edges.
inline std::vector<uln::agent::Episode> episodes(const Tiny& t, int count, uln::text::Level level,
                                                 std::uint64_t seed, int max_hops = 4) {
  std::vector<uln::agent::Episode> out;
  uln::Rng rng = uln::make_rng(seed, "fixture-episodes");
  const auto n = static_cast<std::int64_t>(t.graph.size());
  while (static_cast<int>(out.size()) < count) {
    const int a = static_cast<int>(uln::uniform_int(rng, 0, n - 1));
    const int b = static_cast<int>(uln::uniform_int(rng, 0, n - 1));
    const int hops = t.graph.hop_distance(a, b);
    if (a == b || hops > max_hops) continue;
    out.push_back(episode(t, a, b, level, seed + out.size(), uln::uniform01(rng) * 6.0 - 3.0));
  }
  return out;
}

}  // namespace fixture
