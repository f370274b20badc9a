#include "oracles.hpp"

#include "uln/errors.hpp"
#include "uln/navgraph.hpp"
#include "uln/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <map>
#include <queue>
#include <set>
#include <sstream>

using namespace uln;
using namespace uln::nav;

namespace {

std::string node_json(const std::string& id, double x, double y, double z, bool included,
                      const std::vector<bool>& adj) {
  std::ostringstream os;
  os << R"({"image_id":")" << id << R"(","pose":[1,0,0,)" << x << ",0,1,0," << y << ",0,0,1," << z
     << R"(,0,0,0,1],"included":)" << (included ? "true" : "false") << R"(,"unobstructed":[)";
  for (std::size_t i = 0; i < adj.size(); ++i) os << (i ? "," : "") << (adj[i] ? "true" : "false");
  os << "]}";
  return os.str();
}

std::vector<int> bfs_hops(const NavigationGraph& g, int src) {
  std::vector<int> d(g.size(), -1);
  std::queue<int> q;
  d[static_cast<std::size_t>(src)] = 0;
  q.push(src);
  while (!q.empty()) {
    const int u = q.front();
    q.pop();
    for (const auto& nb : g.neighbors(u))
      if (d[static_cast<std::size_t>(nb.target)] < 0) {
        d[static_cast<std::size_t>(nb.target)] = d[static_cast<std::size_t>(u)] + 1;
        q.push(nb.target);
      }
  }
  return d;
}

}  // namespace

TEST_CASE("connectivity: two mutually adjacent nodes give one edge") {
  const std::string text = "[" + node_json("a", 0, 0, 0, true, {false, true}) + "," +
                           node_json("b", 3, 4, 0, true, {true, false}) + "]";
  const auto g = parse_connectivity(text);
  CHECK(g.size() == 2);
  CHECK(g.edge_count() == 1);
  CHECK(g.geodesic("a", "b") == doctest::Approx(5.0).epsilon(1e-12));
  CHECK_FALSE(g.has_semantics());
}

TEST_CASE("connectivity: excluded nodes and their edges are dropped") {
  const std::string text = "[" + node_json("a", 0, 0, 0, true, {false, true, true}) + "," +
                           node_json("b", 1, 0, 0, true, {true, false, true}) + "," +
                           node_json("c", 2, 0, 0, false, {true, true, false}) + "]";
  const auto g = parse_connectivity(text);
  CHECK(g.size() == 2);
  CHECK(g.edge_count() == 1);
  CHECK_THROWS_AS(g.index_of("c"), LookupError);
}

TEST_CASE("connectivity: errors") {
  CHECK_THROWS_AS(parse_connectivity("[{\"image_id\": \"a\",\n \"pose\": [1,2"), ParseError);
  try {
    parse_connectivity("[{\"image_id\": \"a\",\n \"pose\": [1,2");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  const std::string asym = "[" + node_json("a", 0, 0, 0, true, {false, true}) + "," +
                           node_json("b", 1, 0, 0, true, {false, false}) + "]";
  try {
    parse_connectivity(asym);
    FAIL("asymmetric adjacency accepted");
  } catch (const ValidationError& e) {
    const std::string m = e.what();
    CHECK(m.find("a") != std::string::npos);
    CHECK(m.find("b") != std::string::npos);
  }
  const std::string split = "[" + node_json("a", 0, 0, 0, true, {false, true, false, false}) + "," +
                            node_json("b", 1, 0, 0, true, {true, false, false, false}) + "," +
                            node_json("c", 5, 0, 0, true, {false, false, false, true}) + "," +
                            node_json("d", 6, 0, 0, true, {false, false, true, false}) + "]";
  CHECK_THROWS_AS(parse_connectivity(split), ValidationError);
  CHECK_THROWS_AS(load_connectivity("/nonexistent/scan_connectivity.json"), LookupError);
}

TEST_CASE("connectivity: counts match an independent count of included nodes and adjacency bits") {
  // Ring of 8 nodes plus chords, with two excluded nodes.
  const int n = 8;
  std::vector<std::vector<bool>> adj(n, std::vector<bool>(n, false));
  auto link = [&](int a, int b) { adj[a][b] = adj[b][a] = true; };
  for (int i = 0; i < n; ++i) link(i, (i + 1) % n);
  link(0, 4);
  link(2, 6);
  const std::vector<bool> included = {true, true, true, false, true, true, true, false};
  std::string text = "[";
  for (int i = 0; i < n; ++i)
    text += (i ? "," : "") + node_json("n" + std::to_string(i), std::cos(i * 0.785) * 4, std::sin(i * 0.785) * 4, 0,
                                       included[i], adj[i]);
  text += "]";
  int nodes = 0, edges = 0;
  for (int i = 0; i < n; ++i) {
    if (!included[i]) continue;
    ++nodes;
    for (int k = i + 1; k < n; ++k) edges += included[k] && adj[i][k];
  }
  const auto g = parse_connectivity(text);
  CHECK(static_cast<int>(g.size()) == nodes);
  CHECK(static_cast<int>(g.edge_count()) == edges);
}

TEST_CASE("world spec validation") {
  WorldSpec s;
  s.n_viewpoints = 3;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = WorldSpec{};
  s.mean_degree = 1.5;
  CHECK_THROWS_AS(generate_world(s), ConfigError);
  s = WorldSpec{};
  s.noise_sigma = -0.1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK_THROWS_AS(world_spec_from_json({{"n_viewpoints", 30}, {"bogus", 1}}), ConfigError);
  const auto back = world_spec_from_json(to_json(WorldSpec{}));
  CHECK(to_json(back) == to_json(WorldSpec{}));
}

TEST_CASE("generate_world: determinism, minimal size, serialization round trip") {
  WorldSpec s;
  s.seed = 11;
  const auto a = generate_world(s).to_json().dump();
  const auto b = generate_world(s).to_json().dump();
  CHECK(a == b);
  CHECK(NavigationGraph::from_json(nlohmann::json::parse(a)).to_json().dump() == a);
  WorldSpec small;
  small.n_viewpoints = 4;
  small.seed = 3;
  const auto g = generate_world(small);
  CHECK(g.size() == 4);
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k < 4; ++k) CHECK(std::isfinite(g.geodesic(i, k)));
}

TEST_CASE("generate_world: structural invariants") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    WorldSpec s;
    s.seed = seed;
    const auto g = generate_world(s);
    REQUIRE(g.size() == 30);
    std::set<std::string> ids;
    bool two_floors[2] = {false, false};
    for (const auto& v : g.viewpoints()) {
      ids.insert(v.id);
      CHECK(v.position.allFinite());
      CHECK(v.position.x() >= 0.0);
      CHECK(v.position.x() <= 30.0);
      CHECK(v.position.y() >= 0.0);
      CHECK(v.position.y() <= 30.0);
      CHECK((v.position.z() == 0.0 || v.position.z() == kFloorHeight));
      two_floors[v.position.z() > 0.0] = true;
      CHECK(v.room_label >= 0);
      CHECK(v.room_label < s.room_labels);
      CHECK(!v.object_labels.empty());
      CHECK(v.object_labels.size() <= 3);
      for (int o : v.object_labels) {
        CHECK(o >= s.room_labels);
        CHECK(o < s.vocab_size);
      }
    }
    CHECK(ids.size() == g.size());
    CHECK((two_floors[0] && two_floors[1]));
    for (const auto& [a, b, len] : g.edges()) {
      CHECK(std::abs(len - (g.viewpoint(a).position - g.viewpoint(b).position).norm()) < 1e-9);
      CHECK(g.adjacent(b, a));
      CHECK(g.edge_length(b, a) == len);
    }
    for (std::size_t v = 0; v < g.size(); ++v)
      CHECK(static_cast<int>(g.neighbors(static_cast<int>(v)).size()) <= s.max_candidates - 1);
  }
}

TEST_CASE("generate_world: golden structure for seed 7") {
  WorldSpec s;
  s.n_viewpoints = 30;
  s.mean_degree = 3.0;
  s.seed = 7;
  const auto g = generate_world(s);
  int diameter = 0;
  std::map<std::size_t, int> degrees;
  for (std::size_t a = 0; a < g.size(); ++a) {
    degrees[g.neighbors(static_cast<int>(a)).size()]++;
    for (std::size_t b = 0; b < g.size(); ++b) diameter = std::max(diameter, g.hop_distance(int(a), int(b)));
  }
  // Recorded from the first verified run.
    CHECK(g.edge_count() == 47u);
  CHECK(diameter == 8);
  CHECK(degrees == std::map<std::size_t, int>{{1, 5}, {2, 4}, {3, 10}, {4, 6}, {5, 3}, {6, 2}});
}

TEST_CASE("geodesic distance: identity, single edge, unknown ids") {
  std::vector<Viewpoint> vps(2);
  vps[0].id = "a";
  vps[1].id = "b";
  vps[1].position = {5.2, 0, 0};
  const auto g = NavigationGraph::build("two", vps, {{0, 1}}, {}, 0.0, 1, 32, 8, 0);
  CHECK(geodesic_distance(g, "a", "a") == 0.0);
  CHECK(geodesic_distance(g, "a", "b") == doctest::Approx(5.2).epsilon(1e-12));
  CHECK_THROWS_AS(geodesic_distance(g, "a", "zz"), LookupError);
  CHECK_THROWS_AS(observe(g, "zz", 0.0), LookupError);
}

TEST_CASE("geodesic distance matches Floyd-Warshall on random graphs") {
  Rng rng = make_rng(2024, "fw");
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto g = oracle::random_graph(rng, 2 + static_cast<int>(uniform_int(rng, 0, 18)));
    const auto fw = oracle::floyd_warshall(g);
    for (std::size_t a = 0; a < g.size(); ++a)
      for (std::size_t b = 0; b < g.size(); ++b) worst = std::max(worst, std::abs(g.geodesic(int(a), int(b)) - fw(a, b)));
    // Triangle inequality and symmetry.
    for (std::size_t a = 0; a < g.size(); ++a)
      for (std::size_t b = 0; b < g.size(); ++b) {
        CHECK(g.geodesic(int(a), int(b)) == g.geodesic(int(b), int(a)));
        for (std::size_t c = 0; c < g.size(); ++c)
          CHECK(g.geodesic(int(a), int(c)) <= g.geodesic(int(a), int(b)) + g.geodesic(int(b), int(c)) + 1e-9);
      }
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("observe: candidate contract") {
  WorldSpec s;
  s.seed = 5;
  const auto g = generate_world(s);
  for (std::size_t v = 0; v < g.size(); ++v) {
    const auto obs = observe(g, static_cast<int>(v), 0.3);
    REQUIRE(obs.size() == g.neighbors(static_cast<int>(v)).size() + 1);
    CHECK(obs.candidates[0].target == -1);
    CHECK(obs.candidates[0].visual.isZero());
    CHECK(static_cast<int>(obs.size()) <= s.max_candidates);
    double prev = -10.0;
    for (std::size_t i = 1; i < obs.size(); ++i) {
      const auto& c = obs.candidates[i];
      CHECK(g.adjacent(static_cast<int>(v), c.target));
      CHECK(c.visual.size() == s.feature_dim);
      CHECK(c.angle.size() == s.angle_dim);
      const double rel = wrap_angle(bearing(g.viewpoint(int(v)).position, g.viewpoint(c.target).position) - 0.3);
      CHECK(rel >= prev);
      prev = rel;
    }
    const auto again = observe(g, static_cast<int>(v), 0.3);
    for (std::size_t i = 0; i < obs.size(); ++i) CHECK(again.candidates[i].visual == obs.candidates[i].visual);
  }
}

TEST_CASE("observe: zero noise gives exact label sums") {
  WorldSpec s;
  s.seed = 9;
  s.noise_sigma = 0.0;
  const auto g = generate_world(s);
  for (std::size_t v = 0; v < g.size(); ++v) {
    const auto& vp = g.viewpoint(static_cast<int>(v));
    Eigen::VectorXd sum = g.codebook()[static_cast<std::size_t>(vp.room_label)];
    for (int o : vp.object_labels) sum += g.codebook()[static_cast<std::size_t>(o)];
    CHECK(g.visual_feature(static_cast<int>(v)) == sum);
  }
}

TEST_CASE("observe: angle features match an independent trigonometric recompute") {
  WorldSpec s;
  s.seed = 13;
  const auto g = generate_world(s);
  double worst = 0.0;
  for (double heading : {0.0, 1.1, -2.5}) {
    for (std::size_t v = 0; v < g.size(); ++v) {
      const auto obs = observe(g, static_cast<int>(v), heading);
      for (std::size_t i = 1; i < obs.size(); ++i) {
        const auto expect = oracle::angle_feature(g.viewpoint(int(v)).position,
                                                  g.viewpoint(obs.candidates[i].target).position, heading, s.angle_dim);
        worst = std::max(worst, (obs.candidates[i].angle - expect).cwiseAbs().maxCoeff());
      }
    }
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("teacher action: stop at goal, forced move, shortest-path execution") {
  std::vector<Viewpoint> vps(3);
  for (int i = 0; i < 3; ++i) {
    vps[i].id = std::string(1, char('A' + i));
    vps[i].position = {2.0 * i, 0, 0};
  }
  const auto line = NavigationGraph::build("line", vps, {{0, 1}, {1, 2}}, {}, 0.0, 1, 32, 8, 0);
  CHECK(teacher_action(line, 2, 2, 0.0) == kStop);
  const auto obs = observe(line, 0, 0.0);
  CHECK(obs.candidates[static_cast<std::size_t>(teacher_action(line, obs, 0, 2))].target == 1);

  Rng rng = make_rng(77, "teacher");
  for (int trial = 0; trial < 30; ++trial) {
    const auto g = oracle::random_graph(rng, 3 + static_cast<int>(uniform_int(rng, 0, 15)));
    const auto fw = oracle::floyd_warshall(g);
    for (std::size_t start = 0; start < g.size(); ++start) {
      const int goal = static_cast<int>(uniform_int(rng, 0, static_cast<std::int64_t>(g.size()) - 1));
      const auto hops = bfs_hops(g, static_cast<int>(start));
      Cursor cur{static_cast<int>(start), 0.0};
      double walked = 0.0;
      int steps = 0;
      for (;;) {
        const auto o = observe(g, cur.viewpoint, cur.heading);
        const int a = teacher_action(g, o, cur.viewpoint, goal);
        if (a == kStop) break;
        const Cursor next = step(g, cur, o, a);
        walked += g.edge_length(cur.viewpoint, next.viewpoint);
        cur = next;
        REQUIRE(++steps <= static_cast<int>(g.size()));
      }
      CHECK(cur.viewpoint == goal);
      CHECK(std::abs(walked - fw(start, static_cast<std::size_t>(goal))) < 1e-9);
      CHECK(steps == static_cast<int>(g.shortest_path(static_cast<int>(start), goal).size()) - 1);
      CHECK(steps >= hops[static_cast<std::size_t>(goal)]);
    }
  }
}

TEST_CASE("step: STOP keeps the cursor, moves take the bearing as heading") {
  WorldSpec s;
  s.seed = 21;
  const auto g = generate_world(s);
  const Cursor c{0, 0.5};
  const auto obs = observe(g, 0, 0.5);
  CHECK(step(g, c, obs, kStop) == c);
  const Cursor n = step(g, c, obs, 1);
  CHECK(n.viewpoint == obs.candidates[1].target);
  CHECK(n.heading == doctest::Approx(bearing(g.viewpoint(0).position, g.viewpoint(n.viewpoint).position)));
  CHECK_THROWS_AS(step(g, c, obs, static_cast<int>(obs.size())), LookupError);
}
