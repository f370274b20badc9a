#include "uln/navgraph.hpp"

#include "uln/errors.hpp"
#include "uln/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <queue>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace uln::nav {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kBox = 30.0;
constexpr double kMinSeparation = 2.0;

const std::vector<std::string>& room_names() {
  static const std::vector<std::string> names = {
      "kitchen", "bedroom", "bathroom", "hallway", "office",  "lounge",
      "garage",  "closet",  "library",  "laundry", "dining",  "studio"};
  return names;
}

const std::vector<std::string>& object_names() {
  static const std::vector<std::string> names = {
      "sofa",   "table",  "lamp",    "chair",  "bed",     "sink",    "piano",     "mirror",
      "plant",  "shelf",  "fridge",  "desk",   "painting", "rug",    "clock",     "stove",
      "toilet", "bench",  "cabinet", "dresser", "fireplace", "vase", "counter",   "statue"};
  return names;
}

std::string line_context(const std::string& text, std::size_t byte) {
  std::size_t line = 1;
  std::size_t line_start = 0;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      line_start = i + 1;
    }
  }
  std::size_t line_end = text.find('\n', line_start);
  if (line_end == std::string::npos) line_end = text.size();
  std::ostringstream os;
  os << "line " << line << ", column " << (byte >= line_start ? byte - line_start + 1 : 1)
     << ": '" << text.substr(line_start, std::min<std::size_t>(line_end - line_start, 120))
     << "'";
  return os.str();
}

}  // namespace

std::string label_name(int label, int room_labels) {
  if (label < 0) throw LookupError("label_name: negative label");
  if (label < room_labels) {
    if (label >= static_cast<int>(room_names().size())) throw LookupError("label_name: room label out of range");
    return room_names()[static_cast<std::size_t>(label)];
  }
  const int obj = label - room_labels;
  if (obj >= static_cast<int>(object_names().size())) throw LookupError("label_name: object label out of range");
  return object_names()[static_cast<std::size_t>(obj)];
}

int max_vocab_size(int room_labels) {
  return room_labels + static_cast<int>(object_names().size());
}

void WorldSpec::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("WorldSpec: " + m); };
  if (n_viewpoints < 4) fail("n_viewpoints must be >= 4");
  if (!(mean_degree >= 2.0)) fail("mean_degree must be >= 2");
  if (!(noise_sigma >= 0.0)) fail("noise_sigma must be >= 0");
  if (room_labels < 1 || room_labels > static_cast<int>(room_names().size()))
    fail("room_labels out of range");
  if (vocab_size <= room_labels + 3 || vocab_size > max_vocab_size(room_labels))
    fail("vocab_size must leave 4.." + std::to_string(object_names().size()) + " object labels");
  if (rooms_per_floor < 1) fail("rooms_per_floor must be >= 1");
  if (feature_dim < 1 || angle_dim < 4 || angle_dim % 4 != 0) fail("bad feature/angle dims");
  if (max_candidates < 3) fail("max_candidates must be >= 3");
  if (mean_degree > max_candidates - 1) fail("mean_degree exceeds the candidate cap");
}

nlohmann::json to_json(const WorldSpec& s) {
  return {{"n_viewpoints", s.n_viewpoints}, {"mean_degree", s.mean_degree},
          {"vocab_size", s.vocab_size},     {"room_labels", s.room_labels},
          {"rooms_per_floor", s.rooms_per_floor}, {"feature_dim", s.feature_dim},
          {"angle_dim", s.angle_dim},       {"max_candidates", s.max_candidates},
          {"noise_sigma", s.noise_sigma},   {"seed", s.seed},
          {"codebook_seed", s.codebook_seed}};
}

WorldSpec world_spec_from_json(const nlohmann::json& j) {
  static const std::unordered_set<std::string> known = {
      "n_viewpoints", "mean_degree", "vocab_size", "room_labels", "rooms_per_floor", "feature_dim",
      "angle_dim", "max_candidates", "noise_sigma", "seed", "codebook_seed"};
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw ConfigError("world spec: unknown key '" + k + "'");
  WorldSpec s;
  s.n_viewpoints = j.value("n_viewpoints", s.n_viewpoints);
  s.mean_degree = j.value("mean_degree", s.mean_degree);
  s.vocab_size = j.value("vocab_size", s.vocab_size);
  s.room_labels = j.value("room_labels", s.room_labels);
  s.rooms_per_floor = j.value("rooms_per_floor", s.rooms_per_floor);
  s.feature_dim = j.value("feature_dim", s.feature_dim);
  s.angle_dim = j.value("angle_dim", s.angle_dim);
  s.max_candidates = j.value("max_candidates", s.max_candidates);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.seed = j.value("seed", s.seed);
  s.codebook_seed = j.value("codebook_seed", s.codebook_seed);
  return s;
}

double wrap_angle(double a) {
  const double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a, two_pi);
  if (a <= -std::numbers::pi) a += two_pi;
  if (a > std::numbers::pi) a -= two_pi;
  return a;
}

double bearing(const Eigen::Vector3d& from, const Eigen::Vector3d& to) {
  const Eigen::Vector3d d = to - from;
  return std::atan2(d.x(), d.y());
}

double elevation(const Eigen::Vector3d& from, const Eigen::Vector3d& to) {
  const Eigen::Vector3d d = to - from;
  return std::atan2(d.z(), std::hypot(d.x(), d.y()));
}

NavigationGraph NavigationGraph::build(std::string name, std::vector<Viewpoint> viewpoints,
                                       const std::vector<std::pair<int, int>>& edges,
                                       std::vector<Eigen::VectorXd> codebook, double noise_sigma,
                                       std::uint64_t seed, int feature_dim, int angle_dim,
                                       int room_labels) {
  NavigationGraph g;
  g.name_ = std::move(name);
  g.viewpoints_ = std::move(viewpoints);
  g.codebook_ = std::move(codebook);
  g.noise_sigma_ = noise_sigma;
  g.seed_ = seed;
  g.feature_dim_ = feature_dim;
  g.angle_dim_ = angle_dim;
  g.room_labels_ = room_labels;

  const int n = static_cast<int>(g.viewpoints_.size());
  if (n == 0) throw ValidationError("graph '" + g.name_ + "' has no viewpoints");
  std::unordered_set<std::string> ids;
  for (const auto& v : g.viewpoints_) {
    if (!ids.insert(v.id).second) throw ValidationError("duplicate viewpoint id '" + v.id + "'");
    if (!v.position.allFinite()) throw ValidationError("viewpoint '" + v.id + "' has a non-finite position");
    if (v.object_labels.size() > 3) throw ValidationError("viewpoint '" + v.id + "' has more than 3 objects");
    const int labels = static_cast<int>(g.codebook_.size());
    auto check_label = [&](int l) {
      if (labels > 0 && (l < 0 || l >= labels))
        throw ValidationError("viewpoint '" + v.id + "' label outside the world vocabulary");
    };
    if (v.room_label >= 0) check_label(v.room_label);
    for (int o : v.object_labels) check_label(o);
  }
  for (const auto& c : g.codebook_)
    if (c.size() != feature_dim) throw ValidationError("codebook vector dimension mismatch");

  g.adjacency_.assign(static_cast<std::size_t>(n), {});
  for (auto [a, b] : edges) {
    if (a < 0 || b < 0 || a >= n || b >= n || a == b)
      throw ValidationError("invalid edge (" + std::to_string(a) + ", " + std::to_string(b) + ")");
    if (g.adjacent(a, b)) continue;
    const double len = (g.viewpoints_[a].position - g.viewpoints_[b].position).norm();
    g.adjacency_[a].push_back({b, len});
    g.adjacency_[b].push_back({a, len});
  }
  for (auto& adj : g.adjacency_)
    std::sort(adj.begin(), adj.end(), [](const Neighbor& x, const Neighbor& y) { return x.target < y.target; });
  g.finalize();
  return g;
}

void NavigationGraph::finalize() {
  const int n = static_cast<int>(viewpoints_.size());
  // Connectivity check with a component listing for diagnostics.
  std::vector<int> comp(static_cast<std::size_t>(n), -1);
  int n_comp = 0;
  for (int s = 0; s < n; ++s) {
    if (comp[s] >= 0) continue;
    std::queue<int> q;
    q.push(s);
    comp[s] = n_comp;
    while (!q.empty()) {
      const int u = q.front();
      q.pop();
      for (const auto& nb : adjacency_[u])
        if (comp[nb.target] < 0) {
          comp[nb.target] = n_comp;
          q.push(nb.target);
        }
    }
    ++n_comp;
  }
  if (n_comp > 1) {
    std::ostringstream os;
    os << "graph '" << name_ << "' is disconnected into " << n_comp << " components:";
    for (int c = 0; c < n_comp; ++c) {
      os << " {";
      bool first = true;
      for (int i = 0; i < n; ++i)
        if (comp[i] == c) {
          os << (first ? "" : ", ") << viewpoints_[i].id;
          first = false;
        }
      os << "}";
    }
    throw ValidationError(os.str());
  }

  dist_ = Eigen::MatrixXd::Constant(n, n, kInf);
  hops_ = Eigen::MatrixXi::Constant(n, n, -1);
  using Item = std::pair<double, int>;
  for (int s = 0; s < n; ++s) {
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    dist_(s, s) = 0.0;
    pq.push({0.0, s});
    while (!pq.empty()) {
      auto [d, u] = pq.top();
      pq.pop();
      if (d > dist_(s, u)) continue;
      for (const auto& nb : adjacency_[u]) {
        const double nd = d + nb.length;
        if (nd < dist_(s, nb.target)) {
          dist_(s, nb.target) = nd;
          pq.push({nd, nb.target});
        }
      }
    }
    std::queue<int> q;
    hops_(s, s) = 0;
    q.push(s);
    while (!q.empty()) {
      const int u = q.front();
      q.pop();
      for (const auto& nb : adjacency_[u])
        if (hops_(s, nb.target) < 0) {
          hops_(s, nb.target) = hops_(s, u) + 1;
          q.push(nb.target);
        }
    }
  }
  // Dijkstra from each source can differ in the last ulp between (a,b) and
  // (b,a); symmetrize so geodesic(a,b) == geodesic(b,a) exactly.
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b) {
      const double d = std::min(dist_(a, b), dist_(b, a));
      dist_(a, b) = dist_(b, a) = d;
    }

  features_.assign(static_cast<std::size_t>(n), Eigen::VectorXd::Zero(feature_dim_));
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd f = Eigen::VectorXd::Zero(feature_dim_);
    const auto& v = viewpoints_[i];
    if (!codebook_.empty()) {
      if (v.room_label >= 0) f += codebook_[v.room_label];
      for (int o : v.object_labels) f += codebook_[o];
    }
    if (noise_sigma_ > 0.0) {
      Rng rng = make_rng(seed_, "visual-noise", static_cast<std::uint64_t>(i));
      for (int k = 0; k < feature_dim_; ++k) f(k) += normal(rng, 0.0, noise_sigma_);
    }
    features_[i] = std::move(f);
  }
}

const Viewpoint& NavigationGraph::viewpoint(int index) const {
  if (index < 0 || index >= static_cast<int>(viewpoints_.size()))
    throw LookupError("viewpoint index " + std::to_string(index) + " out of range");
  return viewpoints_[static_cast<std::size_t>(index)];
}

std::span<const Neighbor> NavigationGraph::neighbors(int index) const {
  viewpoint(index);
  return adjacency_[static_cast<std::size_t>(index)];
}

std::size_t NavigationGraph::edge_count() const {
  std::size_t e = 0;
  for (const auto& a : adjacency_) e += a.size();
  return e / 2;
}

std::vector<std::tuple<int, int, double>> NavigationGraph::edges() const {
  std::vector<std::tuple<int, int, double>> out;
  for (int a = 0; a < static_cast<int>(adjacency_.size()); ++a)
    for (const auto& nb : adjacency_[a])
      if (a < nb.target) out.emplace_back(a, nb.target, nb.length);
  return out;
}

bool NavigationGraph::adjacent(int a, int b) const {
  if (a < 0 || a >= static_cast<int>(adjacency_.size())) return false;
  const auto& adj = adjacency_[static_cast<std::size_t>(a)];
  return std::any_of(adj.begin(), adj.end(), [b](const Neighbor& nb) { return nb.target == b; });
}

double NavigationGraph::edge_length(int a, int b) const {
  viewpoint(a);
  for (const auto& nb : adjacency_[a])
    if (nb.target == b) return nb.length;
  throw ValidationError("viewpoints " + viewpoints_[a].id + " and " + viewpoint(b).id +
                        " are not adjacent");
}

int NavigationGraph::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < viewpoints_.size(); ++i)
    if (viewpoints_[i].id == id) return static_cast<int>(i);
  throw LookupError("unknown viewpoint id '" + id + "' in graph '" + name_ + "'");
}

double NavigationGraph::geodesic(int a, int b) const {
  viewpoint(a);
  viewpoint(b);
  return dist_(a, b);
}

double NavigationGraph::geodesic(const std::string& a, const std::string& b) const {
  return geodesic(index_of(a), index_of(b));
}

int NavigationGraph::hop_distance(int a, int b) const {
  viewpoint(a);
  viewpoint(b);
  return hops_(a, b);
}

std::vector<int> NavigationGraph::shortest_path(int a, int b) const {
  viewpoint(a);
  viewpoint(b);
  std::vector<int> path{a};
  int cur = a;
  while (cur != b) {
    int next = -1;
    for (const auto& nb : adjacency_[cur]) {
      const double lhs = nb.length + dist_(nb.target, b);
      if (std::abs(lhs - dist_(cur, b)) <= 1e-9 * (1.0 + dist_(cur, b))) {
        next = nb.target;
        break;
      }
    }
    if (next < 0) throw InvariantError("shortest_path: no tight edge found");
    path.push_back(next);
    cur = next;
  }
  return path;
}

const Eigen::VectorXd& NavigationGraph::visual_feature(int index) const {
  viewpoint(index);
  return features_[static_cast<std::size_t>(index)];
}

nlohmann::json NavigationGraph::to_json() const {
  nlohmann::json j;
  j["version"] = "uln-world/1";
  j["name"] = name_;
  j["seed"] = seed_;
  j["noise_sigma"] = noise_sigma_;
  j["feature_dim"] = feature_dim_;
  j["angle_dim"] = angle_dim_;
  j["room_labels"] = room_labels_;
  nlohmann::json labels = nlohmann::json::array();
  nlohmann::json codebook = nlohmann::json::array();
  for (std::size_t l = 0; l < codebook_.size(); ++l) {
    labels.push_back(label_name(static_cast<int>(l), room_labels_));
    codebook.push_back(std::vector<double>(codebook_[l].data(), codebook_[l].data() + codebook_[l].size()));
  }
  j["labels"] = labels;
  j["codebook"] = codebook;
  nlohmann::json vps = nlohmann::json::array();
  for (const auto& v : viewpoints_) {
    vps.push_back({{"id", v.id},
                   {"xyz", {v.position.x(), v.position.y(), v.position.z()}},
                   {"room", v.room_label},
                   {"objects", v.object_labels}});
  }
  j["viewpoints"] = vps;
  nlohmann::json es = nlohmann::json::array();
  for (auto [a, b, len] : edges()) es.push_back({viewpoints_[a].id, viewpoints_[b].id, len});
  j["edges"] = es;
  return j;
}

NavigationGraph NavigationGraph::from_json(const nlohmann::json& j) {
  try {
    if (j.at("version") != "uln-world/1")
      throw ParseError("world file: unsupported version " + j.at("version").dump());
    std::vector<Viewpoint> vps;
    std::unordered_map<std::string, int> index;
    for (const auto& v : j.at("viewpoints")) {
      Viewpoint vp;
      vp.id = v.at("id").get<std::string>();
      const auto xyz = v.at("xyz").get<std::vector<double>>();
      if (xyz.size() != 3) throw ParseError("world file: xyz must have 3 entries");
      vp.position = {xyz[0], xyz[1], xyz[2]};
      vp.room_label = v.at("room").get<int>();
      vp.object_labels = v.at("objects").get<std::vector<int>>();
      index[vp.id] = static_cast<int>(vps.size());
      vps.push_back(std::move(vp));
    }
    std::vector<std::pair<int, int>> edges;
    for (const auto& e : j.at("edges")) {
      const auto a = e.at(0).get<std::string>();
      const auto b = e.at(1).get<std::string>();
      if (!index.contains(a) || !index.contains(b)) throw ParseError("world file: edge references unknown id");
      edges.emplace_back(index[a], index[b]);
    }
    std::vector<Eigen::VectorXd> codebook;
    for (const auto& c : j.at("codebook")) {
      const auto v = c.get<std::vector<double>>();
      codebook.emplace_back(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    auto g = build(j.at("name").get<std::string>(), std::move(vps), edges, std::move(codebook),
                   j.at("noise_sigma").get<double>(), j.at("seed").get<std::uint64_t>(),
                   j.at("feature_dim").get<int>(), j.at("angle_dim").get<int>(),
                   j.at("room_labels").get<int>());
    for (const auto& e : j.at("edges")) {
      const double stored = e.at(2).get<double>();
      const double actual = g.edge_length(g.index_of(e.at(0)), g.index_of(e.at(1)));
      if (std::abs(stored - actual) > 1e-9)
        throw ValidationError("world file: stored edge length disagrees with positions");
    }
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("world file: ") + e.what());
  }
}

NavigationGraph parse_connectivity(const std::string& text, const std::string& name) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("connectivity '" + name + "': malformed JSON at " + line_context(text, e.byte) +
                     " (" + e.what() + ")");
  }
  if (!j.is_array()) throw ParseError("connectivity '" + name + "': expected a JSON array of nodes");
  try {
    const std::size_t n = j.size();
    std::vector<int> kept;  // original index -> kept
    std::vector<int> remap(n, -1);
    std::vector<Viewpoint> vps;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& node = j[i];
      if (!node.at("included").get<bool>()) continue;
      Viewpoint vp;
      vp.id = node.at("image_id").get<std::string>();
      const auto pose = node.at("pose").get<std::vector<double>>();
      if (pose.size() != 16) throw ParseError("connectivity '" + name + "': node " + vp.id + " pose must have 16 entries");
      vp.position = {pose[3], pose[7], pose[11]};
      remap[i] = static_cast<int>(vps.size());
      kept.push_back(static_cast<int>(i));
      vps.push_back(std::move(vp));
    }
    std::vector<std::pair<int, int>> edges;
    for (int i : kept) {
      const auto adj = j[static_cast<std::size_t>(i)].at("unobstructed").get<std::vector<bool>>();
      if (adj.size() != n)
        throw ParseError("connectivity '" + name + "': node " + vps[remap[i]].id +
                         " unobstructed array has wrong length");
      for (int k : kept) {
        if (k == i || !adj[static_cast<std::size_t>(k)]) continue;
        const auto back = j[static_cast<std::size_t>(k)].at("unobstructed").get<std::vector<bool>>();
        if (back.size() != n || !back[static_cast<std::size_t>(i)])
          throw ValidationError("connectivity '" + name + "': asymmetric adjacency between " +
                                vps[remap[i]].id + " and " + vps[remap[k]].id);
        if (i < k) edges.emplace_back(remap[i], remap[k]);
      }
    }
    return NavigationGraph::build(name, std::move(vps), edges, {}, 0.0, fnv1a64(name), 32, 8, 0);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("connectivity '" + name + "': " + e.what());
  }
}

NavigationGraph load_connectivity(const std::filesystem::path& file_path) {
  std::ifstream in(file_path);
  if (!in) throw LookupError("cannot open connectivity file " + file_path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  std::string name = file_path.stem().string();
  if (const auto pos = name.find("_connectivity"); pos != std::string::npos) name = name.substr(0, pos);
  return parse_connectivity(ss.str(), name);
}

std::string world_name(const WorldSpec& spec) { return "world_" + std::to_string(spec.seed); }

NavigationGraph generate_world(const WorldSpec& spec) {
  spec.validate();
  Rng rng = make_rng(spec.seed, "world");
  const int n = spec.n_viewpoints;
  const int n_floor0 = (n + 1) / 2;
  const int cap = spec.max_candidates - 1;

  std::vector<Viewpoint> vps;
  vps.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double z = i < n_floor0 ? 0.0 : kFloorHeight;
    Eigen::Vector3d p;
    for (int attempt = 0;; ++attempt) {
      p = {uniform01(rng) * kBox, uniform01(rng) * kBox, z};
      const bool ok = std::none_of(vps.begin(), vps.end(), [&](const Viewpoint& v) {
        return v.position.z() == z && (v.position - p).norm() < kMinSeparation;
      });
      if (ok || attempt > 200) break;
    }
    Viewpoint vp;
    char buf[16];
    std::snprintf(buf, sizeof buf, "v%03d", i);
    vp.id = buf;
    vp.position = p;
    vps.push_back(std::move(vp));
  }

  // Rooms are spatial regions: nearest room centre on the same floor.
  const int object_labels = spec.vocab_size - spec.room_labels;
  for (int floor = 0; floor < 2; ++floor) {
    std::vector<int> room_pool(static_cast<std::size_t>(spec.room_labels));
    for (int r = 0; r < spec.room_labels; ++r) room_pool[r] = r;
    std::vector<std::pair<Eigen::Vector2d, int>> centres;
    for (int c = 0; c < spec.rooms_per_floor; ++c) {
      if (room_pool.empty())
        for (int r = 0; r < spec.room_labels; ++r) room_pool.push_back(r);
      const auto pick = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(room_pool.size()) - 1));
      const int label = room_pool[pick];
      room_pool.erase(room_pool.begin() + static_cast<std::ptrdiff_t>(pick));
      centres.push_back({{uniform01(rng) * kBox, uniform01(rng) * kBox}, label});
    }
    for (auto& v : vps) {
      if ((v.position.z() > 0.0) != (floor == 1)) continue;
      double best = kInf;
      for (const auto& [c, label] : centres) {
        const double d = (v.position.head<2>() - c).norm();
        if (d < best) {
          best = d;
          v.room_label = label;
        }
      }
    }
  }
  for (auto& v : vps) {
    const int k = static_cast<int>(uniform_int(rng, 1, 3));
    while (static_cast<int>(v.object_labels.size()) < k) {
      const int o = spec.room_labels + static_cast<int>(uniform_int(rng, 0, object_labels - 1));
      if (std::find(v.object_labels.begin(), v.object_labels.end(), o) == v.object_labels.end())
        v.object_labels.push_back(o);
    }
  }

  // Geometric graph: shortest same-floor pairs first, then component repair,
  // then stair edges between floors.
  std::vector<int> degree(static_cast<std::size_t>(n), 0);
  std::vector<std::pair<int, int>> edges;
  std::unordered_set<std::uint64_t> edge_set;
  auto key = [](int a, int b) { return (static_cast<std::uint64_t>(std::min(a, b)) << 32) | static_cast<std::uint32_t>(std::max(a, b)); };
  auto add_edge = [&](int a, int b) {
    if (edge_set.insert(key(a, b)).second) {
      edges.emplace_back(a, b);
      ++degree[a];
      ++degree[b];
    }
  };
  std::vector<std::tuple<double, int, int>> pairs;
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b)
      if (vps[a].position.z() == vps[b].position.z())
        pairs.emplace_back((vps[a].position - vps[b].position).norm(), a, b);
  std::sort(pairs.begin(), pairs.end());

  const int n_stairs = std::min(2, std::min(n_floor0, n - n_floor0));
  const int target_edges = std::max(static_cast<int>(std::lround(spec.mean_degree * n / 2.0)) - n_stairs, 0);
  for (const auto& [d, a, b] : pairs) {
    if (static_cast<int>(edges.size()) >= target_edges) break;
    if (degree[a] < cap && degree[b] < cap) add_edge(a, b);
  }

  auto components = [&](auto same_floor_only) {
    std::vector<int> comp(static_cast<std::size_t>(n), -1);
    std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
    for (auto [a, b] : edges) {
      adj[a].push_back(b);
      adj[b].push_back(a);
    }
    int c = 0;
    for (int s = 0; s < n; ++s) {
      if (comp[s] >= 0) continue;
      std::vector<int> stack{s};
      comp[s] = c;
      while (!stack.empty()) {
        const int u = stack.back();
        stack.pop_back();
        for (int v : adj[u])
          if (comp[v] < 0 && (!same_floor_only || vps[v].position.z() == vps[u].position.z())) {
            comp[v] = c;
            stack.push_back(v);
          }
      }
      ++c;
    }
    return std::pair{comp, c};
  };

  for (;;) {
    auto [comp, count] = components(true);
    // Count components per floor; stop when each floor is one piece.
    std::unordered_set<int> f0, f1;
    for (int i = 0; i < n; ++i) (i < n_floor0 ? f0 : f1).insert(comp[i]);
    if (f0.size() <= 1 && f1.size() <= 1) break;
    bool added = false;
    for (const auto& [d, a, b] : pairs) {
      if (comp[a] != comp[b] && degree[a] < cap && degree[b] < cap) {
        add_edge(a, b);
        added = true;
        break;
      }
    }
    if (!added) {
      for (const auto& [d, a, b] : pairs)
        if (comp[a] != comp[b]) {
          add_edge(a, b);
          break;
        }
    }
  }

  std::vector<std::tuple<double, int, int>> stair_pairs;
  for (int a = 0; a < n_floor0; ++a)
    for (int b = n_floor0; b < n; ++b)
      stair_pairs.emplace_back((vps[a].position.head<2>() - vps[b].position.head<2>()).norm(), a, b);
  std::sort(stair_pairs.begin(), stair_pairs.end());
  int stairs = 0;
  std::unordered_set<int> used;
  for (const auto& [d, a, b] : stair_pairs) {
    if (stairs >= n_stairs) break;
    if (used.contains(a) || used.contains(b) || degree[a] >= cap || degree[b] >= cap) continue;
    add_edge(a, b);
    used.insert(a);
    used.insert(b);
    ++stairs;
  }
  if (stairs == 0 && !stair_pairs.empty()) {
    auto [d, a, b] = stair_pairs.front();
    add_edge(a, b);
  }

  Rng cb = make_rng(spec.codebook_seed, "codebook");
  std::vector<Eigen::VectorXd> codebook;
  for (int l = 0; l < spec.vocab_size; ++l) {
    Eigen::VectorXd v(spec.feature_dim);
    for (int k = 0; k < spec.feature_dim; ++k) v(k) = normal(cb);
    codebook.push_back(std::move(v));
  }

  return NavigationGraph::build(world_name(spec), std::move(vps), edges, std::move(codebook), spec.noise_sigma,
                                spec.seed, spec.feature_dim, spec.angle_dim, spec.room_labels);
}

double geodesic_distance(const NavigationGraph& graph, const std::string& a, const std::string& b) {
  return graph.geodesic(a, b);
}

Observation observe(const NavigationGraph& graph, int at, double heading) {
  const auto& here = graph.viewpoint(at);
  Observation obs;
  Candidate stop;
  stop.visual = Eigen::VectorXd::Zero(graph.feature_dim());
  stop.angle = Eigen::VectorXd::Zero(graph.angle_dim());
  obs.candidates.push_back(std::move(stop));

  struct Item {
    double rel;
    int target;
  };
  std::vector<Item> items;
  for (const auto& nb : graph.neighbors(at)) {
    const double rel = wrap_angle(bearing(here.position, graph.viewpoint(nb.target).position) - heading);
    items.push_back({rel, nb.target});
  }
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    return a.rel != b.rel ? a.rel < b.rel : a.target < b.target;
  });
  for (const auto& it : items) {
    Candidate c;
    c.target = it.target;
    c.visual = graph.visual_feature(it.target);
    const double dphi = elevation(here.position, graph.viewpoint(it.target).position);
    c.angle.resize(graph.angle_dim());
    for (int k = 0; k < graph.angle_dim(); k += 4) {
      c.angle(k) = std::sin(it.rel);
      c.angle(k + 1) = std::cos(it.rel);
      c.angle(k + 2) = std::sin(dphi);
      c.angle(k + 3) = std::cos(dphi);
    }
    obs.candidates.push_back(std::move(c));
  }
  return obs;
}

Observation observe(const NavigationGraph& graph, const std::string& at, double heading) {
  return observe(graph, graph.index_of(at), heading);
}

int teacher_action(const NavigationGraph& graph, const Observation& obs, int at, int goal) {
  if (at == goal) return kStop;
  const double total = graph.geodesic(at, goal);
  if (!std::isfinite(total))
    throw InfeasibleEpisodeError("goal " + graph.viewpoint(goal).id + " unreachable from " +
                                 graph.viewpoint(at).id);
  for (std::size_t c = 1; c < obs.size(); ++c) {
    const int t = obs.candidates[c].target;
    const double via = graph.edge_length(at, t) + graph.geodesic(t, goal);
    if (std::abs(via - total) <= 1e-9 * (1.0 + total)) return static_cast<int>(c);
  }
  throw InfeasibleEpisodeError("no candidate lies on a shortest path from " + graph.viewpoint(at).id);
}

int teacher_action(const NavigationGraph& graph, int at, int goal, double heading) {
  return teacher_action(graph, observe(graph, at, heading), at, goal);
}

Cursor step(const NavigationGraph& graph, const Cursor& cur, const Observation& obs, int index) {
  if (index < 0 || index >= static_cast<int>(obs.size()))
    throw LookupError("candidate index " + std::to_string(index) + " out of range");
  if (index == kStop) return cur;
  const int target = obs.candidates[static_cast<std::size_t>(index)].target;
  return {target, bearing(graph.viewpoint(cur.viewpoint).position, graph.viewpoint(target).position)};
}

}  // namespace uln::nav
