#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace uln::nav {

inline constexpr int kStop = 0;  // candidate index of the STOP action
inline constexpr double kFloorHeight = 3.0;

struct Viewpoint {
  std::string id;
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  int room_label = -1;              // -1 when the source carries no semantics
  std::vector<int> object_labels;   // at most 3
};

struct Neighbor {
  int target = -1;
  double length = 0.0;
};

struct Candidate {
  int target = -1;  // viewpoint index; -1 for STOP
  Eigen::VectorXd visual;
  Eigen::VectorXd angle;
};

struct Observation {
  std::vector<Candidate> candidates;  // [0] is always STOP
  std::size_t size() const { return candidates.size(); }
};

struct WorldSpec {
  int n_viewpoints = 30;
  double mean_degree = 3.0;
  int vocab_size = 32;        // total semantic labels (rooms + objects)
  int room_labels = 8;        // first `room_labels` labels are room types
  int rooms_per_floor = 4;
  int feature_dim = 32;
  int angle_dim = 8;
  int max_candidates = 8;     // N_max, STOP included
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
  // Label semantics (codebook) are shared by every world drawn with the same
  // codebook seed; otherwise labels could not be grounded across worlds.
  std::uint64_t codebook_seed = 20230101;

  void validate() const;
};

nlohmann::json to_json(const WorldSpec& spec);
WorldSpec world_spec_from_json(const nlohmann::json& j);

// Fixed label names; label i of a world is word label_name(i).
std::string label_name(int label, int room_labels);
int max_vocab_size(int room_labels);

class NavigationGraph {
 public:
  NavigationGraph() = default;

  // Builds and validates a graph. Edge lengths are Euclidean distances of the
  // endpoint positions. Throws ValidationError on duplicate ids, bad edges,
  // asymmetric input, or a disconnected graph.
  static NavigationGraph build(std::string name, std::vector<Viewpoint> viewpoints,
                               const std::vector<std::pair<int, int>>& edges,
                               std::vector<Eigen::VectorXd> codebook, double noise_sigma,
                               std::uint64_t seed, int feature_dim, int angle_dim,
                               int room_labels);

  const std::string& name() const { return name_; }
  std::size_t size() const { return viewpoints_.size(); }
  const Viewpoint& viewpoint(int index) const;
  std::span<const Viewpoint> viewpoints() const { return viewpoints_; }
  std::span<const Neighbor> neighbors(int index) const;
  std::size_t edge_count() const;
  std::vector<std::tuple<int, int, double>> edges() const;  // a < b
  bool adjacent(int a, int b) const;
  double edge_length(int a, int b) const;  // throws ValidationError if not adjacent

  int index_of(const std::string& id) const;  // throws LookupError

  double geodesic(int a, int b) const;
  double geodesic(const std::string& a, const std::string& b) const;
  int hop_distance(int a, int b) const;
  // A shortest path (by length) from a to b, inclusive of both endpoints.
  std::vector<int> shortest_path(int a, int b) const;

  const std::vector<Eigen::VectorXd>& codebook() const { return codebook_; }
  int feature_dim() const { return feature_dim_; }
  int angle_dim() const { return angle_dim_; }
  int room_labels() const { return room_labels_; }
  double noise_sigma() const { return noise_sigma_; }
  std::uint64_t seed() const { return seed_; }
  bool has_semantics() const { return !codebook_.empty(); }

  // Visual feature of viewpoint `index` as seen from any neighbor.
  const Eigen::VectorXd& visual_feature(int index) const;

  nlohmann::json to_json() const;
  static NavigationGraph from_json(const nlohmann::json& j);

 private:
  void finalize();

  std::string name_;
  std::vector<Viewpoint> viewpoints_;
  std::vector<std::vector<Neighbor>> adjacency_;
  std::vector<Eigen::VectorXd> codebook_;
  std::vector<Eigen::VectorXd> features_;
  Eigen::MatrixXd dist_;
  Eigen::MatrixXi hops_;
  double noise_sigma_ = 0.0;
  std::uint64_t seed_ = 0;
  int feature_dim_ = 32;
  int angle_dim_ = 8;
  int room_labels_ = 0;
};

// Bearing of b seen from a, clockwise from +y, in (-pi, pi].
double bearing(const Eigen::Vector3d& from, const Eigen::Vector3d& to);
double elevation(const Eigen::Vector3d& from, const Eigen::Vector3d& to);
double wrap_angle(double a);

NavigationGraph load_connectivity(const std::filesystem::path& file_path);
NavigationGraph parse_connectivity(const std::string& text, const std::string& name = "scan");
NavigationGraph generate_world(const WorldSpec& spec);
std::string world_name(const WorldSpec& spec);

double geodesic_distance(const NavigationGraph& graph, const std::string& a, const std::string& b);
Observation observe(const NavigationGraph& graph, int at, double heading);
Observation observe(const NavigationGraph& graph, const std::string& at, double heading);
int teacher_action(const NavigationGraph& graph, int at, int goal, double heading);
int teacher_action(const NavigationGraph& graph, const Observation& obs, int at, int goal);

// Position of the agent on one graph. Copyable so lookahead can snapshot it.
struct Cursor {
  int viewpoint = 0;
  double heading = 0.0;
  bool operator==(const Cursor&) const = default;
};

// Moves along candidate `index` of `obs`; STOP leaves the cursor unchanged.
Cursor step(const NavigationGraph& graph, const Cursor& cur, const Observation& obs, int index);

}  // namespace uln::nav
