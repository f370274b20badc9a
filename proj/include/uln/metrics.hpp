#pragma once

#include "uln/instructions.hpp"
#include "uln/navgraph.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <vector>

namespace uln::metrics {

inline constexpr double kSuccessRadius = 3.0;  // metres, strict

struct TrajectoryStep {
  int viewpoint = 0;
  bool detour = false;  // walked during a lookahead excursion
};

struct Trajectory {
  std::vector<TrajectoryStep> steps;  // steps[0] is the start
  int start = 0;
  int goal = 0;
  bool truncated = false;

  static Trajectory from_path(const std::vector<int>& path, int goal, bool truncated = false);
  int final_viewpoint() const;
  // Agent-committed viewpoints only, detours removed.
  std::vector<int> committed() const;
  std::vector<int> visited() const;  // everything, detours included
};

void validate(const Trajectory& traj, const nav::NavigationGraph& graph);
double trajectory_length(const Trajectory& traj, const nav::NavigationGraph& graph);
double navigation_error(const Trajectory& traj, const nav::NavigationGraph& graph);
bool is_success(double navigation_error);
double spl(bool success, double shortest, double walked);

struct EpisodeResult {
  std::string path_id;
  text::Level level = text::Level::Unknown;
  double tl = 0.0;
  double ne = 0.0;
  bool success = false;
  double spl = 0.0;
  double shortest = 0.0;
  int explorations = 0;
  bool truncated = false;
};

EpisodeResult score(const Trajectory& traj, const nav::NavigationGraph& graph, text::Level level,
                    int explorations, std::string path_id = "");

struct Summary {
  std::size_t count = 0;
  double tl = 0.0;
  double ne = 0.0;
  double sr = 0.0;   // percent
  double spl = 0.0;  // percent
  double explorations = 0.0;
};

struct Report {
  Summary overall;
  std::map<text::Level, Summary> per_level;
};

Summary summarize(const std::vector<EpisodeResult>& results);
Report aggregate(const std::vector<EpisodeResult>& results);
// Count-weighted combination of summaries of disjoint result sets.
Summary combine(const std::vector<Summary>& parts);

nlohmann::json to_json(const EpisodeResult& r);
nlohmann::json to_json(const Summary& s);
nlohmann::json to_json(const Report& r);
nlohmann::json results_file(const std::vector<EpisodeResult>& results);
std::vector<EpisodeResult> results_from_json(const nlohmann::json& j);
std::string results_csv(const std::vector<EpisodeResult>& results);
// One row per named report with per-level SR/SPL (and TL) columns.
std::string markdown_table(const std::vector<std::pair<std::string, Report>>& rows,
                           const std::vector<text::Level>& levels, bool with_tl = true);

// Correction analysis: one record per teacher-corrected step sequence.
struct CorrectionStep {
  bool flagged = false;   // uncertainty score above threshold
  bool deviates = false;  // agent argmax differs from the teacher
};

struct CorrectionProfile {
  // Index k (0-based) describes segment k+1: the steps after correction k and
  // up to and including correction k+1 (the last segment runs to the end).
  std::vector<double> segment_accuracy;
  std::vector<std::size_t> segment_steps;
  // Mean 1-based step index of the N-th correction over episodes with >= N.
  std::vector<double> mean_step_of_correction;
  // Mean steps since the previous correction (or the start for N = 1).
  std::vector<double> mean_gap;
  std::vector<std::size_t> episodes_with;
  std::size_t episodes = 0;
};

CorrectionProfile summarize_corrections(const std::vector<std::vector<CorrectionStep>>& episodes);
nlohmann::json to_json(const CorrectionProfile& p);

}  // namespace uln::metrics
