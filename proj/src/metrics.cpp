#include "uln/metrics.hpp"

#include "uln/errors.hpp"

#include <cstdio>
#include <sstream>

namespace uln::metrics {

Trajectory Trajectory::from_path(const std::vector<int>& path, int goal, bool truncated) {
  if (path.empty()) throw ValidationError("trajectory: empty path");
  Trajectory t;
  t.start = path.front();
  t.goal = goal;
  t.truncated = truncated;
  for (int v : path) t.steps.push_back({v, false});
  return t;
}

int Trajectory::final_viewpoint() const {
  if (steps.empty()) throw ValidationError("trajectory: no steps");
  return steps.back().viewpoint;
}

std::vector<int> Trajectory::committed() const {
  std::vector<int> out;
  for (const auto& s : steps)
    if (!s.detour) out.push_back(s.viewpoint);
  return out;
}

std::vector<int> Trajectory::visited() const {
  std::vector<int> out;
  for (const auto& s : steps) out.push_back(s.viewpoint);
  return out;
}

void validate(const Trajectory& traj, const nav::NavigationGraph& graph) {
  if (traj.steps.empty()) throw ValidationError("trajectory: no steps");
  if (traj.steps.front().viewpoint != traj.start) throw ValidationError("trajectory: first element is not the start");
  const auto n = static_cast<int>(graph.size());
  for (std::size_t i = 0; i < traj.steps.size(); ++i) {
    const int v = traj.steps[i].viewpoint;
    if (v < 0 || v >= n) throw ValidationError("trajectory: viewpoint index out of range at " + std::to_string(i));
    if (i > 0 && !graph.adjacent(traj.steps[i - 1].viewpoint, v))
      throw ValidationError("trajectory: steps " + std::to_string(i - 1) + " and " + std::to_string(i) +
                            " are not adjacent");
  }
  if (traj.goal < 0 || traj.goal >= n) throw ValidationError("trajectory: goal out of range");
}

double trajectory_length(const Trajectory& traj, const nav::NavigationGraph& graph) {
  validate(traj, graph);
  double total = 0.0;
  for (std::size_t i = 1; i < traj.steps.size(); ++i)
    total += graph.edge_length(traj.steps[i - 1].viewpoint, traj.steps[i].viewpoint);
  return total;
}

double navigation_error(const Trajectory& traj, const nav::NavigationGraph& graph) {
  validate(traj, graph);
  return graph.geodesic(traj.final_viewpoint(), traj.goal);
}

bool is_success(double ne) { return ne < kSuccessRadius; }

double spl(bool success, double shortest, double walked) {
  if (!(shortest >= 0.0) || !(walked >= 0.0)) throw ValidationError("spl: lengths must be non-negative");
  if (!success) return 0.0;
  const double denom = std::max(shortest, walked);
  if (denom == 0.0) return 1.0;
  return shortest / denom;
}

EpisodeResult score(const Trajectory& traj, const nav::NavigationGraph& graph, text::Level level, int explorations,
                    std::string path_id) {
  EpisodeResult r;
  r.path_id = std::move(path_id);
  r.level = level;
  r.tl = trajectory_length(traj, graph);
  r.ne = navigation_error(traj, graph);
  r.success = is_success(r.ne);
  r.shortest = graph.geodesic(traj.start, traj.goal);
  r.spl = spl(r.success, r.shortest, r.tl);
  r.explorations = explorations;
  r.truncated = traj.truncated;
  return r;
}

Summary summarize(const std::vector<EpisodeResult>& results) {
  Summary s;
  s.count = results.size();
  if (results.empty()) return s;
  for (const auto& r : results) {
    s.tl += r.tl;
    s.ne += r.ne;
    s.sr += r.success ? 1.0 : 0.0;
    s.spl += r.spl;
    s.explorations += r.explorations;
  }
  const double n = static_cast<double>(results.size());
  s.tl /= n;
  s.ne /= n;
  s.sr = 100.0 * s.sr / n;
  s.spl = 100.0 * s.spl / n;
  s.explorations /= n;
  return s;
}

Report aggregate(const std::vector<EpisodeResult>& results) {
  if (results.empty()) throw ValidationError("aggregate: no results");
  Report rep;
  rep.overall = summarize(results);
  std::map<text::Level, std::vector<EpisodeResult>> by_level;
  for (const auto& r : results) by_level[r.level].push_back(r);
  for (const auto& [lvl, rs] : by_level) rep.per_level[lvl] = summarize(rs);
  return rep;
}

Summary combine(const std::vector<Summary>& parts) {
  Summary s;
  for (const auto& p : parts) s.count += p.count;
  if (s.count == 0) return s;
  for (const auto& p : parts) {
    const double w = static_cast<double>(p.count) / static_cast<double>(s.count);
    s.tl += w * p.tl;
    s.ne += w * p.ne;
    s.sr += w * p.sr;
    s.spl += w * p.spl;
    s.explorations += w * p.explorations;
  }
  return s;
}

nlohmann::json to_json(const EpisodeResult& r) {
  return {{"path_id", r.path_id}, {"level", text::to_string(r.level)}, {"tl", r.tl},           {"ne", r.ne},
          {"success", r.success}, {"spl", r.spl},                      {"shortest", r.shortest}, {"explorations", r.explorations},
          {"truncated", r.truncated}};
}

nlohmann::json to_json(const Summary& s) {
  return {{"count", s.count}, {"tl", s.tl}, {"ne", s.ne}, {"sr", s.sr}, {"spl", s.spl}, {"explorations", s.explorations}};
}

nlohmann::json to_json(const Report& r) {
  nlohmann::json levels = nlohmann::json::object();
  for (const auto& [lvl, s] : r.per_level) levels[text::to_string(lvl)] = to_json(s);
  return {{"overall", to_json(r.overall)}, {"levels", levels}};
}

nlohmann::json results_file(const std::vector<EpisodeResult>& results) {
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& r : results) eps.push_back(to_json(r));
  nlohmann::json j = {{"version", "uln-results/1"}, {"episodes", eps}};
  if (!results.empty()) j["aggregate"] = to_json(aggregate(results));
  return j;
}

std::vector<EpisodeResult> results_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("version", "") != "uln-results/1") throw ParseError("results: unsupported version");
  std::vector<EpisodeResult> out;
  try {
    for (const auto& r : j.at("episodes")) {
      EpisodeResult e;
      e.path_id = r.at("path_id").get<std::string>();
      e.level = text::level_from_string(r.at("level").get<std::string>());
      e.tl = r.at("tl").get<double>();
      e.ne = r.at("ne").get<double>();
      e.success = r.at("success").get<bool>();
      e.spl = r.at("spl").get<double>();
      e.shortest = r.at("shortest").get<double>();
      e.explorations = r.at("explorations").get<int>();
      e.truncated = r.at("truncated").get<bool>();
      out.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("results: ") + e.what());
  }
  return out;
}

std::string results_csv(const std::vector<EpisodeResult>& results) {
  std::ostringstream os;
  os << "path_id,level,tl,ne,success,spl,shortest,explorations,truncated\n";
  char buf[256];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%.6f,%d,%.6f,%.6f,%d,%d\n", r.path_id.c_str(),
                  text::to_string(r.level).c_str(), r.tl, r.ne, r.success ? 1 : 0, r.spl, r.shortest, r.explorations,
                  r.truncated ? 1 : 0);
    os << buf;
  }
  return os.str();
}

std::string markdown_table(const std::vector<std::pair<std::string, Report>>& rows,
                           const std::vector<text::Level>& levels, bool with_tl) {
  std::ostringstream os;
  os << "| Method |";
  for (auto l : levels) {
    const std::string n = text::to_string(l);
    if (with_tl) os << ' ' << n << " TL |";
    os << ' ' << n << " SR | " << n << " SPL |";
  }
  os << "\n|---|";
  for (std::size_t i = 0; i < levels.size(); ++i) os << (with_tl ? "---|---|---|" : "---|---|");
  os << '\n';
  char buf[64];
  for (const auto& [name, rep] : rows) {
    os << "| " << name << " |";
    for (auto l : levels) {
      const auto it = rep.per_level.find(l);
      const Summary s = it == rep.per_level.end() ? Summary{} : it->second;
      if (with_tl) {
        std::snprintf(buf, sizeof buf, " %.2f | %.1f | %.1f |", s.tl, s.sr, s.spl);
      } else {
        std::snprintf(buf, sizeof buf, " %.1f | %.1f |", s.sr, s.spl);
      }
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

CorrectionProfile summarize_corrections(const std::vector<std::vector<CorrectionStep>>& episodes) {
  CorrectionProfile p;
  p.episodes = episodes.size();
  std::vector<std::size_t> correct;
  std::vector<double> step_sum, gap_sum;
  for (const auto& ep : episodes) {
    std::size_t corrections = 0;
    std::size_t last = 0;
    for (std::size_t i = 0; i < ep.size(); ++i) {
      const auto& s = ep[i];
      if (p.segment_steps.size() <= corrections) {
        p.segment_steps.push_back(0);
        correct.push_back(0);
      }
      ++p.segment_steps[corrections];
      correct[corrections] += s.flagged == s.deviates ? 1 : 0;
      if (s.deviates) {
        if (step_sum.size() <= corrections) {
          step_sum.push_back(0.0);
          gap_sum.push_back(0.0);
          p.episodes_with.push_back(0);
        }
        step_sum[corrections] += static_cast<double>(i + 1);
        gap_sum[corrections] += static_cast<double>(i + 1 - last);
        ++p.episodes_with[corrections];
        last = i + 1;
        ++corrections;
      }
    }
  }
  for (std::size_t k = 0; k < p.segment_steps.size(); ++k)
    p.segment_accuracy.push_back(static_cast<double>(correct[k]) / static_cast<double>(p.segment_steps[k]));
  for (std::size_t k = 0; k < step_sum.size(); ++k) {
    p.mean_step_of_correction.push_back(step_sum[k] / static_cast<double>(p.episodes_with[k]));
    p.mean_gap.push_back(gap_sum[k] / static_cast<double>(p.episodes_with[k]));
  }
  return p;
}

nlohmann::json to_json(const CorrectionProfile& p) {
  return {{"segment_accuracy", p.segment_accuracy},
          {"segment_steps", p.segment_steps},
          {"mean_step_of_correction", p.mean_step_of_correction},
          {"mean_gap", p.mean_gap},
          {"episodes_with", p.episodes_with},
          {"episodes", p.episodes}};
}

}  // namespace uln::metrics
