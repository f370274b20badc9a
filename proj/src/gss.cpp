#include "uln/gss.hpp"

#include "uln/checkpoint.hpp"
#include "uln/errors.hpp"

#include <cstdio>
#include <sstream>

namespace uln::agent {

GssMetric gss_metric_from_string(std::string_view s) {
  if (s == "sr" || s == "SR") return GssMetric::SR;
  if (s == "spl" || s == "SPL") return GssMetric::SPL;
  throw ConfigError("unknown GSS metric '" + std::string(s) + "'");
}

nlohmann::json GssTable::to_json() const {
  nlohmann::json rs = nlohmann::json::array();
  auto row = [](const GssRow& r) {
    return nlohmann::json{{"replaced", r.replaced}, {"sr", r.sr}, {"spl", r.spl}, {"delta", r.delta}};
  };
  rs.push_back(row(baseline));
  for (const auto& r : rows) rs.push_back(row(r));
  return {{"metric", metric == GssMetric::SR ? "SR" : "SPL"},
          {"rows", rs},
          {"critical", std::string(subnet_name(critical))},
          {"unique_max", unique_max}};
}

GssTable GssTable::from_json(const nlohmann::json& j) {
  try {
    GssTable t;
    t.metric = gss_metric_from_string(j.at("metric").get<std::string>());
    const auto& rs = j.at("rows");
    if (!rs.is_array() || rs.size() != kSwappable.size() + 1) throw ParseError("gss table: expected baseline plus 4 rows");
    for (std::size_t i = 0; i < rs.size(); ++i) {
      GssRow r{rs[i].at("replaced").get<std::string>(), rs[i].at("sr").get<double>(), rs[i].at("spl").get<double>(),
               rs[i].at("delta").get<double>()};
      if (i == 0)
        t.baseline = r;
      else
        t.rows.push_back(r);
    }
    t.critical = subnet_from_name(j.at("critical").get<std::string>());
    t.unique_max = j.at("unique_max").get<bool>();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("gss table: ") + e.what());
  }
}

std::string GssTable::markdown() const {
  std::ostringstream os;
  os << "| Replaced part | L3 SR | L3 SPL | Delta " << (metric == GssMetric::SR ? "SR" : "SPL") << " |\n";
  os << "|---|---|---|---|\n";
  char buf[128];
  auto line = [&](const GssRow& r) {
    std::snprintf(buf, sizeof buf, "| %s | %.1f | %.1f | %+.1f |\n", r.replaced.c_str(), r.sr, r.spl, r.delta);
    os << buf;
  };
  line(baseline);
  for (const auto& r : rows) line(r);
  os << "\nCritical sub-network: " << subnet_name(critical) << (unique_max ? "" : " (tied)") << '\n';
  return os.str();
}

std::vector<metrics::EpisodeResult> evaluate_greedy(const AgentParams& params, const Routing& routing,
                                                    const std::vector<Episode>& episodes) {
  std::vector<metrics::EpisodeResult> out;
  out.reserve(episodes.size());
  for (const auto& ep : episodes) {
    const Rollout r = greedy_rollout(params, ep, routing);
    out.push_back(metrics::score(metrics::Trajectory::from_path(r.visited, ep.goal, !r.stopped), *ep.graph, ep.level,
                                 0, ep.path_id));
  }
  return out;
}

AgentParams swap_subnet(const AgentParams& base, const AgentParams& donor, Subnet s) {
  if (!(base.dims == donor.dims) || base.head != donor.head || base.history != donor.history)
    throw SurgeryError(std::string(subnet_name(s)) + ": models are not architecturally identical");
  const auto& src = donor.slot(s, Variant::Low);
  const auto& dst = base.slot(s, Variant::Low);
  if (!src || !dst || !src->same_shapes(*dst))
    throw SurgeryError(std::string(subnet_name(s)) + ": tensor shapes differ between models");
  AgentParams out = base;
  out.slot(s, Variant::Low) = *src;
  return out;
}

GssTable gss_identify(const AgentParams& theta_l, const AgentParams& theta_h, const std::vector<Episode>& eval_l3,
                      GssMetric metric) {
  if (eval_l3.empty()) throw ValidationError("gss_identify: no evaluation episodes");
  GssTable table;
  table.metric = metric;
  const Routing low = Routing::all(Variant::Low);
  auto measure = [&](const AgentParams& p, std::string name) {
    const auto s = metrics::summarize(evaluate_greedy(p, low, eval_l3));
    GssRow r;
    r.replaced = std::move(name);
    r.sr = s.sr;
    r.spl = s.spl;
    return r;
  };
  table.baseline = measure(theta_l, "none");
  const double base = metric == GssMetric::SR ? table.baseline.sr : table.baseline.spl;
  double best = 0.0;
  int best_count = 0;
  for (Subnet s : kSwappable) {
    GssRow r = measure(swap_subnet(theta_l, theta_h, s), std::string(subnet_name(s)));
    r.delta = (metric == GssMetric::SR ? r.sr : r.spl) - base;
    if (table.rows.empty() || r.delta > best) {
      best = r.delta;
      best_count = 1;
      table.critical = s;
    } else if (r.delta == best) {
      ++best_count;
    }
    table.rows.push_back(std::move(r));
  }
  table.unique_max = best_count == 1;
  return table;
}

std::map<std::string, std::uint64_t> tensor_checksums(const AgentParams& p) {
  std::map<std::string, std::uint64_t> out;
  p.for_each([&](const std::string& path, const Mat& m) { out[path] = hash_mat(m); });
  return out;
}

RetrainResult gss_retrain(const AgentParams& theta_l, Subnet critical, const std::vector<Episode>& high_data,
                          ImitationHparams hp, std::optional<std::uint64_t> init_seed, const AgentParams* donor) {
  RetrainResult res{theta_l, {}, {}};
  AgentParams& p = res.params;
  if (init_seed) {
    p.slot(critical, Variant::High) = AgentParams::init_subnet(p.dims, p.head, p.history, critical, *init_seed);
  } else {
    const AgentParams& src = donor ? *donor : theta_l;
    if (!(src.dims == p.dims) || src.head != p.head || src.history != p.history)
      throw SurgeryError("gss_retrain: donor architecture differs from theta_l");
    p.slot(critical, Variant::High) = src.slot(critical, Variant::Low);
  }
  const std::string high_prefix = std::string(subnet_name(critical)) + "/high/";
  for (const auto& [path, sum] : tensor_checksums(p))
    if (path.rfind(high_prefix, 0) != 0) res.frozen_checksums[path] = sum;
  hp.routing = Routing::all(Variant::High);
  hp.mask = TrainMask::only(critical, Variant::High);
  if (hp.iterations > 0) res.train = train_imitation(p, high_data, hp);
  const auto after = tensor_checksums(p);
  for (const auto& [path, sum] : res.frozen_checksums) {
    const auto it = after.find(path);
    if (it == after.end() || it->second != sum)
      throw InvariantError("gss_retrain: frozen tensor " + path + " changed during retraining");
  }
  return res;
}

}  // namespace uln::agent
