#pragma once

// Identification and retraining of the granularity-critical sub-network.

#include "uln/agent.hpp"
#include "uln/metrics.hpp"
#include "uln/training.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace uln::agent {

enum class GssMetric { SR, SPL };
GssMetric gss_metric_from_string(std::string_view s);

struct GssRow {
  std::string replaced;  // "none" for the baseline, else the sub-network name
  double sr = 0.0;       // percent
  double spl = 0.0;      // percent
  double delta = 0.0;    // metric change relative to the baseline
};

struct GssTable {
  GssMetric metric = GssMetric::SR;
  GssRow baseline;
  std::vector<GssRow> rows;  // text, img, hist, cm
  Subnet critical = Subnet::Text;
  bool unique_max = false;  // the maximum delta is attained by one row only

  nlohmann::json to_json() const;
  static GssTable from_json(const nlohmann::json& j);
  std::string markdown() const;
};

std::vector<metrics::EpisodeResult> evaluate_greedy(const AgentParams& params, const Routing& routing,
                                                    const std::vector<Episode>& episodes);

// Copy of `base` with the low slot of `s` taken from `donor`.
AgentParams swap_subnet(const AgentParams& base, const AgentParams& donor, Subnet s);

GssTable gss_identify(const AgentParams& theta_l, const AgentParams& theta_h, const std::vector<Episode>& eval_l3,
                      GssMetric metric = GssMetric::SR);

struct RetrainResult {
  AgentParams params;
  TrainResult train;
  std::map<std::string, std::uint64_t> frozen_checksums;
};

// `hp.routing` and `hp.mask` are overridden: only the new high slot of
// `critical` is trained; every other tensor is checksum-verified afterwards.
// The high slot starts as a copy of the low slot of `donor` (theta_l itself
// when null), or freshly initialized when `init_seed` is given.
RetrainResult gss_retrain(const AgentParams& theta_l, Subnet critical, const std::vector<Episode>& high_data,
                          ImitationHparams hp, std::optional<std::uint64_t> init_seed = std::nullopt,
                          const AgentParams* donor = nullptr);

std::map<std::string, std::uint64_t> tensor_checksums(const AgentParams& p);

}  // namespace uln::agent
