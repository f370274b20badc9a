#pragma once

// JSON tensor containers ("uln-ckpt/1") for agent parameters.

#include "uln/agent.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>

namespace uln {

nlohmann::json mat_to_json(const Eigen::MatrixXd& m);
Eigen::MatrixXd mat_from_json(const nlohmann::json& j);
std::uint64_t hash_mat(const Eigen::MatrixXd& m, std::uint64_t seed = 1469598103934665603ULL);

nlohmann::json read_json_file(const std::filesystem::path& p);
// Writes atomically (temp file + rename) with a trailing newline.
void write_text_file(const std::filesystem::path& p, const std::string& text);
void write_json_file(const std::filesystem::path& p, const nlohmann::json& j);

}  // namespace uln

namespace uln::agent {

inline constexpr const char* kCheckpointVersion = "uln-ckpt/1";

// `config_hash` ties a checkpoint to the configuration that produced it.
nlohmann::json checkpoint_to_json(const AgentParams& p, const std::string& config_hash = "");
AgentParams checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const std::filesystem::path& file, const AgentParams& p, const std::string& config_hash = "");
// Verifies version, per-tensor checksums, and (when given) dims and config hash.
AgentParams load_checkpoint(const std::filesystem::path& file, const AgentDims* expected_dims = nullptr,
                            const std::string& expected_hash = "");
std::string checkpoint_config_hash(const nlohmann::json& j);

}  // namespace uln::agent
