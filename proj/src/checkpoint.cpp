#include "uln/checkpoint.hpp"

#include "uln/errors.hpp"
#include "uln/rng.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace uln {

nlohmann::json mat_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json data = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

Eigen::MatrixXd mat_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (rows < 0 || cols < 0 || static_cast<Eigen::Index>(data.size()) != rows * cols)
    throw LoadError("matrix payload does not match its shape");
  Eigen::MatrixXd m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[k++].get<double>();
  return m;
}

std::uint64_t hash_mat(const Eigen::MatrixXd& m, std::uint64_t seed) {
  const auto rows = static_cast<std::int64_t>(m.rows());
  const auto cols = static_cast<std::int64_t>(m.cols());
  std::uint64_t h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&rows), sizeof rows), seed);
  h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&cols), sizeof cols), h);
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(m.data()),
                                  static_cast<std::size_t>(m.size()) * sizeof(double)),
                 h);
}

nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw LoadError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(p.string() + ": " + e.what());
  }
}

void write_text_file(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  const std::filesystem::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw LoadError("cannot write " + tmp.string());
    out << text;
    if (text.empty() || text.back() != '\n') out << '\n';
  }
  std::filesystem::rename(tmp, p);
}

void write_json_file(const std::filesystem::path& p, const nlohmann::json& j) { write_text_file(p, j.dump(1)); }

}  // namespace uln

namespace uln::agent {

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

nlohmann::json dims_json(const AgentDims& d) {
  return {{"d_h", d.d_h},     {"layers", d.layers},   {"heads", d.heads},         {"d_v", d.d_v},
          {"d_a", d.d_a},     {"d_ff", d.d_ff},       {"vocab", d.vocab},         {"max_len", d.max_len},
          {"max_steps", d.max_steps}, {"max_candidates", d.max_candidates}};
}

AgentDims dims_from(const nlohmann::json& j) {
  AgentDims d;
  d.d_h = j.at("d_h");
  d.layers = j.at("layers");
  d.heads = j.at("heads");
  d.d_v = j.at("d_v");
  d.d_a = j.at("d_a");
  d.d_ff = j.at("d_ff");
  d.vocab = j.at("vocab");
  d.max_len = j.at("max_len");
  d.max_steps = j.at("max_steps");
  d.max_candidates = j.at("max_candidates");
  return d;
}

}  // namespace

nlohmann::json checkpoint_to_json(const AgentParams& p, const std::string& config_hash) {
  nlohmann::json tensors = nlohmann::json::array();
  p.for_each([&](const std::string& path, const Mat& m) {
    nlohmann::json t = mat_to_json(m);
    t["path"] = path;
    t["checksum"] = hex64(hash_mat(m));
    tensors.push_back(std::move(t));
  });
  return {{"version", kCheckpointVersion},
          {"dims", dims_json(p.dims)},
          {"head", to_string(p.head)},
          {"history", to_string(p.history)},
          {"config_hash", config_hash},
          {"tensors", std::move(tensors)}};
}

AgentParams checkpoint_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("version", "") != kCheckpointVersion)
    throw LoadError("checkpoint: unsupported or missing version (expected uln-ckpt/1)");
  const AgentDims dims = dims_from(j.at("dims"));
  const HeadStyle head = head_style_from_string(j.at("head").get<std::string>());
  const HistoryStyle hist = history_style_from_string(j.at("history").get<std::string>());
  AgentParams p = AgentParams::init(dims, head, hist, 0);
  std::set<std::string> loaded;
  for (const auto& t : j.at("tensors")) {
    const std::string path = t.at("path");
    if (!loaded.insert(path).second) throw LoadError("checkpoint: duplicate tensor " + path);
    const Mat m = mat_from_json(t);
    if (hex64(hash_mat(m)) != t.at("checksum").get<std::string>())
      throw LoadError("checkpoint: checksum mismatch for " + path);
    const auto slash = path.find('/');
    if (slash == std::string::npos) throw LoadError("checkpoint: malformed tensor path " + path);
    const std::string head_part = path.substr(0, slash);
    Mat* dst = nullptr;
    if (head_part == "emb") {
      if (path.substr(slash + 1) != "E") throw LoadError("checkpoint: unknown tensor " + path);
      dst = &p.embedding.get("E");
    } else {
      const auto slash2 = path.find('/', slash + 1);
      if (slash2 == std::string::npos) throw LoadError("checkpoint: malformed tensor path " + path);
      const Subnet s = subnet_from_name(head_part);
      const std::string var = path.substr(slash + 1, slash2 - slash - 1);
      const Variant v = var == "low" ? Variant::Low : var == "high" ? Variant::High : throw LoadError("bad variant " + path);
      auto& slot = p.slot(s, v);
      if (!slot) slot = AgentParams::init_subnet(dims, head, hist, s, 0);
      const std::string name = path.substr(slash2 + 1);
      if (slot->index_of(name) < 0) throw LoadError("checkpoint: unknown tensor " + path);
      dst = &slot->get(name);
    }
    if (dst->rows() != m.rows() || dst->cols() != m.cols())
      throw LoadError("checkpoint: shape mismatch for " + path);
    *dst = m;
  }
  p.for_each([&](const std::string& path, const Mat&) {
    if (!loaded.count(path)) throw LoadError("checkpoint: missing tensor " + path);
  });
  p.check_consistent();
  return p;
}

std::string checkpoint_config_hash(const nlohmann::json& j) { return j.value("config_hash", ""); }

void save_checkpoint(const std::filesystem::path& file, const AgentParams& p, const std::string& config_hash) {
  write_text_file(file, checkpoint_to_json(p, config_hash).dump());
}

AgentParams load_checkpoint(const std::filesystem::path& file, const AgentDims* expected_dims,
                            const std::string& expected_hash) {
  const nlohmann::json j = read_json_file(file);
  AgentParams p = checkpoint_from_json(j);
  if (expected_dims != nullptr && !(p.dims == *expected_dims))
    throw LoadError(file.string() + ": checkpoint dims do not match the configuration");
  if (!expected_hash.empty() && checkpoint_config_hash(j) != expected_hash)
    throw LoadError(file.string() + ": checkpoint was produced by a different configuration");
  return p;
}

}  // namespace uln::agent
