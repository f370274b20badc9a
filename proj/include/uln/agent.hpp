#pragma once

// Toy cross-modal navigation agent.
//
// Five addressable sub-networks (text encoder, image encoder, history
// encoder, cross-modal layers, action head) sit on top of one shared token
// embedding table. Every sub-network owns a low-level slot and an optional
// high-level slot; which slot a forward pass reads is decided by a Routing,
// so parameters stay immutable while many episodes evaluate concurrently.

#include "uln/autodiff.hpp"
#include "uln/navgraph.hpp"

#include <array>
#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace uln::agent {

using ad::Mat;

enum class HeadStyle { FcHead, AttnHead };
enum class HistoryStyle { Sequence, StateVector };
enum class Subnet { Text = 0, Img = 1, Hist = 2, Cm = 3, Action = 4 };
enum class Variant { Low = 0, High = 1 };

inline constexpr int kNumSubnets = 5;
inline constexpr std::array<Subnet, 4> kSwappable = {Subnet::Text, Subnet::Img, Subnet::Hist, Subnet::Cm};

std::string_view subnet_name(Subnet s);  // "f_text", ...
Subnet subnet_from_name(std::string_view name);
std::string_view to_string(HeadStyle h);
std::string_view to_string(HistoryStyle h);
HeadStyle head_style_from_string(std::string_view s);
HistoryStyle history_style_from_string(std::string_view s);

struct AgentDims {
  int d_h = 64;
  int layers = 2;
  int heads = 4;
  int d_v = 32;
  int d_a = 8;
  int d_ff = 128;
  int vocab = 64;
  int max_len = 80;     // text tokens, sentinel excluded
  int max_steps = 15;
  int max_candidates = 8;
  bool operator==(const AgentDims&) const = default;
};

struct Tensor {
  std::string name;
  Mat value;
};

struct SubnetParams {
  std::vector<Tensor> tensors;

  const Mat& get(std::string_view name) const;
  Mat& get(std::string_view name);
  int index_of(std::string_view name) const;  // -1 when absent
  std::uint64_t checksum() const;
  bool same_shapes(const SubnetParams& other) const;
};

// Counts how many times a parameter slot was bound into a forward pass.
// Copies start from zero so instrumentation never leaks between models.
class ReadCounter {
 public:
  ReadCounter() : count_(std::make_unique<std::atomic<std::uint64_t>>(0)) {}
  ReadCounter(const ReadCounter&) : ReadCounter() {}
  ReadCounter& operator=(const ReadCounter&) { return *this; }
  ReadCounter(ReadCounter&&) noexcept = default;
  ReadCounter& operator=(ReadCounter&&) noexcept = default;
  void bump() const { count_->fetch_add(1, std::memory_order_relaxed); }
  std::uint64_t value() const { return count_->load(std::memory_order_relaxed); }
  void reset() const { count_->store(0); }

 private:
  std::unique_ptr<std::atomic<std::uint64_t>> count_;
};

struct Routing {
  std::array<Variant, kNumSubnets> variant{};
  static Routing all(Variant v);
  Variant operator[](Subnet s) const { return variant[static_cast<std::size_t>(s)]; }
  Variant& operator[](Subnet s) { return variant[static_cast<std::size_t>(s)]; }
};

struct AgentParams {
  AgentDims dims;
  HeadStyle head = HeadStyle::AttnHead;
  HistoryStyle history = HistoryStyle::StateVector;
  SubnetParams embedding;
  std::array<std::array<std::optional<SubnetParams>, 2>, kNumSubnets> slots;
  std::array<std::array<ReadCounter, 2>, kNumSubnets> reads;

  static AgentParams init(const AgentDims& dims, HeadStyle head, HistoryStyle history, std::uint64_t seed);
  // Freshly initialised tensors for one sub-network (same layout as init()).
  static SubnetParams init_subnet(const AgentDims& dims, HeadStyle head, HistoryStyle history, Subnet s,
                                  std::uint64_t seed);

  const std::optional<SubnetParams>& slot(Subnet s, Variant v) const;
  std::optional<SubnetParams>& slot(Subnet s, Variant v);
  bool has_high(Subnet s) const { return slot(s, Variant::High).has_value(); }
  // Slot a routing resolves to: the requested variant if present, else low.
  Variant resolve(Subnet s, const Routing& r) const;
  std::uint64_t reads_of(Subnet s, Variant v) const { return reads[static_cast<std::size_t>(s)][static_cast<std::size_t>(v)].value(); }

  AgentParams zeros_like() const;
  // Visits every tensor with its checkpoint path, e.g. "f_text/low/Wq".
  template <typename F>
  void for_each(F&& f);
  template <typename F>
  void for_each(F&& f) const;
  std::size_t parameter_count() const;
  bool all_finite() const;
  void check_consistent() const;  // throws ShapeError
};

// Which parameter slots receive gradients.
struct TrainMask {
  bool embedding = false;
  std::array<std::array<bool, 2>, kNumSubnets> slots{};
  static TrainMask all_low();
  static TrainMask only(Subnet s, Variant v);
};

// Binds parameter tensors into one tape, lazily and at most once each.
class Binder {
 public:
  Binder(ad::Tape& tape, const AgentParams& params, Routing routing, AgentParams* grads = nullptr,
         TrainMask mask = {});
  ad::Var get(Subnet s, std::string_view name);
  ad::Var embedding();
  ad::Tape& tape() { return tape_; }
  const AgentParams& params() const { return params_; }
  const Routing& routing() const { return routing_; }

 private:
  ad::Tape& tape_;
  const AgentParams& params_;
  Routing routing_;
  AgentParams* grads_;
  TrainMask mask_;
  std::unordered_map<std::string, ad::Var> cache_;
  std::optional<ad::Var> embedding_;
};

struct TextEncoding {
  ad::Var X;  // (tokens + 1) x d_h, row 0 is the sentinel slot
  bool truncated = false;
};

struct AgentState {
  int t = 1;
  std::vector<ad::Var> history;  // sequence mode: init + one slot per step; state mode: {h_t}
  std::optional<std::vector<ad::Var>> frozen_history;
  nav::Cursor cursor;
};

struct ForwardTrace {
  std::vector<std::vector<Mat>> alpha;  // [layer][head]: query slots x text tokens
  Eigen::RowVectorXd beta;              // one logit per candidate
  ad::Var beta_var;
  ad::Var sentinel;   // fused language anchor x'_{t,1}
  ad::Var fused_obs;  // O'_t
  Mat history_input;  // H rows fed into the cross-modal layers
  bool truncated = false;
};

TextEncoding encode_text(Binder& b, const std::vector<int>& tokens);
ad::Var encode_observation(Binder& b, const nav::Observation& obs);
AgentState initial_state(Binder& b, nav::Cursor cursor);
// Folds the chosen candidate embedding into the history; returns the state for t+1.
AgentState encode_history(Binder& b, const AgentState& state, ad::Var chosen_embedding, nav::Cursor next);
ForwardTrace forward_step(Binder& b, const AgentState& state, const TextEncoding& text, ad::Var obs_embedding,
                          bool use_frozen_history);
int select_action(const Eigen::RowVectorXd& beta);

// Convenience wrapper around one tape for a single episode.
class Session {
 public:
  Session(const AgentParams& params, Routing routing, AgentParams* grads = nullptr, TrainMask mask = {});
  void begin(const std::vector<int>& tokens, nav::Cursor start);
  struct Step {
    ForwardTrace trace;
    ad::Var obs_embedding;
  };
  Step forward(const nav::Observation& obs, const AgentState& state, bool use_frozen);
  AgentState advance(const AgentState& state, const Step& step, int action, nav::Cursor next);
  const AgentState& start_state() const { return start_; }
  const TextEncoding& text() const { return text_; }
  ad::Tape& tape() { return tape_; }
  Binder& binder() { return binder_; }

 private:
  ad::Tape tape_;
  Binder binder_;
  TextEncoding text_;
  AgentState start_;
};

template <typename F>
void AgentParams::for_each(F&& f) {
  for (auto& t : embedding.tensors) f(std::string("emb/") + t.name, t.value);
  for (int s = 0; s < kNumSubnets; ++s)
    for (int v = 0; v < 2; ++v) {
      auto& slot = slots[static_cast<std::size_t>(s)][static_cast<std::size_t>(v)];
      if (!slot) continue;
      for (auto& t : slot->tensors)
        f(std::string(subnet_name(static_cast<Subnet>(s))) + (v == 0 ? "/low/" : "/high/") + t.name, t.value);
    }
}

template <typename F>
void AgentParams::for_each(F&& f) const {
  const_cast<AgentParams*>(this)->for_each([&](const std::string& path, Mat& m) { f(path, static_cast<const Mat&>(m)); });
}

}  // namespace uln::agent
