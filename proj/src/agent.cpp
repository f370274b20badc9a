#include "uln/agent.hpp"

#include "uln/errors.hpp"
#include "uln/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace uln::agent {

namespace {

enum class InitKind { Weight, Ones, Zeros, Normal, SmallNormal };

struct TensorSpec {
  std::string name;
  int rows;
  int cols;
  InitKind kind;
};

std::vector<TensorSpec> layout(const AgentDims& d, HeadStyle head, HistoryStyle history, Subnet s) {
  const int h = d.d_h;
  std::vector<TensorSpec> out;
  auto ln = [&](const std::string& p) {
    out.push_back({p + "_g", 1, h, InitKind::Ones});
    out.push_back({p + "_b", 1, h, InitKind::Zeros});
  };
  auto proj4 = [&](const std::string& p, const char* letter) {
    for (const char* suffix : {"q", "k", "v", "o"})
      out.push_back({p + letter + suffix, h, h, InitKind::Weight});
  };
  auto ffn = [&](const std::string& p) {
    out.push_back({p + "F1", h, d.d_ff, InitKind::Weight});
    out.push_back({p + "b1", 1, d.d_ff, InitKind::Zeros});
    out.push_back({p + "F2", d.d_ff, h, InitKind::Weight});
    out.push_back({p + "b2", 1, h, InitKind::Zeros});
  };
  switch (s) {
    case Subnet::Text:
      out.push_back({"sentinel", 1, h, InitKind::Normal});
      out.push_back({"pos", d.max_len + 1, h, InitKind::SmallNormal});
      proj4("", "W");
      ln("ln1");
      ffn("");
      ln("ln2");
      break;
    case Subnet::Img:
      out.push_back({"W1", d.d_v + d.d_a, h, InitKind::Weight});
      out.push_back({"b1", 1, h, InitKind::Zeros});
      out.push_back({"W2", h, h, InitKind::Weight});
      // STOP has all-zero features, so its embedding is the layer norm of b2.
      out.push_back({"b2", 1, h, InitKind::SmallNormal});
      ln("ln");
      break;
    case Subnet::Hist:
      out.push_back({"init", 1, h, InitKind::Normal});
      if (history == HistoryStyle::StateVector) {
        out.push_back({"Wg", 2 * h, h, InitKind::Weight});
        out.push_back({"bg", 1, h, InitKind::Zeros});
        out.push_back({"Wc", 2 * h, h, InitKind::Weight});
        out.push_back({"bc", 1, h, InitKind::Zeros});
      } else {
        out.push_back({"Wc", h, h, InitKind::Weight});
        out.push_back({"bc", 1, h, InitKind::Zeros});
        out.push_back({"step", d.max_steps + 1, h, InitKind::SmallNormal});
      }
      break;
    case Subnet::Cm:
      for (int l = 0; l < d.layers; ++l) {
        const std::string p = "l" + std::to_string(l) + "/";
        proj4(p, "W");
        ln(p + "ln1");
        proj4(p, "S");
        ln(p + "ln2");
        ffn(p);
        ln(p + "ln3");
        proj4(p, "C");
        ln(p + "lnx");
      }
      break;
    case Subnet::Action:
      if (head == HeadStyle::FcHead) {
        out.push_back({"W1", h, h, InitKind::Weight});
        out.push_back({"b1", 1, h, InitKind::Zeros});
        out.push_back({"w2", h, 1, InitKind::Weight});
        out.push_back({"b2", 1, 1, InitKind::Zeros});
      } else {
        out.push_back({"Wq", h, h, InitKind::Weight});
        out.push_back({"Wk", h, h, InitKind::Weight});
      }
      break;
  }
  return out;
}

Mat init_tensor(const TensorSpec& t, std::uint64_t seed, const std::string& path) {
  Rng rng = make_rng(seed, path);
  Mat m(t.rows, t.cols);
  double stddev = 0.0;
  switch (t.kind) {
    case InitKind::Ones:
      return Mat::Ones(t.rows, t.cols);
    case InitKind::Zeros:
      return Mat::Zero(t.rows, t.cols);
    case InitKind::Weight:
      stddev = 1.0 / std::sqrt(static_cast<double>(t.rows));
      break;
    case InitKind::Normal:
      stddev = 1.0;
      break;
    case InitKind::SmallNormal:
      stddev = 0.1;
      break;
  }
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = normal(rng, 0.0, stddev);
  return m;
}

void check_finite(const ad::Var& v, const char* where, int layer) {
  if (!v.value().allFinite())
    throw NumericError(std::string("non-finite activation in ") + where + " (layer " + std::to_string(layer) + ")");
}

}  // namespace

std::string_view subnet_name(Subnet s) {
  switch (s) {
    case Subnet::Text: return "f_text";
    case Subnet::Img: return "f_img";
    case Subnet::Hist: return "f_hist";
    case Subnet::Cm: return "f_cm";
    case Subnet::Action: return "f_action";
  }
  return "?";
}

Subnet subnet_from_name(std::string_view name) {
  for (int s = 0; s < kNumSubnets; ++s) {
    const auto sub = static_cast<Subnet>(s);
    const auto full = subnet_name(sub);
    if (name == full || name == full.substr(2)) return sub;
  }
  throw LookupError("unknown sub-network '" + std::string(name) + "'");
}

std::string_view to_string(HeadStyle h) { return h == HeadStyle::FcHead ? "fc_head" : "attn_head"; }
std::string_view to_string(HistoryStyle h) { return h == HistoryStyle::Sequence ? "sequence" : "state_vector"; }

HeadStyle head_style_from_string(std::string_view s) {
  if (s == "fc_head" || s == "FC_HEAD") return HeadStyle::FcHead;
  if (s == "attn_head" || s == "ATTN_HEAD") return HeadStyle::AttnHead;
  throw ConfigError("unknown head style '" + std::string(s) + "'");
}

HistoryStyle history_style_from_string(std::string_view s) {
  if (s == "sequence") return HistoryStyle::Sequence;
  if (s == "state_vector") return HistoryStyle::StateVector;
  throw ConfigError("unknown history style '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------

int SubnetParams::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < tensors.size(); ++i)
    if (tensors[i].name == name) return static_cast<int>(i);
  return -1;
}

const Mat& SubnetParams::get(std::string_view name) const {
  const int i = index_of(name);
  if (i < 0) throw LookupError("no tensor named '" + std::string(name) + "'");
  return tensors[static_cast<std::size_t>(i)].value;
}

Mat& SubnetParams::get(std::string_view name) {
  return const_cast<Mat&>(static_cast<const SubnetParams*>(this)->get(name));
}

std::uint64_t SubnetParams::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : tensors) {
    h = fnv1a64(t.name, h);
    const auto rows = static_cast<std::int64_t>(t.value.rows());
    const auto cols = static_cast<std::int64_t>(t.value.cols());
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&rows), sizeof rows), h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&cols), sizeof cols), h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(t.value.data()),
                                 static_cast<std::size_t>(t.value.size()) * sizeof(double)),
                h);
  }
  return h;
}

bool SubnetParams::same_shapes(const SubnetParams& other) const {
  if (tensors.size() != other.tensors.size()) return false;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].name != other.tensors[i].name) return false;
    if (tensors[i].value.rows() != other.tensors[i].value.rows()) return false;
    if (tensors[i].value.cols() != other.tensors[i].value.cols()) return false;
  }
  return true;
}

Routing Routing::all(Variant v) {
  Routing r;
  r.variant.fill(v);
  return r;
}

SubnetParams AgentParams::init_subnet(const AgentDims& dims, HeadStyle head, HistoryStyle history, Subnet s,
                                      std::uint64_t seed) {
  SubnetParams p;
  for (const auto& spec : layout(dims, head, history, s))
    p.tensors.push_back({spec.name, init_tensor(spec, seed, std::string(subnet_name(s)) + "/" + spec.name)});
  return p;
}

AgentParams AgentParams::init(const AgentDims& dims, HeadStyle head, HistoryStyle history, std::uint64_t seed) {
  if (dims.d_h < 1 || dims.layers < 1 || dims.heads < 1 || dims.d_h % dims.heads != 0)
    throw ConfigError("agent dims: d_h must be a positive multiple of heads and layers >= 1");
  if (dims.vocab < 2 || dims.max_len < 1 || dims.max_steps < 1 || dims.max_candidates < 1)
    throw ConfigError("agent dims: vocab, max_len, max_steps and max_candidates must be positive");
  AgentParams p;
  p.dims = dims;
  p.head = head;
  p.history = history;
  p.embedding.tensors.push_back({"E", init_tensor({"E", dims.vocab, dims.d_h, InitKind::Normal}, seed, "emb/E")});
  for (int s = 0; s < kNumSubnets; ++s)
    p.slots[static_cast<std::size_t>(s)][0] = init_subnet(dims, head, history, static_cast<Subnet>(s), seed);
  return p;
}

const std::optional<SubnetParams>& AgentParams::slot(Subnet s, Variant v) const {
  return slots[static_cast<std::size_t>(s)][static_cast<std::size_t>(v)];
}

std::optional<SubnetParams>& AgentParams::slot(Subnet s, Variant v) {
  return slots[static_cast<std::size_t>(s)][static_cast<std::size_t>(v)];
}

Variant AgentParams::resolve(Subnet s, const Routing& r) const {
  return (r[s] == Variant::High && has_high(s)) ? Variant::High : Variant::Low;
}

AgentParams AgentParams::zeros_like() const {
  AgentParams z = *this;
  z.for_each([](const std::string&, Mat& m) { m.setZero(); });
  return z;
}

std::size_t AgentParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

bool AgentParams::all_finite() const {
  bool ok = true;
  for_each([&](const std::string&, const Mat& m) { ok = ok && m.allFinite(); });
  return ok;
}

void AgentParams::check_consistent() const {
  if (embedding.index_of("E") < 0 || embedding.get("E").rows() != dims.vocab || embedding.get("E").cols() != dims.d_h)
    throw ShapeError("embedding table shape does not match dims");
  for (int s = 0; s < kNumSubnets; ++s) {
    const auto sub = static_cast<Subnet>(s);
    const SubnetParams ref = init_subnet(dims, head, history, sub, 0);
    for (int v = 0; v < 2; ++v) {
      const auto& slot = slots[static_cast<std::size_t>(s)][static_cast<std::size_t>(v)];
      if (!slot) {
        if (v == 0) throw ShapeError(std::string(subnet_name(sub)) + ": missing low variant");
        continue;
      }
      if (!slot->same_shapes(ref))
        throw ShapeError(std::string(subnet_name(sub)) + (v == 0 ? "/low" : "/high") + ": tensor shapes inconsistent");
    }
  }
  if (!all_finite()) throw NumericError("agent parameters contain non-finite values");
}

TrainMask TrainMask::all_low() {
  TrainMask m;
  m.embedding = true;
  for (auto& s : m.slots) s[0] = true;
  return m;
}

TrainMask TrainMask::only(Subnet s, Variant v) {
  TrainMask m;
  m.slots[static_cast<std::size_t>(s)][static_cast<std::size_t>(v)] = true;
  return m;
}

// ---------------------------------------------------------------------------

Binder::Binder(ad::Tape& tape, const AgentParams& params, Routing routing, AgentParams* grads, TrainMask mask)
    : tape_(tape), params_(params), routing_(routing), grads_(grads), mask_(mask) {}

ad::Var Binder::get(Subnet s, std::string_view name) {
  const Variant v = params_.resolve(s, routing_);
  std::string key = std::to_string(static_cast<int>(s)) + (v == Variant::Low ? "/l/" : "/h/");
  key += name;
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  const auto si = static_cast<std::size_t>(s);
  const auto vi = static_cast<std::size_t>(v);
  params_.reads[si][vi].bump();
  const Mat& value = params_.slot(s, v)->get(name);
  Mat* sink = nullptr;
  if (grads_ != nullptr && mask_.slots[si][vi]) sink = &grads_->slot(s, v)->get(name);
  const ad::Var var = tape_.leaf(value, sink);
  cache_.emplace(std::move(key), var);
  return var;
}

ad::Var Binder::embedding() {
  if (!embedding_) {
    Mat* sink = (grads_ != nullptr && mask_.embedding) ? &grads_->embedding.get("E") : nullptr;
    embedding_ = tape_.leaf(params_.embedding.get("E"), sink);
  }
  return *embedding_;
}

// ---------------------------------------------------------------------------

TextEncoding encode_text(Binder& b, const std::vector<int>& tokens) {
  const AgentDims& d = b.params().dims;
  std::vector<int> toks;
  for (int t : tokens) {
    if (t < 0 || t >= d.vocab) throw ValidationError("token index " + std::to_string(t) + " outside vocabulary");
    if (t != 0) toks.push_back(t);
  }
  if (toks.empty()) throw ValidationError("encode_text: empty instruction");
  TextEncoding enc;
  if (static_cast<int>(toks.size()) > d.max_len) {
    toks.resize(static_cast<std::size_t>(d.max_len));
    enc.truncated = true;
  }
  const auto n = static_cast<Eigen::Index>(toks.size());
  const auto sub = Subnet::Text;
  const ad::Var words = ad::gather_rows(b.embedding(), toks);
  const std::array<ad::Var, 2> parts = {b.get(sub, "sentinel"), words};
  ad::Var x = ad::add(ad::vstack(parts), ad::slice_rows(b.get(sub, "pos"), 0, n + 1));
  const double sc = 1.0 / std::sqrt(static_cast<double>(d.d_h));
  const ad::Var a = ad::attention(ad::matmul(x, b.get(sub, "Wq")), ad::matmul(x, b.get(sub, "Wk")),
                                  ad::matmul(x, b.get(sub, "Wv")), d.heads, sc);
  x = ad::layer_norm_rows(ad::add(x, ad::matmul(a, b.get(sub, "Wo"))), b.get(sub, "ln1_g"), b.get(sub, "ln1_b"));
  const ad::Var f = ad::add_row(
      ad::matmul(ad::relu(ad::add_row(ad::matmul(x, b.get(sub, "F1")), b.get(sub, "b1"))), b.get(sub, "F2")),
      b.get(sub, "b2"));
  enc.X = ad::layer_norm_rows(ad::add(x, f), b.get(sub, "ln2_g"), b.get(sub, "ln2_b"));
  check_finite(enc.X, "text encoder", 0);
  return enc;
}

ad::Var encode_observation(Binder& b, const nav::Observation& obs) {
  const AgentDims& d = b.params().dims;
  if (obs.candidates.empty()) throw ValidationError("encode_observation: observation has no candidates");
  Mat in(static_cast<Eigen::Index>(obs.size()), d.d_v + d.d_a);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const auto& c = obs.candidates[i];
    if (c.visual.size() != d.d_v || c.angle.size() != d.d_a)
      throw ShapeError("candidate " + std::to_string(i) + ": feature dims (" + std::to_string(c.visual.size()) + ", " +
                       std::to_string(c.angle.size()) + ") expected (" + std::to_string(d.d_v) + ", " +
                       std::to_string(d.d_a) + ")");
    in.row(static_cast<Eigen::Index>(i)) << c.visual.transpose(), c.angle.transpose();
  }
  const auto sub = Subnet::Img;
  const ad::Var x = b.tape().constant(std::move(in));
  const ad::Var h = ad::relu(ad::add_row(ad::matmul(x, b.get(sub, "W1")), b.get(sub, "b1")));
  const ad::Var o = ad::add_row(ad::matmul(h, b.get(sub, "W2")), b.get(sub, "b2"));
  return ad::layer_norm_rows(o, b.get(sub, "ln_g"), b.get(sub, "ln_b"));
}

AgentState initial_state(Binder& b, nav::Cursor cursor) {
  AgentState s;
  s.t = 1;
  s.history = {b.get(Subnet::Hist, "init")};
  s.cursor = cursor;
  return s;
}

AgentState encode_history(Binder& b, const AgentState& state, ad::Var chosen, nav::Cursor next) {
  if (state.history.empty()) throw InvariantError("encode_history: state has no history");
  if (chosen.rows() != 1) throw ShapeError("encode_history: chosen embedding must be a single row");
  const auto sub = Subnet::Hist;
  AgentState out = state;
  out.t = state.t + 1;
  out.cursor = next;
  if (b.params().history == HistoryStyle::StateVector) {
    const ad::Var h = state.history.back();
    const std::array<ad::Var, 2> zparts = {chosen, h};
    const ad::Var z = ad::hstack(zparts);
    const ad::Var gate = ad::tanh(ad::add_row(ad::matmul(z, b.get(sub, "Wg")), b.get(sub, "bg")));
    const ad::Var cand = ad::tanh(ad::add_row(ad::matmul(z, b.get(sub, "Wc")), b.get(sub, "bc")));
    out.history = {ad::add(h, ad::mul(gate, cand))};
  } else {
    const int row = std::min(state.t, b.params().dims.max_steps);
    const ad::Var entry = ad::add(ad::tanh(ad::add_row(ad::matmul(chosen, b.get(sub, "Wc")), b.get(sub, "bc"))),
                                  ad::slice_rows(b.get(sub, "step"), row, 1));
    out.history.push_back(entry);
  }
  return out;
}

ForwardTrace forward_step(Binder& b, const AgentState& state, const TextEncoding& text, ad::Var obs,
                          bool use_frozen_history) {
  const AgentParams& p = b.params();
  const AgentDims& d = p.dims;
  if (use_frozen_history && !state.frozen_history)
    throw InvariantError("forward_step: frozen history requested but none stored");
  const std::vector<ad::Var>& hist = use_frozen_history ? *state.frozen_history : state.history;
  if (hist.empty()) throw InvariantError("forward_step: empty history");
  if (obs.cols() != d.d_h || text.X.cols() != d.d_h) throw ShapeError("forward_step: encodings must be d_h wide");

  ForwardTrace tr;
  tr.truncated = text.truncated;
  const ad::Var H = ad::vstack(hist);
  tr.history_input = H.value();
  const Eigen::Index nh = H.rows();
  const Eigen::Index no = obs.rows();
  const std::array<ad::Var, 2> zparts = {H, obs};
  ad::Var z = ad::vstack(zparts);
  ad::Var x = ad::slice_rows(text.X, 0, 1);
  const ad::Var X = text.X;
  const double sc = 1.0 / std::sqrt(static_cast<double>(d.d_h));
  const auto sub = Subnet::Cm;
  tr.alpha.resize(static_cast<std::size_t>(d.layers));
  for (int l = 0; l < d.layers; ++l) {
    const std::string pre = "l" + std::to_string(l) + "/";
    auto w = [&](const char* n) { return b.get(sub, pre + n); };
    // Cross attention of history+candidate queries over the instruction.
    ad::Var a = ad::attention(ad::matmul(z, w("Wq")), ad::matmul(X, w("Wk")), ad::matmul(X, w("Wv")), d.heads, sc,
                              &tr.alpha[static_cast<std::size_t>(l)]);
    z = ad::layer_norm_rows(ad::add(z, ad::matmul(a, w("Wo"))), w("ln1_g"), w("ln1_b"));
    // Self mix across history and candidates.
    a = ad::attention(ad::matmul(z, w("Sq")), ad::matmul(z, w("Sk")), ad::matmul(z, w("Sv")), d.heads, sc);
    z = ad::layer_norm_rows(ad::add(z, ad::matmul(a, w("So"))), w("ln2_g"), w("ln2_b"));
    const ad::Var f =
        ad::add_row(ad::matmul(ad::relu(ad::add_row(ad::matmul(z, w("F1")), w("b1"))), w("F2")), w("b2"));
    z = ad::layer_norm_rows(ad::add(z, f), w("ln3_g"), w("ln3_b"));
    check_finite(z, "cross-modal layer", l);
    // Language anchor reads the fused scene.
    a = ad::attention(ad::matmul(x, w("Cq")), ad::matmul(z, w("Ck")), ad::matmul(z, w("Cv")), d.heads, sc);
    x = ad::layer_norm_rows(ad::add(x, ad::matmul(a, w("Co"))), w("lnx_g"), w("lnx_b"));
    check_finite(x, "cross-modal layer", l);
  }
  const ad::Var HL = ad::slice_rows(z, 0, nh);
  const ad::Var OL = ad::slice_rows(z, nh, no);
  tr.sentinel = x;
  tr.fused_obs = OL;
  const auto act = Subnet::Action;
  if (p.head == HeadStyle::FcHead) {
    const ad::Var r = ad::mul_row(OL, x);
    const ad::Var h1 = ad::relu(ad::add_row(ad::matmul(r, b.get(act, "W1")), b.get(act, "b1")));
    tr.beta_var = ad::transpose(ad::add_row(ad::matmul(h1, b.get(act, "w2")), b.get(act, "b2")));
  } else {
    const ad::Var q = ad::matmul(ad::slice_rows(HL, nh - 1, 1), b.get(act, "Wq"));
    const ad::Var k = ad::matmul(OL, b.get(act, "Wk"));
    tr.beta_var = ad::scale(ad::matmul_t(q, k), sc);
  }
  check_finite(tr.beta_var, "action head", d.layers);
  tr.beta = tr.beta_var.value().row(0);
  return tr;
}

int select_action(const Eigen::RowVectorXd& beta) {
  if (beta.size() == 0) throw ValidationError("select_action: empty logits");
  int best = 0;
  for (Eigen::Index i = 0; i < beta.size(); ++i) {
    if (std::isnan(beta[i])) throw NumericError("select_action: NaN logit at index " + std::to_string(i));
    if (beta[i] > beta[best]) best = static_cast<int>(i);
  }
  return best;
}

// ---------------------------------------------------------------------------

Session::Session(const AgentParams& params, Routing routing, AgentParams* grads, TrainMask mask)
    : binder_(tape_, params, routing, grads, mask) {}

void Session::begin(const std::vector<int>& tokens, nav::Cursor start) {
  text_ = encode_text(binder_, tokens);
  start_ = initial_state(binder_, start);
}

Session::Step Session::forward(const nav::Observation& obs, const AgentState& state, bool use_frozen) {
  Step s;
  s.obs_embedding = encode_observation(binder_, obs);
  s.trace = forward_step(binder_, state, text_, s.obs_embedding, use_frozen);
  return s;
}

AgentState Session::advance(const AgentState& state, const Step& step, int action, nav::Cursor next) {
  if (action < 0 || action >= step.obs_embedding.rows()) throw ValidationError("advance: action out of range");
  return encode_history(binder_, state, ad::slice_rows(step.obs_embedding, action, 1), next);
}

}  // namespace uln::agent
