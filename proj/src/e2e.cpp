#include "uln/e2e.hpp"

#include "uln/checkpoint.hpp"
#include "uln/errors.hpp"
#include "uln/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace uln::e2e {

using agent::AgentState;
using agent::Session;

void ExplorationConfig::validate() const {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("exploration.threshold must lie in [0, 1]");
  if (depth < 1) throw ConfigError("exploration.depth (K) must be >= 1");
  if (top_c < 1) throw ConfigError("exploration.top_c (C) must be >= 1");
  if (budget < 0) throw ConfigError("exploration.budget must be >= 0");
  if (!std::isfinite(gamma)) throw ConfigError("exploration.gamma must be finite");
}

nlohmann::json to_json(const ExplorationConfig& c) {
  return {{"threshold", c.threshold}, {"depth", c.depth},   {"gamma", c.gamma},
          {"top_c", c.top_c},         {"budget", c.budget}, {"freeze", c.freeze}};
}

ExplorationConfig exploration_from_json(const nlohmann::json& j) {
  ExplorationConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "threshold") c.threshold = v.get<double>();
    else if (k == "depth") c.depth = v.get<int>();
    else if (k == "gamma") c.gamma = v.get<double>();
    else if (k == "top_c") c.top_c = v.get<int>();
    else if (k == "budget") c.budget = v.get<int>();
    else if (k == "freeze") c.freeze = v.get<bool>();
    else throw ConfigError("exploration: unknown key '" + k + "'");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

UncertaintyShape UncertaintyShape::for_agent(const agent::AgentParams& p) {
  UncertaintyShape s;
  s.heads = p.dims.heads;
  const int hist_rows = p.history == agent::HistoryStyle::StateVector ? 1 : p.dims.max_steps + 1;
  s.query_slots = hist_rows + p.dims.max_candidates;
  s.text_len = p.dims.max_len + 1;
  s.n_max = p.dims.max_candidates;
  return s;
}

UncertaintyNet UncertaintyNet::init(const UncertaintyShape& shape, int hidden, std::uint64_t seed) {
  if (hidden < 1) throw ConfigError("uncertainty net: hidden width must be >= 1");
  UncertaintyNet n;
  n.shape = shape;
  const int in = shape.input_dim();
  Rng rng = make_rng(seed, "uncertainty-net");
  n.W1.resize(in, hidden);
  for (Eigen::Index i = 0; i < n.W1.size(); ++i) n.W1.data()[i] = normal(rng, 0.0, 1.0 / std::sqrt(double(in)));
  n.b1 = Mat::Zero(1, hidden);
  n.W2.resize(hidden, 1);
  for (Eigen::Index i = 0; i < n.W2.size(); ++i) n.W2.data()[i] = normal(rng, 0.0, 1.0 / std::sqrt(double(hidden)));
  n.b2 = Mat::Zero(1, 1);
  return n;
}

std::uint64_t UncertaintyNet::checksum() const { return hash_mat(b2, hash_mat(W2, hash_mat(b1, hash_mat(W1)))); }

nlohmann::json UncertaintyNet::to_json() const {
  return {{"version", "uln-uncert/1"},
          {"shape", {{"heads", shape.heads}, {"query_slots", shape.query_slots}, {"text_len", shape.text_len},
                     {"n_max", shape.n_max}}},
          {"W1", mat_to_json(W1)},
          {"b1", mat_to_json(b1)},
          {"W2", mat_to_json(W2)},
          {"b2", mat_to_json(b2)},
          {"checksum", checksum()}};
}

UncertaintyNet UncertaintyNet::from_json(const nlohmann::json& j) {
  if (j.value("version", "") != "uln-uncert/1") throw LoadError("uncertainty net: unsupported version");
  UncertaintyNet n;
  const auto& s = j.at("shape");
  n.shape = {s.at("heads"), s.at("query_slots"), s.at("text_len"), s.at("n_max")};
  n.W1 = mat_from_json(j.at("W1"));
  n.b1 = mat_from_json(j.at("b1"));
  n.W2 = mat_from_json(j.at("W2"));
  n.b2 = mat_from_json(j.at("b2"));
  if (n.W1.rows() != n.shape.input_dim() || n.b1.cols() != n.W1.cols() || n.W2.rows() != n.W1.cols() ||
      n.W2.cols() != 1 || n.b2.size() != 1)
    throw LoadError("uncertainty net: inconsistent shapes");
  if (j.contains("checksum") && j.at("checksum").get<std::uint64_t>() != n.checksum())
    throw LoadError("uncertainty net: checksum mismatch");
  return n;
}

Eigen::RowVectorXd uncertainty_features(const UncertaintyShape& shape, const agent::ForwardTrace& trace) {
  if (trace.alpha.empty()) throw ShapeError("uncertainty: trace carries no attention");
  const auto& heads = trace.alpha.back();
  if (static_cast<int>(heads.size()) != shape.heads)
    throw ShapeError("uncertainty: trace has " + std::to_string(heads.size()) + " heads, net expects " +
                     std::to_string(shape.heads));
  const auto nb = static_cast<int>(trace.beta.size());
  if (nb > shape.n_max) throw ShapeError("uncertainty: more candidates than the configured maximum");
  Eigen::RowVectorXd f = Eigen::RowVectorXd::Zero(shape.input_dim());
  int text_len = 0;
  for (int h = 0; h < shape.heads; ++h) {
    const Mat& a = heads[static_cast<std::size_t>(h)];
    if (a.rows() > shape.query_slots || a.cols() > shape.text_len)
      throw ShapeError("uncertainty: attention map exceeds the configured maxima");
    text_len = static_cast<int>(a.cols());
    const int base = h * shape.query_slots * shape.text_len;
    for (Eigen::Index r = 0; r < a.rows(); ++r)
      for (Eigen::Index c = 0; c < a.cols(); ++c) f[base + r * shape.text_len + c] = a(r, c);
  }
  const int off = shape.heads * shape.query_slots * shape.text_len;
  for (int i = 0; i < nb; ++i) f[off + i] = trace.beta[i];
  f[off + shape.n_max] = static_cast<double>(text_len) / shape.text_len;
  f[off + shape.n_max + 1] = static_cast<double>(nb) / shape.n_max;
  return f;
}

ad::Var uncertainty_logit(ad::Tape& tape, const UncertaintyNet& net, const Mat& features, UncertaintyNet* grads) {
  if (features.cols() != net.W1.rows()) throw ShapeError("uncertainty: feature width does not match the net");
  const ad::Var x = tape.constant(features);
  const ad::Var W1 = tape.leaf(net.W1, grads ? &grads->W1 : nullptr);
  const ad::Var b1 = tape.leaf(net.b1, grads ? &grads->b1 : nullptr);
  const ad::Var W2 = tape.leaf(net.W2, grads ? &grads->W2 : nullptr);
  const ad::Var b2 = tape.leaf(net.b2, grads ? &grads->b2 : nullptr);
  const ad::Var h = ad::tanh(ad::add_row(ad::matmul(x, W1), b1));
  return ad::add_row(ad::matmul(h, W2), b2);
}

double uncertainty_score(const UncertaintyNet& net, const Eigen::RowVectorXd& features) {
  if (features.size() != net.W1.rows()) throw ShapeError("uncertainty: feature width does not match the net");
  const Eigen::RowVectorXd h = ((features * net.W1) + net.b1).array().tanh().matrix();
  const double z = (h * net.W2)(0, 0) + net.b2(0, 0);
  return 1.0 / (1.0 + std::exp(-z));
}

double uncertainty_score(const UncertaintyNet& net, const agent::ForwardTrace& trace) {
  return uncertainty_score(net, uncertainty_features(net.shape, trace));
}

double LabelSet::positive_fraction() const {
  if (samples.empty()) return 0.0;
  std::size_t pos = 0;
  for (const auto& s : samples) pos += s.label;
  return static_cast<double>(pos) / static_cast<double>(samples.size());
}

LabelSet generate_uncertainty_labels(const agent::AgentParams& params, const std::vector<agent::Episode>& episodes,
                                     const text::Vocabulary& vocab, double drop_rate, std::uint64_t seed,
                                     const agent::Classifier* clf) {
  LabelSet out;
  const UncertaintyShape shape = UncertaintyShape::for_agent(params);
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto& ep = episodes[e];
    try {
      text::Instruction instr;
      instr.tokens = ep.tokens;
      instr.text = text::detokenize(ep.tokens, vocab);
      instr.level = ep.level;
      instr.path_id = ep.path_id;
      const text::Instruction degraded =
          drop_rate > 0.0 ? text::drop_subinstructions(instr, vocab, drop_rate, derive_seed(seed, "label-drop", e))
                          : instr;
      const agent::Routing routing = clf ? agent::routing_for(agent::classify_instruction(*clf, degraded.tokens).granularity)
                                         : agent::Routing::all(agent::Variant::Low);
      Session s(params, routing);
      s.begin(degraded.tokens, {ep.start, ep.heading});
      AgentState state = s.start_state();
      std::vector<UncertaintySample> local;
      for (int t = 0; t < params.dims.max_steps; ++t) {
        const nav::Observation obs = nav::observe(*ep.graph, state.cursor.viewpoint, state.cursor.heading);
        const int teacher = nav::teacher_action(*ep.graph, obs, state.cursor.viewpoint, ep.goal);
        auto step = s.forward(obs, state, false);
        local.push_back({uncertainty_features(shape, step.trace), agent::select_action(step.trace.beta) != teacher});
        if (teacher == nav::kStop) break;
        const nav::Cursor next = nav::step(*ep.graph, state.cursor, obs, teacher);
        state = s.advance(state, step, teacher, next);
      }
      for (auto& l : local) out.samples.push_back(std::move(l));
    } catch (const uln::Error&) {
      ++out.skipped;
    }
  }
  return out;
}

UncertaintyTrainResult train_uncertainty(UncertaintyNet& net, const std::vector<UncertaintySample>& samples,
                                         const UncertaintyHparams& hp) {
  if (samples.empty()) throw ValidationError("train_uncertainty: no samples");
  UncertaintyTrainResult res;
  std::size_t pos = 0;
  for (const auto& s : samples) pos += s.label;
  const std::size_t neg = samples.size() - pos;
  res.single_class = pos == 0 || neg == 0;
  const double pos_w = (hp.balance && !res.single_class) ? static_cast<double>(neg) / static_cast<double>(pos) : 1.0;
  agent::AdamW opt({hp.lr, 0.9, 0.999, 1e-8, hp.weight_decay});
  UncertaintyNet g = net;
  Rng rng = make_rng(hp.seed, "uncertainty-order");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int e = 0; e < hp.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hp.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hp.batch_size));
      g.W1.setZero();
      g.b1.setZero();
      g.W2.setZero();
      g.b2.setZero();
      const auto bn = static_cast<Eigen::Index>(end - start);
      Mat x(bn, net.W1.rows());
      Eigen::VectorXd y(bn), w(bn);
      for (Eigen::Index i = 0; i < bn; ++i) {
        const auto& smp = samples[order[start + static_cast<std::size_t>(i)]];
        x.row(i) = smp.features;
        y[i] = smp.label;
        w[i] = smp.label ? pos_w : 1.0;
      }
      w /= w.sum();
      ad::Tape tape;
      const ad::Var l = ad::weighted_bce_with_logits(uncertainty_logit(tape, net, x, &g), y, w);
      const double loss = l.value()(0, 0);
      tape.backward(l);
      opt.step({&net.W1, &net.b1, &net.W2, &net.b2}, {&g.W1, &g.b1, &g.W2, &g.b2});
      res.loss_curve.push_back(loss);
    }
  }
  return res;
}

double auc(const UncertaintyNet& net, const std::vector<UncertaintySample>& samples) {
  std::vector<std::pair<double, int>> scored;
  for (const auto& s : samples) scored.push_back({uncertainty_score(net, s.features), s.label});
  std::sort(scored.begin(), scored.end());
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < scored.size();) {
    std::size_t j = i;
    while (j < scored.size() && scored[j].first == scored[i].first) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (scored[k].second) {
        rank_sum += avg_rank;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = scored.size() - pos;
  if (pos == 0 || neg == 0) return 0.5;
  return (rank_sum - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1)) /
         (static_cast<double>(pos) * static_cast<double>(neg));
}

// ---------------------------------------------------------------------------

int lookahead_choice(const Eigen::RowVectorXd& beta, const std::vector<std::pair<int, std::vector<double>>>& futures,
                     double gamma, std::vector<double>* scores) {
  Eigen::RowVectorXd s = beta;
  for (const auto& [c, fm] : futures) {
    if (c < 0 || c >= beta.size()) throw ValidationError("lookahead: explored candidate out of range");
    double g = 1.0;
    for (double m : fm) {
      g *= gamma;
      s[c] += g * m;
    }
  }
  if (scores != nullptr) scores->assign(s.data(), s.data() + s.size());
  return agent::select_action(s);
}

LookaheadResult lookahead(Explorer& ex, const AgentState& state, const Session::Step& step,
                          const nav::Observation& obs, const ExplorationConfig& cfg) {
  const Eigen::RowVectorXd& beta = step.trace.beta;
  if (obs.size() < 2 || beta.size() != static_cast<Eigen::Index>(obs.size()))
    throw InvariantError("lookahead: needs at least one movable candidate");
  const AgentState snapshot = state;
  const std::vector<Mat> snapshot_hist = [&] {
    std::vector<Mat> v;
    for (const auto& h : state.history) v.push_back(h.value());
    return v;
  }();

  // Top-C movable candidates by logit, lowest index first on ties.
  std::vector<int> order;
  for (int i = 1; i < static_cast<int>(obs.size()); ++i) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return beta[a] > beta[b]; });
  if (static_cast<int>(order.size()) > cfg.top_c) order.resize(static_cast<std::size_t>(cfg.top_c));

  LookaheadResult res;
  std::vector<std::pair<int, std::vector<double>>> futures;
  for (int c : order) {
    Branch br;
    br.candidate = c;
    AgentState st = snapshot;
    if (cfg.freeze) st.frozen_history = snapshot.history;
    nav::Observation cur_obs = obs;
    Session::Step cur_step = step;
    int action = c;
    for (int i = 1; i <= cfg.depth; ++i) {
      const nav::Cursor next = nav::step(ex.graph, st.cursor, cur_obs, action);
      br.path.push_back(next.viewpoint);
      st = ex.session.advance(st, cur_step, action, next);
      cur_obs = nav::observe(ex.graph, next.viewpoint, next.heading);
      cur_step = ex.session.forward(cur_obs, st, cfg.freeze);
      res.history_used.push_back(cur_step.trace.history_input);
      br.future_max.push_back(cur_step.trace.beta.maxCoeff());
      action = agent::select_action(cur_step.trace.beta);
      if (action == nav::kStop) break;
    }
    // Walk out and back along the same edges.
    for (int v : br.path) res.detour.push_back(v);
    for (int k = static_cast<int>(br.path.size()) - 2; k >= 0; --k) res.detour.push_back(br.path[static_cast<std::size_t>(k)]);
    res.detour.push_back(snapshot.cursor.viewpoint);
    res.steps_walked += 2 * static_cast<int>(br.path.size());
    futures.push_back({c, br.future_max});
    res.branches.push_back(std::move(br));
  }
  res.chosen = lookahead_choice(beta, futures, cfg.gamma, &res.scores);
  for (auto& br : res.branches) br.score = res.scores[static_cast<std::size_t>(br.candidate)];

  // The caller's state is passed by const reference and never touched; a
  // history mismatch here would mean a shared node was overwritten.
  for (std::size_t i = 0; i < snapshot_hist.size(); ++i)
    if (!(state.history[i].value().array() == snapshot_hist[i].array()).all())
      throw InvariantError("lookahead: agent state changed during exploration");
  return res;
}

// ---------------------------------------------------------------------------

agent::Routing choose_routing(const Policy& policy, const agent::Episode& ep) {
  switch (policy.routing) {
    case RoutingMode::FixedLow:
      return agent::Routing::all(agent::Variant::Low);
    case RoutingMode::LevelOracle:
      return agent::Routing::all(ep.level == text::Level::L3 ? agent::Variant::High : agent::Variant::Low);
    case RoutingMode::Classifier:
      if (policy.classifier == nullptr) throw DependencyError("classifier routing requested without a classifier");
      return agent::routing_for(agent::classify_instruction(*policy.classifier, ep.tokens).granularity);
  }
  return agent::Routing::all(agent::Variant::Low);
}

EpisodeRun run_episode_e2e(const Policy& policy, const agent::Episode& ep) {
  if (policy.agent == nullptr || ep.graph == nullptr) throw DependencyError("run_episode_e2e: agent or graph missing");
  policy.cfg.validate();
  const auto& params = *policy.agent;
  EpisodeRun run;
  run.routing = choose_routing(policy, ep);
  Session s(params, run.routing);
  s.begin(ep.tokens, {ep.start, ep.heading});
  Explorer ex{s, *ep.graph};
  AgentState state = s.start_state();
  run.trajectory.start = ep.start;
  run.trajectory.goal = ep.goal;
  run.trajectory.steps.push_back({ep.start, false});
  int budget = policy.cfg.budget;
  bool stopped = false;
  for (int t = 0; t < params.dims.max_steps; ++t) {
    const nav::Observation obs = nav::observe(*ep.graph, state.cursor.viewpoint, state.cursor.heading);
    auto step = s.forward(obs, state, false);
    StepRecord rec;
    rec.step = t + 1;
    if (policy.record_trace) {
      for (const auto& c : obs.candidates) rec.candidates.push_back(c.target);
      rec.beta.assign(step.trace.beta.data(), step.trace.beta.data() + step.trace.beta.size());
    }
    int action = 0;
    if (policy.net != nullptr) rec.uncertainty = uncertainty_score(*policy.net, step.trace);
    if (policy.net != nullptr && rec.uncertainty > policy.cfg.threshold && budget > 0 && obs.size() >= 2) {
      --budget;
      ++run.explorations;
      const LookaheadResult la = lookahead(ex, state, step, obs, policy.cfg);
      for (int v : la.detour) run.trajectory.steps.push_back({v, true});
      action = la.chosen;
      rec.explored = true;
      if (policy.record_trace) rec.scores = la.scores;
    } else {
      action = agent::select_action(step.trace.beta);
    }
    rec.action = action;
    run.records.push_back(std::move(rec));
    if (action == nav::kStop) {
      stopped = true;
      break;
    }
    const nav::Cursor next = nav::step(*ep.graph, state.cursor, obs, action);
    run.trajectory.steps.push_back({next.viewpoint, false});
    state = s.advance(state, step, action, next);
  }
  run.trajectory.truncated = !stopped;
  return run;
}

nlohmann::json trace_lines(const EpisodeRun& run, const std::string& path_id) {
  nlohmann::json lines = nlohmann::json::array();
  for (const auto& r : run.records) {
    lines.push_back({{"version", "uln-trace/1"},
                     {"path_id", path_id},
                     {"step", r.step},
                     {"candidates", r.candidates},
                     {"beta", r.beta},
                     {"uncertainty", r.uncertainty},
                     {"explored", r.explored},
                     {"scores", r.scores},
                     {"action", r.action}});
  }
  return lines;
}

std::vector<std::vector<metrics::CorrectionStep>> correction_rollouts(const Policy& policy,
                                                                      const std::vector<agent::Episode>& episodes) {
  if (policy.agent == nullptr || policy.net == nullptr) throw DependencyError("correction profile needs agent and net");
  std::vector<std::vector<metrics::CorrectionStep>> out;
  for (const auto& ep : episodes) {
    Session s(*policy.agent, choose_routing(policy, ep));
    s.begin(ep.tokens, {ep.start, ep.heading});
    AgentState state = s.start_state();
    std::vector<metrics::CorrectionStep> steps;
    for (int t = 0; t < policy.agent->dims.max_steps; ++t) {
      const nav::Observation obs = nav::observe(*ep.graph, state.cursor.viewpoint, state.cursor.heading);
      const int teacher = nav::teacher_action(*ep.graph, obs, state.cursor.viewpoint, ep.goal);
      auto step = s.forward(obs, state, false);
      const double u = uncertainty_score(*policy.net, step.trace);
      steps.push_back({u > policy.cfg.threshold, agent::select_action(step.trace.beta) != teacher});
      if (teacher == nav::kStop) break;
      const nav::Cursor next = nav::step(*ep.graph, state.cursor, obs, teacher);
      state = s.advance(state, step, teacher, next);
    }
    out.push_back(std::move(steps));
  }
  return out;
}

}  // namespace uln::e2e
