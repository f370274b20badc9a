#include "fixtures.hpp"
#include "oracles.hpp"

#include "uln/e2e.hpp"
#include "uln/errors.hpp"

#include <doctest.h>

using namespace uln;
using namespace uln::agent;
using namespace uln::e2e;
using text::Level;

namespace {

AgentParams tiny_agent(const fixture::Tiny& t, std::uint64_t seed, HistoryStyle hist = HistoryStyle::StateVector) {
  return AgentParams::init(t.dims, HeadStyle::AttnHead, hist, seed);
}

// Net whose score is large on every input, so the gate always opens.
UncertaintyNet always_uncertain(const AgentParams& p) {
  UncertaintyNet n = UncertaintyNet::init(UncertaintyShape::for_agent(p), 4, 1);
  n.W2.setZero();
  n.b2(0, 0) = 10.0;
  return n;
}

struct Forward {
  Session session;
  AgentState state;
  nav::Observation obs;
  Session::Step step;
};

// Forward pass at the start of `ep`, after `moves` teacher steps.
std::unique_ptr<Forward> forward_at(const AgentParams& p, const Episode& ep, int moves) {
  auto f = std::unique_ptr<Forward>(new Forward{Session(p, Routing::all(Variant::Low)), {}, {}, {}});
  f->session.begin(ep.tokens, {ep.start, ep.heading});
  f->state = f->session.start_state();
  for (int k = 0;; ++k) {
    f->obs = nav::observe(*ep.graph, f->state.cursor.viewpoint, f->state.cursor.heading);
    f->step = f->session.forward(f->obs, f->state, false);
    if (k == moves) break;
    const int a = nav::teacher_action(*ep.graph, f->obs, f->state.cursor.viewpoint, ep.goal);
    if (a == nav::kStop) break;
    f->state = f->session.advance(f->state, f->step, a, nav::step(*ep.graph, f->state.cursor, f->obs, a));
  }
  return f;
}

std::vector<Mat> history_values(const AgentState& s) {
  std::vector<Mat> out;
  for (const auto& h : s.history) out.push_back(h.value());
  return out;
}

}  // namespace

TEST_CASE("exploration config: defaults, validation, json") {
  const ExplorationConfig c;
  CHECK(c.threshold == 0.5);
  CHECK(c.depth == 1);
  CHECK(c.gamma == 1.2);
  CHECK(c.top_c == 2);
  CHECK(c.budget == 3);
  CHECK(c.freeze);
  ExplorationConfig bad = c;
  bad.depth = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.threshold = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.budget = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  const auto back = exploration_from_json(to_json(c));
  CHECK(back.gamma == c.gamma);
  CHECK(back.top_c == c.top_c);
  CHECK_THROWS_AS(exploration_from_json({{"gama", 1.0}}), ConfigError);
}

TEST_CASE("lookahead_choice: worked example") {
  const Eigen::RowVector3d beta(0.1, 0.5, 0.4);
  std::vector<double> scores;
  const int c = lookahead_choice(beta, {{1, {0.1}}, {2, {0.3}}}, 1.2, &scores);
  CHECK(c == 2);
  REQUIRE(scores.size() == 3);
  CHECK(std::abs(scores[0] - 0.1) <= 1e-12);
  CHECK(std::abs(scores[1] - 0.62) <= 1e-12);
  CHECK(std::abs(scores[2] - 0.76) <= 1e-12);
  // K = 2 applies gamma^1 and gamma^2.
  lookahead_choice(beta, {{1, {0.1, 1.0}}}, 2.0, &scores);
  CHECK(std::abs(scores[1] - (0.5 + 2.0 * 0.1 + 4.0 * 1.0)) <= 1e-12);
  CHECK_THROWS_AS(lookahead_choice(beta, {{3, {0.1}}}, 1.2), ValidationError);
}

TEST_CASE("lookahead_choice: gamma 0 degenerates to greedy on 10000 random traces") {
  Rng rng = make_rng(1, "gamma0");
  int mismatches = 0;
  for (int k = 0; k < 10000; ++k) {
    const int n = static_cast<int>(uniform_int(rng, 1, 8));
    Eigen::RowVectorXd beta(n);
    for (int i = 0; i < n; ++i) beta[i] = normal(rng, 0.0, 5.0);
    if (k % 7 == 0 && n > 1) beta[n - 1] = beta[0];  // exercise ties
    std::vector<std::pair<int, std::vector<double>>> futures;
    for (int c = 1; c < n && c <= 2; ++c) futures.push_back({c, {normal(rng, 0.0, 5.0), normal(rng, 0.0, 5.0)}});
    mismatches += lookahead_choice(beta, futures, 0.0) != select_action(beta);
  }
  CHECK(mismatches == 0);
}

TEST_CASE("lookahead: state restoration, detour accounting, frozen history") {
  auto t = fixture::tiny(3, 8, 2, 2);
  for (HistoryStyle hist : {HistoryStyle::StateVector, HistoryStyle::Sequence}) {
    const AgentParams p = tiny_agent(t, 4, hist);
    const auto eps = fixture::episodes(t, 20, Level::L0, 7);
    int explored = 0;
    for (const auto& ep : eps)
      for (int moves = 0; moves < 3; ++moves)
        for (int depth : {1, 2}) {
          auto f = forward_at(p, ep, moves);
          if (f->obs.size() < 2) continue;
          const auto before_hist = history_values(f->state);
          const auto before_cursor = f->state.cursor;
          const int before_t = f->state.t;
          Explorer ex{f->session, t.graph};
          ExplorationConfig cfg;
          cfg.depth = depth;
          const auto r = lookahead(ex, f->state, f->step, f->obs, cfg);
          ++explored;
          CHECK(history_values(f->state) == before_hist);
          CHECK(f->state.cursor == before_cursor);
          CHECK(f->state.t == before_t);
          CHECK_FALSE(f->state.frozen_history.has_value());
          const std::size_t branches = std::min<std::size_t>(2, f->obs.size() - 1);
          CHECK(r.branches.size() == branches);
          std::size_t walked = 0;
          for (const auto& b : r.branches) {
            CHECK(b.candidate != nav::kStop);
            CHECK(!b.path.empty());
            CHECK(static_cast<int>(b.path.size()) <= depth);
            CHECK(b.future_max.size() == b.path.size());
            walked += 2 * b.path.size();
          }
          if (depth == 1) CHECK(walked == 2 * branches);
          CHECK(r.steps_walked == static_cast<int>(walked));
          CHECK(r.detour.size() == walked);
          int prev = before_cursor.viewpoint;
          for (int v : r.detour) {
            CHECK(t.graph.adjacent(prev, v));
            prev = v;
          }
          CHECK(prev == before_cursor.viewpoint);
          // Every in-lookahead pass reads the stored pre-step history.
          Mat stored(static_cast<Eigen::Index>(before_hist.size()), before_hist[0].cols());
          for (std::size_t i = 0; i < before_hist.size(); ++i) stored.row(static_cast<Eigen::Index>(i)) = before_hist[i];
          for (const auto& h : r.history_used) CHECK(h == stored);
          CHECK(r.chosen == lookahead_choice(f->step.trace.beta,
                                             [&] {
                                               std::vector<std::pair<int, std::vector<double>>> fs;
                                               for (const auto& b : r.branches) fs.push_back({b.candidate, b.future_max});
                                               return fs;
                                             }(),
                                             cfg.gamma));
        }
    CHECK(explored > 50);
  }
}

TEST_CASE("lookahead: without freeze the rollout advances the history; gamma 0 is greedy") {
  auto t = fixture::tiny(4, 8, 1, 2);
  const AgentParams p = tiny_agent(t, 5);
  const auto eps = fixture::episodes(t, 10, Level::L0, 8);
  for (const auto& ep : eps) {
    auto f = forward_at(p, ep, 0);
    if (f->obs.size() < 2) continue;
    Explorer ex{f->session, t.graph};
    ExplorationConfig cfg;
    cfg.freeze = false;
    const auto r = lookahead(ex, f->state, f->step, f->obs, cfg);
    for (const auto& h : r.history_used) CHECK(h != f->step.trace.history_input);
    cfg.gamma = 0.0;
    CHECK(lookahead(ex, f->state, f->step, f->obs, cfg).chosen == select_action(f->step.trace.beta));
  }
  auto f = forward_at(p, eps[0], 0);
  nav::Observation stop_only = f->obs;
  stop_only.candidates.resize(1);
  Session::Step step = f->step;
  step.trace.beta.conservativeResize(1);
  Explorer ex{f->session, t.graph};
  CHECK_THROWS_AS(lookahead(ex, f->state, step, stop_only, ExplorationConfig{}), InvariantError);
}

TEST_CASE("uncertainty features: fixed padding layout") {
  auto t = fixture::tiny(5, 8, 2, 2);
  const AgentParams p = tiny_agent(t, 6);
  const auto shape = UncertaintyShape::for_agent(p);
  CHECK(shape.heads == 2);
  CHECK(shape.query_slots == 1 + t.dims.max_candidates);
  CHECK(shape.text_len == t.dims.max_len + 1);
  const auto ep = fixture::episodes(t, 1, Level::L0, 2)[0];
  auto f = forward_at(p, ep, 0);
  const auto x = uncertainty_features(shape, f->step.trace);
  REQUIRE(x.size() == shape.input_dim());
  const auto& a = f->step.trace.alpha.back();
  double mass = 0.0;
  for (int h = 0; h < 2; ++h)
    for (Eigen::Index r = 0; r < a[h].rows(); ++r)
      for (Eigen::Index c = 0; c < a[h].cols(); ++c) {
        CHECK(x[h * shape.query_slots * shape.text_len + r * shape.text_len + c] == a[h](r, c));
        mass += a[h](r, c);
      }
  const int off = shape.heads * shape.query_slots * shape.text_len;
  CHECK(std::abs(x.head(off).sum() - mass) <= 1e-9);
  const auto nb = f->step.trace.beta.size();
  for (Eigen::Index i = 0; i < nb; ++i) CHECK(x[off + i] == f->step.trace.beta[i]);
  for (Eigen::Index i = nb; i < shape.n_max; ++i) CHECK(x[off + i] == 0.0);
  CHECK(x[off + shape.n_max] == static_cast<double>(a[0].cols()) / shape.text_len);
  CHECK(x[off + shape.n_max + 1] == static_cast<double>(nb) / shape.n_max);

  UncertaintyShape wrong = shape;
  wrong.heads = 1;
  CHECK_THROWS_AS(uncertainty_features(wrong, f->step.trace), ShapeError);
  const UncertaintyNet net = UncertaintyNet::init(shape, 4, 1);
  CHECK_THROWS_AS(uncertainty_score(net, Eigen::RowVectorXd::Zero(5)), ShapeError);
}

TEST_CASE("uncertainty_score: range, zero output layer, straight-line oracle") {
  auto t = fixture::tiny(6, 4, 1, 1);
  const AgentParams p = tiny_agent(t, 7);
  const auto shape = UncertaintyShape::for_agent(p);
  UncertaintyNet net = UncertaintyNet::init(shape, 6, 3);
  net.b1.setRandom();
  net.b2(0, 0) = 0.3;
  Rng rng = make_rng(2, "uncertainty-inputs");
  for (int k = 0; k < 200; ++k) {
    Eigen::RowVectorXd x(shape.input_dim());
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = normal(rng, 0.0, k < 100 ? 1.0 : 50.0);
    const double s = uncertainty_score(net, x);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
    CHECK(std::abs(s - oracle::uncertainty(net.W1, net.b1, net.W2, net.b2, x)) <= 1e-10);
  }
  UncertaintyNet flat = net;
  flat.W2.setZero();
  for (const auto& ep : fixture::episodes(t, 5, Level::L0, 3)) {
    auto f = forward_at(p, ep, 0);
    CHECK(uncertainty_score(flat, f->step.trace) == doctest::Approx(oracle::sigmoid(0.3)).epsilon(1e-15));
  }
  const auto back = UncertaintyNet::from_json(net.to_json());
  CHECK(back.checksum() == net.checksum());
  CHECK(back.shape == net.shape);
}

TEST_CASE("gradient check: uncertainty net") {
  auto t = fixture::tiny(7, 4, 1, 1);
  const AgentParams p = tiny_agent(t, 8);
  UncertaintyNet net = UncertaintyNet::init(UncertaintyShape::for_agent(p), 5, 4);
  Rng rng = make_rng(3, "fd-uncertainty");
  for (Eigen::Index i = 0; i < net.b1.size(); ++i) net.b1.data()[i] = normal(rng, 0.0, 0.3);
  net.b2(0, 0) = 0.2;
  Mat x(6, net.W1.rows());
  Eigen::VectorXd y(6), w(6);
  const auto eps = fixture::episodes(t, 6, Level::L0, 4);
  for (int i = 0; i < 6; ++i) {
    auto f = forward_at(p, eps[static_cast<std::size_t>(i)], 0);
    x.row(i) = uncertainty_features(net.shape, f->step.trace);
    y[i] = i % 2;
    w[i] = 1.0 / 6.0 + 0.05 * i;
  }
  auto loss = [&] {
    ad::Tape tape;
    return ad::weighted_bce_with_logits(uncertainty_logit(tape, net, x), y, w).value()(0, 0);
  };
  UncertaintyNet g = net;
  g.W1.setZero();
  g.b1.setZero();
  g.W2.setZero();
  g.b2.setZero();
  {
    ad::Tape tape;
    tape.backward(ad::weighted_bce_with_logits(uncertainty_logit(tape, net, x, &g), y, w));
  }
  std::vector<std::pair<Mat*, const Mat*>> ts = {{&net.W1, &g.W1}, {&net.b1, &g.b1}, {&net.W2, &g.W2}, {&net.b2, &g.b2}};
  int checked = 0;
  double worst = 0.0;
  for (int k = 0; k < 400 && checked < 40; ++k) {
    auto [pm, gm] = ts[static_cast<std::size_t>(k % 4)];
    const auto idx = static_cast<Eigen::Index>(uniform_int(rng, 0, pm->size() - 1));
    const double analytic = gm->data()[idx];
    double& v = pm->data()[idx];
    const double saved = v;
    v = saved + 1e-4;
    const double up = loss();
    v = saved - 1e-4;
    const double down = loss();
    v = saved;
    const double numeric = (up - down) / 2e-4;
    if (std::abs(analytic) < 1e-7) {
      CHECK(std::abs(numeric) < 1e-7);
      continue;
    }
    const double rel = ad::relative_error(analytic, numeric);
    CHECK(rel < 1e-4);
    worst = std::max(worst, rel);
    ++checked;
  }
  CHECK(checked >= 20);
  MESSAGE("uncertainty net max relative error " << worst);
}

TEST_CASE("train_uncertainty: zero learning rate, single class, separable data") {
  const UncertaintyShape shape{1, 2, 3, 2};
  Rng rng = make_rng(5, "separable");
  auto sample = [&](int label) {
    Eigen::RowVectorXd f(shape.input_dim());
    for (Eigen::Index i = 0; i < f.size(); ++i) f[i] = normal(rng, 0.0, 1.0);
    f[0] += label ? 1.5 : -1.5;
    return UncertaintySample{f, label};
  };
  std::vector<UncertaintySample> train, held;
  for (int i = 0; i < 300; ++i) train.push_back(sample(i % 3 == 0));
  for (int i = 0; i < 200; ++i) held.push_back(sample(i % 2));

  UncertaintyNet net = UncertaintyNet::init(shape, 8, 2);
  const auto before = net.checksum();
  UncertaintyHparams hp;
  hp.lr = 0.0;
  train_uncertainty(net, train, hp);
  CHECK(net.checksum() == before);

  hp.lr = 1e-2;
  const auto r = train_uncertainty(net, train, hp);
  CHECK_FALSE(r.single_class);
  CHECK(r.loss_curve.size() == static_cast<std::size_t>(hp.epochs) * ((train.size() + 31) / 32));
  const double a = auc(net, held);
  MESSAGE("held-out AUC " << a);
  CHECK(a > 0.8);

  // AUC against the pairwise definition.
  std::size_t wins2 = 0, pairs = 0;
  for (const auto& pz : held)
    for (const auto& nz : held)
      if (pz.label == 1 && nz.label == 0) {
        const double sp = uncertainty_score(net, pz.features), sn = uncertainty_score(net, nz.features);
        wins2 += sp > sn ? 2 : sp == sn ? 1 : 0;
        ++pairs;
      }
  CHECK(std::abs(a - wins2 / (2.0 * pairs)) <= 1e-12);

  std::vector<UncertaintySample> ones(20, sample(1));
  UncertaintyNet n2 = UncertaintyNet::init(shape, 8, 2);
  CHECK(train_uncertainty(n2, ones, hp).single_class);
  CHECK_THROWS_AS(train_uncertainty(n2, {}, hp), ValidationError);
}

TEST_CASE("generate_uncertainty_labels: counts, agreement, drop monotonicity") {
  auto t = fixture::tiny(8, 8, 1, 2);
  const auto eps = fixture::episodes(t, 12, Level::L0, 5, 3);
  AgentParams p = tiny_agent(t, 9);
  ImitationHparams hp;
  hp.lr = 1e-2;
  hp.iterations = 600;
  hp.batch_size = 4;
  hp.seed = 2;
  train_imitation(p, eps, hp);

  std::size_t expected = 0;
  for (const auto& ep : eps) expected += ep.path.size();  // one step per hop plus STOP
  const auto clean = generate_uncertainty_labels(p, eps, t.vocab, 0.0, 1);
  CHECK(clean.samples.size() == expected);
  CHECK(clean.skipped == 0);
  MESSAGE("positive fraction at drop 0: " << clean.positive_fraction());
  CHECK(clean.positive_fraction() == 0.0);
  for (const auto& s : clean.samples) CHECK(s.features.size() == UncertaintyShape::for_agent(p).input_dim());

  const auto dropped = generate_uncertainty_labels(p, eps, t.vocab, 0.5, 1);
  MESSAGE("positive fraction at drop 0.5: " << dropped.positive_fraction());
  CHECK(dropped.positive_fraction() > clean.positive_fraction());
  CHECK(dropped.samples.size() == expected);
  const auto again = generate_uncertainty_labels(p, eps, t.vocab, 0.5, 1);
  CHECK(again.positive_fraction() == dropped.positive_fraction());

  auto broken = eps;
  broken[0].tokens = {0};
  CHECK(generate_uncertainty_labels(p, broken, t.vocab, 0.0, 1).skipped == 1);
}

TEST_CASE("run_episode_e2e: gates, budget, routing, traces") {
  auto t = fixture::tiny(9, 8, 1, 2);
  const AgentParams p = tiny_agent(t, 10);
  const UncertaintyNet loud = always_uncertain(p);
  const auto eps = fixture::episodes(t, 250, Level::L0, 6, 6);
  Policy greedy{&p, RoutingMode::FixedLow, nullptr, nullptr, {}, false};
  for (const auto& ep : eps) {
    const auto g = run_episode_e2e(greedy, ep);
    CHECK(g.explorations == 0);
    CHECK(g.trajectory.committed() == greedy_rollout(p, ep, Routing::all(Variant::Low)).visited);

    Policy gate = greedy;
    gate.net = &loud;
    gate.cfg.threshold = 1.0;
    const auto a = run_episode_e2e(gate, ep);
    CHECK(a.explorations == 0);
    CHECK(a.trajectory.visited() == g.trajectory.visited());

    gate.cfg.threshold = 0.5;
    gate.cfg.budget = 0;
    const auto b = run_episode_e2e(gate, ep);
    CHECK(b.explorations == 0);
    CHECK(b.trajectory.visited() == g.trajectory.visited());
  }
  int total = 0, violations = 0;
  for (int budget : {1, 3}) {
    Policy e2e = greedy;
    e2e.net = &loud;
    e2e.cfg.threshold = 0.0;
    e2e.cfg.budget = budget;
    for (int k = 0; k < 4; ++k)
      for (const auto& ep : eps) {
        const auto r = run_episode_e2e(e2e, ep);
        violations += r.explorations > budget;
        total += r.explorations;
        CHECK_NOTHROW(metrics::validate(r.trajectory, t.graph));
        int flagged = 0;
        for (const auto& s : r.trajectory.steps) flagged += s.detour;
        int explored = 0;
        for (const auto& rec : r.records) explored += rec.explored;
        CHECK(explored == r.explorations);
        CHECK((flagged > 0) == (r.explorations > 0));
      }
  }
  CHECK(violations == 0);
  CHECK(total > 0);

  Policy traced = greedy;
  traced.net = &loud;
  traced.record_trace = true;
  const auto run = run_episode_e2e(traced, eps[0]);
  const auto lines = trace_lines(run, "p0");
  REQUIRE(lines.size() == run.records.size());
  CHECK(lines[0]["version"] == "uln-trace/1");
  CHECK(lines[0]["candidates"].size() == lines[0]["beta"].size());
  CHECK(lines[0]["explored"] == true);
  CHECK(lines[0]["scores"].size() == lines[0]["beta"].size());

  Policy missing = greedy;
  missing.routing = RoutingMode::Classifier;
  CHECK_THROWS_AS(run_episode_e2e(missing, eps[0]), DependencyError);
  Policy oracle_routing = greedy;
  oracle_routing.routing = RoutingMode::LevelOracle;
  auto l3 = eps[0];
  l3.level = Level::L3;
  CHECK(choose_routing(oracle_routing, l3)[Subnet::Text] == Variant::High);
  CHECK(choose_routing(oracle_routing, eps[0])[Subnet::Text] == Variant::Low);
  Policy none{};
  CHECK_THROWS_AS(run_episode_e2e(none, eps[0]), DependencyError);
}

TEST_CASE("correction_rollouts: teacher-forced steps and flags") {
  auto t = fixture::tiny(10, 4, 1, 1);
  const AgentParams p = tiny_agent(t, 11);
  const UncertaintyNet loud = always_uncertain(p);
  const auto eps = fixture::episodes(t, 15, Level::L0, 9);
  Policy pol{&p, RoutingMode::FixedLow, nullptr, &loud, {}, false};
  const auto rolls = correction_rollouts(pol, eps);
  REQUIRE(rolls.size() == eps.size());
  for (std::size_t i = 0; i < eps.size(); ++i) {
    CHECK(rolls[i].size() == eps[i].path.size());
    for (const auto& s : rolls[i]) CHECK(s.flagged);
  }
  Policy no_net = pol;
  no_net.net = nullptr;
  CHECK_THROWS_AS(correction_rollouts(no_net, eps), DependencyError);
}
