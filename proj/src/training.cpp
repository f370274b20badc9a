#include "uln/training.hpp"

#include "uln/errors.hpp"
#include "uln/rng.hpp"

#include <cmath>

namespace uln::agent {

void AdamW::step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads) {
  if (params.size() != grads.size()) throw std::logic_error("AdamW: params/grads size mismatch");
  if (m_.empty()) {
    for (const Mat* p : params) {
      m_.push_back(Mat::Zero(p->rows(), p->cols()));
      v_.push_back(Mat::Zero(p->rows(), p->cols()));
    }
  }
  if (m_.size() != params.size()) throw std::logic_error("AdamW: parameter layout changed between steps");
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat& p = *params[i];
    const Mat& g = *grads[i];
    m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
    v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g.cwiseProduct(g);
    if (opt_.lr == 0.0) continue;
    p *= 1.0 - opt_.lr * opt_.weight_decay;
    p.array() -= opt_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + opt_.eps);
  }
}

void collect_trainable(AgentParams& params, AgentParams& grads, const TrainMask& mask, std::vector<Mat*>& p,
                       std::vector<const Mat*>& g) {
  p.clear();
  g.clear();
  if (mask.embedding) {
    p.push_back(&params.embedding.get("E"));
    g.push_back(&grads.embedding.get("E"));
  }
  for (int s = 0; s < kNumSubnets; ++s)
    for (int v = 0; v < 2; ++v) {
      if (!mask.slots[static_cast<std::size_t>(s)][static_cast<std::size_t>(v)]) continue;
      auto& ps = params.slot(static_cast<Subnet>(s), static_cast<Variant>(v));
      auto& gs = grads.slot(static_cast<Subnet>(s), static_cast<Variant>(v));
      if (!ps || !gs)
        throw InvariantError(std::string("trainable slot missing: ") + std::string(subnet_name(static_cast<Subnet>(s))));
      for (std::size_t i = 0; i < ps->tensors.size(); ++i) {
        p.push_back(&ps->tensors[i].value);
        g.push_back(&gs->tensors[i].value);
      }
    }
}

double imitation_loss(const AgentParams& params, const Episode& ep, const Routing& routing, AgentParams* grads,
                      const TrainMask& mask) {
  if (ep.graph == nullptr) throw ValidationError("episode without a graph");
  Session s(params, routing, grads, mask);
  s.begin(ep.tokens, {ep.start, ep.heading});
  AgentState state = s.start_state();
  std::vector<ad::Var> losses;
  for (int t = 0; t < params.dims.max_steps; ++t) {
    const nav::Observation obs = nav::observe(*ep.graph, state.cursor.viewpoint, state.cursor.heading);
    const int teacher = nav::teacher_action(*ep.graph, obs, state.cursor.viewpoint, ep.goal);
    auto step = s.forward(obs, state, false);
    losses.push_back(ad::cross_entropy(step.trace.beta_var, teacher));
    if (teacher == nav::kStop) break;
    const nav::Cursor next = nav::step(*ep.graph, state.cursor, obs, teacher);
    state = s.advance(state, step, teacher, next);
  }
  const ad::Var total = ad::scale(ad::sum_all(ad::vstack(losses)), 1.0 / static_cast<double>(losses.size()));
  const double value = total.value()(0, 0);
  if (grads != nullptr && std::isfinite(value)) s.tape().backward(total);
  return value;
}

TrainResult train_imitation(AgentParams& params, const std::vector<Episode>& episodes, const ImitationHparams& hp) {
  if (episodes.empty()) throw ValidationError("train_imitation: no episodes");
  if (hp.iterations < 0 || hp.batch_size < 1) throw ConfigError("train_imitation: bad iteration/batch settings");
  TrainResult res;
  AdamW opt({hp.lr, 0.9, 0.999, 1e-8, hp.weight_decay});
  AgentParams grads = params.zeros_like();
  std::vector<Mat*> p;
  std::vector<const Mat*> g;
  collect_trainable(params, grads, hp.mask, p, g);
  Rng rng = make_rng(hp.seed, "imitation-batches");
  const auto n = static_cast<std::int64_t>(episodes.size());
  for (int it = 0; it < hp.iterations; ++it) {
    grads.for_each([](const std::string&, Mat& m) { m.setZero(); });
    double batch_loss = 0.0;
    bool finite = true;
    for (int k = 0; k < hp.batch_size && finite; ++k) {
      const auto& ep = episodes[static_cast<std::size_t>(uniform_int(rng, 0, n - 1))];
      try {
        batch_loss += imitation_loss(params, ep, hp.routing, &grads, hp.mask);
      } catch (const NumericError&) {
        finite = false;
      }
    }
    batch_loss /= hp.batch_size;
    double norm2 = 0.0;
    for (const Mat* gm : g) norm2 += gm->squaredNorm();
    if (!finite || !std::isfinite(batch_loss) || !std::isfinite(norm2)) {
      res.diverged = true;
      break;
    }
    const double inv = 1.0 / hp.batch_size;
    double factor = inv;
    const double norm = std::sqrt(norm2) * inv;
    if (hp.clip_norm > 0.0 && norm > hp.clip_norm) factor *= hp.clip_norm / norm;
    for (const Mat* gm : g) *const_cast<Mat*>(gm) *= factor;
    opt.step(p, g);
    res.loss_curve.push_back(batch_loss);
    ++res.steps_done;
  }
  return res;
}

Rollout greedy_rollout(const AgentParams& params, const Episode& ep, const Routing& routing) {
  Session s(params, routing);
  s.begin(ep.tokens, {ep.start, ep.heading});
  AgentState state = s.start_state();
  Rollout r;
  r.visited.push_back(ep.start);
  for (int t = 0; t < params.dims.max_steps; ++t) {
    const nav::Observation obs = nav::observe(*ep.graph, state.cursor.viewpoint, state.cursor.heading);
    auto step = s.forward(obs, state, false);
    const int a = select_action(step.trace.beta);
    if (a == nav::kStop) {
      r.stopped = true;
      break;
    }
    const nav::Cursor next = nav::step(*ep.graph, state.cursor, obs, a);
    r.visited.push_back(next.viewpoint);
    state = s.advance(state, step, a, next);
  }
  return r;
}

Rollout teacher_rollout(const Episode& ep, int max_steps) {
  Rollout r;
  nav::Cursor cur{ep.start, ep.heading};
  r.visited.push_back(cur.viewpoint);
  for (int t = 0; t < max_steps; ++t) {
    const nav::Observation obs = nav::observe(*ep.graph, cur.viewpoint, cur.heading);
    const int a = nav::teacher_action(*ep.graph, obs, cur.viewpoint, ep.goal);
    if (a == nav::kStop) {
      r.stopped = true;
      break;
    }
    cur = nav::step(*ep.graph, cur, obs, a);
    r.visited.push_back(cur.viewpoint);
  }
  return r;
}

}  // namespace uln::agent
