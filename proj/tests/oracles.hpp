#pragma once

// Independent, deliberately naive recomputations used as test oracles.

#include "uln/agent.hpp"
#include "uln/navgraph.hpp"
#include "uln/rng.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

namespace oracle {

// Connected random graph: random spanning tree plus extra chords.
inline uln::nav::NavigationGraph random_graph(uln::Rng& rng, int n) {
  std::vector<uln::nav::Viewpoint> vps(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    vps[static_cast<std::size_t>(i)].id = "n" + std::to_string(i);
    vps[static_cast<std::size_t>(i)].position = {20.0 * uln::uniform01(rng), 20.0 * uln::uniform01(rng), 0.0};
  }
  std::vector<std::pair<int, int>> edges;
  auto has = [&](int a, int b) {
    for (auto [x, y] : edges)
      if ((x == a && y == b) || (x == b && y == a)) return true;
    return false;
  };
  for (int i = 1; i < n; ++i) edges.emplace_back(static_cast<int>(uln::uniform_int(rng, 0, i - 1)), i);
  const int extra = static_cast<int>(uln::uniform_int(rng, 0, n));
  for (int k = 0; k < extra; ++k) {
    const int a = static_cast<int>(uln::uniform_int(rng, 0, n - 1));
    const int b = static_cast<int>(uln::uniform_int(rng, 0, n - 1));
    if (a != b && !has(a, b)) edges.emplace_back(a, b);
  }
  return uln::nav::NavigationGraph::build("random", vps, edges, {}, 0.0, 1, 32, 8, 0);
}

inline Eigen::MatrixXd floyd_warshall(const uln::nav::NavigationGraph& g) {
  const auto n = static_cast<Eigen::Index>(g.size());
  const double inf = std::numeric_limits<double>::infinity();
  Eigen::MatrixXd d = Eigen::MatrixXd::Constant(n, n, inf);
  for (Eigen::Index i = 0; i < n; ++i) d(i, i) = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < n; ++k)
      if (i != k && g.adjacent(static_cast<int>(i), static_cast<int>(k)))
        d(i, k) = (g.viewpoint(static_cast<int>(i)).position - g.viewpoint(static_cast<int>(k)).position).norm();
  for (Eigen::Index m = 0; m < n; ++m)
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index k = 0; k < n; ++k) d(i, k) = std::min(d(i, k), d(i, m) + d(m, k));
  return d;
}

// [sin dtheta, cos dtheta, sin dphi, cos dphi] tiled; bearing is clockwise
// from +y, elevation is measured from the horizontal plane.
inline Eigen::VectorXd angle_feature(const Eigen::Vector3d& from, const Eigen::Vector3d& to, double heading,
                                     int d_a) {
  const double dx = to.x() - from.x(), dy = to.y() - from.y(), dz = to.z() - from.z();
  const double theta = std::atan2(dx, dy) - heading;
  const double phi = std::atan2(dz, std::sqrt(dx * dx + dy * dy));
  Eigen::VectorXd a(d_a);
  for (int k = 0; k < d_a; k += 4) {
    a(k) = std::sin(theta);
    a(k + 1) = std::cos(theta);
    a(k + 2) = std::sin(phi);
    a(k + 3) = std::cos(phi);
  }
  return a;
}


using Mat = Eigen::MatrixXd;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Mat layer_norm(const Mat& x, const Mat& g, const Mat& b, double eps = 1e-5) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mu = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) mu += x(r, c);
    mu /= static_cast<double>(x.cols());
    double var = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) var += (x(r, c) - mu) * (x(r, c) - mu);
    var /= static_cast<double>(x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) out(r, c) = (x(r, c) - mu) / std::sqrt(var + eps) * g(0, c) + b(0, c);
  }
  return out;
}

inline Mat softmax_rows(const Mat& s) {
  Mat p(s.rows(), s.cols());
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    double z = 0.0;
    for (Eigen::Index c = 0; c < s.cols(); ++c) z += std::exp(s(r, c));
    for (Eigen::Index c = 0; c < s.cols(); ++c) p(r, c) = std::exp(s(r, c)) / z;
  }
  return p;
}

// Multi-head attention with explicit per-head column blocks.
inline Mat attention(const Mat& q, const Mat& k, const Mat& v, int heads, std::vector<Mat>* probs = nullptr) {
  const Eigen::Index d = q.cols(), dk = d / heads;
  Mat out(q.rows(), d);
  for (int h = 0; h < heads; ++h) {
    const Mat p = softmax_rows(q.middleCols(h * dk, dk) * k.middleCols(h * dk, dk).transpose() /
                               std::sqrt(static_cast<double>(d)));
    if (probs) probs->push_back(p);
    out.middleCols(h * dk, dk) = p * v.middleCols(h * dk, dk);
  }
  return out;
}

inline Mat relu(const Mat& m) { return m.cwiseMax(0.0); }
inline Mat add_row(const Mat& m, const Mat& row) { return m.rowwise() + row.row(0); }

// Candidate encoder: relu affine, affine, layer norm over [visual; angle].
inline Mat encode_observation(const uln::agent::SubnetParams& p, const uln::nav::Observation& obs) {
  Mat x(static_cast<Eigen::Index>(obs.size()), obs.candidates[0].visual.size() + obs.candidates[0].angle.size());
  for (std::size_t i = 0; i < obs.size(); ++i)
    x.row(static_cast<Eigen::Index>(i)) << obs.candidates[i].visual.transpose(), obs.candidates[i].angle.transpose();
  const Mat h = relu(add_row(x * p.get("W1"), p.get("b1")));
  return layer_norm(add_row(h * p.get("W2"), p.get("b2")), p.get("ln_g"), p.get("ln_b"));
}

struct StepOracle {
  Mat beta;
  std::vector<Mat> alpha_last;
};

// Cross-modal layers and action head evaluated from the text encoding X,
// history rows H, and candidate embeddings O, using the low slots.
inline StepOracle forward_step(const uln::agent::AgentParams& params, const Mat& X, const Mat& H, const Mat& O) {
  using uln::agent::Subnet;
  using uln::agent::Variant;
  const auto& cm = *params.slot(Subnet::Cm, Variant::Low);
  const auto& act = *params.slot(Subnet::Action, Variant::Low);
  const int heads = params.dims.heads;
  Mat z(H.rows() + O.rows(), H.cols());
  z << H, O;
  Mat x = X.topRows(1);
  StepOracle out;
  for (int l = 0; l < params.dims.layers; ++l) {
    auto w = [&](const char* n) -> const Mat& { return cm.get("l" + std::to_string(l) + "/" + n); };
    std::vector<Mat> probs;
    Mat a = attention(z * w("Wq"), X * w("Wk"), X * w("Wv"), heads, &probs);
    out.alpha_last = probs;
    z = layer_norm(z + a * w("Wo"), w("ln1_g"), w("ln1_b"));
    a = attention(z * w("Sq"), z * w("Sk"), z * w("Sv"), heads);
    z = layer_norm(z + a * w("So"), w("ln2_g"), w("ln2_b"));
    z = layer_norm(z + add_row(relu(add_row(z * w("F1"), w("b1"))) * w("F2"), w("b2")), w("ln3_g"), w("ln3_b"));
    a = attention(x * w("Cq"), z * w("Ck"), z * w("Cv"), heads);
    x = layer_norm(x + a * w("Co"), w("lnx_g"), w("lnx_b"));
  }
  const Mat HL = z.topRows(H.rows());
  const Mat OL = z.bottomRows(O.rows());
  if (params.head == uln::agent::HeadStyle::FcHead) {
    Mat r = OL;
    for (Eigen::Index i = 0; i < r.rows(); ++i) r.row(i) = r.row(i).cwiseProduct(x.row(0));
    out.beta = add_row(relu(add_row(r * act.get("W1"), act.get("b1"))) * act.get("w2"), act.get("b2")).transpose();
  } else {
    out.beta = (HL.bottomRows(1) * act.get("Wq")) * (OL * act.get("Wk")).transpose() /
               std::sqrt(static_cast<double>(params.dims.d_h));
  }
  return out;
}

// Two-layer tanh MLP with a sigmoid output.
inline double uncertainty(const Mat& W1, const Mat& b1, const Mat& W2, const Mat& b2, const Eigen::RowVectorXd& f) {
  double z = b2(0, 0);
  for (Eigen::Index j = 0; j < W1.cols(); ++j) {
    double a = b1(0, j);
    for (Eigen::Index i = 0; i < W1.rows(); ++i) a += f[i] * W1(i, j);
    z += std::tanh(a) * W2(j, 0);
  }
  return sigmoid(z);
}

}  // namespace oracle
