#include "uln/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace uln::ad {

const Mat& Var::value() const { return tape->value(id); }

Var Tape::constant(Mat value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::leaf(const Mat& value, Mat* grad_sink) {
  Node n;
  n.value = value;
  n.requires_grad = grad_sink != nullptr;
  n.sink = grad_sink;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Mat& Tape::grad(int id) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.has_grad) {
    n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(Var v, const Mat& g) {
  if (!requires_grad(v.id)) return;
  grad(v.id) += g;
}

Var Tape::record(Mat value, std::initializer_list<Var> inputs,
                 std::function<void(Tape&, const Mat&)> backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Tape::record(Mat value, std::span<const Var> inputs,
                 std::function<void(Tape&, const Mat&)> backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](const Var& v) { return requires_grad(v.id); });
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::logic_error("backward: variable from another tape");
  if (loss.value().size() != 1) throw std::logic_error("backward: loss must be 1x1");
  if (!requires_grad(loss.id)) return;
  grad(loss.id)(0, 0) += 1.0;
  for (int i = loss.id; i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || !n.has_grad) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.sink != nullptr) *n.sink += n.grad;
  }
}

namespace {

void check_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::logic_error("autodiff: operands on different tapes");
}

}  // namespace

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  Mat out = a.value() * b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (t.requires_grad(a.id)) t.grad(a.id).noalias() += g * b.value().transpose();
    if (t.requires_grad(b.id)) t.grad(b.id).noalias() += a.value().transpose() * g;
  });
}

Var matmul_t(Var a, Var b) {
  check_same_tape(a, b);
  Mat out = a.value() * b.value().transpose();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (t.requires_grad(a.id)) t.grad(a.id).noalias() += g * b.value();
    if (t.requires_grad(b.id)) t.grad(b.id).noalias() += g.transpose() * a.value();
  });
}

Var add(Var a, Var b) {
  check_same_tape(a, b);
  Mat out = a.value() + b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  check_same_tape(a, b);
  Mat out = a.value() - b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    if (t.requires_grad(b.id)) t.grad(b.id) -= g;
  });
}

Var add_row(Var a, Var row) {
  check_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::logic_error("add_row: shape mismatch");
  Mat out = a.value().rowwise() + row.value().row(0);
  return a.tape->record(std::move(out), {a, row}, [a, row](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    if (t.requires_grad(row.id)) t.grad(row.id) += g.colwise().sum();
  });
}

Var mul(Var a, Var b) {
  check_same_tape(a, b);
  Mat out = a.value().cwiseProduct(b.value());
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (t.requires_grad(a.id)) t.grad(a.id) += g.cwiseProduct(b.value());
    if (t.requires_grad(b.id)) t.grad(b.id) += g.cwiseProduct(a.value());
  });
}

Var mul_row(Var a, Var row) {
  check_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::logic_error("mul_row: shape mismatch");
  Mat out = a.value().array().rowwise() * row.value().row(0).array();
  return a.tape->record(std::move(out), {a, row}, [a, row](Tape& t, const Mat& g) {
    if (t.requires_grad(a.id))
      t.grad(a.id).array() += g.array().rowwise() * row.value().row(0).array();
    if (t.requires_grad(row.id))
      t.grad(row.id) += g.cwiseProduct(a.value()).colwise().sum();
  });
}

Var scale(Var a, double s) {
  Mat out = a.value() * s;
  return a.tape->record(std::move(out), {a}, [a, s](Tape& t, const Mat& g) {
    if (t.requires_grad(a.id)) t.grad(a.id) += g * s;
  });
}

Var relu(Var a) {
  Mat out = a.value().cwiseMax(0.0);
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Mat& g) {
    if (!t.requires_grad(a.id)) return;
    t.grad(a.id).array() += (a.value().array() > 0.0).cast<double>() * g.array();
  });
}

Var tanh(Var a) {
  Mat out = a.value().array().tanh().matrix();
  Tape* tape = a.tape;
  const int out_id = static_cast<int>(tape->size());
  return tape->record(std::move(out), {a}, [a, out_id](Tape& t, const Mat& g) {
    if (!t.requires_grad(a.id)) return;
    const Mat& y = t.value(out_id);
    t.grad(a.id).array() += g.array() * (1.0 - y.array().square());
  });
}

Var sigmoid(Var a) {
  Mat out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  const int out_id = static_cast<int>(a.tape->size());
  return a.tape->record(std::move(out), {a}, [a, out_id](Tape& t, const Mat& g) {
    if (!t.requires_grad(a.id)) return;
    const Mat& y = t.value(out_id);
    t.grad(a.id).array() += g.array() * y.array() * (1.0 - y.array());
  });
}

Var softmax_rows(Var a) {
  const Mat& x = a.value();
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  const int out_id = static_cast<int>(a.tape->size());
  return a.tape->record(std::move(out), {a}, [a, out_id](Tape& t, const Mat& g) {
    if (!t.requires_grad(a.id)) return;
    const Mat& y = t.value(out_id);
    Mat& ga = t.grad(a.id);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).dot(y.row(r));
      ga.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

Var layer_norm_rows(Var a, Var gain, Var bias, double eps) {
  check_same_tape(a, gain);
  check_same_tape(a, bias);
  const Mat& x = a.value();
  const Eigen::Index n = x.cols();
  Mat xhat(x.rows(), n);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  Mat out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
            bias.value().row(0).array();
  return a.tape->record(
      std::move(out), {a, gain, bias},
      [a, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), n](Tape& t,
                                                                              const Mat& g) {
        if (t.requires_grad(gain.id)) t.grad(gain.id) += g.cwiseProduct(xhat).colwise().sum();
        if (t.requires_grad(bias.id)) t.grad(bias.id) += g.colwise().sum();
        if (!t.requires_grad(a.id)) return;
        Mat& ga = t.grad(a.id);
        const auto gam = gain.value().row(0).array();
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          Eigen::ArrayXXd gh = g.row(r).array() * gam;
          const double m1 = gh.mean();
          const double m2 = (gh * xhat.row(r).array()).mean();
          ga.row(r).array() +=
              inv_std(r) * (gh - m1 - xhat.row(r).array() * m2);
        }
        (void)n;
      });
}

Var vstack(std::span<const Var> parts) {
  if (parts.empty()) throw std::logic_error("vstack: no parts");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::logic_error("vstack: column mismatch");
    rows += p.rows();
  }
  Mat out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(out), parts, [inputs](Tape& t, const Mat& g) {
    Eigen::Index r0 = 0;
    for (const auto& p : inputs) {
      if (t.requires_grad(p.id)) t.grad(p.id) += g.middleRows(r0, p.rows());
      r0 += p.rows();
    }
  });
}

Var hstack(std::span<const Var> parts) {
  if (parts.empty()) throw std::logic_error("hstack: no parts");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0].rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::logic_error("hstack: row mismatch");
    cols += p.cols();
  }
  Mat out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(out), parts, [inputs](Tape& t, const Mat& g) {
    Eigen::Index c0 = 0;
    for (const auto& p : inputs) {
      if (t.requires_grad(p.id)) t.grad(p.id) += g.middleCols(c0, p.cols());
      c0 += p.cols();
    }
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows())
    throw std::logic_error("slice_rows: out of range");
  Mat out = a.value().middleRows(start, count);
  return a.tape->record(std::move(out), {a}, [a, start, count](Tape& t, const Mat& g) {
    if (t.requires_grad(a.id)) t.grad(a.id).middleRows(start, count) += g;
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols())
    throw std::logic_error("slice_cols: out of range");
  Mat out = a.value().middleCols(start, count);
  return a.tape->record(std::move(out), {a}, [a, start, count](Tape& t, const Mat& g) {
    if (t.requires_grad(a.id)) t.grad(a.id).middleCols(start, count) += g;
  });
}

Var gather_rows(Var table, std::span<const int> indices) {
  Mat out(static_cast<Eigen::Index>(indices.size()), table.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= table.rows())
      throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(indices[i]);
  }
  std::vector<int> idx(indices.begin(), indices.end());
  return table.tape->record(std::move(out), {table}, [table, idx](Tape& t, const Mat& g) {
    if (!t.requires_grad(table.id)) return;
    Mat& gt = t.grad(table.id);
    for (std::size_t i = 0; i < idx.size(); ++i) gt.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var mean_rows(Var a) {
  const double n = static_cast<double>(a.rows());
  Mat out = a.value().colwise().mean();
  return a.tape->record(std::move(out), {a}, [a, n](Tape& t, const Mat& g) {
    if (t.requires_grad(a.id)) t.grad(a.id).rowwise() += g.row(0) / n;
  });
}

Var sum_all(Var a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Mat& g) {
    if (t.requires_grad(a.id)) t.grad(a.id).array() += g(0, 0);
  });
}

Var transpose(Var a) {
  Mat out = a.value().transpose();
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Mat& g) {
    if (t.requires_grad(a.id)) t.grad(a.id) += g.transpose();
  });
}

Var attention(Var q, Var k, Var v, int heads, double scale, std::vector<Mat>* probs) {
  check_same_tape(q, k);
  check_same_tape(q, v);
  const Eigen::Index d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows() || heads < 1 || d % heads != 0)
    throw std::logic_error("attention: shape mismatch");
  const Eigen::Index dk = d / heads;
  const Mat& Q = q.value();
  const Mat& K = k.value();
  const Mat& V = v.value();
  std::vector<Mat> p(static_cast<std::size_t>(heads));
  Mat out(Q.rows(), d);
  for (int h = 0; h < heads; ++h) {
    Mat s = Q.middleCols(h * dk, dk) * K.middleCols(h * dk, dk).transpose() * scale;
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      const double m = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - m).exp().matrix();
      s.row(r) /= s.row(r).sum();
    }
    out.middleCols(h * dk, dk).noalias() = s * V.middleCols(h * dk, dk);
    p[static_cast<std::size_t>(h)] = std::move(s);
  }
  if (probs != nullptr) *probs = p;
  return q.tape->record(std::move(out), {q, k, v},
                        [q, k, v, heads, dk, scale, p = std::move(p)](Tape& t, const Mat& g) {
                          const Mat& Q = q.value();
                          const Mat& K = k.value();
                          const Mat& V = v.value();
                          for (int h = 0; h < heads; ++h) {
                            const Mat& P = p[static_cast<std::size_t>(h)];
                            const auto gh = g.middleCols(h * dk, dk);
                            if (t.requires_grad(v.id))
                              t.grad(v.id).middleCols(h * dk, dk).noalias() += P.transpose() * gh;
                            if (!t.requires_grad(q.id) && !t.requires_grad(k.id)) continue;
                            Mat dP = gh * V.middleCols(h * dk, dk).transpose();
                            Mat dS = P.cwiseProduct(dP);
                            const Eigen::VectorXd rs = dS.rowwise().sum();
                            dS -= P.cwiseProduct(rs.replicate(1, P.cols()));
                            dS *= scale;
                            if (t.requires_grad(q.id))
                              t.grad(q.id).middleCols(h * dk, dk).noalias() += dS * K.middleCols(h * dk, dk);
                            if (t.requires_grad(k.id))
                              t.grad(k.id).middleCols(h * dk, dk).noalias() += dS.transpose() * Q.middleCols(h * dk, dk);
                          }
                        });
}

Var cross_entropy(Var logits, int target) {
  const Mat& z = logits.value();
  if (z.rows() != 1 && z.cols() != 1) throw std::logic_error("cross_entropy: expects a vector");
  if (target < 0 || target >= z.size()) throw std::out_of_range("cross_entropy: bad target");
  const double m = z.maxCoeff();
  Mat p = (z.array() - m).exp().matrix();
  const double s = p.sum();
  p /= s;
  Mat out(1, 1);
  out(0, 0) = -(z.data()[target] - m - std::log(s));
  return logits.tape->record(std::move(out), {logits},
                             [logits, target, p = std::move(p)](Tape& t, const Mat& g) {
                               if (!t.requires_grad(logits.id)) return;
                               Mat d = p;
                               d.data()[target] -= 1.0;
                               t.grad(logits.id) += d * g(0, 0);
                             });
}

Var bce_with_logits(Var logit, double label) {
  if (logit.value().size() != 1) throw std::logic_error("bce_with_logits: expects 1x1");
  const double z = logit.value()(0, 0);
  // log(1 + e^{-|z|}) + max(z, 0) - z*y, stable for large |z|
  Mat out(1, 1);
  out(0, 0) = std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0) - z * label;
  const double p = 1.0 / (1.0 + std::exp(-z));
  return logit.tape->record(std::move(out), {logit}, [logit, p, label](Tape& t, const Mat& g) {
    if (t.requires_grad(logit.id)) t.grad(logit.id)(0, 0) += (p - label) * g(0, 0);
  });
}

Var weighted_bce_with_logits(Var logits, const Eigen::VectorXd& labels, const Eigen::VectorXd& weights) {
  const Mat& z = logits.value();
  if (z.cols() != 1 || z.rows() != labels.size() || z.rows() != weights.size())
    throw std::logic_error("weighted_bce_with_logits: expects n x 1 logits with n labels and weights");
  Mat out = Mat::Zero(1, 1);
  Eigen::VectorXd d(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double zi = z(i, 0);
    out(0, 0) += weights[i] * (std::log1p(std::exp(-std::abs(zi))) + std::max(zi, 0.0) - zi * labels[i]);
    d[i] = weights[i] * (1.0 / (1.0 + std::exp(-zi)) - labels[i]);
  }
  return logits.tape->record(std::move(out), {logits}, [logits, d](Tape& t, const Mat& g) {
    if (t.requires_grad(logits.id)) t.grad(logits.id).col(0) += d * g(0, 0);
  });
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace uln::ad
