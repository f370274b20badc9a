#include "uln/classifier.hpp"

#include "uln/checkpoint.hpp"
#include "uln/errors.hpp"
#include "uln/rng.hpp"

#include <algorithm>
#include <cmath>

namespace uln::agent {


Classifier Classifier::init(int vocab, int dim, std::uint64_t seed) {
  if (vocab < 2 || dim < 1) throw ConfigError("classifier: vocab >= 2 and dim >= 1 required");
  Classifier c;
  Rng rng = make_rng(seed, "classifier");
  // Zero embeddings: a token never seen in training adds no evidence to the
  // pooled vector, so unfamiliar phrasings are judged by the familiar tokens.
  c.E = Mat::Zero(vocab, dim);
  c.W.resize(dim, 2);
  for (Eigen::Index i = 0; i < c.W.size(); ++i) c.W.data()[i] = normal(rng, 0.0, 1.0 / std::sqrt(double(dim)));
  c.b = Mat::Zero(1, 2);
  return c;
}

std::uint64_t Classifier::checksum() const { return hash_mat(b, hash_mat(W, hash_mat(E, 1469598103934665603ULL))); }

nlohmann::json Classifier::to_json() const {
  return {{"version", "uln-clf/1"}, {"E", mat_to_json(E)}, {"W", mat_to_json(W)}, {"b", mat_to_json(b)},
          {"checksum", checksum()}};
}

Classifier Classifier::from_json(const nlohmann::json& j) {
  if (j.value("version", "") != "uln-clf/1") throw LoadError("classifier: unsupported version");
  Classifier c;
  c.E = mat_from_json(j.at("E"));
  c.W = mat_from_json(j.at("W"));
  c.b = mat_from_json(j.at("b"));
  if (c.W.rows() != c.E.cols() || c.W.cols() != 2 || c.b.rows() != 1 || c.b.cols() != 2)
    throw LoadError("classifier: inconsistent shapes");
  if (j.contains("checksum") && j.at("checksum").get<std::uint64_t>() != c.checksum())
    throw LoadError("classifier: checksum mismatch");
  return c;
}

ad::Var classifier_logits(ad::Tape& tape, const Classifier& clf, const std::vector<int>& tokens, Classifier* grads) {
  std::vector<int> toks;
  for (int t : tokens) {
    if (t < 0 || t >= clf.vocab()) throw ValidationError("classifier: token outside vocabulary");
    if (t != 0) toks.push_back(t);
  }
  if (toks.empty()) throw ValidationError("classifier: empty instruction");
  const ad::Var E = tape.leaf(clf.E, grads ? &grads->E : nullptr);
  const ad::Var W = tape.leaf(clf.W, grads ? &grads->W : nullptr);
  const ad::Var b = tape.leaf(clf.b, grads ? &grads->b : nullptr);
  const ad::Var pooled = ad::mean_rows(ad::gather_rows(E, toks));
  return ad::add(ad::matmul(pooled, W), b);
}

Classification classify_instruction(const Classifier& clf, const std::vector<int>& tokens) {
  ad::Tape tape;
  const Mat z = classifier_logits(tape, clf, tokens).value();
  const int k = z(0, 1) > z(0, 0) ? 1 : 0;
  const double m = z.maxCoeff();
  const double p = std::exp(z(0, k) - m) / (std::exp(z(0, 0) - m) + std::exp(z(0, 1) - m));
  return {static_cast<Granularity>(k), p};
}

Routing routing_for(Granularity g) { return Routing::all(g == Granularity::High ? Variant::High : Variant::Low); }

std::vector<double> train_classifier(Classifier& clf, const std::vector<ClassifierSample>& samples,
                                     const ClassifierHparams& hp) {
  if (samples.empty()) throw ValidationError("train_classifier: no samples");
  std::vector<double> curve;
  AdamW opt({hp.lr, 0.9, 0.999, 1e-8, hp.weight_decay});
  Classifier g = clf;
  Rng rng = make_rng(hp.seed, "classifier-order");
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int e = 0; e < hp.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hp.batch_size)) {
      g.E.setZero();
      g.W.setZero();
      g.b.setZero();
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hp.batch_size));
      double loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = samples[order[i]];
        ad::Tape tape;
        const ad::Var l = ad::cross_entropy(classifier_logits(tape, clf, s.tokens, &g), static_cast<int>(s.label));
        loss += l.value()(0, 0);
        tape.backward(l);
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      g.E *= inv;
      g.W *= inv;
      g.b *= inv;
      opt.step({&clf.E, &clf.W, &clf.b}, {&g.E, &g.W, &g.b});
      curve.push_back(loss * inv);
    }
  }
  return curve;
}

double classifier_accuracy(const Classifier& clf, const std::vector<ClassifierSample>& samples) {
  if (samples.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& s : samples) ok += classify_instruction(clf, s.tokens).granularity == s.label;
  return static_cast<double>(ok) / static_cast<double>(samples.size());
}

}  // namespace uln::agent
