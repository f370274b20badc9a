#pragma once

#include "uln/autodiff.hpp"
#include "uln/training.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <vector>

namespace uln::agent {

enum class Granularity { Low = 0, High = 1 };

// Embedding, mean pooling over non-pad tokens, one affine layer to 2 logits.
// Owns its own embedding table, independent of the agent's.
struct Classifier {
  Mat E;  // vocab x d
  Mat W;  // d x 2
  Mat b;  // 1 x 2

  static Classifier init(int vocab, int dim, std::uint64_t seed);
  int vocab() const { return static_cast<int>(E.rows()); }
  int dim() const { return static_cast<int>(E.cols()); }
  std::uint64_t checksum() const;
  nlohmann::json to_json() const;
  static Classifier from_json(const nlohmann::json& j);
};

struct Classification {
  Granularity granularity = Granularity::Low;
  double confidence = 0.5;  // softmax probability of the chosen class
};

ad::Var classifier_logits(ad::Tape& tape, const Classifier& clf, const std::vector<int>& tokens,
                          Classifier* grads = nullptr);
Classification classify_instruction(const Classifier& clf, const std::vector<int>& tokens);
Routing routing_for(Granularity g);

struct ClassifierSample {
  std::vector<int> tokens;
  Granularity label = Granularity::Low;
};

struct ClassifierHparams {
  double lr = 1e-2;
  double weight_decay = 0.0;
  int epochs = 3;
  int batch_size = 16;
  std::uint64_t seed = 0;
};

std::vector<double> train_classifier(Classifier& clf, const std::vector<ClassifierSample>& samples,
                                     const ClassifierHparams& hp);
double classifier_accuracy(const Classifier& clf, const std::vector<ClassifierSample>& samples);

}  // namespace uln::agent
