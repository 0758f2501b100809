#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spritz/graph.hpp"

namespace spritz::models {

using nn::ExecState;
using nn::Graph;
using nn::Tensor;

constexpr int kImageSide = 64;
constexpr int kFlattenWidth = 1728;
constexpr int kLatentWidth = 512;
constexpr int kCombinerInWidth = 2752;

/// Two-class CNN over {1,64,64} grids: nine 3x3 stride-1 convolutions in
/// groups of 3/2/2/2 with 2x2 stride-2 max-pooling between groups,
/// a 1728-wide "flatten" tap, a single dense logit ("logit") and a
/// sigmoid head ("prob"). Class 1 is malicious.
Graph build_cnn2c(uint64_t seed);

/// One-class convolutional auto-encoder: four stride-2 conv+BN+relu
/// encoder stages (64 -> 4), a dense 512-wide "latent" tap, a mirrored
/// transposed-conv decoder and a linear 3x3 output conv. Output shape
/// equals the input shape.
Graph build_autoencoder(const std::string& name, uint64_t seed);

/// Dense combiner 2752 -> 128 -> relu -> 2 ("logits") over concatenated
/// ensemble features. Class order of the logits is {H0, H1}.
Graph build_combiner(uint64_t seed);

/// The ensemble: the 2C CNN, one auto-encoder per class with its
/// reconstruction-error acceptance threshold, and the combiner.
struct EnsembleModel {
  Graph cnn2c;
  Graph ae_leg;
  Graph ae_mal;
  Graph combiner;
  double thr_leg = 0.0;
  double thr_mal = 0.0;
  bool combiner_trained = false;
};

/// Builds all four graphs with parameter seeds derived from the master
/// seed and each graph's name.
EnsembleModel build_ensemble(uint64_t master_seed);

/// Combiner input features, one row per example:
/// concat(2C flatten[1728], leg latent[512], mal latent[512]) — width
/// 2752, in exactly that order. Rows are computed one example at a time
/// so they are bit-identical wherever else single-example inference runs.
Tensor ensemble_features(EnsembleModel& m, const Tensor& x);

/// Per-example mean squared reconstruction error. Each example is run
/// alone so batch composition cannot perturb the values.
std::vector<double> reconstruction_error(Graph& ae, const Tensor& x);

struct OneClassDecision {
  bool accept = false;
  double error = 0.0;
};

/// Accepts iff error <= threshold (the boundary belongs to the accept
/// region). `x1` is a single example {1,1,64,64}.
OneClassDecision oneclass_decide(Graph& ae, double threshold,
                                 const Tensor& x1);

struct Prediction {
  int label = 0;  // 0 = H0 (pristine), 1 = H1 (malicious)
  double p0 = 0.0;
  double p1 = 0.0;
};

/// Standalone 2C decision: sigmoid(logit) >= 0.5 -> H1.
Prediction cnn2c_predict(Graph& g, const Tensor& x1);

/// Full ensemble decision: softmax over combiner logits; an exact
/// 0.5/0.5 tie classifies as H1 (fail closed).
Prediction ensemble_predict(EnsembleModel& m, const Tensor& x1);

/// One DAG from the input grid through the 2C flatten, both encoder
/// latents and the combiner to the 2-way logits. Node names gain
/// "c2_"/"leg_"/"mal_"/"cmb_" prefixes; parameters are copied. Used for
/// end-to-end gradients.
Graph compose_ensemble_graph(const EnsembleModel& m);

}  // namespace spritz::models
