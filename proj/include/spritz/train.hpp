#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spritz/dataio.hpp"
#include "spritz/graph.hpp"
#include "spritz/models.hpp"

namespace spritz::train {

using dataio::Dataset;
using nn::Graph;
using nn::Param;
using nn::Tensor;

struct TrainConfig {
  double learning_rate = 1e-4;
  double adam_beta1 = 0.99;
  double adam_beta2 = 0.999;
  int batch_size = 16;
  int epochs = 30;
  uint64_t seed = 1;

  void validate() const;  // ConfigError on violation
};

struct SplitSpec {
  int train_per_class = 2000;
  int val_per_class = 250;
  int test_per_class = 500;
};

struct Split {
  Dataset train, val, test;
};

/// Deterministic per-class shuffle then consecutive slices. Raises
/// ConfigError naming the class that falls short.
Split split_dataset(const Dataset& ds, const SplitSpec& spec, uint64_t seed);

/// First and second moment estimates, parallel to the parameter list.
struct AdamState {
  std::vector<Tensor> m, v;
  int64_t step = 0;
};

AdamState make_adam_state(const std::vector<Param*>& params);

/// Bias-corrected Adam update reading Param::grad; increments the step
/// counter. ShapeError if the state does not match the parameters.
void adam_step(const std::vector<Param*>& params, AdamState& state,
               const TrainConfig& cfg);

struct EpochStat {
  int epoch = 0;          // 1-based
  double train_loss = 0;  // mean over examples
  double val_metric = 0;  // accuracy (classifiers) or MSE (auto-encoders)
};

struct TrainResult {
  std::vector<EpochStat> history;
  int best_epoch = 0;  // 0 when epochs == 0
  double best_val = 0;
};

/// Binary cross-entropy at the logit tap; per-epoch validation accuracy;
/// the best-validation weights are restored before returning.
TrainResult train_2c(Graph& g, const Dataset& train, const Dataset& val,
                     const TrainConfig& cfg);

/// Mean squared reconstruction error; `train_set` must be single-class.
/// Best-validation-loss weights are restored before returning.
TrainResult train_autoencoder(Graph& g, const Dataset& train_set,
                              const Dataset& val, const TrainConfig& cfg);

/// Nearest-rank percentile: rank = ceil(p/100 * n) clamped to [1, n].
double nearest_rank(std::vector<double> values, double percentile);

/// Nearest-rank percentile of per-example reconstruction errors.
double calibrate_threshold(Graph& ae, const Dataset& calib, double percentile);

/// Softmax cross-entropy over cached 2752-wide features. Only combiner
/// parameters move; the extractors are read once and never written.
TrainResult train_combiner(models::EnsembleModel& m, const Dataset& train,
                           const Dataset& val, const TrainConfig& cfg);

struct EvalResult {
  double accuracy = 0;
  // counts[truth][prediction], truth/prediction in {0 = H0, 1 = H1}
  int64_t counts[2][2] = {{0, 0}, {0, 0}};
  double p_md = 0;  // malicious examples predicted pristine
  double p_fa = 0;  // pristine examples predicted malicious
};

EvalResult evaluate_2c(Graph& g, const Dataset& test);
EvalResult evaluate_ensemble(models::EnsembleModel& m, const Dataset& test);
/// One-class accuracy: predicts `own_label` iff the example is accepted.
EvalResult evaluate_oneclass(Graph& ae, double threshold, int own_label,
                             const Dataset& test);

void write_history_csv(const std::string& path,
                       const std::vector<EpochStat>& history);

}  // namespace spritz::train
