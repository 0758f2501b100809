#include "spritz/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "spritz/errors.hpp"
#include "spritz/rng.hpp"

namespace spritz::train {

using nn::ExecState;
using nn::LossOut;

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0))
    throw ConfigError("TrainConfig: learning_rate must be > 0");
  if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0))
    throw ConfigError("TrainConfig: adam_beta1 must be in (0,1)");
  if (!(adam_beta2 > 0.0 && adam_beta2 < 1.0))
    throw ConfigError("TrainConfig: adam_beta2 must be in (0,1)");
  if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("TrainConfig: epochs must be >= 0");
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

Split split_dataset(const Dataset& ds, const SplitSpec& spec, uint64_t seed) {
  if (spec.train_per_class < 0 || spec.val_per_class < 0 ||
      spec.test_per_class < 0)
    throw ConfigError("split_dataset: negative split count");
  const int need = spec.train_per_class + spec.val_per_class +
                   spec.test_per_class;
  std::vector<int> pool[2];
  for (int i = 0; i < ds.size(); ++i)
    pool[ds.items[i].label == 1].push_back(i);
  for (int c = 0; c < 2; ++c) {
    if (static_cast<int>(pool[c].size()) < need)
      throw ConfigError("split_dataset: class H" + std::to_string(c) +
                        " has " + std::to_string(pool[c].size()) +
                        " examples, need " + std::to_string(need));
    Rng r(mix_seed(seed, fnv1a("split/H" + std::to_string(c))));
    r.shuffle(pool[c]);
  }

  Split out;
  auto take = [&](Dataset& dst, int begin, int count) {
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < count; ++i)
        dst.items.push_back(ds.items[pool[c][begin + i]]);
  };
  take(out.train, 0, spec.train_per_class);
  take(out.val, spec.train_per_class, spec.val_per_class);
  take(out.test, spec.train_per_class + spec.val_per_class,
       spec.test_per_class);
  return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

AdamState make_adam_state(const std::vector<Param*>& params) {
  AdamState st;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const Param* p : params) {
    st.m.push_back(Tensor::zeros(p->value.shape));
    st.v.push_back(Tensor::zeros(p->value.shape));
  }
  return st;
}

void adam_step(const std::vector<Param*>& params, AdamState& state,
               const TrainConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeError("adam_step: state holds " +
                     std::to_string(state.m.size()) + " tensors for " +
                     std::to_string(params.size()) + " parameters");
  constexpr double eps = 1e-8;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, double(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    if (!m.same_shape(p.value) || !v.same_shape(p.value))
      throw ShapeError("adam_step: state tensor " + std::to_string(i) +
                       " has shape " + nn::shape_str(m.shape) +
                       ", parameter has " + nn::shape_str(p.value.shape));
    const int64_t n = p.value.numel();
    for (int64_t j = 0; j < n; ++j) {
      const double g = p.grad.data[j];
      m.data[j] = cfg.adam_beta1 * m.data[j] + (1.0 - cfg.adam_beta1) * g;
      v.data[j] = cfg.adam_beta2 * v.data[j] + (1.0 - cfg.adam_beta2) * g * g;
      p.value.data[j] -= cfg.learning_rate * (m.data[j] / bc1) /
                         (std::sqrt(v.data[j] / bc2) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Loop plumbing
// ---------------------------------------------------------------------------

namespace {

std::vector<Tensor> snapshot(Graph& g) {
  std::vector<Tensor> out;
  for (const Tensor* t : g.state_tensors()) out.push_back(*t);
  return out;
}

void restore(Graph& g, const std::vector<Tensor>& snap) {
  auto ts = g.state_tensors();
  for (size_t i = 0; i < ts.size(); ++i) *ts[i] = snap[i];
}

std::vector<int> iota_idx(int n) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

void check_finite_loss(double loss, const char* who, int epoch) {
  if (!std::isfinite(loss))
    throw NumericalError(std::string(who) + ": loss diverged at epoch " +
                         std::to_string(epoch));
}

EvalResult finish_counts(EvalResult r) {
  const int64_t total = r.counts[0][0] + r.counts[0][1] + r.counts[1][0] +
                        r.counts[1][1];
  const int64_t n0 = r.counts[0][0] + r.counts[0][1];
  const int64_t n1 = r.counts[1][0] + r.counts[1][1];
  r.accuracy = double(r.counts[0][0] + r.counts[1][1]) / double(total);
  r.p_fa = n0 ? double(r.counts[0][1]) / double(n0) : 0.0;
  r.p_md = n1 ? double(r.counts[1][0]) / double(n1) : 0.0;
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// 2C
// ---------------------------------------------------------------------------

TrainResult train_2c(Graph& g, const Dataset& train, const Dataset& val,
                     const TrainConfig& cfg) {
  cfg.validate();
  if (train.size() == 0) throw ConfigError("train_2c: empty training set");
  if (cfg.epochs > 0 && val.size() == 0)
    throw ConfigError("train_2c: empty validation set");

  const int logit = g.node_id("logit");
  AdamState adam = make_adam_state(g.params());
  Rng order(mix_seed(cfg.seed, fnv1a("train/" + g.name())));
  std::vector<int> idx = iota_idx(train.size());

  TrainResult res;
  std::vector<Tensor> best;
  double best_acc = -1.0;
  ExecState st;
  std::vector<int> labels;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order.shuffle(idx);
    double loss_sum = 0.0;
    for (int b0 = 0; b0 < train.size(); b0 += cfg.batch_size) {
      const int bn = std::min(cfg.batch_size, train.size() - b0);
      Tensor x = train.gather(idx, b0, bn, &labels);
      g.forward(st, x, true);
      LossOut lo = nn::bce_with_logits(g.act(st, logit), labels);
      check_finite_loss(lo.value, "train_2c", epoch);
      loss_sum += lo.value * bn;
      g.zero_grads();
      g.backward(st, lo.grad, logit, true, false);
      adam_step(g.params(), adam, cfg);
    }
    const double acc = evaluate_2c(g, val).accuracy;
    res.history.push_back({epoch, loss_sum / train.size(), acc});
    if (acc > best_acc) {
      best_acc = acc;
      res.best_epoch = epoch;
      best = snapshot(g);
    }
  }
  if (cfg.epochs > 0) {
    restore(g, best);
    res.best_val = best_acc;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Auto-encoders
// ---------------------------------------------------------------------------

static void require_single_class(const Dataset& ds, const char* who) {
  for (const auto& e : ds.items)
    if (e.label != ds.items.front().label)
      throw ConfigError(std::string(who) + ": expected single-class data");
}

static double mean_recon_error(Graph& g, const Dataset& ds) {
  Tensor all = ds.gather(iota_idx(ds.size()), 0, ds.size());
  const std::vector<double> errs = models::reconstruction_error(g, all);
  double s = 0.0;
  for (double e : errs) s += e;
  return s / double(errs.size());
}

TrainResult train_autoencoder(Graph& g, const Dataset& train_set,
                              const Dataset& val, const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.size() == 0)
    throw ConfigError("train_autoencoder: empty training set");
  if (cfg.epochs > 0 && val.size() == 0)
    throw ConfigError("train_autoencoder: empty validation set");
  require_single_class(train_set, "train_autoencoder");
  if (val.size() && train_set.size() &&
      val.items.front().label != train_set.items.front().label)
    throw ConfigError("train_autoencoder: validation class differs from "
                      "training class");

  AdamState adam = make_adam_state(g.params());
  Rng order(mix_seed(cfg.seed, fnv1a("train/" + g.name())));
  std::vector<int> idx = iota_idx(train_set.size());

  TrainResult res;
  std::vector<Tensor> best;
  double best_mse = std::numeric_limits<double>::infinity();
  ExecState st;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order.shuffle(idx);
    double loss_sum = 0.0;
    for (int b0 = 0; b0 < train_set.size(); b0 += cfg.batch_size) {
      const int bn = std::min(cfg.batch_size, train_set.size() - b0);
      Tensor x = train_set.gather(idx, b0, bn);
      const Tensor& recon = g.forward(st, x, true);
      LossOut lo = nn::mse(recon, x);
      check_finite_loss(lo.value, "train_autoencoder", epoch);
      loss_sum += lo.value * bn;
      g.zero_grads();
      g.backward(st, lo.grad, -1, true, false);
      adam_step(g.params(), adam, cfg);
    }
    const double vmse = mean_recon_error(g, val);
    res.history.push_back({epoch, loss_sum / train_set.size(), vmse});
    if (vmse < best_mse) {
      best_mse = vmse;
      res.best_epoch = epoch;
      best = snapshot(g);
    }
  }
  if (cfg.epochs > 0) {
    restore(g, best);
    res.best_val = best_mse;
  }
  return res;
}

double nearest_rank(std::vector<double> values, double percentile) {
  if (values.empty()) throw ConfigError("nearest_rank: empty value set");
  if (!(percentile >= 0.0 && percentile <= 100.0))
    throw ConfigError("nearest_rank: percentile must be in [0,100]");
  std::sort(values.begin(), values.end());
  const int n = static_cast<int>(values.size());
  int rank = static_cast<int>(std::ceil(percentile / 100.0 * n));
  rank = std::clamp(rank, 1, n);
  return values[rank - 1];
}

double calibrate_threshold(Graph& ae, const Dataset& calib,
                           double percentile) {
  if (calib.size() == 0)
    throw ConfigError("calibrate_threshold: empty calibration set");
  Tensor all = calib.gather(iota_idx(calib.size()), 0, calib.size());
  return nearest_rank(models::reconstruction_error(ae, all), percentile);
}

// ---------------------------------------------------------------------------
// Combiner
// ---------------------------------------------------------------------------

static Tensor gather_rows(const Tensor& feats, const std::vector<int>& labels,
                          const std::vector<int>& idx, int begin, int n,
                          std::vector<int>& out_labels) {
  const int width = feats.shape[1];
  Tensor x;
  x.resize_nofill({n, width});
  out_labels.resize(n);
  for (int i = 0; i < n; ++i) {
    const int s = idx[begin + i];
    std::memcpy(x.ptr() + static_cast<int64_t>(i) * width,
                feats.ptr() + static_cast<int64_t>(s) * width,
                sizeof(double) * width);
    out_labels[i] = labels[s];
  }
  return x;
}

static Tensor dataset_features(models::EnsembleModel& m, const Dataset& ds,
                               std::vector<int>* labels) {
  Tensor x = ds.gather(iota_idx(ds.size()), 0, ds.size(), labels);
  return models::ensemble_features(m, x);
}

static double combiner_accuracy(Graph& cmb, const Tensor& feats,
                                const std::vector<int>& labels) {
  ExecState st;
  const Tensor& logits = cmb.forward(st, feats);
  int64_t ok = 0;
  const int n = feats.shape[0];
  for (int i = 0; i < n; ++i) {
    const double z0 = logits.data[2 * i], z1 = logits.data[2 * i + 1];
    ok += ((z1 >= z0 ? 1 : 0) == labels[i]);
  }
  return double(ok) / double(n);
}

TrainResult train_combiner(models::EnsembleModel& m, const Dataset& train,
                           const Dataset& val, const TrainConfig& cfg) {
  cfg.validate();
  if (train.size() == 0) throw ConfigError("train_combiner: empty training set");
  if (cfg.epochs > 0 && val.size() == 0)
    throw ConfigError("train_combiner: empty validation set");
  if (m.combiner.input_shape() !=
      std::vector<int>{models::kCombinerInWidth})
    throw ShapeError("train_combiner: combiner consumes " +
                     nn::shape_str(m.combiner.input_shape()) +
                     ", ensemble features are {" +
                     std::to_string(models::kCombinerInWidth) + "}");

  std::vector<int> train_labels, val_labels;
  const Tensor train_feats = dataset_features(m, train, &train_labels);
  const Tensor val_feats = dataset_features(m, val, &val_labels);

  AdamState adam = make_adam_state(m.combiner.params());
  Rng order(mix_seed(cfg.seed, fnv1a("train/" + m.combiner.name())));
  std::vector<int> idx = iota_idx(train.size());

  TrainResult res;
  std::vector<Tensor> best;
  double best_acc = -1.0;
  ExecState st;
  std::vector<int> labels;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order.shuffle(idx);
    double loss_sum = 0.0;
    for (int b0 = 0; b0 < train.size(); b0 += cfg.batch_size) {
      const int bn = std::min(cfg.batch_size, train.size() - b0);
      Tensor x = gather_rows(train_feats, train_labels, idx, b0, bn, labels);
      const Tensor& logits = m.combiner.forward(st, x, true);
      LossOut lo = nn::softmax_ce2(logits, labels);
      check_finite_loss(lo.value, "train_combiner", epoch);
      loss_sum += lo.value * bn;
      m.combiner.zero_grads();
      m.combiner.backward(st, lo.grad, -1, true, false);
      adam_step(m.combiner.params(), adam, cfg);
    }
    const double acc = combiner_accuracy(m.combiner, val_feats, val_labels);
    res.history.push_back({epoch, loss_sum / train.size(), acc});
    if (acc > best_acc) {
      best_acc = acc;
      res.best_epoch = epoch;
      best = snapshot(m.combiner);
    }
  }
  if (cfg.epochs > 0) {
    restore(m.combiner, best);
    res.best_val = best_acc;
    m.combiner_trained = true;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

EvalResult evaluate_2c(Graph& g, const Dataset& test) {
  if (test.size() == 0) throw ConfigError("evaluate_2c: empty test set");
  EvalResult r;
  ExecState st;
  const int prob = g.node_id("prob");
  std::vector<int> idx = iota_idx(test.size());
  std::vector<int> labels;
  constexpr int chunk = 50;
  for (int b0 = 0; b0 < test.size(); b0 += chunk) {
    const int bn = std::min(chunk, test.size() - b0);
    Tensor x = test.gather(idx, b0, bn, &labels);
    g.forward(st, x);
    const Tensor& p = g.act(st, prob);
    for (int i = 0; i < bn; ++i)
      r.counts[labels[i]][p.data[i] >= 0.5 ? 1 : 0] += 1;
  }
  return finish_counts(r);
}

EvalResult evaluate_ensemble(models::EnsembleModel& m, const Dataset& test) {
  if (test.size() == 0) throw ConfigError("evaluate_ensemble: empty test set");
  EvalResult r;
  std::vector<int> idx = iota_idx(test.size());
  for (int i = 0; i < test.size(); ++i) {
    Tensor x = test.gather(idx, i, 1);
    const models::Prediction p = models::ensemble_predict(m, x);
    r.counts[test.items[i].label][p.label] += 1;
  }
  return finish_counts(r);
}

EvalResult evaluate_oneclass(Graph& ae, double threshold, int own_label,
                             const Dataset& test) {
  if (test.size() == 0) throw ConfigError("evaluate_oneclass: empty test set");
  if (own_label != 0 && own_label != 1)
    throw ConfigError("evaluate_oneclass: own_label must be 0 or 1");
  EvalResult r;
  std::vector<int> idx = iota_idx(test.size());
  for (int i = 0; i < test.size(); ++i) {
    Tensor x = test.gather(idx, i, 1);
    const auto d = models::oneclass_decide(ae, threshold, x);
    const int pred = d.accept ? own_label : 1 - own_label;
    r.counts[test.items[i].label][pred] += 1;
  }
  return finish_counts(r);
}

void write_history_csv(const std::string& path,
                       const std::vector<EpochStat>& history) {
  std::ofstream out(path);
  if (!out) throw ParseError("write_history_csv: cannot open '" + path + "'");
  out << "epoch,train_loss,val_metric\n";
  out.precision(17);
  for (const auto& h : history)
    out << h.epoch << ',' << h.train_loss << ',' << h.val_metric << '\n';
}

}  // namespace spritz::train
