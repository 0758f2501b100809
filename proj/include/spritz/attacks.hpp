#pragma once

#include <string>
#include <vector>

#include "spritz/graph.hpp"
#include "spritz/metrics.hpp"
#include "spritz/models.hpp"

namespace spritz::attacks {

using nn::Graph;
using nn::Tensor;

enum class Family { Fgsm, Ifgsm, Bim, Pgd, Jsma, Lbfgs, Deepfool, Cw };

const char* family_name(Family f);
Family family_from_string(const std::string& s);  // throws ConfigError

/// Parameters for all eight families in one bag; each family reads only
/// its own fields. `iterations == 0` selects the per-family default cap.
struct AttackConfig {
  Family family = Family::Fgsm;
  double epsilon = 0.1;      // fgsm / ifgsm strength
  int steps = 10;            // ifgsm step count S
  double theta = 0.1;        // jsma per-coordinate change fraction
  double alpha = 16.0;       // pgd L-inf radius, pixel units
  double step_size = 2.0;    // pgd / bim per-step magnitude, pixel units
  double confidence = 0.0;   // cw margin P
  int max_l0 = 400;          // jsma changed-coordinate budget
  int iterations = 0;        // 0 = family default
  double overshoot = 1.02;   // deepfool boundary push
  double cw_lr = 0.05;       // cw Adam learning rate
  double cw_tradeoff = 2e4;  // cw weight on the classifier term
  double lbfgs_c0 = 0.25;    // lbfgs first tradeoff scalar in the ramp
  double lbfgs_fixed_c = 0;  // > 0 pins the scalar (no search)
  bool record_trace = false;

  void validate() const;  // throws ConfigError
  int cap() const;        // iteration cap after defaulting
  /// Row label for reports, e.g. "FGSM(eps=0.1)" or "PGD(default)".
  std::string row_label() const;
};

enum class Status { Success, NoFlip, FailsDegenerate };

const char* status_name(Status s);

struct AttackOutcome {
  Tensor original;
  Tensor adversarial;
  bool success = false;
  Status status = Status::NoFlip;
  double psnr = 0.0;
  double l1 = 0.0;
  double max_abs = 0.0;
  int iterations_used = 0;
  double seconds = 0.0;
  double tradeoff = 0.0;        // lbfgs: scalar that produced adversarial
  std::vector<Tensor> trace;    // iterates, when record_trace is set
};

/// A classifier under attack: batch-of-one forward, prediction with the
/// H1 tie rule, and input gradients of two functionals. `loss` is the
/// wrapped training loss at a given label; `margin` is z1 - z0, so the
/// model says H1 exactly when the margin is >= 0. Both gradients leave
/// model parameters untouched.
class DifferentiableTarget {
 public:
  virtual ~DifferentiableTarget() = default;
  virtual const std::string& id() const = 0;
  virtual models::Prediction predict(const Tensor& x1) = 0;
  virtual nn::LossOut loss(const Tensor& x1, int label) = 0;
  virtual nn::LossOut margin(const Tensor& x1) = 0;
  double range_min() const { return 0.0; }
  double range_max() const { return 255.0; }
};

/// The 2C CNN alone; margin equals the single pre-sigmoid logit.
class Cnn2cTarget : public DifferentiableTarget {
 public:
  explicit Cnn2cTarget(Graph& g);
  const std::string& id() const override { return id_; }
  models::Prediction predict(const Tensor& x1) override;
  nn::LossOut loss(const Tensor& x1, int label) override;
  nn::LossOut margin(const Tensor& x1) override;

 private:
  Graph& g_;
  nn::ExecState st_;
  int logit_ = -1;
  std::string id_ = "2c";
};

/// The full ensemble as one differentiable DAG; gradients flow through
/// the combiner into the 2C flatten and both encoder latents.
class EnsembleTarget : public DifferentiableTarget {
 public:
  explicit EnsembleTarget(const models::EnsembleModel& m);
  const std::string& id() const override { return id_; }
  models::Prediction predict(const Tensor& x1) override;
  nn::LossOut loss(const Tensor& x1, int label) override;
  nn::LossOut margin(const Tensor& x1) override;

 private:
  Graph g_;
  nn::ExecState st_;
  std::string id_ = "ensemble";
};

// Single-example attacks. All expect a batch-of-one H1 example; an input
// the target already calls H0 returns immediate success with zero
// perturbation. Every returned adversarial lies in [0, 255].
AttackOutcome fgsm(DifferentiableTarget& t, const Tensor& x1,
                   const AttackConfig& cfg);
AttackOutcome ifgsm(DifferentiableTarget& t, const Tensor& x1,
                    const AttackConfig& cfg);
AttackOutcome bim(DifferentiableTarget& t, const Tensor& x1,
                  const AttackConfig& cfg);
AttackOutcome pgd(DifferentiableTarget& t, const Tensor& x1,
                  const AttackConfig& cfg);
AttackOutcome jsma(DifferentiableTarget& t, const Tensor& x1,
                   const AttackConfig& cfg);
AttackOutcome lbfgs(DifferentiableTarget& t, const Tensor& x1,
                    const AttackConfig& cfg);
AttackOutcome deepfool(DifferentiableTarget& t, const Tensor& x1,
                       const AttackConfig& cfg);
AttackOutcome cw(DifferentiableTarget& t, const Tensor& x1,
                 const AttackConfig& cfg);

/// Validates the config and dispatches on `cfg.family`.
AttackOutcome attack_one(DifferentiableTarget& t, const Tensor& x1,
                         const AttackConfig& cfg);

struct BatchResult {
  std::vector<AttackOutcome> outcomes;
  metrics::CampaignReport report;
};

/// Attacks every example of the batch {N,1,64,64} independently and
/// aggregates. Callers pass examples the target classifies H1.
BatchResult attack_batch(DifferentiableTarget& t, const Tensor& xs,
                         const AttackConfig& cfg);

}  // namespace spritz::attacks
