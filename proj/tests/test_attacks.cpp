#include <cmath>
#include <numeric>
#include <set>

#include <doctest.h>

#include "spritz/attacks.hpp"
#include "spritz/dataio.hpp"
#include "spritz/errors.hpp"
#include "spritz/models.hpp"

using namespace spritz;
using namespace spritz::attacks;
using nn::Tensor;

namespace {

double softplus(double z) {
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

/// Logistic classifier over a flat vector: margin = w.x + b. Gradients
/// are exact, which makes every greedy/closed-form oracle computable by
/// hand.
struct LinearTarget : DifferentiableTarget {
  std::vector<double> w;
  double b = 0.0;
  std::string id_ = "toy";

  LinearTarget(std::vector<double> w_, double b_) : w(std::move(w_)), b(b_) {}

  double m(const Tensor& x) const {
    double z = b;
    for (size_t i = 0; i < w.size(); ++i) z += w[i] * x.data[i];
    return z;
  }
  const std::string& id() const override { return id_; }
  models::Prediction predict(const Tensor& x) override {
    models::Prediction p;
    p.p1 = nn::sigmoid(m(x));
    p.p0 = 1.0 - p.p1;
    p.label = p.p1 >= 0.5 ? 1 : 0;
    return p;
  }
  nn::LossOut loss(const Tensor& x, int label) override {
    const double z = m(x);
    nn::LossOut o;
    o.grad = Tensor::zeros(x.shape);
    const double dz = label == 1 ? -nn::sigmoid(-z) : nn::sigmoid(z);
    o.value = label == 1 ? softplus(-z) : softplus(z);
    for (size_t i = 0; i < w.size(); ++i) o.grad.data[i] = dz * w[i];
    return o;
  }
  nn::LossOut margin(const Tensor& x) override {
    nn::LossOut o;
    o.value = m(x);
    o.grad = Tensor::zeros(x.shape);
    for (size_t i = 0; i < w.size(); ++i) o.grad.data[i] = w[i];
    return o;
  }
};

/// A synthetic H1 example the target also calls H1. Untrained nets can
/// score every sample H0, so when the scan comes up empty the first
/// H1-labelled example is pushed across the boundary by margin ascent.
Tensor h1_example(DifferentiableTarget& t, uint64_t seed = 11) {
  dataio::Dataset ds = dataio::synth_dataset(8, 0.0, seed);
  std::vector<int> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  Tensor fallback;
  for (int i = 0; i < ds.size(); ++i) {
    if (ds.items[i].label != 1) continue;
    Tensor x = ds.gather(idx, i, 1);
    if (t.predict(x).label == 1) return x;
    if (fallback.numel() == 0) fallback = x;
  }
  for (int k = 0; k < 400; ++k) {
    if (t.predict(fallback).label == 1) return fallback;
    nn::LossOut mg = t.margin(fallback);
    for (int64_t i = 0; i < fallback.numel(); ++i) {
      const double dir = mg.grad.data[i] > 0 ? 1.0 : (mg.grad.data[i] < 0 ? -1.0 : 0.0);
      fallback.data[i] = std::min(std::max(fallback.data[i] + 2.0 * dir, 0.0), 255.0);
    }
  }
  throw std::runtime_error("no H1-classified synthetic example");
}

int count_changed(const Tensor& a, const Tensor& b) {
  int n = 0;
  for (int64_t i = 0; i < a.numel(); ++i) n += a.data[i] != b.data[i];
  return n;
}

}  // namespace

TEST_CASE("fgsm closed form on a linear classifier") {
  LinearTarget t({-0.02, 0.02}, -3.0);
  Tensor x = Tensor::from({1, 2}, {0.0, 255.0});
  REQUIRE(t.predict(x).label == 1);

  AttackConfig cfg;
  cfg.family = Family::Fgsm;
  cfg.epsilon = 0.1;
  AttackOutcome o = fgsm(t, x, cfg);
  CHECK(o.adversarial.data[0] == doctest::Approx(25.5).epsilon(1e-12));
  CHECK(o.adversarial.data[1] == doctest::Approx(229.5).epsilon(1e-12));
  CHECK(o.iterations_used == 1);
  CHECK(!o.success);  // margin still positive after this nudge
  CHECK(o.status == Status::NoFlip);
  // unclipped coordinates move by exactly eps * (max - min)
  const double sc = cfg.epsilon * 255.0;
  CHECK(std::abs(o.adversarial.data[0] - x.data[0]) == sc);
  CHECK(o.max_abs == sc);

  cfg.epsilon = 0.0;
  AttackOutcome zero = fgsm(t, x, cfg);
  CHECK(zero.adversarial.data == x.data);
  CHECK(!zero.success);
  CHECK(std::isinf(zero.psnr));

  // a strong enough nudge flips it
  cfg.epsilon = 0.9;
  CHECK(fgsm(t, x, cfg).success);

  LinearTarget flat({0.0, 0.0}, 2.0);
  AttackOutcome d = fgsm(flat, x, cfg);
  CHECK(d.status == Status::FailsDegenerate);
  CHECK(d.adversarial.data == x.data);
}

TEST_CASE("ifgsm: one step is fgsm, iterates respect the step bound") {
  LinearTarget t({-0.02, 0.02}, -3.0);
  Tensor x = Tensor::from({1, 2}, {0.0, 255.0});

  AttackConfig cfg;
  cfg.family = Family::Ifgsm;
  cfg.epsilon = 0.1;
  cfg.steps = 1;
  AttackOutcome one = ifgsm(t, x, cfg);
  AttackConfig fcfg = cfg;
  fcfg.family = Family::Fgsm;
  AttackOutcome fg = fgsm(t, x, fcfg);
  CHECK(one.adversarial.data == fg.adversarial.data);
  CHECK(one.iterations_used == fg.iterations_used);
  CHECK(one.status == fg.status);

  cfg.steps = 6;
  cfg.epsilon = 0.05;
  cfg.record_trace = true;
  AttackOutcome it = ifgsm(t, x, cfg);
  CHECK(it.iterations_used >= 2);
  const Tensor* prev = &x;
  for (const Tensor& step : it.trace) {
    double span = 0;
    double lo = prev->data[0], hi = prev->data[0];
    for (double v : prev->data) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    span = hi - lo;
    for (int64_t i = 0; i < step.numel(); ++i) {
      // rounding of x + s*span can overshoot s*span by one ulp
      CHECK(std::abs(step.data[i] - prev->data[i]) <= cfg.epsilon * span + 1e-9);
      CHECK(step.data[i] >= 0.0);
      CHECK(step.data[i] <= 255.0);
    }
    prev = &step;
  }

  cfg.epsilon = 0.3;
  AttackOutcome win = ifgsm(t, x, cfg);
  CHECK(win.success);
  CHECK(win.iterations_used < cfg.steps);  // stopped early
}

TEST_CASE("bim clips every iterate to the original range") {
  LinearTarget t({0.04, -0.05, 0.06}, 0.0);
  Tensor x = Tensor::from({1, 3}, {40.0, 90.0, 60.0});
  REQUIRE(t.predict(x).label == 1);

  AttackConfig cfg;
  cfg.family = Family::Bim;
  cfg.step_size = 7.0;
  cfg.iterations = 12;
  cfg.record_trace = true;
  AttackOutcome o = bim(t, x, cfg);
  for (const Tensor& step : o.trace)
    for (double v : step.data) {
      CHECK(v >= 40.0);
      CHECK(v <= 90.0);
    }
  CHECK(o.success);

  LinearTarget flat({0.0, 0.0, 0.0}, 1.0);
  AttackOutcome d = bim(flat, x, cfg);
  CHECK(d.status == Status::FailsDegenerate);
  CHECK(d.adversarial.data == x.data);
}

TEST_CASE("pgd stays inside the ball, rejects bad configs") {
  AttackConfig bad;
  bad.family = Family::Pgd;
  bad.alpha = 0.0;
  LinearTarget t({0.03, -0.02}, -1.0);
  Tensor x = Tensor::from({1, 2}, {120.0, 80.0});
  CHECK_THROWS_AS(pgd(t, x, bad), ConfigError);
  bad.alpha = 2.0;
  bad.step_size = 2.0;  // step must be strictly smaller
  CHECK_THROWS_AS(pgd(t, x, bad), ConfigError);

  AttackConfig cfg;
  cfg.family = Family::Pgd;
  cfg.alpha = 5.0;
  cfg.step_size = 1.5;
  cfg.iterations = 25;
  cfg.record_trace = true;
  AttackOutcome o = pgd(t, x, cfg);
  for (const Tensor& step : o.trace)
    for (int64_t i = 0; i < step.numel(); ++i) {
      CHECK(std::abs(step.data[i] - x.data[i]) <= cfg.alpha);
      CHECK(step.data[i] >= 0.0);
      CHECK(step.data[i] <= 255.0);
    }
  CHECK(o.max_abs <= cfg.alpha);

  // the same contract on the real CNN input scale
  models::EnsembleModel em = models::build_ensemble(21);
  Cnn2cTarget ct(em.cnn2c);
  Tensor img = h1_example(ct);
  cfg.alpha = 16.0;
  cfg.step_size = 2.0;
  cfg.iterations = 6;
  AttackOutcome oc = pgd(ct, img, cfg);
  for (const Tensor& step : oc.trace)
    for (int64_t i = 0; i < step.numel(); ++i) {
      CHECK(std::abs(step.data[i] - img.data[i]) <= cfg.alpha);
      CHECK(step.data[i] >= 0.0);
      CHECK(step.data[i] <= 255.0);
    }
}

TEST_CASE("jsma greedy choice matches exhaustive search") {
  LinearTarget t({0.008, -0.005, 0.003, -0.001}, 0.25);
  Tensor x = Tensor::from({1, 4}, {100.0, 150.0, 80.0, 200.0});
  REQUIRE(t.predict(x).label == 1);

  AttackConfig cfg;
  cfg.family = Family::Jsma;
  cfg.theta = 0.2;
  cfg.max_l0 = 3;
  AttackOutcome o = jsma(t, x, cfg);
  CHECK(count_changed(x, o.adversarial) <= cfg.max_l0);

  // replay the greedy loop with a brute-force candidate scan
  Tensor sim = x;
  std::set<int> touched;
  for (int s = 0; s < cfg.max_l0; ++s) {
    if (t.m(sim) < 0) break;
    double lo = sim.data[0], hi = sim.data[0];
    for (double v : sim.data) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const double mag = cfg.theta * (hi - lo);
    int best = -1;
    double best_gain = 0, best_val = 0;
    for (int i = 0; i < 4; ++i) {
      if (touched.count(i) || t.w[i] == 0.0) continue;
      const double dir = t.w[i] > 0 ? -1.0 : 1.0;
      const double moved =
          std::min(std::max(sim.data[i] + dir * mag, 0.0), 255.0);
      const double gain = -t.w[i] * (moved - sim.data[i]);
      if (gain > best_gain) {
        best = i;
        best_gain = gain;
        best_val = moved;
      }
    }
    if (best < 0) break;
    sim.data[best] = best_val;
    touched.insert(best);
  }
  CHECK(o.adversarial.data == sim.data);

  AttackConfig badtheta = cfg;
  badtheta.theta = 1.0;
  CHECK_THROWS_AS(jsma(t, x, badtheta), ConfigError);
  badtheta.theta = 0.0;
  CHECK_THROWS_AS(jsma(t, x, badtheta), ConfigError);

  LinearTarget flat({0.0, 0.0, 0.0, 0.0}, 0.5);
  AttackOutcome d = jsma(flat, x, cfg);
  CHECK(d.status == Status::FailsDegenerate);
}

TEST_CASE("jsma L0 budget holds on the CNN") {
  models::EnsembleModel em = models::build_ensemble(23);
  Cnn2cTarget ct(em.cnn2c);
  Tensor img = h1_example(ct);
  AttackConfig cfg;
  cfg.family = Family::Jsma;
  cfg.theta = 0.1;
  cfg.max_l0 = 20;
  AttackOutcome o = jsma(ct, img, cfg);
  CHECK(count_changed(img, o.adversarial) <= 20);
  CHECK(o.iterations_used <= 20);
  for (double v : o.adversarial.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 255.0);
  }
}

TEST_CASE("lbfgs returns the smallest flipping tradeoff scalar") {
  LinearTarget t({0.1, -0.12}, -0.4);
  Tensor x = Tensor::from({1, 2}, {50.0, 30.0});
  REQUIRE(t.predict(x).label == 1);

  AttackConfig cfg;
  cfg.family = Family::Lbfgs;
  AttackOutcome o = lbfgs(t, x, cfg);
  REQUIRE(o.success);
  CHECK(o.tradeoff > 0);
  CHECK(o.max_abs < 60.0);

  // grid re-verification: half the returned scalar no longer flips,
  // the returned scalar reproduces the flip
  AttackConfig half = cfg;
  half.lbfgs_fixed_c = o.tradeoff / 2.0;
  CHECK(!lbfgs(t, x, half).success);
  AttackConfig same = cfg;
  same.lbfgs_fixed_c = o.tradeoff;
  AttackOutcome rerun = lbfgs(t, x, same);
  CHECK(rerun.success);
  CHECK(rerun.adversarial.data == o.adversarial.data);

  // an input already past the boundary is a free optimum
  LinearTarget done({0.1, -0.12}, -100.0);
  AttackOutcome free = lbfgs(done, x, cfg);
  CHECK(free.success);
  CHECK(free.adversarial.data == x.data);
  CHECK(std::isinf(free.psnr));
  CHECK(free.iterations_used == 0);
}

TEST_CASE("deepfool matches the hyperplane projection") {
  const std::vector<double> w = {0.03, -0.04, 0.05};
  LinearTarget t(w, -5.0);
  Tensor x = Tensor::from({1, 3}, {120.0, 130.0, 140.0});
  const double m0 = t.m(x);
  REQUIRE(m0 > 0);

  AttackConfig cfg;
  cfg.family = Family::Deepfool;
  AttackOutcome o = deepfool(t, x, cfg);
  CHECK(o.success);
  CHECK(o.iterations_used == 1);
  const double w2 = 0.03 * 0.03 + 0.04 * 0.04 + 0.05 * 0.05;
  for (int i = 0; i < 3; ++i) {
    const double closed = x.data[i] + cfg.overshoot * (-m0 / w2) * w[i];
    CHECK(std::abs(o.adversarial.data[i] - closed) < 1e-6);
  }

  // on the boundary the required push is negligible
  LinearTarget edge(w, -5.0 - m0 + 1e-9);
  AttackOutcome tiny = deepfool(edge, x, cfg);
  CHECK(tiny.success);
  CHECK(tiny.max_abs < 1e-5);
}

TEST_CASE("cw decodes into the box and honors the confidence margin") {
  LinearTarget t({0.1, -0.12}, -0.4);
  Tensor x = Tensor::from({1, 2}, {50.0, 30.0});

  AttackConfig cfg;
  cfg.family = Family::Cw;
  cfg.record_trace = true;
  AttackOutcome o = cw(t, x, cfg);
  REQUIRE(o.success);
  for (const Tensor& step : o.trace)
    for (double v : step.data) {
      CHECK(v >= 0.0);
      CHECK(v <= 255.0);
    }
  CHECK(t.m(o.adversarial) < 0);

  AttackConfig conf = cfg;
  conf.record_trace = false;
  conf.confidence = 2.0;
  AttackOutcome oc = cw(t, x, conf);
  REQUIRE(oc.success);
  CHECK(t.m(oc.adversarial) <= -2.0 + 1e-9);
  CHECK(oc.max_abs >= o.max_abs);  // confidence costs distortion
}

TEST_CASE("attacks are deterministic and keep the range on the CNN") {
  models::EnsembleModel em = models::build_ensemble(29);
  Cnn2cTarget ct(em.cnn2c);
  Tensor img = h1_example(ct);

  AttackConfig cfg;
  cfg.family = Family::Cw;
  cfg.iterations = 25;
  AttackOutcome a = cw(ct, img, cfg);
  AttackOutcome b = cw(ct, img, cfg);
  CHECK(a.adversarial.data == b.adversarial.data);
  CHECK(a.success == b.success);
  CHECK(a.iterations_used == b.iterations_used);

  cfg.family = Family::Pgd;
  cfg.iterations = 5;
  AttackOutcome pa = pgd(ct, img, cfg);
  AttackOutcome pb = pgd(ct, img, cfg);
  CHECK(pa.adversarial.data == pb.adversarial.data);

  // every family obeys range safety and the success flag re-checks
  std::vector<AttackConfig> all;
  for (Family f : {Family::Fgsm, Family::Ifgsm, Family::Bim, Family::Pgd,
                   Family::Jsma, Family::Lbfgs, Family::Deepfool, Family::Cw}) {
    AttackConfig c;
    c.family = f;
    c.steps = 3;
    c.iterations = f == Family::Lbfgs ? 8 : 5;
    c.max_l0 = 12;
    all.push_back(c);
  }
  for (const AttackConfig& c : all) {
    AttackOutcome o = attack_one(ct, img, c);
    for (double v : o.adversarial.data) {
      CHECK(v >= 0.0);
      CHECK(v <= 255.0);
    }
    CHECK(o.success == (ct.predict(o.adversarial).label == 0));
    if (o.success) CHECK(o.status == Status::Success);
  }
}

TEST_CASE("attack_batch aggregates per-example outcomes") {
  LinearTarget t({-0.02, 0.02}, -3.0);
  Tensor xs = Tensor::from({3, 2}, {0.0, 255.0, 10.0, 240.0, 30.0, 220.0});

  AttackConfig cfg;
  cfg.family = Family::Fgsm;
  cfg.epsilon = 0.9;
  BatchResult br = attack_batch(t, xs, cfg);
  REQUIRE(br.outcomes.size() == 3);
  CHECK(br.report.n == 3);
  CHECK(br.report.attack_id == cfg.row_label());
  CHECK(br.report.target_id == "toy");
  int succ = 0;
  double l1 = 0, secs = 0;
  for (const AttackOutcome& o : br.outcomes) {
    succ += o.success;
    l1 += o.l1;
    secs += o.seconds;
  }
  CHECK(br.report.asr == doctest::Approx(succ / 3.0).epsilon(1e-15));
  CHECK(br.report.mean_l1 == doctest::Approx(l1 / 3.0).epsilon(1e-12));
  CHECK(br.report.elapsed == doctest::Approx(secs).epsilon(1e-12));
  CHECK(br.report.fails == (succ == 0));

  Tensor empty = Tensor::zeros({0, 2});
  CHECK_THROWS_AS(attack_batch(t, empty, cfg), ConfigError);
}

TEST_CASE("target gradients match finite differences") {
  models::EnsembleModel em = models::build_ensemble(7);
  Cnn2cTarget ct(em.cnn2c);
  EnsembleTarget et(em);
  dataio::Dataset ds = dataio::synth_dataset(2, 0.0, 31);
  std::vector<int> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  Tensor x = ds.gather(idx, 2, 1);  // first H1 example

  auto probe = [&](DifferentiableTarget& t, bool use_margin) {
    nn::LossOut base = use_margin ? t.margin(x) : t.loss(x, 1);
    const double h = 1e-3;
    for (int k = 0; k < 10; ++k) {
      const int64_t i = (37 + 389 * k) % x.numel();
      Tensor xp = x, xm = x;
      xp.data[i] += h;
      xm.data[i] -= h;
      const double fp = use_margin ? t.margin(xp).value : t.loss(xp, 1).value;
      const double fm = use_margin ? t.margin(xm).value : t.loss(xm, 1).value;
      const double fd = (fp - fm) / (2 * h);
      const double an = base.grad.data[i];
      const double rel =
          std::abs(fd - an) / std::max(1e-6, std::abs(fd) + std::abs(an));
      CHECK(rel < 1e-3);
    }
  };
  probe(ct, false);
  probe(ct, true);
  probe(et, false);
  probe(et, true);

  // chain rule ties the 2C loss gradient to the margin gradient
  nn::LossOut lg = ct.loss(x, 1);
  nn::LossOut mg = ct.margin(x);
  const double factor = -nn::sigmoid(-mg.value);
  for (int k = 0; k < 8; ++k) {
    const int64_t i = (11 + 511 * k) % x.numel();
    CHECK(lg.grad.data[i] ==
          doctest::Approx(factor * mg.grad.data[i]).epsilon(1e-10));
  }
}

TEST_CASE("attack config parsing and labels") {
  CHECK(family_from_string("fgsm") == Family::Fgsm);
  CHECK(family_from_string("i-fgsm") == Family::Ifgsm);
  CHECK(family_from_string("deepfool") == Family::Deepfool);
  CHECK_THROWS_AS(family_from_string("nope"), ConfigError);
  CHECK(std::string(family_name(Family::Cw)) == "cw");

  AttackConfig cfg;
  cfg.family = Family::Fgsm;
  cfg.epsilon = 0.01;
  CHECK(cfg.row_label() == "FGSM(eps=0.01)");
  cfg.family = Family::Cw;
  cfg.confidence = 50;
  CHECK(cfg.row_label() == "CW(c=50)");
  cfg.family = Family::Pgd;
  CHECK(cfg.row_label() == "PGD(default)");

  AttackConfig bad;
  bad.epsilon = -0.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = AttackConfig{};
  bad.steps = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = AttackConfig{};
  bad.overshoot = 0.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = AttackConfig{};
  bad.cw_tradeoff = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
