#include "spritz/attacks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <deque>
#include <limits>

#include "spritz/errors.hpp"

namespace spritz::attacks {

namespace {

constexpr double kLn2 = 0.6931471805599453;
constexpr double kInf = std::numeric_limits<double>::infinity();

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double sgn(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

double clampd(double v, double lo, double hi) {
  return std::min(std::max(v, lo), hi);
}

double vspan(const Tensor& x) {
  double lo = x.data[0], hi = x.data[0];
  for (double v : x.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return hi - lo;
}

bool zero_grad(const Tensor& g) {
  for (double v : g.data)
    if (v != 0.0) return false;
  return true;
}

AttackOutcome begin_outcome(const Tensor& x1) {
  AttackOutcome o;
  o.original = x1;
  o.adversarial = x1;
  return o;
}

// The loops below test for a flip through functional values already in
// hand: the training losses are -log p1, so a strict value > ln 2 means
// p1 < 1/2, and a strictly negative margin means z1 < z0. Both agree
// with predict() including its H1 tie rule. The authoritative success
// flag is still set here from an independent predict call.
void finish_outcome(DifferentiableTarget& t, AttackOutcome& o,
                    Clock::time_point t0) {
  o.success = t.predict(o.adversarial).label == 0;
  if (o.success) o.status = Status::Success;
  o.psnr = metrics::psnr(o.original, o.adversarial);
  o.l1 = metrics::l1_mean(o.original, o.adversarial);
  o.max_abs = metrics::max_abs(o.original, o.adversarial);
  o.seconds = seconds_since(t0);
}

bool preflipped(DifferentiableTarget& t, const Tensor& x1) {
  return t.predict(x1).label == 0;
}

void push_trace(const AttackConfig& cfg, AttackOutcome& o, const Tensor& x) {
  if (cfg.record_trace) o.trace.push_back(x);
}

void require_one(const Tensor& x1, const char* who) {
  if (x1.shape.empty() || x1.shape[0] != 1 || x1.numel() < 1)
    throw ShapeError(std::string(who) + ": expected a batch of one, got " +
                     nn::shape_str(x1.shape));
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

const char* family_name(Family f) {
  switch (f) {
    case Family::Fgsm: return "fgsm";
    case Family::Ifgsm: return "ifgsm";
    case Family::Bim: return "bim";
    case Family::Pgd: return "pgd";
    case Family::Jsma: return "jsma";
    case Family::Lbfgs: return "lbfgs";
    case Family::Deepfool: return "deepfool";
    case Family::Cw: return "cw";
  }
  return "?";
}

Family family_from_string(const std::string& s) {
  if (s == "fgsm") return Family::Fgsm;
  if (s == "ifgsm" || s == "i-fgsm") return Family::Ifgsm;
  if (s == "bim") return Family::Bim;
  if (s == "pgd") return Family::Pgd;
  if (s == "jsma") return Family::Jsma;
  if (s == "lbfgs") return Family::Lbfgs;
  if (s == "deepfool") return Family::Deepfool;
  if (s == "cw") return Family::Cw;
  throw ConfigError("unknown attack family: " + s);
}

const char* status_name(Status s) {
  switch (s) {
    case Status::Success: return "success";
    case Status::NoFlip: return "no-flip";
    case Status::FailsDegenerate: return "fails-degenerate";
  }
  return "?";
}

void AttackConfig::validate() const {
  if (epsilon < 0) throw ConfigError("attack config: epsilon must be >= 0");
  if (steps < 1) throw ConfigError("attack config: steps must be >= 1");
  if (!(theta > 0 && theta < 1))
    throw ConfigError("attack config: theta must lie in (0, 1)");
  if (alpha <= 0) throw ConfigError("attack config: alpha must be > 0");
  if (step_size <= 0)
    throw ConfigError("attack config: step size must be > 0");
  if (family == Family::Pgd && step_size >= alpha)
    throw ConfigError("attack config: pgd needs step size < alpha");
  if (max_l0 < 1) throw ConfigError("attack config: max_l0 must be >= 1");
  if (iterations < 0)
    throw ConfigError("attack config: iterations must be >= 0");
  if (confidence < 0)
    throw ConfigError("attack config: confidence must be >= 0");
  if (overshoot < 1)
    throw ConfigError("attack config: overshoot must be >= 1");
  if (cw_lr <= 0 || cw_tradeoff <= 0)
    throw ConfigError("attack config: cw optimizer settings must be positive");
  if (lbfgs_c0 <= 0)
    throw ConfigError("attack config: lbfgs scalar must be > 0");
  if (lbfgs_fixed_c < 0)
    throw ConfigError("attack config: lbfgs fixed scalar must be >= 0");
}

int AttackConfig::cap() const {
  if (iterations > 0) return iterations;
  switch (family) {
    case Family::Fgsm: return 1;
    case Family::Ifgsm: return steps;
    case Family::Bim: return 10;
    case Family::Pgd: return 40;
    case Family::Jsma: return max_l0;
    case Family::Lbfgs: return 30;
    case Family::Deepfool: return 50;
    case Family::Cw: return 200;
  }
  return 1;
}

std::string AttackConfig::row_label() const {
  char buf[64];
  switch (family) {
    case Family::Fgsm:
      std::snprintf(buf, sizeof buf, "FGSM(eps=%g)", epsilon);
      return buf;
    case Family::Ifgsm:
      std::snprintf(buf, sizeof buf, "I-FGSM(eps=%g)", epsilon);
      return buf;
    case Family::Bim: return "BIM(default)";
    case Family::Pgd: return "PGD(default)";
    case Family::Jsma:
      std::snprintf(buf, sizeof buf, "JSMA(theta=%g)", theta);
      return buf;
    case Family::Lbfgs: return "LBFGS(default)";
    case Family::Deepfool: return "DeepFool(default)";
    case Family::Cw:
      std::snprintf(buf, sizeof buf, "CW(c=%g)", confidence);
      return buf;
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Targets
// ---------------------------------------------------------------------------

Cnn2cTarget::Cnn2cTarget(Graph& g) : g_(g), logit_(g.node_id("logit")) {}

models::Prediction Cnn2cTarget::predict(const Tensor& x1) {
  require_one(x1, "2c target");
  g_.forward(st_, x1, false);
  models::Prediction p;
  p.p1 = nn::sigmoid(g_.act(st_, logit_).data[0]);
  p.p0 = 1.0 - p.p1;
  p.label = p.p1 >= 0.5 ? 1 : 0;
  return p;
}

nn::LossOut Cnn2cTarget::loss(const Tensor& x1, int label) {
  require_one(x1, "2c target");
  if (label != 0 && label != 1)
    throw ConfigError("2c target: label must be 0 or 1");
  g_.forward(st_, x1, false);
  nn::LossOut at = nn::bce_with_logits(g_.act(st_, logit_), {label});
  nn::LossOut out;
  out.value = at.value;
  out.grad = g_.backward(st_, at.grad, logit_, false, true);
  return out;
}

nn::LossOut Cnn2cTarget::margin(const Tensor& x1) {
  require_one(x1, "2c target");
  g_.forward(st_, x1, false);
  nn::LossOut out;
  out.value = g_.act(st_, logit_).data[0];
  out.grad =
      g_.backward(st_, Tensor::from({1, 1}, {1.0}), logit_, false, true);
  return out;
}

EnsembleTarget::EnsembleTarget(const models::EnsembleModel& m)
    : g_(models::compose_ensemble_graph(m)) {}

models::Prediction EnsembleTarget::predict(const Tensor& x1) {
  require_one(x1, "ensemble target");
  const Tensor& z = g_.forward(st_, x1, false);
  models::Prediction p;
  nn::softmax2(z.data[0], z.data[1], p.p0, p.p1);
  p.label = p.p1 >= p.p0 ? 1 : 0;
  return p;
}

nn::LossOut EnsembleTarget::loss(const Tensor& x1, int label) {
  require_one(x1, "ensemble target");
  if (label != 0 && label != 1)
    throw ConfigError("ensemble target: label must be 0 or 1");
  const Tensor& z = g_.forward(st_, x1, false);
  nn::LossOut at = nn::softmax_ce2(z, {label});
  nn::LossOut out;
  out.value = at.value;
  out.grad = g_.backward(st_, at.grad, -1, false, true);
  return out;
}

nn::LossOut EnsembleTarget::margin(const Tensor& x1) {
  require_one(x1, "ensemble target");
  const Tensor& z = g_.forward(st_, x1, false);
  nn::LossOut out;
  out.value = z.data[1] - z.data[0];
  out.grad =
      g_.backward(st_, Tensor::from({1, 2}, {-1.0, 1.0}), -1, false, true);
  return out;
}

// ---------------------------------------------------------------------------
// Attacks
// ---------------------------------------------------------------------------

AttackOutcome fgsm(DifferentiableTarget& t, const Tensor& x1,
                   const AttackConfig& cfg) {
  cfg.validate();
  const auto t0 = Clock::now();
  AttackOutcome o = begin_outcome(x1);
  if (preflipped(t, x1)) {
    finish_outcome(t, o, t0);
    return o;
  }
  nn::LossOut lo = t.loss(x1, 1);
  o.iterations_used = 1;
  if (zero_grad(lo.grad)) {
    o.status = Status::FailsDegenerate;
    finish_outcome(t, o, t0);
    return o;
  }
  const double sc = cfg.epsilon * vspan(x1);
  for (int64_t i = 0; i < x1.numel(); ++i)
    o.adversarial.data[i] =
        clampd(x1.data[i] + sc * sgn(lo.grad.data[i]), 0.0, 255.0);
  push_trace(cfg, o, o.adversarial);
  finish_outcome(t, o, t0);
  return o;
}

AttackOutcome ifgsm(DifferentiableTarget& t, const Tensor& x1,
                    const AttackConfig& cfg) {
  cfg.validate();
  const auto t0 = Clock::now();
  AttackOutcome o = begin_outcome(x1);
  if (preflipped(t, x1)) {
    finish_outcome(t, o, t0);
    return o;
  }
  Tensor x = x1;
  for (int s = 1; s <= cfg.steps; ++s) {
    nn::LossOut lo = t.loss(x, 1);
    if (lo.value > kLn2) break;
    if (zero_grad(lo.grad)) {
      if (s == 1) o.status = Status::FailsDegenerate;
      break;
    }
    const double sc = cfg.epsilon * vspan(x);
    for (int64_t i = 0; i < x.numel(); ++i)
      x.data[i] = clampd(x.data[i] + sc * sgn(lo.grad.data[i]), 0.0, 255.0);
    o.iterations_used = s;
    push_trace(cfg, o, x);
  }
  o.adversarial = x;
  finish_outcome(t, o, t0);
  return o;
}

AttackOutcome bim(DifferentiableTarget& t, const Tensor& x1,
                  const AttackConfig& cfg) {
  cfg.validate();
  const auto t0 = Clock::now();
  AttackOutcome o = begin_outcome(x1);
  if (preflipped(t, x1)) {
    finish_outcome(t, o, t0);
    return o;
  }
  double olo = x1.data[0], ohi = x1.data[0];
  for (double v : x1.data) {
    olo = std::min(olo, v);
    ohi = std::max(ohi, v);
  }
  Tensor x = x1;
  const int cap = cfg.iterations > 0 ? cfg.iterations : 10;
  for (int s = 1; s <= cap; ++s) {
    nn::LossOut lo = t.loss(x, 1);
    if (lo.value > kLn2) break;
    if (zero_grad(lo.grad)) {
      if (s == 1) o.status = Status::FailsDegenerate;
      break;
    }
    for (int64_t i = 0; i < x.numel(); ++i)
      x.data[i] =
          clampd(x.data[i] + cfg.step_size * sgn(lo.grad.data[i]), olo, ohi);
    o.iterations_used = s;
    push_trace(cfg, o, x);
  }
  o.adversarial = x;
  finish_outcome(t, o, t0);
  return o;
}

AttackOutcome pgd(DifferentiableTarget& t, const Tensor& x1,
                  const AttackConfig& cfg) {
  cfg.validate();
  if (cfg.step_size >= cfg.alpha)
    throw ConfigError("attack config: pgd needs step size < alpha");
  const auto t0 = Clock::now();
  AttackOutcome o = begin_outcome(x1);
  if (preflipped(t, x1)) {
    finish_outcome(t, o, t0);
    return o;
  }
  Tensor x = x1;
  const int cap = cfg.iterations > 0 ? cfg.iterations : 40;
  for (int s = 1; s <= cap; ++s) {
    nn::LossOut lo = t.loss(x, 1);
    if (lo.value > kLn2) break;
    if (zero_grad(lo.grad)) {
      if (s == 1) o.status = Status::FailsDegenerate;
      break;
    }
    for (int64_t i = 0; i < x.numel(); ++i) {
      const double oi = x1.data[i];
      double v = x.data[i] + cfg.step_size * sgn(lo.grad.data[i]);
      v = clampd(v, oi - cfg.alpha, oi + cfg.alpha);
      v = clampd(v, 0.0, 255.0);
      // The ball contract is on computed differences; nudge any
      // coordinate whose rounded difference still peeks over alpha.
      while (std::abs(v - oi) > cfg.alpha) v = std::nextafter(v, oi);
      x.data[i] = v;
    }
    o.iterations_used = s;
    push_trace(cfg, o, x);
  }
  o.adversarial = x;
  finish_outcome(t, o, t0);
  return o;
}

AttackOutcome jsma(DifferentiableTarget& t, const Tensor& x1,
                   const AttackConfig& cfg) {
  cfg.validate();
  const auto t0 = Clock::now();
  AttackOutcome o = begin_outcome(x1);
  if (preflipped(t, x1)) {
    finish_outcome(t, o, t0);
    return o;
  }
  Tensor x = x1;
  const int64_t n = x.numel();
  std::vector<char> touched(n, 0);
  for (int s = 1; s <= cfg.max_l0; ++s) {
    nn::LossOut mo = t.margin(x);
    if (mo.value < 0) break;
    if (zero_grad(mo.grad)) {
      if (s == 1) o.status = Status::FailsDegenerate;
      break;
    }
    const double mag = cfg.theta * vspan(x);
    int64_t best = -1;
    double best_gain = 0.0, best_val = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      if (touched[i]) continue;
      const double g = mo.grad.data[i];
      if (g == 0.0) continue;
      const double moved = clampd(x.data[i] - sgn(g) * mag, 0.0, 255.0);
      const double gain = -g * (moved - x.data[i]);
      if (gain > best_gain) {
        best = i;
        best_gain = gain;
        best_val = moved;
      }
    }
    if (best < 0) break;
    x.data[best] = best_val;
    touched[best] = 1;
    o.iterations_used = s;
    push_trace(cfg, o, x);
  }
  o.adversarial = x;
  finish_outcome(t, o, t0);
  return o;
}

namespace {

struct InnerSolve {
  Tensor x;
  int iters = 0;
};

// Projected quasi-Newton minimization of ||a - orig||^2 - c * J(a, H1)
// over the valid box, memory-10 two-loop recursion with Armijo
// backtracking. Hands the iterate back the moment the flip shows up in
// the loss value; the caller re-verifies with predict.
InnerSolve lbfgs_solve(DifferentiableTarget& t, const Tensor& orig, double c,
                       int cap) {
  const int64_t n = orig.numel();
  Tensor x = orig;
  nn::LossOut lo = t.loss(x, 1);
  auto objective = [&](const Tensor& a, double J) {
    double d2 = 0;
    for (int64_t i = 0; i < n; ++i) {
      const double d = a.data[i] - orig.data[i];
      d2 += d * d;
    }
    return d2 - c * J;
  };
  auto fill_grad = [&](const Tensor& a, const Tensor& gJ,
                       std::vector<double>& out) {
    for (int64_t i = 0; i < n; ++i)
      out[i] = 2.0 * (a.data[i] - orig.data[i]) - c * gJ.data[i];
  };
  double h = objective(x, lo.value);
  std::vector<double> g(n), d(n), gnext(n);
  fill_grad(x, lo.grad, g);
  std::deque<std::vector<double>> S, Y;
  std::deque<double> rho;
  InnerSolve r;
  for (int it = 0; it < cap; ++it) {
    r.iters = it;
    if (lo.value > kLn2) break;
    d.assign(g.begin(), g.end());
    std::vector<double> a(S.size());
    for (int k = static_cast<int>(S.size()) - 1; k >= 0; --k) {
      a[k] = rho[k] * dot(S[k], d);
      for (int64_t i = 0; i < n; ++i) d[i] -= a[k] * Y[k][i];
    }
    if (!S.empty()) {
      const double yy = dot(Y.back(), Y.back());
      const double gamma = yy > 0 ? dot(S.back(), Y.back()) / yy : 1.0;
      for (int64_t i = 0; i < n; ++i) d[i] *= gamma;
    }
    for (size_t k = 0; k < S.size(); ++k) {
      const double b = rho[k] * dot(Y[k], d);
      for (int64_t i = 0; i < n; ++i) d[i] += (a[k] - b) * S[k][i];
    }
    for (int64_t i = 0; i < n; ++i) d[i] = -d[i];
    double dg = 0;
    for (int64_t i = 0; i < n; ++i) dg += d[i] * g[i];
    if (dg >= 0)
      for (int64_t i = 0; i < n; ++i) d[i] = -g[i];
    double step = 1.0;
    bool accepted = false;
    for (int trial = 0; trial < 15 && !accepted; ++trial, step *= 0.5) {
      Tensor xc = x;
      bool moved = false;
      for (int64_t i = 0; i < n; ++i) {
        const double v = clampd(x.data[i] + step * d[i], 0.0, 255.0);
        if (v != x.data[i]) moved = true;
        xc.data[i] = v;
      }
      if (!moved) break;
      nn::LossOut lc = t.loss(xc, 1);
      const double hc = objective(xc, lc.value);
      double gdx = 0;
      for (int64_t i = 0; i < n; ++i) gdx += g[i] * (xc.data[i] - x.data[i]);
      if (hc < h && hc <= h + 1e-4 * std::min(gdx, 0.0)) {
        fill_grad(xc, lc.grad, gnext);
        std::vector<double> snew(n), ynew(n);
        for (int64_t i = 0; i < n; ++i) {
          snew[i] = xc.data[i] - x.data[i];
          ynew[i] = gnext[i] - g[i];
        }
        const double sy = dot(snew, ynew);
        if (sy > 1e-12) {
          S.push_back(std::move(snew));
          Y.push_back(std::move(ynew));
          rho.push_back(1.0 / sy);
          if (S.size() > 10) {
            S.pop_front();
            Y.pop_front();
            rho.pop_front();
          }
        }
        x = std::move(xc);
        lo = std::move(lc);
        h = hc;
        g.swap(gnext);
        accepted = true;
      }
    }
    if (!accepted) break;
  }
  r.x = std::move(x);
  return r;
}

}  // namespace

AttackOutcome lbfgs(DifferentiableTarget& t, const Tensor& x1,
                    const AttackConfig& cfg) {
  cfg.validate();
  const auto t0 = Clock::now();
  AttackOutcome o = begin_outcome(x1);
  if (preflipped(t, x1)) {
    finish_outcome(t, o, t0);
    return o;
  }
  const int cap = cfg.iterations > 0 ? cfg.iterations : 30;
  int total = 0;
  auto solve = [&](double c) {
    InnerSolve r = lbfgs_solve(t, x1, c, cap);
    total += r.iters;
    return r;
  };
  auto flips = [&](const Tensor& a) { return t.predict(a).label == 0; };
  if (cfg.lbfgs_fixed_c > 0) {
    InnerSolve r = solve(cfg.lbfgs_fixed_c);
    o.adversarial = std::move(r.x);
    o.tradeoff = cfg.lbfgs_fixed_c;
    o.iterations_used = total;
    finish_outcome(t, o, t0);
    return o;
  }
  // Ramp the tradeoff scalar up until the minimizer flips, then walk it
  // back down: the report keeps the smallest scalar that still flips.
  double c = cfg.lbfgs_c0, last_fail = 0.0;
  Tensor best;
  double best_c = 0.0;
  bool found = false;
  for (int k = 0; k < 12 && !found; ++k) {
    InnerSolve r = solve(c);
    if (flips(r.x)) {
      best = std::move(r.x);
      best_c = c;
      found = true;
    } else {
      last_fail = c;
      c *= 2.0;
    }
  }
  if (!found) {
    o.iterations_used = total;
    finish_outcome(t, o, t0);
    return o;
  }
  if (last_fail > 0) {
    for (int k = 0; k < 4; ++k) {
      const double mid = std::sqrt(last_fail * best_c);
      InnerSolve r = solve(mid);
      if (flips(r.x)) {
        best = std::move(r.x);
        best_c = mid;
      } else {
        last_fail = mid;
      }
    }
  } else {
    for (int k = 0; k < 4; ++k) {
      const double half = best_c / 2.0;
      InnerSolve r = solve(half);
      if (!flips(r.x)) break;
      best = std::move(r.x);
      best_c = half;
    }
  }
  o.adversarial = std::move(best);
  o.tradeoff = best_c;
  o.iterations_used = total;
  finish_outcome(t, o, t0);
  return o;
}

AttackOutcome deepfool(DifferentiableTarget& t, const Tensor& x1,
                       const AttackConfig& cfg) {
  cfg.validate();
  const auto t0 = Clock::now();
  AttackOutcome o = begin_outcome(x1);
  if (preflipped(t, x1)) {
    finish_outcome(t, o, t0);
    return o;
  }
  const int64_t n = x1.numel();
  const int cap = cfg.iterations > 0 ? cfg.iterations : 50;
  Tensor x = x1;
  std::vector<double> rtot(n, 0.0);
  for (int it = 1; it <= cap; ++it) {
    nn::LossOut mo = t.margin(x);
    if (mo.value < 0) break;
    double g2 = 0;
    for (double v : mo.grad.data) g2 += v * v;
    if (g2 == 0.0) {
      if (it == 1) o.status = Status::FailsDegenerate;
      break;
    }
    const double coef = -(mo.value + 1e-9) / g2;
    for (int64_t i = 0; i < n; ++i) {
      rtot[i] += coef * mo.grad.data[i];
      x.data[i] = clampd(x1.data[i] + cfg.overshoot * rtot[i], 0.0, 255.0);
    }
    o.iterations_used = it;
    push_trace(cfg, o, x);
  }
  o.adversarial = std::move(x);
  finish_outcome(t, o, t0);
  return o;
}

AttackOutcome cw(DifferentiableTarget& t, const Tensor& x1,
                 const AttackConfig& cfg) {
  cfg.validate();
  const auto t0 = Clock::now();
  AttackOutcome o = begin_outcome(x1);
  if (preflipped(t, x1)) {
    finish_outcome(t, o, t0);
    return o;
  }
  const int64_t n = x1.numel();
  const int cap = cfg.iterations > 0 ? cfg.iterations : 200;
  // tanh reparametrization: any w decodes into the open valid box
  std::vector<double> w(n), th(n), m(n, 0.0), v(n, 0.0);
  for (int64_t i = 0; i < n; ++i) {
    const double u =
        clampd(x1.data[i] / 255.0 * 2.0 - 1.0, -1.0 + 1e-12, 1.0 - 1e-12);
    w[i] = std::atanh(u);
  }
  Tensor x = x1;
  Tensor best, closest;
  double best_d2 = kInf, low_margin = kInf;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int it = 1; it <= cap; ++it) {
    for (int64_t i = 0; i < n; ++i) {
      th[i] = std::tanh(w[i]);
      x.data[i] = (th[i] + 1.0) * 0.5 * 255.0;
    }
    nn::LossOut mo = t.margin(x);
    double d2 = 0;
    for (int64_t i = 0; i < n; ++i) {
      const double dd = x.data[i] - x1.data[i];
      d2 += dd * dd;
    }
    // keep the least distorted iterate that flips at the asked confidence
    if (mo.value < 0 && mo.value <= -cfg.confidence && d2 < best_d2) {
      best = x;
      best_d2 = d2;
    }
    if (mo.value < low_margin) {
      low_margin = mo.value;
      closest = x;
    }
    // f = max(margin, -P): past the requested confidence only the
    // distortion term keeps pulling
    const bool active = mo.value > -cfg.confidence;
    const double bc1 = 1.0 - std::pow(b1, it);
    const double bc2 = 1.0 - std::pow(b2, it);
    for (int64_t i = 0; i < n; ++i) {
      const double gx = 2.0 * (x.data[i] - x1.data[i]) +
                        (active ? cfg.cw_tradeoff * mo.grad.data[i] : 0.0);
      const double gw = gx * 127.5 * (1.0 - th[i] * th[i]);
      m[i] = b1 * m[i] + (1.0 - b1) * gw;
      v[i] = b2 * v[i] + (1.0 - b2) * gw * gw;
      w[i] -= cfg.cw_lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
    o.iterations_used = it;
    push_trace(cfg, o, x);
  }
  o.adversarial = best_d2 < kInf ? std::move(best) : std::move(closest);
  finish_outcome(t, o, t0);
  return o;
}

AttackOutcome attack_one(DifferentiableTarget& t, const Tensor& x1,
                         const AttackConfig& cfg) {
  cfg.validate();
  switch (cfg.family) {
    case Family::Fgsm: return fgsm(t, x1, cfg);
    case Family::Ifgsm: return ifgsm(t, x1, cfg);
    case Family::Bim: return bim(t, x1, cfg);
    case Family::Pgd: return pgd(t, x1, cfg);
    case Family::Jsma: return jsma(t, x1, cfg);
    case Family::Lbfgs: return lbfgs(t, x1, cfg);
    case Family::Deepfool: return deepfool(t, x1, cfg);
    case Family::Cw: return cw(t, x1, cfg);
  }
  throw ConfigError("attack_one: unknown family");
}

BatchResult attack_batch(DifferentiableTarget& t, const Tensor& xs,
                         const AttackConfig& cfg) {
  cfg.validate();
  if (xs.shape.empty() || xs.shape[0] < 1)
    throw ConfigError("attack_batch: empty batch");
  const int nb = xs.shape[0];
  std::vector<int> shape = xs.shape;
  shape[0] = 1;
  const int64_t per = nn::numel_of(shape);
  BatchResult br;
  std::vector<metrics::Outcome> rows;
  for (int i = 0; i < nb; ++i) {
    Tensor xi = Tensor::zeros(shape);
    std::memcpy(xi.ptr(), xs.ptr() + static_cast<int64_t>(i) * per,
                sizeof(double) * per);
    AttackOutcome ao = attack_one(t, xi, cfg);
    metrics::Outcome mo;
    mo.attack_id = cfg.row_label();
    mo.target_id = t.id();
    mo.success = ao.success;
    mo.psnr = ao.psnr;
    mo.l1 = ao.l1;
    mo.max_abs = ao.max_abs;
    mo.seconds = ao.seconds;
    rows.push_back(std::move(mo));
    br.outcomes.push_back(std::move(ao));
  }
  br.report = metrics::aggregate(rows);
  return br;
}

}  // namespace spritz::attacks
