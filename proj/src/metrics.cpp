#include "spritz/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "spritz/errors.hpp"

namespace spritz::metrics {

static void require_same(const Tensor& a, const Tensor& b, const char* who) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(who) + ": shapes " + nn::shape_str(a.shape) +
                     " and " + nn::shape_str(b.shape) + " differ");
  if (a.numel() == 0)
    throw ShapeError(std::string(who) + ": empty tensors");
}

double psnr(const Tensor& a, const Tensor& b) {
  require_same(a, b, "psnr");
  const int64_t n = a.numel();
  double mse = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = a.data[i] - b.data[i];
    mse += d * d;
  }
  mse /= double(n);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

double l1_mean(const Tensor& a, const Tensor& b) {
  require_same(a, b, "l1_mean");
  const int64_t n = a.numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += std::abs(a.data[i] - b.data[i]);
  return s / double(n);
}

double max_abs(const Tensor& a, const Tensor& b) {
  require_same(a, b, "max_abs");
  const int64_t n = a.numel();
  double m = 0.0;
  for (int64_t i = 0; i < n; ++i)
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

std::string psnr_str(double db) {
  if (std::isinf(db)) return "inf";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", db);
  return buf;
}

CampaignReport aggregate(const std::vector<Outcome>& outcomes) {
  if (outcomes.empty()) throw ConfigError("aggregate: no outcomes");
  CampaignReport r;
  r.attack_id = outcomes.front().attack_id;
  r.target_id = outcomes.front().target_id;
  r.n = static_cast<int>(outcomes.size());
  int successes = 0;
  for (const Outcome& o : outcomes) {
    if (o.attack_id != r.attack_id || o.target_id != r.target_id)
      throw ConfigError("aggregate: mixed campaigns: '" + o.attack_id + "/" +
                        o.target_id + "' vs '" + r.attack_id + "/" +
                        r.target_id + "'");
    successes += o.success;
    r.mean_psnr += o.psnr;
    r.mean_l1 += o.l1;
    r.mean_max_abs += o.max_abs;
    r.elapsed += o.seconds;
  }
  r.mean_psnr /= r.n;
  r.mean_l1 /= r.n;
  r.mean_max_abs /= r.n;
  r.asr = double(successes) / double(r.n);
  r.fails = successes == 0;
  return r;
}

std::string report_csv(const std::vector<CampaignReport>& rows) {
  std::string out = "attack,psnr,l1,max,asr,time\n";
  char buf[160];
  for (const CampaignReport& r : rows) {
    if (r.fails) {
      out += r.attack_id + ",Fails,Fails,Fails,Fails,Fails\n";
    } else {
      std::snprintf(buf, sizeof(buf), ",%s,%.4f,%.4f,%.4f,%.3f\n",
                    psnr_str(r.mean_psnr).c_str(), r.mean_l1, r.mean_max_abs,
                    r.asr, r.elapsed);
      out += r.attack_id + buf;
    }
  }
  return out;
}

void write_report_csv(const std::string& path,
                      const std::vector<CampaignReport>& rows) {
  std::ofstream out(path);
  if (!out) throw ParseError("write_report_csv: cannot open '" + path + "'");
  out << report_csv(rows);
}

}  // namespace spritz::metrics
