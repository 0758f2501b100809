#pragma once

#include <string>
#include <vector>

#include "spritz/graph.hpp"

namespace spritz::metrics {

using nn::Tensor;

/// 10 * log10(255^2 / MSE); +infinity when the tensors are identical.
double psnr(const Tensor& a, const Tensor& b);

/// Mean absolute elementwise difference.
double l1_mean(const Tensor& a, const Tensor& b);

/// Largest absolute elementwise difference.
double max_abs(const Tensor& a, const Tensor& b);

/// "inf" for the infinite-PSNR sentinel, a plain decimal otherwise.
std::string psnr_str(double db);

/// One attacked example.
struct Outcome {
  std::string attack_id;
  std::string target_id;
  bool success = false;
  double psnr = 0.0;
  double l1 = 0.0;
  double max_abs = 0.0;
  double seconds = 0.0;
};

struct CampaignReport {
  std::string attack_id;
  std::string target_id;
  double asr = 0.0;
  double mean_psnr = 0.0;  // dB average; +inf when any outcome is exact
  double mean_l1 = 0.0;
  double mean_max_abs = 0.0;
  double elapsed = 0.0;  // summed per-example seconds
  bool fails = false;    // true iff zero successes
  int n = 0;
};

/// Means run over every attempted example, successful or not.
CampaignReport aggregate(const std::vector<Outcome>& outcomes);

/// Table rows as CSV: attack, psnr, l1, max, asr, time. A failing
/// campaign renders "Fails" in every value column.
void write_report_csv(const std::string& path,
                      const std::vector<CampaignReport>& rows);
std::string report_csv(const std::vector<CampaignReport>& rows);

}  // namespace spritz::metrics
