#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spritz/attacks.hpp"
#include "spritz/dataio.hpp"
#include "spritz/metrics.hpp"
#include "spritz/models.hpp"
#include "spritz/train.hpp"

namespace spritz::experiment {

/// Where the examples come from. An empty csv_path selects the synthetic
/// generator; otherwise csv_path names a feature-row manifest that is
/// split first and min-max normalized with statistics from the training
/// rows only.
struct DatasetSpec {
  std::string csv_path;
  double difficulty = 0.0;
  dataio::CsvSchema schema;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  train::SplitSpec split;
  train::TrainConfig train_cfg;  // seed field is derived from `seed`
  double threshold_percentile = 95.0;
  std::vector<attacks::AttackConfig> grid;
  int scenario = 1;
  int sample_count = 500;  // examples attacked per grid row
  std::string out_dir = "out";
  uint64_t seed = 1;

  void validate() const;  // ConfigError on violation
};

/// The published attack grid: FGSM and I-FGSM at eps {0.1, 0.01, 0.001},
/// JSMA at theta {0.1, 0.01}, C&W at confidence {0, 50, 100}, and BIM,
/// PGD, DeepFool, L-BFGS at their defaults. 15 rows.
std::vector<attacks::AttackConfig> default_grid();

ExperimentConfig default_config();

/// Strict parse: unknown keys, wrong types and invalid values raise
/// ConfigError. Absent keys keep their defaults; an absent "grid" means
/// default_grid(), an empty one is an error.
ExperimentConfig config_from_json(const std::string& text);
std::string config_to_json(const ExperimentConfig& cfg);

/// FNV-1a over the canonical JSON form, as a fixed-width hex string.
/// Reports embed it so a bundle can be traced back to its exact config.
std::string config_hash(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Training pipeline
// ---------------------------------------------------------------------------

struct TrainArtifacts {
  models::EnsembleModel model;
  train::TrainResult r2c, rleg, rmal, rcmb;
  train::EvalResult e2c, eleg, emal, ecmb;
  std::string checkpoint_path;  // <out>/ensemble.spz
  std::string report_path;      // <out>/accuracy.csv
};

/// Trains the 2C, both auto-encoders (each on its own class), calibrates
/// the acceptance thresholds and trains the combiner, then evaluates all
/// four on the test split. Writes the ensemble checkpoint, the accuracy
/// table and per-net epoch histories under cfg.out_dir. Any failure
/// removes the files written so far before rethrowing.
TrainArtifacts run_train(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Attack campaigns
// ---------------------------------------------------------------------------

/// Misclassification rates of the one-class nets and the full ensemble
/// over one persisted adversarial set. Denominators count every attacked
/// example, successful or not.
struct TransferRow {
  std::string attack_id;
  int n = 0;
  double mis_leg = 0.0;     // 1C-Leg accepted a malicious example
  double mis_mal = 0.0;     // 1C-Mal rejected a malicious example
  double mis_spritz = 0.0;  // ensemble predicted H0
};

struct ReportBundle {
  int scenario = 1;
  std::string config_hash;
  std::string denominator = "all-attempted";
  std::vector<metrics::CampaignReport> rows;
  std::vector<std::vector<metrics::Outcome>> outcomes;  // parallel to rows
  std::vector<TransferRow> transfer;                    // scenario 1 only
  std::vector<std::string> adv_paths;                   // scenario 1 only
};

/// Attacks the standalone 2C on up to sample_count malicious test
/// examples it classifies correctly, one campaign per grid row. Each
/// adversarial set is persisted under cfg.out_dir and the transfer rates
/// are computed from the reloaded files, never by re-attacking.
ReportBundle run_scenario1(const ExperimentConfig& cfg);

/// Attacks the end-to-end ensemble on its own correctly-classified
/// malicious test examples. Zero-success rows keep their elapsed time
/// and render as Fails.
ReportBundle run_scenario2(const ExperimentConfig& cfg);

/// Writes scenario<k>_table.csv (+ scenario1_transfer.csv) and
/// scenario<k>_bundle.json under out_dir. Returns the paths written.
std::vector<std::string> emit_reports(const ReportBundle& b,
                                      const std::string& out_dir);

std::string bundle_to_json(const ReportBundle& b);
ReportBundle bundle_from_json(const std::string& text);

/// Equality of everything a rerun must reproduce: all fields except the
/// wall-time ones (Outcome::seconds, CampaignReport::elapsed).
bool same_results(const ReportBundle& a, const ReportBundle& b);

// ---------------------------------------------------------------------------
// Adversarial set persistence
// ---------------------------------------------------------------------------

/// One attacked grid with its flip flag; label is implicitly H1.
struct AdvExample {
  nn::Tensor grid;
  bool success = false;
};

/// Checksummed binary container; load verifies magic, version and
/// checksum and restores the grids bit for bit.
void save_adv_set(const std::vector<AdvExample>& set, const std::string& path);
std::vector<AdvExample> load_adv_set(const std::string& path);

/// Deterministic per-class split of a CSV manifest, normalized to grids
/// with training-split statistics. Exposed for tests.
train::Split split_csv(const DatasetSpec& spec, const train::SplitSpec& split,
                       uint64_t seed);

/// The dataset pipeline both scenarios and run_train share: synthetic
/// generation or CSV load, then the deterministic split.
train::Split build_split(const ExperimentConfig& cfg);

}  // namespace spritz::experiment
