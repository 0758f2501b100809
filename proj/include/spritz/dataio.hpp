#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spritz/graph.hpp"
#include "spritz/models.hpp"

namespace spritz::dataio {

using nn::Graph;
using nn::Tensor;

// ---------------------------------------------------------------------------
// Dataset types
// ---------------------------------------------------------------------------

/// One 64x64 grid in [0,255]. Label 0 is H0 (pristine), 1 is H1 (malicious).
struct Example {
  Tensor grid;  // {1, 64, 64}
  int label = 0;
  std::string source_id;
};

struct Dataset {
  std::vector<Example> items;

  int size() const { return static_cast<int>(items.size()); }
  int count(int label) const;
  /// Copies the indexed examples into a {n, 1, 64, 64} batch.
  Tensor gather(const std::vector<int>& idx, int begin, int n,
                std::vector<int>* labels = nullptr) const;
};

// ---------------------------------------------------------------------------
// CSV feature rows
// ---------------------------------------------------------------------------

struct FeatureRow {
  std::vector<double> values;
  int label = 0;
};

struct CsvSchema {
  int width = 115;       // feature columns, label excluded
  int label_column = -1; // index within the row; -1 means last column
};

/// Reads header + rows. Malformed input raises ParseError naming the
/// 1-based line (and column where it applies).
std::vector<FeatureRow> load_csv(const std::string& path,
                                 const CsvSchema& schema);

/// Shortest round-trippable decimal form; load_csv(write_csv(rows))
/// reproduces the rows bit for bit.
void write_csv(const std::string& path, const std::vector<FeatureRow>& rows,
               const CsvSchema& schema);

/// Per-feature min/max. Compute these on the training split only.
struct NormStats {
  std::vector<double> fmin;
  std::vector<double> fmax;
};

NormStats compute_stats(const std::vector<FeatureRow>& train);

/// Min-max normalizes each feature to [0,255] with the training stats
/// (clamped; a degenerate feature with min == max maps to 0), tiles the
/// vector cyclically to 4096 values and reshapes row-major to 64x64.
Example to_grid(const FeatureRow& row, const NormStats& stats);

// ---------------------------------------------------------------------------
// Synthetic desk-scale dataset
// ---------------------------------------------------------------------------

/// Two-class synthetic grids: both classes share a smooth low-frequency
/// plaid; class 1 adds a high-frequency component. `difficulty` scales
/// additive pixel noise (0 = clean, separable). Deterministic per
/// (seed, class, index); values clamped to [0,255].
Dataset synth_dataset(int n_per_class, double difficulty, uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoints (.spz)
// ---------------------------------------------------------------------------

/// Self-describing container: magic, format version, a JSON architecture
/// descriptor, raw little-endian float64 tensor payload and a whole-file
/// checksum. Writes go to a temp file renamed into place.
void save_graph(const Graph& g, const std::string& path);

/// Rebuilds the graph from the stored descriptor and restores every
/// tensor bit for bit. CheckpointError on mismatch or corruption.
Graph load_graph(const std::string& path);

void save_ensemble(const models::EnsembleModel& m, const std::string& path);
models::EnsembleModel load_ensemble(const std::string& path);

}  // namespace spritz::dataio
