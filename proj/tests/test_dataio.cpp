#include <cstdio>
#include <filesystem>
#include <fstream>

#include <doctest.h>

#include "spritz/dataio.hpp"
#include "spritz/errors.hpp"
#include "spritz/models.hpp"
#include "spritz/rng.hpp"

using namespace spritz;
using namespace spritz::dataio;
namespace fs = std::filesystem;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) {
    path = (fs::temp_directory_path() / name).string();
  }
  ~TempFile() {
    std::error_code ec;
    fs::remove(path, ec);
    fs::remove(path + ".tmp", ec);
  }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

nn::Tensor randn(const std::vector<int>& shape, Rng& r) {
  nn::Tensor t = nn::Tensor::zeros(shape);
  for (double& v : t.data) v = r.normal();
  return t;
}

}  // namespace

TEST_CASE("csv loads well-formed rows and rejects malformed ones") {
  TempFile f("spritz_t_rows.csv");
  CsvSchema schema;
  schema.width = 3;

  write_text(f.path,
             "a,b,c,label\n"
             "1,2,3,0\n"
             "4.5,-2e-3,0.25,1\n"
             "7,8,9,0\n");
  auto rows = load_csv(f.path, schema);
  REQUIRE(rows.size() == 3);
  CHECK(rows[1].values == std::vector<double>{4.5, -2e-3, 0.25});
  CHECK(rows[1].label == 1);

  write_text(f.path, "a,b,c,label\n1,2,3,0\n4,5,1\n");
  CHECK_THROWS_WITH_AS(load_csv(f.path, schema),
                       doctest::Contains("line 3"), ParseError);

  write_text(f.path, "a,b,c,label\n1,oops,3,0\n");
  CHECK_THROWS_WITH_AS(load_csv(f.path, schema),
                       doctest::Contains("line 2"), ParseError);

  write_text(f.path, "a,b,c,label\n1,2,3,7\n");
  CHECK_THROWS_AS(load_csv(f.path, schema), ParseError);

  CHECK_THROWS_AS(load_csv("/nonexistent/x.csv", schema), ParseError);
}

TEST_CASE("csv write-then-read round-trips rows exactly") {
  TempFile f("spritz_t_roundtrip.csv");
  CsvSchema schema;
  schema.width = 4;
  Rng r(21);
  std::vector<FeatureRow> rows;
  for (int i = 0; i < 20; ++i) {
    FeatureRow row;
    for (int j = 0; j < 4; ++j)
      row.values.push_back(r.normal(0.0, 1e3) * std::pow(10.0, -(j * 7)));
    row.label = i % 2;
    rows.push_back(row);
  }
  write_csv(f.path, rows, schema);
  auto back = load_csv(f.path, schema);
  REQUIRE(back.size() == rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].values == rows[i].values);
    CHECK(back[i].label == rows[i].label);
  }
}

TEST_CASE("to_grid normalizes with training stats and tiles cyclically") {
  std::vector<FeatureRow> train;
  for (double v : {2.0, 6.0, 10.0}) {
    FeatureRow row;
    row.values = {v, 5.0};  // feature 1 is constant in training
    train.push_back(row);
  }
  NormStats stats = compute_stats(train);
  CHECK(stats.fmin == std::vector<double>{2.0, 5.0});
  CHECK(stats.fmax == std::vector<double>{10.0, 5.0});

  FeatureRow probe;
  probe.values = {10.0, 123.0};
  probe.label = 1;
  Example ex = to_grid(probe, stats);
  CHECK(ex.grid.shape == std::vector<int>{1, 64, 64});
  CHECK(ex.label == 1);
  CHECK(ex.grid.data[0] == 255.0);  // at train maximum
  CHECK(ex.grid.data[1] == 0.0);    // degenerate feature
  CHECK(ex.grid.data[2] == ex.grid.data[0]);  // tiling wraps at width 2

  probe.values = {2.0, 5.0};
  CHECK(to_grid(probe, stats).grid.data[0] == 0.0);  // at train minimum
  probe.values = {99.0, 5.0};
  CHECK(to_grid(probe, stats).grid.data[0] == 255.0);  // clamped

  FeatureRow bad;
  bad.values = {1.0, 2.0, 3.0};
  CHECK_THROWS_AS(to_grid(bad, stats), ShapeError);
}

TEST_CASE("synthetic dataset is deterministic, balanced and in range") {
  Dataset a = synth_dataset(8, 0.0, 42);
  Dataset b = synth_dataset(8, 0.0, 42);
  Dataset c = synth_dataset(8, 0.0, 43);
  REQUIRE(a.size() == 16);
  CHECK(a.count(0) == 8);
  CHECK(a.count(1) == 8);
  bool all_eq = true, any_diff_seed = false;
  for (int i = 0; i < a.size(); ++i) {
    all_eq = all_eq && a.items[i].grid.data == b.items[i].grid.data;
    any_diff_seed = any_diff_seed || a.items[i].grid.data != c.items[i].grid.data;
    for (double v : a.items[i].grid.data) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 255.0);
    }
  }
  CHECK(all_eq);
  CHECK(any_diff_seed);
  CHECK(a.items[0].label == 0);
  CHECK(a.items[8].label == 1);
  CHECK(a.items[8].source_id == "synth/1/0");

  Dataset noisy = synth_dataset(2, 1.0, 42);
  CHECK(noisy.items[0].grid.data != a.items[0].grid.data);

  CHECK_THROWS_AS(synth_dataset(0, 0.0, 1), ConfigError);
  CHECK_THROWS_AS(synth_dataset(4, -1.0, 1), ConfigError);
}

TEST_CASE("the two synthetic classes differ in high-frequency energy") {
  // mean absolute horizontal second difference, a cheap high-pass probe
  auto roughness = [](const nn::Tensor& g) {
    double s = 0.0;
    int n = 0;
    for (int y = 0; y < 64; ++y)
      for (int x = 1; x < 63; ++x, ++n)
        s += std::abs(g.data[y * 64 + x - 1] - 2.0 * g.data[y * 64 + x] +
                      g.data[y * 64 + x + 1]);
    return s / n;
  };
  Dataset ds = synth_dataset(32, 0.0, 7);
  double max0 = 0.0, min1 = 1e300;
  for (const auto& e : ds.items) {
    const double r = roughness(e.grid);
    if (e.label == 0)
      max0 = std::max(max0, r);
    else
      min1 = std::min(min1, r);
  }
  CHECK(min1 > max0);
}

TEST_CASE("graph checkpoints round-trip bit for bit") {
  TempFile f("spritz_t_graph.spz");
  nn::Graph g("probe", {1, 8, 8});
  int c = g.conv2d(-1, 3, 2, "c1");
  c = g.batchnorm(c, "bn1");
  c = g.relu(c);
  c = g.maxpool2x2(c);
  c = g.flatten(c);
  g.dense(c, 2, "head");
  g.init_params(99);

  // bake batch statistics so inference depends on saved running stats
  Rng r(5);
  nn::Tensor warm = randn({6, 1, 8, 8}, r);
  nn::ExecState st;
  g.forward(st, warm, true);

  save_graph(g, f.path);
  nn::Graph g2 = load_graph(f.path);
  CHECK(g2.name() == "probe");
  CHECK(g2.node_count() == g.node_count());

  nn::Tensor probe = randn({3, 1, 8, 8}, r);
  nn::ExecState s1, s2;
  const nn::Tensor& y1 = g.forward(s1, probe);
  const nn::Tensor& y2 = g2.forward(s2, probe);
  CHECK(y1.data == y2.data);
}

TEST_CASE("checkpoint corruption and mismatch are typed errors") {
  TempFile f("spritz_t_bad.spz");
  nn::Graph g("tiny", {4});
  g.dense(-1, 2, "d");
  g.init_params(1);
  save_graph(g, f.path);

  const std::string good = read_bytes(f.path);

  // truncation
  write_bytes(f.path, good.substr(0, good.size() / 2));
  CHECK_THROWS_AS(load_graph(f.path), CheckpointError);

  // single flipped payload byte fails the checksum
  std::string flipped = good;
  flipped[flipped.size() / 2] ^= 0x40;
  write_bytes(f.path, flipped);
  CHECK_THROWS_WITH_AS(load_graph(f.path), doctest::Contains("checksum"),
                       CheckpointError);

  // wrong container type
  write_bytes(f.path, good);
  CHECK_THROWS_WITH_AS(load_ensemble(f.path),
                       doctest::Contains("descriptor mismatch"),
                       CheckpointError);

  // unsupported version, checksum recomputed so only the version differs
  std::string vbad = good.substr(0, good.size() - 8);
  vbad[4] = 9;
  const uint64_t sum = fnv1a_bytes(vbad.data(), vbad.size());
  vbad.append(reinterpret_cast<const char*>(&sum), 8);
  write_bytes(f.path, vbad);
  CHECK_THROWS_WITH_AS(load_graph(f.path), doctest::Contains("version"),
                       CheckpointError);

  CHECK_THROWS_AS(load_graph("/nonexistent/x.spz"), CheckpointError);
}

TEST_CASE("ensemble checkpoints preserve thresholds and all parameters") {
  TempFile f("spritz_t_ens.spz");
  models::EnsembleModel m = models::build_ensemble(31);
  m.thr_leg = 12.25;
  m.thr_mal = 8.5;
  m.combiner_trained = true;
  save_ensemble(m, f.path);
  models::EnsembleModel m2 = load_ensemble(f.path);
  CHECK(m2.thr_leg == 12.25);
  CHECK(m2.thr_mal == 8.5);
  CHECK(m2.combiner_trained);

  Dataset ds = synth_dataset(1, 0.0, 3);
  nn::Tensor x = ds.gather({0}, 0, 1);
  models::Prediction p1 = models::ensemble_predict(m, x);
  models::Prediction p2 = models::ensemble_predict(m2, x);
  CHECK(p1.p1 == p2.p1);
  CHECK(p1.label == p2.label);

  auto t1 = m.ae_mal.state_tensors();
  auto t2 = m2.ae_mal.state_tensors();
  REQUIRE(t1.size() == t2.size());
  for (size_t i = 0; i < t1.size(); ++i) CHECK(t1[i]->data == t2[i]->data);
}
