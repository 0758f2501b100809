#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>

#include "spritz/errors.hpp"
#include "spritz/experiment.hpp"

using namespace spritz;
using namespace spritz::experiment;
using nn::Tensor;

namespace fs = std::filesystem;

namespace {

struct TempDir {
  std::string path;
  explicit TempDir(const std::string& name) {
    path = (fs::temp_directory_path() / name).string();
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Small-but-trainable run shared by the campaign tests: enough epochs
/// that the 2C classifies at least some malicious test examples
/// correctly, small enough to keep the suite quick.
ExperimentConfig tiny_config(const std::string& out) {
  ExperimentConfig cfg;
  cfg.split.train_per_class = 8;
  cfg.split.val_per_class = 3;
  cfg.split.test_per_class = 5;
  cfg.train_cfg.epochs = 6;
  cfg.train_cfg.batch_size = 4;
  cfg.train_cfg.learning_rate = 1e-3;
  cfg.sample_count = 3;
  cfg.seed = 5;
  cfg.out_dir = out;
  attacks::AttackConfig fgsm;
  fgsm.family = attacks::Family::Fgsm;
  fgsm.epsilon = 0.1;
  cfg.grid = {fgsm};
  return cfg;
}

const std::string& fixture_dir() {
  static TempDir dir("spritz_exp_fixture");
  return dir.path;
}

/// Trains once, lazily; later cases reuse the checkpoint.
const TrainArtifacts& fixture_train() {
  static TrainArtifacts art = run_train(tiny_config(fixture_dir()));
  return art;
}

}  // namespace

TEST_CASE("experiment config json round trip, defaults and rejection") {
  ExperimentConfig def = default_config();
  CHECK(def.grid.size() == 15);
  int fam[8] = {0};
  for (const auto& a : def.grid) fam[static_cast<int>(a.family)]++;
  CHECK(fam[static_cast<int>(attacks::Family::Fgsm)] == 3);
  CHECK(fam[static_cast<int>(attacks::Family::Ifgsm)] == 3);
  CHECK(fam[static_cast<int>(attacks::Family::Jsma)] == 2);
  CHECK(fam[static_cast<int>(attacks::Family::Cw)] == 3);
  CHECK(fam[static_cast<int>(attacks::Family::Bim)] == 1);
  CHECK(fam[static_cast<int>(attacks::Family::Pgd)] == 1);
  CHECK(fam[static_cast<int>(attacks::Family::Deepfool)] == 1);
  CHECK(fam[static_cast<int>(attacks::Family::Lbfgs)] == 1);

  const std::string text = config_to_json(def);
  ExperimentConfig back = config_from_json(text);
  CHECK(config_to_json(back) == text);
  CHECK(config_hash(back) == config_hash(def));

  ExperimentConfig reseeded = def;
  reseeded.seed = 6;
  CHECK(config_hash(reseeded) != config_hash(def));

  // defaults: an empty object is a fully valid config with the paper grid
  ExperimentConfig empty = config_from_json("{}");
  CHECK(empty.grid.size() == 15);
  CHECK(empty.sample_count == 500);
  CHECK(empty.split.train_per_class == 2000);

  CHECK_THROWS_AS(config_from_json("{bad"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{\"bogus\": 1}"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{\"scenario\": 3}"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{\"scenario\": \"one\"}"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{\"sample_count\": 0}"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{\"grid\": []}"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{\"grid\": [{\"family\": \"warp\"}]}"),
                  ConfigError);
  CHECK_THROWS_AS(
      config_from_json("{\"grid\": [{\"family\": \"fgsm\", \"epsilon\": -1}]}"),
      ConfigError);
  CHECK_THROWS_AS(config_from_json("{\"grid\": [{\"epsilon\": 0.1}]}"),
                  ConfigError);
  CHECK_THROWS_AS(config_from_json("{\"train\": {\"epochs\": -1}}"),
                  ConfigError);
  CHECK_THROWS_AS(config_from_json("{\"train\": {\"seed\": 3}}"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{\"threshold_percentile\": 0}"),
                  ConfigError);

  // the "i-fgsm" alias parses to the same family
  ExperimentConfig alias =
      config_from_json("{\"grid\": [{\"family\": \"i-fgsm\"}]}");
  CHECK(alias.grid.size() == 1);
  CHECK(alias.grid[0].family == attacks::Family::Ifgsm);
}

TEST_CASE("adversarial set container round trips and detects corruption") {
  TempDir dir("spritz_exp_adv");
  fs::create_directories(dir.path);
  const std::string path = dir.path + "/set.adv";

  std::vector<AdvExample> set(3);
  set[0] = {Tensor::from({1, 2, 2}, {0.0, 255.0, 1.25, 7.5}), true};
  set[1] = {Tensor::from({1, 2, 2}, {4.0, 5.0, 6.0, 7.0}), false};
  set[2] = {Tensor::from({1, 2, 2}, {0.1, 0.2, 0.3, 0.4}), true};
  save_adv_set(set, path);

  std::vector<AdvExample> back = load_adv_set(path);
  REQUIRE(back.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back[i].success == set[i].success);
    CHECK(back[i].grid.shape == set[i].grid.shape);
    CHECK(back[i].grid.data == set[i].grid.data);
  }

  std::string bytes = read_bytes(path);
  bytes[bytes.size() / 2] ^= 0x20;
  {
    std::ofstream out(path, std::ios::binary);
    out << bytes;
  }
  CHECK_THROWS_AS(load_adv_set(path), CheckpointError);

  {
    std::ofstream out(path, std::ios::binary);
    out << "SA";
  }
  CHECK_THROWS_AS(load_adv_set(path), CheckpointError);
  CHECK_THROWS_AS(load_adv_set(dir.path + "/none.adv"), CheckpointError);

  CHECK_THROWS_AS(save_adv_set({}, path), ConfigError);
  std::vector<AdvExample> mixed(2);
  mixed[0] = {Tensor::zeros({1, 2, 2}), false};
  mixed[1] = {Tensor::zeros({1, 3}), false};
  CHECK_THROWS_AS(save_adv_set(mixed, path), ShapeError);
}

TEST_CASE("split_csv normalizes grids per class and is deterministic") {
  TempDir dir("spritz_exp_csv");
  fs::create_directories(dir.path);
  const std::string path = dir.path + "/rows.csv";

  dataio::CsvSchema schema;
  schema.width = 2;
  schema.label_column = -1;
  std::vector<dataio::FeatureRow> rows;
  for (int i = 0; i < 5; ++i) rows.push_back({{0.0, 5.0}, 0});
  for (int i = 0; i < 5; ++i) rows.push_back({{10.0, 15.0}, 1});
  dataio::write_csv(path, rows, schema);

  DatasetSpec spec;
  spec.csv_path = path;
  spec.schema = schema;
  train::SplitSpec split;
  split.train_per_class = 2;
  split.val_per_class = 1;
  split.test_per_class = 1;

  train::Split sp = split_csv(spec, split, 9);
  CHECK(sp.train.size() == 4);
  CHECK(sp.val.size() == 2);
  CHECK(sp.test.size() == 2);
  for (const auto& part : {sp.train, sp.val, sp.test})
    for (const auto& e : part.items) {
      const double want = e.label == 0 ? 0.0 : 255.0;
      for (double v : e.grid.data) CHECK(v == want);
    }

  train::Split again = split_csv(spec, split, 9);
  for (int i = 0; i < sp.train.size(); ++i)
    CHECK(sp.train.items[i].grid.data == again.train.items[i].grid.data);

  split.train_per_class = 5;  // 5+1+1 > 5 rows per class
  CHECK_THROWS_AS(split_csv(spec, split, 9), ConfigError);
}

TEST_CASE("run_train writes checkpoint, accuracy table and histories deterministically") {
  const TrainArtifacts& art = fixture_train();
  const std::string& dir = fixture_dir();

  CHECK(fs::exists(art.checkpoint_path));
  CHECK(fs::exists(art.report_path));
  for (const char* h : {"2c", "ae_leg", "ae_mal", "cmb"})
    CHECK(fs::exists(dir + "/history_" + std::string(h) + ".csv"));

  const std::string acc = read_bytes(art.report_path);
  CHECK(acc.rfind("model,accuracy,p_md,p_fa\n", 0) == 0);
  CHECK(acc.find("\n2c,") != std::string::npos);
  CHECK(acc.find("\n1c_leg,") != std::string::npos);
  CHECK(acc.find("\n1c_mal,") != std::string::npos);
  CHECK(acc.find("\ncmb,") != std::string::npos);
  CHECK(art.e2c.accuracy >= 0.0);
  CHECK(art.e2c.accuracy <= 1.0);
  CHECK(art.model.thr_leg >= 0.0);
  CHECK(art.model.thr_mal >= 0.0);

  // reloaded checkpoint answers bit-identically
  models::EnsembleModel loaded = dataio::load_ensemble(art.checkpoint_path);
  train::Split sp = build_split(tiny_config(fixture_dir()));
  std::vector<int> one(sp.test.size());
  for (int i = 0; i < sp.test.size(); ++i) one[i] = i;
  Tensor x = sp.test.gather(one, 0, 1);
  models::EnsembleModel& fresh = const_cast<TrainArtifacts&>(art).model;
  models::Prediction a = models::ensemble_predict(fresh, x);
  models::Prediction b = models::ensemble_predict(loaded, x);
  CHECK(a.label == b.label);
  CHECK(a.p1 == b.p1);

  // identical config, different directory: byte-identical artifacts
  TempDir rerun("spritz_exp_rerun");
  ExperimentConfig cfg2 = tiny_config(rerun.path);
  TrainArtifacts art2 = run_train(cfg2);
  CHECK(read_bytes(art2.report_path) == read_bytes(art.report_path));
  CHECK(read_bytes(art2.checkpoint_path) == read_bytes(art.checkpoint_path));

  // a bad dataset path fails before anything is written
  TempDir broken("spritz_exp_broken");
  ExperimentConfig bad = tiny_config(broken.path);
  bad.dataset.csv_path = broken.path + "/missing.csv";
  CHECK_THROWS(run_train(bad));
  CHECK(!fs::exists(broken.path + "/ensemble.spz"));
  CHECK(!fs::exists(broken.path + "/accuracy.csv"));
}

TEST_CASE("scenario 1 persists adversarial sets and evaluates transfer on reload") {
  const TrainArtifacts& art = fixture_train();
  REQUIRE(art.e2c.counts[1][1] >= 1);  // someone to attack

  ExperimentConfig cfg = tiny_config(fixture_dir());
  attacks::AttackConfig ifgsm;
  ifgsm.family = attacks::Family::Ifgsm;
  ifgsm.epsilon = 0.1;
  ifgsm.steps = 3;
  attacks::AttackConfig jsma;
  jsma.family = attacks::Family::Jsma;
  jsma.theta = 0.1;
  jsma.max_l0 = 3;
  cfg.grid.push_back(ifgsm);
  cfg.grid.push_back(jsma);

  ReportBundle b = run_scenario1(cfg);
  CHECK(b.scenario == 1);
  CHECK(b.config_hash == config_hash(cfg));
  CHECK(b.denominator == "all-attempted");
  REQUIRE(b.rows.size() == cfg.grid.size());
  REQUIRE(b.outcomes.size() == cfg.grid.size());
  REQUIRE(b.adv_paths.size() == cfg.grid.size());
  REQUIRE(b.transfer.size() == cfg.grid.size());

  for (size_t k = 0; k < b.rows.size(); ++k) {
    CHECK(b.rows[k].target_id == "2c");
    CHECK(b.rows[k].n == static_cast<int>(b.outcomes[k].size()));
    CHECK(b.rows[k].n <= cfg.sample_count);
    CHECK(b.rows[k].asr >= 0.0);
    CHECK(b.rows[k].asr <= 1.0);

    REQUIRE(fs::exists(b.adv_paths[k]));
    std::vector<AdvExample> set = load_adv_set(b.adv_paths[k]);
    REQUIRE(set.size() == b.outcomes[k].size());
    for (size_t j = 0; j < set.size(); ++j) {
      CHECK(set[j].success == b.outcomes[k][j].success);
      for (double v : set[j].grid.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 255.0);
      }
    }

    CHECK(b.transfer[k].attack_id == b.rows[k].attack_id);
    CHECK(b.transfer[k].n == b.rows[k].n);
    for (double r : {b.transfer[k].mis_leg, b.transfer[k].mis_mal,
                     b.transfer[k].mis_spritz}) {
      CHECK(r >= 0.0);
      CHECK(r <= 1.0);
    }
  }

  // bundle json is lossless
  ReportBundle back = bundle_from_json(bundle_to_json(b));
  CHECK(bundle_to_json(back) == bundle_to_json(b));
  CHECK(same_results(b, back));

  // emitted files
  std::vector<std::string> files = emit_reports(b, fixture_dir());
  REQUIRE(files.size() == 3);
  for (const auto& f : files) CHECK(fs::exists(f));
  const std::string table = read_bytes(files[0]);
  CHECK(table.rfind("attack,psnr,l1,max,asr,time\n", 0) == 0);
  const std::string transfer = read_bytes(files[1]);
  CHECK(transfer.rfind("attack,n,leg,mal,spritz\n", 0) == 0);

  // rerun reproduces everything except wall time
  ReportBundle b2 = run_scenario1(cfg);
  CHECK(same_results(b, b2));

  // no checkpoint, no campaign
  TempDir cold("spritz_exp_cold");
  ExperimentConfig nocp = cfg;
  nocp.out_dir = cold.path;
  CHECK_THROWS_AS(run_scenario1(nocp), CheckpointError);
}

TEST_CASE("scenario 2 reports ensemble rows, keeping elapsed on Fails") {
  const TrainArtifacts& art = fixture_train();
  REQUIRE(art.ecmb.counts[1][1] >= 1);

  ExperimentConfig cfg = tiny_config(fixture_dir());
  cfg.scenario = 2;
  attacks::AttackConfig feeble;
  feeble.family = attacks::Family::Fgsm;
  feeble.epsilon = 1e-9;  // perturbation far below any decision boundary
  cfg.grid = {feeble};

  ReportBundle b = run_scenario2(cfg);
  CHECK(b.scenario == 2);
  REQUIRE(b.rows.size() == 1);
  CHECK(b.rows[0].target_id == "ensemble");
  CHECK(b.adv_paths.empty());
  CHECK(b.transfer.empty());
  CHECK(b.rows[0].fails == (b.rows[0].asr == 0.0));
  CHECK(b.rows[0].elapsed >= 0.0);

  if (b.rows[0].fails) {
    const std::string csv = metrics::report_csv(b.rows);
    CHECK(csv.find("Fails") != std::string::npos);
  }

  std::vector<std::string> files = emit_reports(b, fixture_dir());
  REQUIRE(files.size() == 2);  // table + bundle, no transfer
  CHECK(files[0].find("scenario2_table.csv") != std::string::npos);
  CHECK(files[1].find("scenario2_bundle.json") != std::string::npos);
}
