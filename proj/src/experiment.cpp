#include "spritz/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "spritz/errors.hpp"
#include "spritz/rng.hpp"

namespace spritz::experiment {

namespace fs = std::filesystem;
using json = nlohmann::json;
using attacks::AttackConfig;
using dataio::Dataset;
using nn::Tensor;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::string fixed4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

// -- config JSON helpers ----------------------------------------------------

void check_keys(const json& o, const std::string& where,
                std::initializer_list<const char*> allowed) {
  if (!o.is_object())
    throw ConfigError("config: " + where + " must be an object");
  for (auto it = o.begin(); it != o.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) known = known || it.key() == k;
    if (!known)
      throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
  }
}

double jnum(const json& o, const char* key, double dflt) {
  if (!o.contains(key)) return dflt;
  const json& v = o.at(key);
  if (!v.is_number())
    throw ConfigError(std::string("config: '") + key + "' must be a number");
  return v.get<double>();
}

int jint(const json& o, const char* key, int dflt) {
  if (!o.contains(key)) return dflt;
  const json& v = o.at(key);
  if (!v.is_number_integer())
    throw ConfigError(std::string("config: '") + key + "' must be an integer");
  return v.get<int>();
}

uint64_t juint(const json& o, const char* key, uint64_t dflt) {
  if (!o.contains(key)) return dflt;
  const json& v = o.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && v.get<int64_t>() < 0 &&
                                 !v.is_number_unsigned()))
    throw ConfigError(std::string("config: '") + key +
                      "' must be a nonnegative integer");
  return v.get<uint64_t>();
}

std::string jstr(const json& o, const char* key, const std::string& dflt) {
  if (!o.contains(key)) return dflt;
  const json& v = o.at(key);
  if (!v.is_string())
    throw ConfigError(std::string("config: '") + key + "' must be a string");
  return v.get<std::string>();
}

json attack_to_json(const AttackConfig& a) {
  json o;
  o["family"] = attacks::family_name(a.family);
  o["epsilon"] = a.epsilon;
  o["steps"] = a.steps;
  o["theta"] = a.theta;
  o["alpha"] = a.alpha;
  o["step_size"] = a.step_size;
  o["confidence"] = a.confidence;
  o["max_l0"] = a.max_l0;
  o["iterations"] = a.iterations;
  o["overshoot"] = a.overshoot;
  o["cw_lr"] = a.cw_lr;
  o["cw_tradeoff"] = a.cw_tradeoff;
  o["lbfgs_c0"] = a.lbfgs_c0;
  o["lbfgs_fixed_c"] = a.lbfgs_fixed_c;
  return o;
}

AttackConfig attack_from_json(const json& o, int idx) {
  const std::string where = "grid[" + std::to_string(idx) + "]";
  check_keys(o, where,
             {"family", "epsilon", "steps", "theta", "alpha", "step_size",
              "confidence", "max_l0", "iterations", "overshoot", "cw_lr",
              "cw_tradeoff", "lbfgs_c0", "lbfgs_fixed_c"});
  if (!o.contains("family"))
    throw ConfigError("config: " + where + " needs a 'family'");
  AttackConfig a;
  a.family = attacks::family_from_string(jstr(o, "family", ""));
  a.epsilon = jnum(o, "epsilon", a.epsilon);
  a.steps = jint(o, "steps", a.steps);
  a.theta = jnum(o, "theta", a.theta);
  a.alpha = jnum(o, "alpha", a.alpha);
  a.step_size = jnum(o, "step_size", a.step_size);
  a.confidence = jnum(o, "confidence", a.confidence);
  a.max_l0 = jint(o, "max_l0", a.max_l0);
  a.iterations = jint(o, "iterations", a.iterations);
  a.overshoot = jnum(o, "overshoot", a.overshoot);
  a.cw_lr = jnum(o, "cw_lr", a.cw_lr);
  a.cw_tradeoff = jnum(o, "cw_tradeoff", a.cw_tradeoff);
  a.lbfgs_c0 = jnum(o, "lbfgs_c0", a.lbfgs_c0);
  a.lbfgs_fixed_c = jnum(o, "lbfgs_fixed_c", a.lbfgs_fixed_c);
  return a;
}

// Infinity is a legal PSNR but not a legal JSON number.
json num_or_inf(double v) {
  if (std::isinf(v)) return json("inf");
  return json(v);
}

double parse_num_or_inf(const json& v, const std::string& where) {
  if (v.is_string()) {
    if (v.get<std::string>() == "inf") return kInf;
    throw ConfigError("bundle: non-numeric " + where);
  }
  if (!v.is_number()) throw ConfigError("bundle: non-numeric " + where);
  return v.get<double>();
}

// -- campaign plumbing ------------------------------------------------------

std::string row_slug(const std::string& label, int idx) {
  std::string s;
  for (char c : label) {
    const unsigned char u = static_cast<unsigned char>(c);
    if (std::isalnum(u) || c == '.')
      s += static_cast<char>(std::tolower(u));
    else if (!s.empty() && s.back() != '_')
      s += '_';
  }
  while (!s.empty() && s.back() == '_') s.pop_back();
  char head[16];
  std::snprintf(head, sizeof(head), "%02d_", idx);
  return head + s;
}

/// Malicious test examples the target itself classifies H1, in dataset
/// order, capped at `want`.
Tensor pick_targets(attacks::DifferentiableTarget& t, const Dataset& test,
                    int want) {
  std::vector<int> one(test.size());
  for (int i = 0; i < test.size(); ++i) one[i] = i;
  std::vector<int> sel;
  for (int i = 0; i < test.size() && static_cast<int>(sel.size()) < want; ++i) {
    if (test.items[i].label != 1) continue;
    Tensor x = test.gather(one, i, 1);
    if (t.predict(x).label == 1) sel.push_back(i);
  }
  if (sel.empty())
    throw ConfigError(
        "scenario: the target classifies no malicious test example "
        "correctly; train first or lower the difficulty");
  return test.gather(sel, 0, static_cast<int>(sel.size()));
}

std::vector<metrics::Outcome> outcome_rows(
    const std::vector<attacks::AttackOutcome>& outs, const std::string& attack,
    const std::string& target) {
  std::vector<metrics::Outcome> rows;
  rows.reserve(outs.size());
  for (const auto& o : outs) {
    metrics::Outcome r;
    r.attack_id = attack;
    r.target_id = target;
    r.success = o.success;
    r.psnr = o.psnr;
    r.l1 = o.l1;
    r.max_abs = o.max_abs;
    r.seconds = o.seconds;
    rows.push_back(r);
  }
  return rows;
}

Dataset label_subset(const Dataset& ds, int label) {
  Dataset out;
  for (const auto& e : ds.items)
    if (e.label == label) out.items.push_back(e);
  return out;
}

/// Removes every path in `made` (ignoring failures); used to erase
/// partial outputs when a pipeline stage throws.
struct Cleanup {
  std::vector<std::string> made;
  bool armed = true;
  ~Cleanup() {
    if (!armed) return;
    std::error_code ec;
    for (const auto& p : made) fs::remove(p, ec);
  }
};

void write_text_file(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ConfigError("cannot open '" + tmp + "' for writing");
    out << text;
    if (!out) throw ConfigError("write to '" + tmp + "' failed");
  }
  fs::rename(tmp, path);
}

// -- binary scribbling for the adversarial container ------------------------

void put_u32(std::string& buf, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  buf.append(b, 4);
}

void put_u64(std::string& buf, uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  buf.append(b, 8);
}

uint32_t get_u32(const std::string& buf, size_t& at) {
  uint32_t v;
  std::memcpy(&v, buf.data() + at, 4);
  at += 4;
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  if (scenario != 1 && scenario != 2)
    throw ConfigError("config: scenario must be 1 or 2");
  if (sample_count < 1)
    throw ConfigError("config: sample_count must be >= 1");
  if (grid.empty()) throw ConfigError("config: attack grid is empty");
  for (const auto& a : grid) a.validate();
  if (!(threshold_percentile > 0.0) || threshold_percentile > 100.0)
    throw ConfigError("config: threshold_percentile must be in (0, 100]");
  if (dataset.difficulty < 0.0)
    throw ConfigError("config: dataset difficulty must be >= 0");
  if (out_dir.empty()) throw ConfigError("config: out_dir is empty");
  train_cfg.validate();
}

std::vector<AttackConfig> default_grid() {
  using attacks::Family;
  std::vector<AttackConfig> g;
  for (double eps : {0.1, 0.01, 0.001}) {
    AttackConfig a;
    a.family = Family::Fgsm;
    a.epsilon = eps;
    g.push_back(a);
  }
  for (double eps : {0.1, 0.01, 0.001}) {
    AttackConfig a;
    a.family = Family::Ifgsm;
    a.epsilon = eps;
    g.push_back(a);
  }
  for (double theta : {0.1, 0.01}) {
    AttackConfig a;
    a.family = Family::Jsma;
    a.theta = theta;
    g.push_back(a);
  }
  for (Family f : {Family::Bim, Family::Pgd, Family::Deepfool, Family::Lbfgs}) {
    AttackConfig a;
    a.family = f;
    g.push_back(a);
  }
  for (double c : {0.0, 50.0, 100.0}) {
    AttackConfig a;
    a.family = Family::Cw;
    a.confidence = c;
    g.push_back(a);
  }
  return g;
}

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  cfg.grid = default_grid();
  return cfg;
}

ExperimentConfig config_from_json(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: JSON parse failed: ") + e.what());
  }
  check_keys(root, "config",
             {"dataset", "split", "train", "threshold_percentile", "grid",
              "scenario", "sample_count", "out_dir", "seed"});
  ExperimentConfig cfg;
  if (root.contains("dataset")) {
    const json& d = root.at("dataset");
    check_keys(d, "dataset",
               {"csv_path", "difficulty", "csv_width", "label_column"});
    cfg.dataset.csv_path = jstr(d, "csv_path", "");
    cfg.dataset.difficulty = jnum(d, "difficulty", 0.0);
    cfg.dataset.schema.width = jint(d, "csv_width", cfg.dataset.schema.width);
    cfg.dataset.schema.label_column =
        jint(d, "label_column", cfg.dataset.schema.label_column);
  }
  if (root.contains("split")) {
    const json& s = root.at("split");
    check_keys(s, "split",
               {"train_per_class", "val_per_class", "test_per_class"});
    cfg.split.train_per_class =
        jint(s, "train_per_class", cfg.split.train_per_class);
    cfg.split.val_per_class = jint(s, "val_per_class", cfg.split.val_per_class);
    cfg.split.test_per_class =
        jint(s, "test_per_class", cfg.split.test_per_class);
  }
  if (root.contains("train")) {
    const json& t = root.at("train");
    check_keys(t, "train",
               {"learning_rate", "adam_beta1", "adam_beta2", "batch_size",
                "epochs"});
    cfg.train_cfg.learning_rate =
        jnum(t, "learning_rate", cfg.train_cfg.learning_rate);
    cfg.train_cfg.adam_beta1 = jnum(t, "adam_beta1", cfg.train_cfg.adam_beta1);
    cfg.train_cfg.adam_beta2 = jnum(t, "adam_beta2", cfg.train_cfg.adam_beta2);
    cfg.train_cfg.batch_size = jint(t, "batch_size", cfg.train_cfg.batch_size);
    cfg.train_cfg.epochs = jint(t, "epochs", cfg.train_cfg.epochs);
  }
  cfg.threshold_percentile =
      jnum(root, "threshold_percentile", cfg.threshold_percentile);
  cfg.scenario = jint(root, "scenario", cfg.scenario);
  cfg.sample_count = jint(root, "sample_count", cfg.sample_count);
  cfg.out_dir = jstr(root, "out_dir", cfg.out_dir);
  cfg.seed = juint(root, "seed", cfg.seed);
  if (root.contains("grid")) {
    const json& g = root.at("grid");
    if (!g.is_array()) throw ConfigError("config: 'grid' must be an array");
    for (size_t i = 0; i < g.size(); ++i)
      cfg.grid.push_back(attack_from_json(g[i], static_cast<int>(i)));
  } else {
    cfg.grid = default_grid();
  }
  cfg.validate();
  return cfg;
}

std::string config_to_json(const ExperimentConfig& cfg) {
  json root;
  root["dataset"] = {{"csv_path", cfg.dataset.csv_path},
                     {"difficulty", cfg.dataset.difficulty},
                     {"csv_width", cfg.dataset.schema.width},
                     {"label_column", cfg.dataset.schema.label_column}};
  root["split"] = {{"train_per_class", cfg.split.train_per_class},
                   {"val_per_class", cfg.split.val_per_class},
                   {"test_per_class", cfg.split.test_per_class}};
  root["train"] = {{"learning_rate", cfg.train_cfg.learning_rate},
                   {"adam_beta1", cfg.train_cfg.adam_beta1},
                   {"adam_beta2", cfg.train_cfg.adam_beta2},
                   {"batch_size", cfg.train_cfg.batch_size},
                   {"epochs", cfg.train_cfg.epochs}};
  root["threshold_percentile"] = cfg.threshold_percentile;
  root["scenario"] = cfg.scenario;
  root["sample_count"] = cfg.sample_count;
  root["out_dir"] = cfg.out_dir;
  root["seed"] = cfg.seed;
  json grid = json::array();
  for (const auto& a : cfg.grid) grid.push_back(attack_to_json(a));
  root["grid"] = grid;
  return root.dump(2);
}

std::string config_hash(const ExperimentConfig& cfg) {
  const uint64_t h = fnv1a(config_to_json(cfg));
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, h);
  return buf;
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

train::Split split_csv(const DatasetSpec& spec, const train::SplitSpec& split,
                       uint64_t seed) {
  const std::vector<dataio::FeatureRow> rows =
      dataio::load_csv(spec.csv_path, spec.schema);
  const int need =
      split.train_per_class + split.val_per_class + split.test_per_class;
  std::vector<int> pool[2];
  for (size_t i = 0; i < rows.size(); ++i)
    pool[rows[i].label == 1].push_back(static_cast<int>(i));
  for (int c = 0; c < 2; ++c) {
    if (static_cast<int>(pool[c].size()) < need)
      throw ConfigError("split_csv: class H" + std::to_string(c) + " has " +
                        std::to_string(pool[c].size()) + " rows, need " +
                        std::to_string(need));
    Rng r(mix_seed(seed, fnv1a("split/H" + std::to_string(c))));
    r.shuffle(pool[c]);
  }

  // Normalization statistics come from the training rows alone.
  std::vector<dataio::FeatureRow> train_rows;
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < split.train_per_class; ++i)
      train_rows.push_back(rows[pool[c][i]]);
  const dataio::NormStats stats = dataio::compute_stats(train_rows);

  train::Split out;
  auto take = [&](Dataset& dst, int begin, int count) {
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < count; ++i)
        dst.items.push_back(dataio::to_grid(rows[pool[c][begin + i]], stats));
  };
  take(out.train, 0, split.train_per_class);
  take(out.val, split.train_per_class, split.val_per_class);
  take(out.test, split.train_per_class + split.val_per_class,
       split.test_per_class);
  return out;
}

train::Split build_split(const ExperimentConfig& cfg) {
  if (!cfg.dataset.csv_path.empty())
    return split_csv(cfg.dataset, cfg.split, cfg.seed);
  const int need = cfg.split.train_per_class + cfg.split.val_per_class +
                   cfg.split.test_per_class;
  Dataset ds = dataio::synth_dataset(need, cfg.dataset.difficulty,
                                     mix_seed(cfg.seed, fnv1a("data")));
  return train::split_dataset(ds, cfg.split, cfg.seed);
}

// ---------------------------------------------------------------------------
// Training pipeline
// ---------------------------------------------------------------------------

TrainArtifacts run_train(const ExperimentConfig& cfg) {
  cfg.validate();
  train::Split sp = build_split(cfg);
  fs::create_directories(cfg.out_dir);

  Cleanup clean;
  TrainArtifacts art;
  art.model = models::build_ensemble(cfg.seed);
  train::TrainConfig tc = cfg.train_cfg;
  tc.seed = mix_seed(cfg.seed, fnv1a("train"));

  const Dataset leg_train = label_subset(sp.train, 0);
  const Dataset leg_val = label_subset(sp.val, 0);
  const Dataset mal_train = label_subset(sp.train, 1);
  const Dataset mal_val = label_subset(sp.val, 1);

  art.r2c = train::train_2c(art.model.cnn2c, sp.train, sp.val, tc);
  art.rleg = train::train_autoencoder(art.model.ae_leg, leg_train, leg_val, tc);
  art.rmal = train::train_autoencoder(art.model.ae_mal, mal_train, mal_val, tc);
  art.model.thr_leg = train::calibrate_threshold(art.model.ae_leg, leg_train,
                                                 cfg.threshold_percentile);
  art.model.thr_mal = train::calibrate_threshold(art.model.ae_mal, mal_train,
                                                 cfg.threshold_percentile);
  art.rcmb = train::train_combiner(art.model, sp.train, sp.val, tc);

  art.e2c = train::evaluate_2c(art.model.cnn2c, sp.test);
  art.eleg =
      train::evaluate_oneclass(art.model.ae_leg, art.model.thr_leg, 0, sp.test);
  art.emal =
      train::evaluate_oneclass(art.model.ae_mal, art.model.thr_mal, 1, sp.test);
  art.ecmb = train::evaluate_ensemble(art.model, sp.test);

  const std::string base = cfg.out_dir + "/";
  auto history = [&](const std::string& name,
                     const std::vector<train::EpochStat>& h) {
    const std::string p = base + "history_" + name + ".csv";
    train::write_history_csv(p, h);
    clean.made.push_back(p);
  };
  history("2c", art.r2c.history);
  history("ae_leg", art.rleg.history);
  history("ae_mal", art.rmal.history);
  history("cmb", art.rcmb.history);

  std::string acc = "model,accuracy,p_md,p_fa\n";
  auto acc_row = [&](const std::string& name, const train::EvalResult& e) {
    acc += name + "," + fixed4(e.accuracy) + "," + fixed4(e.p_md) + "," +
           fixed4(e.p_fa) + "\n";
  };
  acc_row("2c", art.e2c);
  acc_row("1c_leg", art.eleg);
  acc_row("1c_mal", art.emal);
  acc_row("cmb", art.ecmb);
  art.report_path = base + "accuracy.csv";
  write_text_file(art.report_path, acc);
  clean.made.push_back(art.report_path);

  art.checkpoint_path = base + "ensemble.spz";
  dataio::save_ensemble(art.model, art.checkpoint_path);
  clean.made.push_back(art.checkpoint_path);

  clean.armed = false;
  return art;
}

// ---------------------------------------------------------------------------
// Adversarial set persistence
// ---------------------------------------------------------------------------

namespace {
constexpr char kAdvMagic[4] = {'S', 'A', 'D', 'V'};
constexpr uint32_t kAdvVersion = 1;
}  // namespace

void save_adv_set(const std::vector<AdvExample>& set,
                  const std::string& path) {
  if (set.empty()) throw ConfigError("save_adv_set: empty set");
  const std::vector<int>& shape = set.front().grid.shape;
  for (const auto& e : set)
    if (e.grid.shape != shape)
      throw ShapeError("save_adv_set: mixed example shapes");

  std::string buf;
  buf.append(kAdvMagic, 4);
  put_u32(buf, kAdvVersion);
  put_u32(buf, static_cast<uint32_t>(set.size()));
  put_u32(buf, static_cast<uint32_t>(shape.size()));
  for (int d : shape) put_u32(buf, static_cast<uint32_t>(d));
  for (const auto& e : set) {
    buf.push_back(e.success ? 1 : 0);
    buf.append(reinterpret_cast<const char*>(e.grid.ptr()),
               e.grid.data.size() * sizeof(double));
  }
  put_u64(buf, fnv1a_bytes(buf.data(), buf.size()));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot open '" + tmp + "' for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("write to '" + tmp + "' failed");
  }
  fs::rename(tmp, path);
}

std::vector<AdvExample> load_adv_set(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("adv set '" + path + "' cannot be opened");
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  if (buf.size() < 4 + 4 + 4 + 4 + 8)
    throw CheckpointError("adv set '" + path + "' truncated");

  uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
  if (stored != fnv1a_bytes(buf.data(), buf.size() - 8))
    throw CheckpointError("adv set '" + path + "' checksum mismatch");

  size_t at = 0;
  if (std::memcmp(buf.data(), kAdvMagic, 4) != 0)
    throw CheckpointError("adv set '" + path + "' bad magic");
  at += 4;
  if (get_u32(buf, at) != kAdvVersion)
    throw CheckpointError("adv set '" + path + "' unsupported version");
  const uint32_t count = get_u32(buf, at);
  const uint32_t ndims = get_u32(buf, at);
  if (ndims == 0 || ndims > 8 || buf.size() < at + 4 * ndims)
    throw CheckpointError("adv set '" + path + "' bad shape header");
  std::vector<int> shape(ndims);
  for (uint32_t i = 0; i < ndims; ++i)
    shape[i] = static_cast<int>(get_u32(buf, at));
  const int64_t numel = nn::numel_of(shape);
  const size_t per = 1 + static_cast<size_t>(numel) * sizeof(double);
  if (buf.size() - 8 - at != per * count)
    throw CheckpointError("adv set '" + path + "' payload size mismatch");

  std::vector<AdvExample> set(count);
  for (uint32_t i = 0; i < count; ++i) {
    set[i].success = buf[at] != 0;
    at += 1;
    set[i].grid.resize_nofill(shape);
    std::memcpy(set[i].grid.ptr(), buf.data() + at,
                static_cast<size_t>(numel) * sizeof(double));
    at += static_cast<size_t>(numel) * sizeof(double);
  }
  return set;
}

// ---------------------------------------------------------------------------
// Scenarios
// ---------------------------------------------------------------------------

namespace {

ReportBundle run_campaign(const ExperimentConfig& cfg,
                          attacks::DifferentiableTarget& target,
                          const Dataset& test, bool persist,
                          models::EnsembleModel* transfer_model) {
  ReportBundle b;
  b.scenario = cfg.scenario;
  b.config_hash = config_hash(cfg);

  Tensor batch = pick_targets(target, test, cfg.sample_count);
  for (size_t k = 0; k < cfg.grid.size(); ++k) {
    const AttackConfig& row = cfg.grid[k];
    attacks::BatchResult br = attacks::attack_batch(target, batch, row);
    b.rows.push_back(br.report);
    b.outcomes.push_back(
        outcome_rows(br.outcomes, row.row_label(), target.id()));
    if (persist) {
      std::vector<AdvExample> set;
      set.reserve(br.outcomes.size());
      for (const auto& o : br.outcomes)
        set.push_back({o.adversarial, o.success});
      const std::string p =
          cfg.out_dir + "/s1_" +
          row_slug(row.row_label(), static_cast<int>(k)) + ".adv";
      save_adv_set(set, p);
      b.adv_paths.push_back(p);
    }
  }

  // Transfer rates come from the reloaded files, never from re-running
  // the attack.
  if (persist && transfer_model) {
    models::EnsembleModel& m = *transfer_model;
    for (size_t k = 0; k < b.adv_paths.size(); ++k) {
      const std::vector<AdvExample> set = load_adv_set(b.adv_paths[k]);
      TransferRow tr;
      tr.attack_id = b.rows[k].attack_id;
      tr.n = static_cast<int>(set.size());
      int leg = 0, mal = 0, spz = 0;
      for (const auto& e : set) {
        leg += models::oneclass_decide(m.ae_leg, m.thr_leg, e.grid).accept;
        mal += !models::oneclass_decide(m.ae_mal, m.thr_mal, e.grid).accept;
        spz += models::ensemble_predict(m, e.grid).label == 0;
      }
      tr.mis_leg = static_cast<double>(leg) / tr.n;
      tr.mis_mal = static_cast<double>(mal) / tr.n;
      tr.mis_spritz = static_cast<double>(spz) / tr.n;
      b.transfer.push_back(tr);
    }
  }
  return b;
}

}  // namespace

ReportBundle run_scenario1(const ExperimentConfig& cfg) {
  cfg.validate();
  models::EnsembleModel m =
      dataio::load_ensemble(cfg.out_dir + "/ensemble.spz");
  train::Split sp = build_split(cfg);
  fs::create_directories(cfg.out_dir);
  attacks::Cnn2cTarget target(m.cnn2c);
  return run_campaign(cfg, target, sp.test, true, &m);
}

ReportBundle run_scenario2(const ExperimentConfig& cfg) {
  cfg.validate();
  models::EnsembleModel m =
      dataio::load_ensemble(cfg.out_dir + "/ensemble.spz");
  train::Split sp = build_split(cfg);
  attacks::EnsembleTarget target(m);
  return run_campaign(cfg, target, sp.test, false, nullptr);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

std::string bundle_to_json(const ReportBundle& b) {
  json root;
  root["scenario"] = b.scenario;
  root["config_hash"] = b.config_hash;
  root["denominator"] = b.denominator;
  json rows = json::array();
  for (const auto& r : b.rows) {
    json o;
    o["attack"] = r.attack_id;
    o["target"] = r.target_id;
    o["asr"] = r.asr;
    o["mean_psnr"] = num_or_inf(r.mean_psnr);
    o["mean_l1"] = r.mean_l1;
    o["mean_max_abs"] = r.mean_max_abs;
    o["elapsed"] = r.elapsed;
    o["fails"] = r.fails;
    o["n"] = r.n;
    rows.push_back(o);
  }
  root["rows"] = rows;
  json outs = json::array();
  for (const auto& row : b.outcomes) {
    json arr = json::array();
    for (const auto& o : row) {
      json e;
      e["attack"] = o.attack_id;
      e["target"] = o.target_id;
      e["success"] = o.success;
      e["psnr"] = num_or_inf(o.psnr);
      e["l1"] = o.l1;
      e["max_abs"] = o.max_abs;
      e["seconds"] = o.seconds;
      arr.push_back(e);
    }
    outs.push_back(arr);
  }
  root["outcomes"] = outs;
  json tr = json::array();
  for (const auto& t : b.transfer)
    tr.push_back({{"attack", t.attack_id},
                  {"n", t.n},
                  {"mis_leg", t.mis_leg},
                  {"mis_mal", t.mis_mal},
                  {"mis_spritz", t.mis_spritz}});
  root["transfer"] = tr;
  root["adv_paths"] = b.adv_paths;
  return root.dump(2);
}

ReportBundle bundle_from_json(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bundle: JSON parse failed: ") + e.what());
  }
  check_keys(root, "bundle",
             {"scenario", "config_hash", "denominator", "rows", "outcomes",
              "transfer", "adv_paths"});
  ReportBundle b;
  b.scenario = jint(root, "scenario", 1);
  b.config_hash = jstr(root, "config_hash", "");
  b.denominator = jstr(root, "denominator", "all-attempted");
  for (const json& o : root.value("rows", json::array())) {
    metrics::CampaignReport r;
    r.attack_id = jstr(o, "attack", "");
    r.target_id = jstr(o, "target", "");
    r.asr = jnum(o, "asr", 0.0);
    r.mean_psnr = parse_num_or_inf(o.at("mean_psnr"), "mean_psnr");
    r.mean_l1 = jnum(o, "mean_l1", 0.0);
    r.mean_max_abs = jnum(o, "mean_max_abs", 0.0);
    r.elapsed = jnum(o, "elapsed", 0.0);
    r.fails = o.at("fails").get<bool>();
    r.n = jint(o, "n", 0);
    b.rows.push_back(r);
  }
  for (const json& arr : root.value("outcomes", json::array())) {
    std::vector<metrics::Outcome> row;
    for (const json& e : arr) {
      metrics::Outcome o;
      o.attack_id = jstr(e, "attack", "");
      o.target_id = jstr(e, "target", "");
      o.success = e.at("success").get<bool>();
      o.psnr = parse_num_or_inf(e.at("psnr"), "psnr");
      o.l1 = jnum(e, "l1", 0.0);
      o.max_abs = jnum(e, "max_abs", 0.0);
      o.seconds = jnum(e, "seconds", 0.0);
      row.push_back(o);
    }
    b.outcomes.push_back(row);
  }
  for (const json& t : root.value("transfer", json::array())) {
    TransferRow tr;
    tr.attack_id = jstr(t, "attack", "");
    tr.n = jint(t, "n", 0);
    tr.mis_leg = jnum(t, "mis_leg", 0.0);
    tr.mis_mal = jnum(t, "mis_mal", 0.0);
    tr.mis_spritz = jnum(t, "mis_spritz", 0.0);
    b.transfer.push_back(tr);
  }
  for (const json& p : root.value("adv_paths", json::array()))
    b.adv_paths.push_back(p.get<std::string>());
  if (b.outcomes.size() != b.rows.size())
    throw ConfigError("bundle: outcomes and rows disagree");
  return b;
}

std::vector<std::string> emit_reports(const ReportBundle& b,
                                      const std::string& out_dir) {
  fs::create_directories(out_dir);
  const std::string tag = "scenario" + std::to_string(b.scenario);
  std::vector<std::string> written;

  const std::string table = out_dir + "/" + tag + "_table.csv";
  metrics::write_report_csv(table, b.rows);
  written.push_back(table);

  if (!b.transfer.empty()) {
    std::string csv = "attack,n,leg,mal,spritz\n";
    for (const auto& t : b.transfer)
      csv += t.attack_id + "," + std::to_string(t.n) + "," +
             fixed4(t.mis_leg) + "," + fixed4(t.mis_mal) + "," +
             fixed4(t.mis_spritz) + "\n";
    const std::string path = out_dir + "/" + tag + "_transfer.csv";
    write_text_file(path, csv);
    written.push_back(path);
  }

  const std::string jpath = out_dir + "/" + tag + "_bundle.json";
  write_text_file(jpath, bundle_to_json(b) + "\n");
  written.push_back(jpath);
  return written;
}

bool same_results(const ReportBundle& a, const ReportBundle& b) {
  if (a.scenario != b.scenario || a.config_hash != b.config_hash ||
      a.denominator != b.denominator || a.adv_paths != b.adv_paths)
    return false;
  if (a.rows.size() != b.rows.size() || a.outcomes.size() != b.outcomes.size() ||
      a.transfer.size() != b.transfer.size())
    return false;
  for (size_t i = 0; i < a.rows.size(); ++i) {
    const auto& x = a.rows[i];
    const auto& y = b.rows[i];
    if (x.attack_id != y.attack_id || x.target_id != y.target_id ||
        x.asr != y.asr || x.mean_l1 != y.mean_l1 ||
        x.mean_max_abs != y.mean_max_abs || x.fails != y.fails || x.n != y.n)
      return false;
    if (x.mean_psnr != y.mean_psnr &&
        !(std::isinf(x.mean_psnr) && std::isinf(y.mean_psnr)))
      return false;
  }
  for (size_t i = 0; i < a.outcomes.size(); ++i) {
    if (a.outcomes[i].size() != b.outcomes[i].size()) return false;
    for (size_t j = 0; j < a.outcomes[i].size(); ++j) {
      const auto& x = a.outcomes[i][j];
      const auto& y = b.outcomes[i][j];
      if (x.attack_id != y.attack_id || x.target_id != y.target_id ||
          x.success != y.success || x.l1 != y.l1 || x.max_abs != y.max_abs)
        return false;
      if (x.psnr != y.psnr && !(std::isinf(x.psnr) && std::isinf(y.psnr)))
        return false;
    }
  }
  for (size_t i = 0; i < a.transfer.size(); ++i) {
    const auto& x = a.transfer[i];
    const auto& y = b.transfer[i];
    if (x.attack_id != y.attack_id || x.n != y.n || x.mis_leg != y.mis_leg ||
        x.mis_mal != y.mis_mal || x.mis_spritz != y.mis_spritz)
      return false;
  }
  return true;
}

}  // namespace spritz::experiment
