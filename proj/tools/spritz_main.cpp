#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spritz/errors.hpp"
#include "spritz/experiment.hpp"
#include "spritz/graph.hpp"
#include "spritz/models.hpp"
#include "spritz/rng.hpp"

namespace fs = std::filesystem;
using namespace spritz;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Config precedence: defaults < --config file < SPRITZ_SEED < flags.
struct Overrides {
  std::string config_path;
  std::string dataset;
  std::string out;
  uint64_t seed = 0;
  int limit = 0;
  int scenario = 0;
  bool has_dataset = false, has_out = false, has_seed = false;
  bool has_limit = false, has_scenario = false;
};

experiment::ExperimentConfig resolve_config(const Overrides& ov) {
  experiment::ExperimentConfig cfg;
  if (!ov.config_path.empty())
    cfg = experiment::config_from_json(read_file(ov.config_path));
  else
    cfg = experiment::default_config();

  if (const char* env = std::getenv("SPRITZ_SEED")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0')
      throw ConfigError(std::string("SPRITZ_SEED is not an integer: '") + env +
                        "'");
    cfg.seed = v;
  }
  if (ov.has_seed) cfg.seed = ov.seed;
  if (ov.has_dataset) cfg.dataset.csv_path = ov.dataset;
  if (ov.has_out) cfg.out_dir = ov.out;
  if (ov.has_limit) cfg.sample_count = ov.limit;
  if (ov.has_scenario) cfg.scenario = ov.scenario;
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* sub, Overrides& ov) {
  sub->add_option("--config", ov.config_path, "experiment config JSON")
      ->check(CLI::ExistingFile);
  sub->add_option("--seed", ov.seed, "master seed")
      ->trigger_on_parse()
      ->each([&ov](const std::string&) { ov.has_seed = true; });
  sub->add_option("--out", ov.out, "output directory")
      ->each([&ov](const std::string&) { ov.has_out = true; });
  sub->add_option("--dataset", ov.dataset, "CSV manifest (default: synthetic)")
      ->each([&ov](const std::string&) { ov.has_dataset = true; });
}

int cmd_train(const Overrides& ov) {
  experiment::ExperimentConfig cfg = resolve_config(ov);
  const auto t0 = std::chrono::steady_clock::now();
  experiment::TrainArtifacts art = experiment::run_train(cfg);
  std::printf("model,accuracy,p_md,p_fa\n");
  auto row = [](const char* name, const train::EvalResult& e) {
    std::printf("%s,%.4f,%.4f,%.4f\n", name, e.accuracy, e.p_md, e.p_fa);
  };
  row("2c", art.e2c);
  row("1c_leg", art.eleg);
  row("1c_mal", art.emal);
  row("cmb", art.ecmb);
  std::printf("checkpoint: %s\n", art.checkpoint_path.c_str());
  std::printf("report: %s\n", art.report_path.c_str());
  std::printf("trained in %.1f s\n", seconds_since(t0));
  return 0;
}

int cmd_attack(const Overrides& ov) {
  experiment::ExperimentConfig cfg = resolve_config(ov);
  const auto t0 = std::chrono::steady_clock::now();
  experiment::ReportBundle b = cfg.scenario == 1
                                   ? experiment::run_scenario1(cfg)
                                   : experiment::run_scenario2(cfg);
  for (size_t k = 0; k < b.rows.size(); ++k) {
    const auto& r = b.rows[k];
    std::printf("[%2zu/%zu] %-22s asr=%.4f psnr=%s l1=%.3f t=%.2fs%s\n", k + 1,
                b.rows.size(), r.attack_id.c_str(), r.asr,
                metrics::psnr_str(r.mean_psnr).c_str(), r.mean_l1, r.elapsed,
                r.fails ? "  [Fails]" : "");
  }
  for (const auto& p : experiment::emit_reports(b, cfg.out_dir))
    std::printf("wrote %s\n", p.c_str());
  std::printf("campaign finished in %.1f s\n", seconds_since(t0));
  return 0;
}

int cmd_report(const std::string& in, const std::string& out) {
  experiment::ReportBundle b = experiment::bundle_from_json(read_file(in));
  for (const auto& p : experiment::emit_reports(b, out))
    std::printf("wrote %s\n", p.c_str());
  return 0;
}

int cmd_gradcheck(uint64_t seed, int samples) {
  dataio::Dataset ds = dataio::synth_dataset(1, 0.0, seed);
  std::vector<int> idx = {0, 1};
  nn::Tensor x = ds.gather(idx, 1, 1);  // the malicious example

  models::EnsembleModel m = models::build_ensemble(seed);
  nn::Graph composed = models::compose_ensemble_graph(m);
  // The 2C is probed at its pre-sigmoid logit: the sigmoid saturates on
  // raw 0-255 inputs and would zero out everything worth checking.
  struct Probe {
    const char* name;
    nn::Graph* g;
    const char* tap;
  } probes[] = {{"2c", &m.cnn2c, "logit"},
                {"ae_leg", &m.ae_leg, ""},
                {"ensemble", &composed, ""}};

  bool ok = true;
  for (const Probe& p : probes) {
    nn::GradCheckReport rep = nn::grad_check(*p.g, x, seed, 1e-5, samples, p.tap);
    const bool pass = rep.max_rel_err < 1e-4;
    ok = ok && pass;
    std::printf(
        "%-8s max_rel=%.3e max_abs=%.3e input=%lld param=%lld skipped=%lld "
        "%.1fs %s\n",
        p.name, rep.max_rel_err, rep.max_abs_err,
        static_cast<long long>(rep.checked_input),
        static_cast<long long>(rep.checked_param),
        static_cast<long long>(rep.skipped), rep.seconds,
        pass ? "ok" : ("WORST " + rep.worst).c_str());
  }
  if (!ok) {
    std::fprintf(stderr,
                 "{\"error\": {\"type\": \"GradCheckFailed\", \"message\": "
                 "\"max relative error at or above 1e-4\"}}\n");
    return 1;
  }
  return 0;
}

int cmd_synth(const std::string& out, int per_class, uint64_t seed,
              double difficulty) {
  dataio::Dataset ds = dataio::synth_dataset(per_class, difficulty, seed);
  fs::create_directories(out);
  int counter[2] = {0, 0};
  for (const auto& e : ds.items) {
    char name[64];
    std::snprintf(name, sizeof(name), "synth_H%d_%03d.pgm", e.label,
                  counter[e.label]++);
    std::ofstream pgm(out + "/" + name, std::ios::binary);
    pgm << "P5\n64 64\n255\n";
    for (double v : e.grid.data)
      pgm.put(static_cast<char>(
          static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 255.0)))));
  }
  for (int c = 0; c < 2; ++c) {
    double sum = 0, sq = 0;
    int64_t n = 0;
    for (const auto& e : ds.items) {
      if (e.label != c) continue;
      for (double v : e.grid.data) {
        sum += v;
        sq += v * v;
        ++n;
      }
    }
    const double mean = sum / n;
    std::printf("H%d: %d grids, pixel mean %.2f, std %.2f\n", c, counter[c],
                mean, std::sqrt(std::max(0.0, sq / n - mean * mean)));
  }
  std::printf("wrote %d PGM files to %s\n", counter[0] + counter[1],
              out.c_str());
  return 0;
}

const char* error_type(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "ConfigError";
  if (dynamic_cast<const ParseError*>(&e)) return "ParseError";
  if (dynamic_cast<const CheckpointError*>(&e)) return "CheckpointError";
  if (dynamic_cast<const ShapeError*>(&e)) return "ShapeError";
  if (dynamic_cast<const NumericalError*>(&e)) return "NumericalError";
  return "InternalError";
}

int error_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const ParseError*>(&e)) return 3;
  if (dynamic_cast<const CheckpointError*>(&e)) return 4;
  if (dynamic_cast<const ShapeError*>(&e)) return 5;
  if (dynamic_cast<const NumericalError*>(&e)) return 5;
  return 1;
}

std::string json_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') {
      out += '\\';
      out += c;
    } else if (c == '\n') {
      out += "\\n";
    } else {
      out += c;
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SPRITZ-1.5C harness: ensemble training and attack campaigns"};
  app.require_subcommand(1);

  Overrides tr_ov;
  CLI::App* tr = app.add_subcommand("train", "train 2C, both 1C nets and the combiner");
  add_common(tr, tr_ov);

  Overrides at_ov;
  CLI::App* at = app.add_subcommand("attack", "run an attack campaign against a trained checkpoint");
  add_common(at, at_ov);
  at->add_option("--scenario", at_ov.scenario, "1: attack the 2C and transfer; 2: attack the ensemble")
      ->required()
      ->check(CLI::IsMember({1, 2}))
      ->each([&at_ov](const std::string&) { at_ov.has_scenario = true; });
  at->add_option("--limit", at_ov.limit, "examples attacked per grid row")
      ->check(CLI::PositiveNumber)
      ->each([&at_ov](const std::string&) { at_ov.has_limit = true; });

  std::string rp_in, rp_out = "out";
  CLI::App* rp = app.add_subcommand("report", "re-emit CSV tables from a stored bundle JSON");
  rp->add_option("--in", rp_in, "bundle JSON path")->required()->check(CLI::ExistingFile);
  rp->add_option("--out", rp_out, "output directory");

  uint64_t gc_seed = 1;
  int gc_samples = 200;
  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference audit of all three graphs");
  gc->add_option("--seed", gc_seed, "probe seed");
  gc->add_option("--samples", gc_samples, "parameter coordinates sampled per graph")
      ->check(CLI::PositiveNumber);

  std::string sy_out = "out/synth";
  int sy_limit = 4;
  uint64_t sy_seed = 1;
  double sy_difficulty = 0.0;
  CLI::App* sy = app.add_subcommand("synth", "write synthetic dataset previews as PGM");
  sy->add_option("--out", sy_out, "output directory");
  sy->add_option("--limit", sy_limit, "grids per class")->check(CLI::PositiveNumber);
  sy->add_option("--seed", sy_seed, "generator seed");
  sy->add_option("--difficulty", sy_difficulty, "additive noise scale")
      ->check(CLI::NonNegativeNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (tr->parsed()) return cmd_train(tr_ov);
    if (at->parsed()) return cmd_attack(at_ov);
    if (rp->parsed()) return cmd_report(rp_in, rp_out);
    if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_samples);
    if (sy->parsed()) return cmd_synth(sy_out, sy_limit, sy_seed, sy_difficulty);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "{\"error\": {\"type\": \"%s\", \"message\": \"%s\"}}\n",
                 error_type(e), json_escape(e.what()).c_str());
    return error_code(e);
  }
  return 0;
}
