// Command-line front end: synth / pretrain / train / eval / ablate / params /
// gradcheck subcommands over the DGSAN library.
#include <chrono>
#include <cstdio>
#ifdef __GLIBC__
#include <malloc.h>
#endif
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dgsan/data.hpp"
#include "dgsan/gradcheck.hpp"
#include "dgsan/metrics.hpp"
#include "dgsan/model.hpp"
#include "dgsan/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dgsan;

namespace {

struct Configs {
  ModelConfig model;
  TrainConfig train;
};

Configs load_configs(const std::string& path) {
  Configs c;
  if (path.empty()) return c;
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file " + path);
  json j = json::parse(in);
  if (j.contains("model")) c.model = ModelConfig::from_json(j["model"]);
  if (j.contains("train")) c.train = TrainConfig::from_json(j["train"]);
  return c;
}

int cmd_synth(const std::string& out, int cases, uint64_t seed) {
  auto m = data::synthesize_dataset(cases, seed, out);
  std::cout << "wrote " << m.cases.size() << " cases to " << out << "\n";
  return 0;
}

int cmd_pretrain(const std::string& manifest, const std::string& config,
                 const std::string& out, std::optional<uint64_t> seed, int epochs) {
  Configs c = load_configs(config);
  if (seed) c.train.seed = *seed;
  if (epochs > 0) c.train.epochs = epochs;
  auto m = data::load_manifest(manifest);
  auto losses = pretrain_glfe(m, all_case_ids(m), c.model.encoder, c.train, out);
  std::cout << "pretrained GLFE for " << losses.size() << " epochs, final loss "
            << losses.back() << "\n";
  return 0;
}

int cmd_train(const std::string& manifest, const std::string& config, const std::string& out,
              const std::string& glfe_ckpt, std::optional<uint64_t> seed,
              std::optional<int> scheme, const std::string& sequence, int epochs, bool cv) {
  Configs c = load_configs(config);
  if (seed) c.train.seed = *seed;
  if (scheme) c.model.scheme = *scheme;
  if (!sequence.empty()) c.model.fusion.sequence = FusionConfig::parse_sequence(sequence);
  if (epochs > 0) c.train.epochs = epochs;
  c.model.validate();
  auto m = data::load_manifest(manifest);
  fs::path ckpt = glfe_ckpt;
  const fs::path* warm = glfe_ckpt.empty() ? nullptr : &ckpt;
  if (cv) {
    json result = run_cross_validation(m, c.train.folds, c.model, c.train, out, warm);
    std::cout << result["summary"].dump(2) << "\n";
  } else {
    TrainedModel tm = train_dgsan(m, all_case_ids(m), c.model, c.train, warm, out);
    std::cout << "trained " << tm.epoch_losses.size() << " epochs, final loss "
              << tm.epoch_losses.back() << "\n";
  }
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest,
             const std::string& out, double threshold) {
  std::ifstream in(fs::path(checkpoint) / "config.json");
  if (!in) throw std::invalid_argument("checkpoint config not found in " + checkpoint);
  json cj = json::parse(in);
  if (!cj.contains("model"))
    throw std::invalid_argument("checkpoint config has no model section (GLFE-only?)");
  ModelConfig mc = ModelConfig::from_json(cj["model"]);
  ParamStore ps(0);
  DgsanModel model(ps, mc);
  ps.load_values(checkpoint);
  auto m = data::load_manifest(manifest);
  Metrics metrics = evaluate_model(model, m, all_case_ids(m), threshold);
  fs::create_directories(out);
  write_file_atomic(fs::path(out) / "metrics.json", metrics.to_json().dump(2) + "\n");
  write_file_atomic(fs::path(out) / "roc.csv", roc_csv(metrics.roc));
  std::cout << metrics.to_json().dump(2) << "\n";
  return 0;
}

int cmd_ablate(const std::string& manifest, const std::string& config,
               const std::string& variants, const std::string& out,
               std::optional<uint64_t> seed, int epochs) {
  Configs c = load_configs(config);
  if (seed) c.train.seed = *seed;
  if (epochs > 0) c.train.epochs = epochs;
  std::vector<Variant> vs;
  std::stringstream ss(variants);
  std::string tok;
  while (std::getline(ss, tok, ',')) vs.push_back(parse_variant(tok));
  if (vs.empty()) throw std::invalid_argument("--variants list is empty");
  auto m = data::load_manifest(manifest);
  json result = run_ablation(m, vs, c.model, c.train, out);
  std::cout << result["rows"].dump(2) << "\n";
  return 0;
}

int cmd_params(const std::string& config) {
  Configs c = load_configs(config);
  ParamStore ps(0);
  DgsanModel model(ps, c.model);
  json report = parameter_report(ps);
  std::cout << report.dump(2) << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& op, uint64_t seed) {
  std::vector<std::string> ops =
      op == "all" ? registered_gradcheck_ops() : std::vector<std::string>{op};
  bool ok = true;
  for (const auto& name : ops) {
    const auto t0 = std::chrono::steady_clock::now();
    GradCheckReport rep = run_gradcheck(name, seed);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass = rep.max_rel_err <= 1e-4;
    ok = ok && pass;
    std::printf("%-24s max_rel_err %.3e  worst %-20s %6.2fs  %s\n", name.c_str(),
                rep.max_rel_err, rep.worst.c_str(), secs, pass ? "ok" : "FAIL");
  }
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Training churns through many short-lived multi-MB graph buffers; keeping
  // them on the heap instead of mmap/munmap round trips avoids page-fault
  // overhead that otherwise dominates system time.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
  CLI::App app{"DGSAN: longitudinal nodule classification pipeline"};
  app.require_subcommand(1);

  std::string out, manifest, config, glfe_ckpt, sequence, variants, checkpoint, op = "all";
  int cases = 10, epochs = -1, jobs = 1;
  uint64_t seed_val = 0, gc_seed = 1;
  double threshold = 0.5;
  bool cv = false;
  std::optional<uint64_t> seed;
  std::optional<int> scheme;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--out", out, "output directory")->required();
  synth->add_option("--cases", cases, "number of cases")->required();
  synth->add_option("--seed", seed_val, "RNG seed")->required();

  auto* pretrain = app.add_subcommand("pretrain", "pretrain the GLFE encoder");
  pretrain->add_option("--manifest", manifest)->required();
  pretrain->add_option("--config", config, "JSON config file");
  pretrain->add_option("--out", out)->required();
  pretrain->add_option("--seed", seed);
  pretrain->add_option("--epochs", epochs, "override epoch count");

  auto* train = app.add_subcommand("train", "train the full model");
  train->add_option("--manifest", manifest)->required();
  train->add_option("--config", config, "JSON config file");
  train->add_option("--out", out)->required();
  train->add_option("--glfe", glfe_ckpt, "GLFE checkpoint for warm start");
  train->add_option("--seed", seed);
  train->add_option("--scheme", scheme, "graph scheme 1..5")->check(CLI::Range(1, 5));
  train->add_option("--sequence", sequence, "fusion sequence, e.g. SAB,CAB,SAB");
  train->add_option("--epochs", epochs, "override epoch count");
  train->add_flag("--cv", cv, "k-fold cross-validation instead of a single fit");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--manifest", manifest)->required();
  eval->add_option("--out", out)->required();
  eval->add_option("--threshold", threshold);

  auto* ablate = app.add_subcommand("ablate", "train/evaluate ablation variants");
  ablate->add_option("--manifest", manifest)->required();
  ablate->add_option("--config", config, "JSON config file");
  ablate->add_option("--variants", variants, "comma list, e.g. full,t0_only")->required();
  ablate->add_option("--out", out)->required();
  ablate->add_option("--seed", seed);
  ablate->add_option("--epochs", epochs, "override epoch count");
  ablate->add_option("--jobs", jobs, "worker lanes (sequential fallback)");

  auto* params = app.add_subcommand("params", "report parameter counts");
  params->add_option("--config", config, "JSON config file");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gradcheck->add_option("--op", op, "op name or 'all'");
  gradcheck->add_option("--seed", gc_seed);

  try {
    app.parse(argc, argv);
    if (synth->parsed()) return cmd_synth(out, cases, seed_val);
    if (pretrain->parsed()) return cmd_pretrain(manifest, config, out, seed, epochs);
    if (train->parsed())
      return cmd_train(manifest, config, out, glfe_ckpt, seed, scheme, sequence, epochs, cv);
    if (eval->parsed()) return cmd_eval(checkpoint, manifest, out, threshold);
    if (ablate->parsed()) return cmd_ablate(manifest, config, variants, out, seed, epochs);
    if (params->parsed()) return cmd_params(config);
    if (gradcheck->parsed()) return cmd_gradcheck(op, gc_seed);
    return 1;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
}
