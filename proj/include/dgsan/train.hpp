#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgsan/data.hpp"
#include "dgsan/metrics.hpp"
#include "dgsan/model.hpp"
#include "dgsan/params.hpp"

namespace dgsan {

struct TrainConfig {
  double lr = 1e-4;
  int epochs = 200;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  int schedule_period = 20;   // epochs between lr decays
  double schedule_gamma = 0.5;
  int batch_size = 8;
  uint64_t seed = 0;
  int folds = 5;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

double effective_lr(const TrainConfig& cfg, int epoch);

// Adam with bias correction and the step-decay schedule. One step() call is
// one batch update; a step with any non-finite gradient is rejected whole.
class AdamOptimizer {
 public:
  // Returns false when the step was rejected because of non-finite gradients.
  bool step(ParamStore& ps, const TrainConfig& cfg, int epoch);
  int64_t steps_taken() const { return t_; }
  int64_t steps_rejected() const { return rejected_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  std::map<std::string, Moments> state_;
  int64_t t_ = 0;
  int64_t rejected_ = 0;
};

// Mean cross-entropy of single-sample losses; wraps the autograd op.
ag::Var sample_loss(const ag::Var& logits, int label);

struct TrainedModel {
  std::shared_ptr<ParamStore> store;
  std::shared_ptr<DgsanModel> model;
  std::vector<double> epoch_losses;
};

// GLFE pretraining with a temporary head over the pooled deepest fused maps
// of both time points. Writes a checkpoint directory.
std::vector<double> pretrain_glfe(const data::DatasetManifest& m,
                                  const std::vector<std::string>& ids,
                                  const EncoderConfig& enc, const TrainConfig& cfg,
                                  const std::filesystem::path& out_dir);

// End-to-end training on the given case ids. When out_dir is nonempty, writes
// config.json, loss.csv and a checkpoint/ subdirectory. glfe_checkpoint, if
// given, warm-starts every matching tensor.
TrainedModel train_dgsan(const data::DatasetManifest& m, const std::vector<std::string>& ids,
                         const ModelConfig& mc, const TrainConfig& cfg,
                         const std::filesystem::path* glfe_checkpoint,
                         const std::filesystem::path& out_dir);

// Held-out scoring: softmax probability of class 1 per case, manifest order.
void score_cases(const DgsanModel& model, const data::DatasetManifest& m,
                 const std::vector<std::string>& ids, std::vector<double>& scores,
                 std::vector<int>& labels);

Metrics evaluate_model(const DgsanModel& model, const data::DatasetManifest& m,
                       const std::vector<std::string>& ids, double threshold = 0.5);

// k-fold cross-validation; per-fold artifacts under out_dir/fold<i> when
// out_dir is nonempty. Returns {"folds": [...], "summary": {...}}.
nlohmann::json run_cross_validation(const data::DatasetManifest& m, int k,
                                    const ModelConfig& mc, const TrainConfig& cfg,
                                    const std::filesystem::path& out_dir,
                                    const std::filesystem::path* glfe_checkpoint = nullptr);

// Trains/evaluates one model per variant on a fixed fold-0 holdout split.
nlohmann::json run_ablation(const data::DatasetManifest& m,
                            const std::vector<Variant>& variants, const ModelConfig& base,
                            const TrainConfig& cfg, const std::filesystem::path& out_dir);

std::vector<std::string> all_case_ids(const data::DatasetManifest& m);

}  // namespace dgsan
