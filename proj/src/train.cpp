#include "dgsan/train.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <stdexcept>

namespace dgsan {

namespace fs = std::filesystem;
using ag::Var;
using nlohmann::json;

void TrainConfig::validate() const {
  if (lr <= 0.0) throw std::invalid_argument("TrainConfig: lr must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw std::invalid_argument("TrainConfig: betas must lie in [0,1)");
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (schedule_period < 1) throw std::invalid_argument("TrainConfig: schedule_period >= 1");
  if (schedule_gamma <= 0.0 || schedule_gamma > 1.0)
    throw std::invalid_argument("TrainConfig: schedule_gamma must lie in (0,1]");
  if (folds < 2) throw std::invalid_argument("TrainConfig: folds must be >= 2");
}

json TrainConfig::to_json() const {
  return json{{"lr", lr},
              {"epochs", epochs},
              {"beta1", beta1},
              {"beta2", beta2},
              {"eps", eps},
              {"schedule_period", schedule_period},
              {"schedule_gamma", schedule_gamma},
              {"batch_size", batch_size},
              {"seed", seed},
              {"folds", folds}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  if (j.contains("lr")) c.lr = j["lr"];
  if (j.contains("epochs")) c.epochs = j["epochs"];
  if (j.contains("beta1")) c.beta1 = j["beta1"];
  if (j.contains("beta2")) c.beta2 = j["beta2"];
  if (j.contains("eps")) c.eps = j["eps"];
  if (j.contains("schedule_period")) c.schedule_period = j["schedule_period"];
  if (j.contains("schedule_gamma")) c.schedule_gamma = j["schedule_gamma"];
  if (j.contains("batch_size")) c.batch_size = j["batch_size"];
  if (j.contains("seed")) c.seed = j["seed"];
  if (j.contains("folds")) c.folds = j["folds"];
  c.validate();
  return c;
}

double effective_lr(const TrainConfig& cfg, int epoch) {
  return cfg.lr * std::pow(cfg.schedule_gamma, epoch / cfg.schedule_period);
}

bool AdamOptimizer::step(ParamStore& ps, const TrainConfig& cfg, int epoch) {
  using CMap = Eigen::Map<const Eigen::ArrayXd>;
  using MMap = Eigen::Map<Eigen::ArrayXd>;
  for (const auto& [name, p] : ps.items()) {
    if (p->grad.empty()) continue;
    if (!CMap(p->grad.data(), static_cast<Eigen::Index>(p->grad.size())).allFinite()) {
      ++rejected_;
      return false;
    }
  }
  ++t_;
  const double lr = effective_lr(cfg, epoch);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
  for (const auto& [name, p] : ps.items()) {
    if (p->grad.empty()) continue;
    auto& mo = state_[name];
    if (mo.m.size() != p->grad.size()) {
      mo.m.assign(p->grad.size(), 0.0);
      mo.v.assign(p->grad.size(), 0.0);
    }
    const auto n = static_cast<Eigen::Index>(p->grad.size());
    CMap g(p->grad.data(), n);
    MMap mv(mo.m.data(), n), vv(mo.v.data(), n), w(p->value.data.data(), n);
    mv = cfg.beta1 * mv + (1.0 - cfg.beta1) * g;
    vv = cfg.beta2 * vv + (1.0 - cfg.beta2) * g * g;
    w -= (lr / bc1) * mv / ((vv / bc2).sqrt() + cfg.eps);
  }
  return true;
}

ag::Var sample_loss(const Var& logits, int label) {
  return ag::cross_entropy_logits(logits, {label});
}

std::vector<std::string> all_case_ids(const data::DatasetManifest& m) {
  std::vector<std::string> ids;
  ids.reserve(m.cases.size());
  for (const auto& c : m.cases) ids.push_back(c.id);
  return ids;
}

namespace {

void write_loss_csv(const fs::path& dir, const std::vector<double>& losses) {
  std::string csv = "epoch,loss\n";
  char buf[64];
  for (size_t e = 0; e < losses.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%zu,%.8f\n", e, losses[e]);
    csv += buf;
  }
  write_file_atomic(dir / "loss.csv", csv);
}

// Epoch loop shared by pretraining and full training. `forward_loss` maps a
// case to its scalar loss node.
template <typename ForwardLoss>
std::vector<double> run_epochs(const data::DatasetManifest& m,
                               const std::vector<std::string>& ids, ParamStore& ps,
                               const TrainConfig& cfg, ForwardLoss&& forward_loss) {
  if (ids.empty()) throw std::invalid_argument("training requires at least one case");
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  // Cases are read once up front; epochs then shuffle in-memory indices so
  // the inner loop never touches the filesystem.
  std::vector<data::Case> cases;
  cases.reserve(ids.size());
  for (const auto& id : ids) cases.push_back(data::load_case(m, id));
  std::vector<size_t> order(ids.size());
  std::iota(order.begin(), order.end(), size_t{0});
  AdamOptimizer opt;
  std::vector<double> losses;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), b + static_cast<size_t>(cfg.batch_size));
      const double inv = 1.0 / static_cast<double>(end - b);
      ps.zero_grad();
      for (size_t i = b; i < end; ++i) {
        const data::Case& c = cases[order[i]];
        Var loss = forward_loss(c);
        epoch_loss += loss->value[0];
        ag::backward(loss, inv);
      }
      opt.step(ps, cfg, epoch);
    }
    losses.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  return losses;
}

}  // namespace

std::vector<double> pretrain_glfe(const data::DatasetManifest& m,
                                  const std::vector<std::string>& ids,
                                  const EncoderConfig& enc, const TrainConfig& cfg,
                                  const fs::path& out_dir) {
  cfg.validate();
  int pos = 0, neg = 0;
  for (const auto& id : ids) (m.find(id).label ? pos : neg)++;
  if (pos < 2 || neg < 2)
    throw std::invalid_argument("pretrain_glfe: need at least 2 cases per class");

  auto ps = ParamStore(cfg.seed);
  Glfe glfe(ps, enc, "glfe");
  const int c4 = enc.stage_channels[3];
  Var head_w = ps.create("pre.head.w", {2 * c4, 2}, Init::XavierUniform);
  Var head_b = ps.create("pre.head.b", {2}, Init::Zeros);

  auto losses = run_epochs(m, ids, ps, cfg, [&](const data::Case& c) {
    auto [f0, f1] = glfe.forward_pair(c.volumes.t0, c.volumes.t1);
    Var p0 = ag::global_avg_pool(f0.fused[3]);
    Var p1 = ag::global_avg_pool(f1.fused[3]);
    Var logits = ag::linear(ag::concat_cols({p0, p1}), head_w, head_b);
    return sample_loss(logits, c.label);
  });

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_loss_csv(out_dir, losses);
    ps.save(out_dir / "checkpoint",
            json{{"encoder", enc.to_json()}, {"train", cfg.to_json()}, {"kind", "glfe"}});
  }
  return losses;
}

TrainedModel train_dgsan(const data::DatasetManifest& m, const std::vector<std::string>& ids,
                         const ModelConfig& mc, const TrainConfig& cfg,
                         const fs::path* glfe_checkpoint, const fs::path& out_dir) {
  cfg.validate();
  mc.validate();
  TrainedModel tm;
  tm.store = std::make_shared<ParamStore>(cfg.seed);
  tm.model = std::make_shared<DgsanModel>(*tm.store, mc);
  if (glfe_checkpoint) {
    const int n = tm.store->load_matching(*glfe_checkpoint);
    if (n == 0)
      throw std::runtime_error("warm start loaded no tensors from " +
                               glfe_checkpoint->string());
  }

  tm.epoch_losses = run_epochs(m, ids, *tm.store, cfg, [&](const data::Case& c) {
    return sample_loss(tm.model->forward(c, m.stats).logits, c.label);
  });

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_loss_csv(out_dir, tm.epoch_losses);
    const json config{{"model", mc.to_json()}, {"train", cfg.to_json()}, {"kind", "dgsan"}};
    write_file_atomic(out_dir / "config.json", config.dump(2) + "\n");
    tm.store->save(out_dir / "checkpoint", config);
  }
  return tm;
}

void score_cases(const DgsanModel& model, const data::DatasetManifest& m,
                 const std::vector<std::string>& ids, std::vector<double>& scores,
                 std::vector<int>& labels) {
  scores.clear();
  labels.clear();
  for (const auto& id : ids) {
    data::Case c = data::load_case(m, id);
    Var logits = model.forward(c, m.stats).logits;
    const double z0 = logits->value[0], z1 = logits->value[1];
    const double mx = std::max(z0, z1);
    const double p1 = std::exp(z1 - mx) / (std::exp(z0 - mx) + std::exp(z1 - mx));
    scores.push_back(p1);
    labels.push_back(c.label);
  }
}

Metrics evaluate_model(const DgsanModel& model, const data::DatasetManifest& m,
                       const std::vector<std::string>& ids, double threshold) {
  std::vector<double> scores;
  std::vector<int> labels;
  score_cases(model, m, ids, scores, labels);
  return evaluate_metrics(scores, labels, threshold);
}

namespace {

json summarize(const std::vector<json>& fold_metrics) {
  auto stat = [&](const char* key) {
    std::vector<double> vals;
    for (const auto& f : fold_metrics)
      if (f.contains(key) && !f[key].is_null()) vals.push_back(f[key].get<double>());
    json s;
    if (vals.empty()) return json{{"mean", nullptr}, {"std", nullptr}};
    double mean = 0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double var = 0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= static_cast<double>(vals.size());
    return json{{"mean", mean}, {"std", std::sqrt(var)}};
  };
  return json{{"acc", stat("acc")}, {"pre", stat("pre")}, {"f1", stat("f1")},
              {"auc", stat("auc")}, {"rec", stat("rec")}};
}

}  // namespace

json run_cross_validation(const data::DatasetManifest& m, int k, const ModelConfig& mc,
                          const TrainConfig& cfg, const fs::path& out_dir,
                          const fs::path* glfe_checkpoint) {
  const data::FoldSplit split = data::split_folds(m, k, cfg.seed);
  std::vector<json> fold_metrics;
  json folds = json::array();
  for (int f = 0; f < k; ++f) {
    std::vector<std::string> train_ids, test_ids;
    for (const auto& c : m.cases)
      (split.assignments.at(c.id) == f ? test_ids : train_ids).push_back(c.id);
    const fs::path fold_dir = out_dir.empty() ? fs::path{} : out_dir / ("fold" + std::to_string(f));
    TrainedModel tm = train_dgsan(m, train_ids, mc, cfg, glfe_checkpoint, fold_dir);
    std::vector<double> scores;
    std::vector<int> labels;
    score_cases(*tm.model, m, test_ids, scores, labels);
    Metrics metrics = evaluate_metrics(scores, labels);
    json mj = metrics.to_json();
    mj["fold"] = f;
    mj["n_test"] = static_cast<int>(test_ids.size());
    if (!fold_dir.empty()) {
      write_file_atomic(fold_dir / "metrics.json", mj.dump(2) + "\n");
      write_file_atomic(fold_dir / "roc.csv", roc_csv(metrics.roc));
    }
    fold_metrics.push_back(mj);
    folds.push_back(mj);
  }
  json out{{"folds", folds}, {"summary", summarize(fold_metrics)}};
  if (!out_dir.empty()) write_file_atomic(out_dir / "cv.json", out.dump(2) + "\n");
  return out;
}

json run_ablation(const data::DatasetManifest& m, const std::vector<Variant>& variants,
                  const ModelConfig& base, const TrainConfig& cfg, const fs::path& out_dir) {
  const data::FoldSplit split = data::split_folds(m, cfg.folds, cfg.seed);
  std::vector<std::string> train_ids, test_ids;
  for (const auto& c : m.cases)
    (split.assignments.at(c.id) == 0 ? test_ids : train_ids).push_back(c.id);

  json rows = json::array();
  for (Variant v : variants) {
    ModelConfig mc = base;
    mc.variant = v;
    const fs::path vdir = out_dir.empty() ? fs::path{} : out_dir / variant_name(v);
    TrainedModel tm = train_dgsan(m, train_ids, mc, cfg, nullptr, vdir);
    Metrics metrics = evaluate_model(*tm.model, m, test_ids);
    json row = metrics.to_json();
    row["variant"] = variant_name(v);
    if (!vdir.empty()) write_file_atomic(vdir / "metrics.json", row.dump(2) + "\n");
    rows.push_back(row);
  }
  json out{{"rows", rows}};
  if (!out_dir.empty()) write_file_atomic(out_dir / "ablation.json", out.dump(2) + "\n");
  return out;
}

}  // namespace dgsan
