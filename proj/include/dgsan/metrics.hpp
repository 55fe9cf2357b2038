#pragma once

#include <optional>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace dgsan {

struct Confusion {
  int tp = 0, fp = 0, tn = 0, fn = 0;
};

struct Metrics {
  double acc = 0, pre = 0, f1 = 0, rec = 0;
  std::optional<double> auc;  // absent when only one class is present
  Confusion confusion;
  std::vector<std::pair<double, double>> roc;  // (fpr, tpr)

  nlohmann::json to_json() const;  // fractions, 6 decimal places
};

// Rank-based AUC (ties count 1/2) plus ROC points at every distinct
// threshold. Requires both classes present.
double compute_auc(const std::vector<double>& scores, const std::vector<int>& labels,
                   std::vector<std::pair<double, double>>* roc = nullptr);

Metrics evaluate_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                         double threshold = 0.5);

std::string roc_csv(const std::vector<std::pair<double, double>>& roc);

}  // namespace dgsan
