#include "dgsan/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace dgsan {

using nlohmann::json;

namespace {

double round6(double v) { return std::round(v * 1e6) / 1e6; }

}  // namespace

json Metrics::to_json() const {
  json j{{"acc", round6(acc)},
         {"pre", round6(pre)},
         {"f1", round6(f1)},
         {"rec", round6(rec)},
         {"confusion",
          {{"tp", confusion.tp}, {"fp", confusion.fp}, {"tn", confusion.tn},
           {"fn", confusion.fn}}}};
  if (auc)
    j["auc"] = round6(*auc);
  else
    j["auc"] = nullptr;
  return j;
}

double compute_auc(const std::vector<double>& scores, const std::vector<int>& labels,
                   std::vector<std::pair<double, double>>* roc) {
  if (scores.size() != labels.size() || scores.empty())
    throw std::invalid_argument("compute_auc: size mismatch or empty input");
  int64_t pos = 0, neg = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw std::invalid_argument("compute_auc: labels must be 0/1");
    (l ? pos : neg)++;
  }
  if (pos == 0 || neg == 0) throw std::invalid_argument("compute_auc: single-class input");

  // Sort by score descending; sweep thresholds at every distinct score,
  // counting tied positive/negative groups together (ties contribute 1/2).
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] > scores[b]; });

  if (roc) {
    roc->clear();
    roc->emplace_back(0.0, 0.0);
  }
  double auc = 0.0;
  int64_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    int64_t dp = 0, dn = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? dp : dn)++;
      ++j;
    }
    // trapezoid over the tied block == each tied (pos, neg) pair counting 1/2
    auc += static_cast<double>(dn) * (static_cast<double>(tp) + 0.5 * static_cast<double>(dp));
    tp += dp;
    fp += dn;
    if (roc)
      roc->emplace_back(static_cast<double>(fp) / static_cast<double>(neg),
                        static_cast<double>(tp) / static_cast<double>(pos));
    i = j;
  }
  return auc / (static_cast<double>(pos) * static_cast<double>(neg));
}

Metrics evaluate_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                         double threshold) {
  if (scores.size() != labels.size() || scores.empty())
    throw std::invalid_argument("evaluate_metrics: size mismatch or empty input");
  for (double s : scores)
    if (s < 0.0 || s > 1.0)
      throw std::invalid_argument("evaluate_metrics: scores must lie in [0,1]");

  Metrics m;
  for (size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i] == 1)
      (pred ? m.confusion.tp : m.confusion.fn)++;
    else
      (pred ? m.confusion.fp : m.confusion.tn)++;
  }
  const auto& c = m.confusion;
  const double total = static_cast<double>(scores.size());
  m.acc = (c.tp + c.tn) / total;
  m.pre = (c.tp + c.fp) ? static_cast<double>(c.tp) / (c.tp + c.fp) : 0.0;
  m.rec = (c.tp + c.fn) ? static_cast<double>(c.tp) / (c.tp + c.fn) : 0.0;
  m.f1 = (m.pre + m.rec > 0.0) ? 2.0 * m.pre * m.rec / (m.pre + m.rec) : 0.0;

  const bool both = (c.tp + c.fn) > 0 && (c.fp + c.tn) > 0;
  if (both) m.auc = compute_auc(scores, labels, &m.roc);
  return m;
}

std::string roc_csv(const std::vector<std::pair<double, double>>& roc) {
  std::string out = "fpr,tpr\n";
  char buf[64];
  for (const auto& [fpr, tpr] : roc) {
    std::snprintf(buf, sizeof buf, "%.6f,%.6f\n", fpr, tpr);
    out += buf;
  }
  return out;
}

}  // namespace dgsan
