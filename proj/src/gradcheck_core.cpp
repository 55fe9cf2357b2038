#include "dgsan/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace dgsan {

GradCheckReport check_gradients(const std::function<ag::Var()>& fn,
                                const std::vector<ag::Var>& leaves, double h) {
  for (const auto& l : leaves) l->zero_grad();
  ag::backward(fn());
  std::vector<std::vector<double>> analytic;
  for (const auto& l : leaves) {
    l->ensure_grad();
    analytic.emplace_back(l->grad.begin(), l->grad.end());
  }

  GradCheckReport rep;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    for (int64_t i = 0; i < leaf->value.numel(); ++i) {
      const double orig = leaf->value[i];
      leaf->value[i] = orig + h;
      const double fp = fn()->value[0];
      leaf->value[i] = orig - h;
      const double fm = fn()->value[0];
      leaf->value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[li][static_cast<size_t>(i)];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst = (leaf->name.empty() ? "leaf" + std::to_string(li) : leaf->name) + "[" +
                    std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

}  // namespace dgsan
