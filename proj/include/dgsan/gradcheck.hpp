#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dgsan/autograd.hpp"

namespace dgsan {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst;  // leaf name and flat index of the worst coordinate
};

// Compares analytic gradients against central finite differences for every
// coordinate of every leaf. `fn` must rebuild the graph from the leaves'
// current values and return a scalar. Relative error denominators are floored
// at 1e-8.
GradCheckReport check_gradients(const std::function<ag::Var()>& fn,
                                const std::vector<ag::Var>& leaves, double h = 1e-5);

// Named registry over the model's differentiable building blocks
// (agca, aff_fuse, global_stage, local_stage, gat_forward,
// self_attention_block, cross_attention_block, classify_head).
std::vector<std::string> registered_gradcheck_ops();
GradCheckReport run_gradcheck(const std::string& op_name, uint64_t seed);

}  // namespace dgsan
