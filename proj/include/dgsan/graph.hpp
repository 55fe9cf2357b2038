#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgsan/autograd.hpp"
#include "dgsan/glfe.hpp"
#include "dgsan/params.hpp"

namespace dgsan {

// Fully connected directed graph over projected feature nodes. Edges never
// include self-loops; attention adds the self contribution internally.
struct FeatureGraph {
  ag::Var x;  // [n, d]
  std::vector<std::pair<int, int>> edges;
  std::vector<std::string> tags;

  int n() const { return x ? x->value.dim(0) : 0; }
  nlohmann::json to_json() const;
};

// All ordered pairs (i, j), i != j, lexicographic.
std::vector<std::pair<int, int>> fully_connected_edges(int n);

struct GatHeadParams {
  ag::Var w;             // [d_in, d_head]
  ag::Var attn_l, attn_r;  // [d_head, 1] halves of the length-2*d_head vector
};

struct GatParams {
  std::vector<GatHeadParams> heads;  // outputs concatenated to d_out
  double leaky_slope = 0.2;
};
GatParams make_gat_params(ParamStore& ps, const std::string& prefix, int d_in, int d_out,
                          int heads, double leaky_slope = 0.2);

// One attention layer: per head, e_ij = LeakyReLU(a_l.Wv_i + a_r.Wv_j) over
// j in neighbors(i) plus i itself; softmax; aggregate. Non-neighbors are
// masked with a large negative additive constant.
ag::Var gat_forward(const FeatureGraph& graph, const GatParams& p,
                    std::vector<ag::Var>* attn_out = nullptr);

struct NodeProjection {
  ag::Var w, b;
};
NodeProjection make_node_projection(ParamStore& ps, const std::string& prefix, int in_dim,
                                    int out_dim);
// Feature map [C,D,H,W] -> GAP -> linear -> [1, d]; a [1,C] vector skips the pool.
ag::Var project_node(const ag::Var& feature, const NodeProjection& p);

// Projections shared by both time points (one set per stage feature kind).
struct GraphBuilderParams {
  std::array<NodeProjection, 4> local, global;
  NodeProjection fused;  // deepest fused map F_4
};
GraphBuilderParams make_graph_builder_params(ParamStore& ps, const std::string& prefix,
                                             const EncoderConfig& cfg);

struct GraphSet {
  std::vector<FeatureGraph> intra;
  std::optional<FeatureGraph> inter;
};

struct GraphBuildOptions {
  int scheme = 5;  // Fig. 3 schemes 1..5
  bool use_t0 = true;
  bool use_t1 = true;
  bool use_clinical = true;
};

// feats_t0/feats_t1 may be null when the matching time point is excluded;
// f_text likewise. Scheme semantics:
//   1: one graph per modality (image graphs carry their F node, clinical is
//      a singleton graph); everything lives in the intra list, no inter graph
//   2: inter graph only
//   3: intra L/G graphs only
//   4: per-time-point {L, G, F} graphs plus a clinical singleton inter graph
//   5: default — intra {L_1..4, G_1..4} per time point, inter {F_t0, F_t1, F_text}
GraphSet build_graphs(const StageFeaturesV* feats_t0, const StageFeaturesV* feats_t1,
                      const ag::Var* f_text, const GraphBuildOptions& opt,
                      const GraphBuilderParams& p);

}  // namespace dgsan
