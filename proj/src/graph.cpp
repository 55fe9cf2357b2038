#include "dgsan/graph.hpp"

#include <stdexcept>

namespace dgsan {

using ag::Var;
using nlohmann::json;

json FeatureGraph::to_json() const {
  json nodes = json::array();
  for (const auto& t : tags) nodes.push_back(json{{"tag", t}});
  json e = json::array();
  for (const auto& [i, j] : edges) e.push_back(json::array({i, j}));
  return json{{"nodes", nodes}, {"edges", e}};
}

std::vector<std::pair<int, int>> fully_connected_edges(int n) {
  if (n < 1) throw std::invalid_argument("fully_connected_edges: n must be positive");
  std::vector<std::pair<int, int>> e;
  e.reserve(static_cast<size_t>(n) * (n - 1));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) e.emplace_back(i, j);
  return e;
}

GatParams make_gat_params(ParamStore& ps, const std::string& prefix, int d_in, int d_out,
                          int heads, double leaky_slope) {
  if (heads < 1 || d_out % heads != 0)
    throw std::invalid_argument(prefix + ": d_out " + std::to_string(d_out) +
                                " not divisible by heads " + std::to_string(heads));
  GatParams p;
  p.leaky_slope = leaky_slope;
  const int dh = d_out / heads;
  for (int h = 0; h < heads; ++h) {
    const std::string hp = prefix + ".h" + std::to_string(h);
    GatHeadParams head;
    head.w = ps.create(hp + ".w", {d_in, dh}, Init::XavierUniform);
    head.attn_l = ps.create(hp + ".al", {dh, 1}, Init::XavierUniform);
    head.attn_r = ps.create(hp + ".ar", {dh, 1}, Init::XavierUniform);
    p.heads.push_back(std::move(head));
  }
  return p;
}

ag::Var gat_forward(const FeatureGraph& graph, const GatParams& p,
                    std::vector<ag::Var>* attn_out) {
  const int n = graph.n();
  if (n < 1) throw std::invalid_argument("gat_forward: empty graph");

  Tensor mask({n, n}, -1e9);
  for (int i = 0; i < n; ++i) mask[i * n + i] = 0.0;  // self-loop added internally
  for (const auto& [i, j] : graph.edges) {
    if (i < 0 || j < 0 || i >= n || j >= n || i == j)
      throw std::invalid_argument("gat_forward: bad edge (" + std::to_string(i) + "," +
                                  std::to_string(j) + ")");
    mask[static_cast<int64_t>(i) * n + j] = 0.0;
  }
  Var mask_v = ag::constant(std::move(mask));

  std::vector<Var> outs;
  outs.reserve(p.heads.size());
  for (const auto& head : p.heads) {
    Var h = ag::matmul(graph.x, head.w);
    Var u = ag::matmul(h, head.attn_l);
    Var v = ag::matmul(h, head.attn_r);
    Var scores = ag::leaky_relu(ag::outer_add(u, v), p.leaky_slope);
    Var alpha = ag::softmax_rows(ag::add(scores, mask_v));
    if (attn_out) attn_out->push_back(alpha);
    outs.push_back(ag::matmul(alpha, h));
  }
  return outs.size() == 1 ? outs[0] : ag::concat_cols(outs);
}

NodeProjection make_node_projection(ParamStore& ps, const std::string& prefix, int in_dim,
                                    int out_dim) {
  NodeProjection p;
  p.w = ps.create(prefix + ".w", {in_dim, out_dim}, Init::XavierUniform);
  p.b = ps.create(prefix + ".b", {out_dim}, Init::Zeros);
  return p;
}

ag::Var project_node(const Var& feature, const NodeProjection& p) {
  Var v = feature->value.ndim() == 4 ? ag::global_avg_pool(feature) : feature;
  if (v->value.ndim() != 2 || v->value.dim(0) != 1 || v->value.dim(1) != p.w->value.dim(0))
    throw std::invalid_argument("project_node: expected a [1," +
                                std::to_string(p.w->value.dim(0)) + "] vector, got " +
                                shape_str(v->value.shape));
  return ag::linear(v, p.w, p.b);
}

GraphBuilderParams make_graph_builder_params(ParamStore& ps, const std::string& prefix,
                                             const EncoderConfig& cfg) {
  GraphBuilderParams p;
  for (int i = 0; i < 4; ++i) {
    const std::string s = std::to_string(i + 1);
    p.local[i] = make_node_projection(ps, prefix + ".l" + s, cfg.stage_channels[i],
                                      cfg.feature_dim);
    p.global[i] = make_node_projection(ps, prefix + ".g" + s, cfg.stage_channels[i],
                                       cfg.feature_dim);
  }
  p.fused = make_node_projection(ps, prefix + ".f", cfg.stage_channels[3], cfg.feature_dim);
  return p;
}

namespace {

FeatureGraph finish(std::vector<Var> rows, std::vector<std::string> tags) {
  FeatureGraph g;
  g.x = rows.size() == 1 ? rows[0] : ag::concat_rows(rows);
  g.tags = std::move(tags);
  g.edges = fully_connected_edges(static_cast<int>(g.tags.size()));
  return g;
}

void push_lg(const StageFeaturesV& f, const std::string& t, const GraphBuilderParams& p,
             std::vector<Var>& rows, std::vector<std::string>& tags) {
  for (int i = 0; i < 4; ++i) {
    rows.push_back(project_node(f.local[i], p.local[i]));
    tags.push_back("L" + std::to_string(i + 1) + "@" + t);
  }
  for (int i = 0; i < 4; ++i) {
    rows.push_back(project_node(f.global[i], p.global[i]));
    tags.push_back("G" + std::to_string(i + 1) + "@" + t);
  }
}

}  // namespace

GraphSet build_graphs(const StageFeaturesV* feats_t0, const StageFeaturesV* feats_t1,
                      const ag::Var* f_text, const GraphBuildOptions& opt,
                      const GraphBuilderParams& p) {
  if (opt.scheme < 1 || opt.scheme > 5)
    throw std::invalid_argument("build_graphs: scheme " + std::to_string(opt.scheme) +
                                " out of range 1..5");
  const bool t0 = opt.use_t0 && feats_t0;
  const bool t1 = opt.use_t1 && feats_t1;
  const bool clin = opt.use_clinical && f_text;
  if (!t0 && !t1) throw std::invalid_argument("build_graphs: at least one time point required");

  GraphSet out;
  auto intra_lg = [&](const StageFeaturesV& f, const std::string& t) {
    std::vector<Var> rows;
    std::vector<std::string> tags;
    push_lg(f, t, p, rows, tags);
    out.intra.push_back(finish(std::move(rows), std::move(tags)));
  };
  auto intra_lgf = [&](const StageFeaturesV& f, const std::string& t) {
    std::vector<Var> rows;
    std::vector<std::string> tags;
    push_lg(f, t, p, rows, tags);
    rows.push_back(project_node(f.fused[3], p.fused));
    tags.push_back("F_" + t);
    out.intra.push_back(finish(std::move(rows), std::move(tags)));
  };
  auto make_inter = [&](bool with_f, bool with_clin) {
    std::vector<Var> rows;
    std::vector<std::string> tags;
    if (with_f && t0) {
      rows.push_back(project_node(feats_t0->fused[3], p.fused));
      tags.push_back("F_t0");
    }
    if (with_f && t1) {
      rows.push_back(project_node(feats_t1->fused[3], p.fused));
      tags.push_back("F_t1");
    }
    if (with_clin && clin) {
      rows.push_back(*f_text);
      tags.push_back("F_text");
    }
    if (!rows.empty()) out.inter = finish(std::move(rows), std::move(tags));
  };

  switch (opt.scheme) {
    case 1:  // one graph per modality, joint stream only
      if (t0) intra_lgf(*feats_t0, "t0");
      if (t1) intra_lgf(*feats_t1, "t1");
      if (clin) out.intra.push_back(finish({*f_text}, {"F_text"}));
      break;
    case 2:  // no local/global nodes
      make_inter(true, true);
      break;
    case 3:  // no fused-feature nodes
      if (t0) intra_lg(*feats_t0, "t0");
      if (t1) intra_lg(*feats_t1, "t1");
      break;
    case 4:  // combined per-time-point graphs + clinical singleton
      if (t0) intra_lgf(*feats_t0, "t0");
      if (t1) intra_lgf(*feats_t1, "t1");
      make_inter(false, true);
      break;
    case 5:
      if (t0) intra_lg(*feats_t0, "t0");
      if (t1) intra_lg(*feats_t1, "t1");
      make_inter(true, true);
      break;
  }
  if (out.intra.empty() && !out.inter)
    throw std::invalid_argument("build_graphs: configuration yields no graphs");
  return out;
}

}  // namespace dgsan
