#include "dgsan/model.hpp"

#include <stdexcept>
#include <tuple>

namespace dgsan {

using ag::Var;
using nlohmann::json;

namespace {

const std::vector<std::pair<Variant, std::string>>& variant_table() {
  static const std::vector<std::pair<Variant, std::string>> t = {
      {Variant::full, "full"},
      {Variant::t0_only, "t0_only"},
      {Variant::t0_clinical, "t0_clinical"},
      {Variant::t1_only, "t1_only"},
      {Variant::t1_clinical, "t1_clinical"},
      {Variant::no_GFF, "no_GFF"},
      {Variant::no_HCC_GFF, "no_HCC_GFF"},
  };
  return t;
}

GraphBuildOptions options_for(const ModelConfig& cfg) {
  GraphBuildOptions o;
  o.scheme = cfg.scheme;
  switch (cfg.variant) {
    case Variant::t0_only:
      o.use_t1 = false;
      o.use_clinical = false;
      break;
    case Variant::t0_clinical:
      o.use_t1 = false;
      break;
    case Variant::t1_only:
      o.use_t0 = false;
      o.use_clinical = false;
      break;
    case Variant::t1_clinical:
      o.use_t0 = false;
      break;
    default:
      break;
  }
  return o;
}

// Mirrors build_graphs(): intra node counts plus the inter count (0 = none).
std::pair<std::vector<int>, int> graph_node_counts(const GraphBuildOptions& o) {
  const int times = (o.use_t0 ? 1 : 0) + (o.use_t1 ? 1 : 0);
  const int clin = o.use_clinical ? 1 : 0;
  std::vector<int> intra;
  int inter = 0;
  switch (o.scheme) {
    case 1:
      intra.assign(times, 9);
      if (clin) intra.push_back(1);
      break;
    case 2:
      inter = times + clin;
      break;
    case 3:
      intra.assign(times, 8);
      break;
    case 4:
      intra.assign(times, 9);
      inter = clin;
      break;
    case 5:
      intra.assign(times, 8);
      inter = times + clin;
      break;
    default:
      throw std::invalid_argument("scheme out of range 1..5");
  }
  return {intra, inter};
}

}  // namespace

Variant parse_variant(const std::string& name) {
  for (const auto& [v, n] : variant_table())
    if (n == name) return v;
  throw std::invalid_argument("unknown variant '" + name + "'");
}

std::string variant_name(Variant v) {
  for (const auto& [vv, n] : variant_table())
    if (vv == v) return n;
  throw std::logic_error("unmapped variant");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> vs = [] {
    std::vector<Variant> out;
    for (const auto& [v, _] : variant_table()) out.push_back(v);
    return out;
  }();
  return vs;
}

void ModelConfig::validate() const {
  encoder.validate();
  fusion.validate();
  if (scheme < 1 || scheme > 5)
    throw std::invalid_argument("ModelConfig: scheme " + std::to_string(scheme) +
                                " out of range 1..5");
  if (fusion.d != encoder.feature_dim)
    throw std::invalid_argument("ModelConfig: fusion d must equal encoder feature_dim");
  if (gat_heads < 1 || encoder.feature_dim % gat_heads != 0)
    throw std::invalid_argument("ModelConfig: feature_dim not divisible by gat_heads");
}

json ModelConfig::to_json() const {
  return json{{"encoder", encoder.to_json()}, {"fusion", fusion.to_json()},
              {"scheme", scheme},             {"variant", variant_name(variant)},
              {"gat_heads", gat_heads},       {"gat_slope", gat_slope}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  if (j.contains("encoder")) c.encoder = EncoderConfig::from_json(j["encoder"]);
  if (j.contains("fusion")) c.fusion = FusionConfig::from_json(j["fusion"]);
  if (j.contains("scheme")) c.scheme = j["scheme"];
  if (j.contains("variant")) c.variant = parse_variant(j["variant"].get<std::string>());
  if (j.contains("gat_heads")) c.gat_heads = j["gat_heads"];
  if (j.contains("gat_slope")) c.gat_slope = j["gat_slope"];
  c.validate();
  return c;
}

DgsanModel::DgsanModel(ParamStore& ps, const ModelConfig& cfg)
    : cfg_(cfg), opts_(options_for(cfg)), glfe_(ps, cfg.encoder, "glfe") {
  cfg_.validate();
  const int d = cfg.encoder.feature_dim;
  if (opts_.use_clinical)
    clinical_ = make_clinical_params(ps, "clin", cfg.encoder.clinical_hidden, d);
  gproj_ = make_graph_builder_params(ps, "gproj", cfg.encoder);

  const auto [intra_counts, inter_count] = graph_node_counts(opts_);
  const bool with_gat = cfg.variant != Variant::no_HCC_GFF;
  if (with_gat) {
    if (!intra_counts.empty())
      gat_intra_ = make_gat_params(ps, "gat.intra", d, d, cfg.gat_heads, cfg.gat_slope);
    if (inter_count > 0)
      gat_inter_ = make_gat_params(ps, "gat.inter", d, d, cfg.gat_heads, cfg.gat_slope);
  }

  int head_dim = d;
  switch (cfg.variant) {
    case Variant::no_GFF: {
      const int n_graphs = static_cast<int>(intra_counts.size()) + (inter_count > 0 ? 1 : 0);
      head_dim = n_graphs * d;
      break;
    }
    case Variant::no_HCC_GFF: {
      int nodes = inter_count;
      for (int n : intra_counts) nodes += n;
      head_dim = nodes * d;
      break;
    }
    default:
      fusion_ = make_fusion_params(ps, "fuse", cfg.fusion);
      break;
  }
  head_ = make_head_params(ps, "head", head_dim);
}

DgsanModel::Forward DgsanModel::forward(const data::Case& c, const data::NormStats& stats,
                                        std::vector<Var>* attn_out) const {
  StageFeaturesV f0, f1;
  if (opts_.use_t0 && opts_.use_t1 && !attn_out) {
    std::tie(f0, f1) = glfe_.forward_pair(c.volumes.t0, c.volumes.t1);
  } else {
    if (opts_.use_t0) f0 = glfe_.forward(c.volumes.t0, attn_out);
    if (opts_.use_t1) f1 = glfe_.forward(c.volumes.t1, attn_out);
  }

  Var f_text;
  if (opts_.use_clinical)
    f_text = encode_clinical(ag::constant(data::normalize_clinical(c.clinical, stats)),
                             *clinical_);

  Forward out;
  out.graphs = build_graphs(opts_.use_t0 ? &f0 : nullptr, opts_.use_t1 ? &f1 : nullptr,
                            f_text ? &f_text : nullptr, opts_, gproj_);

  if (cfg_.variant == Variant::no_HCC_GFF) {
    std::vector<Var> rows;
    for (const auto& g : out.graphs.intra) rows.push_back(g.x);
    if (out.graphs.inter) rows.push_back(out.graphs.inter->x);
    Var all = rows.size() == 1 ? rows[0] : ag::concat_rows(rows);
    Var flat = ag::reshape(all, {1, static_cast<int>(all->value.numel())});
    out.logits = classify_head(flat, head_);
    return out;
  }

  std::vector<Var> intra_outs;
  for (const auto& g : out.graphs.intra)
    intra_outs.push_back(gat_forward(g, *gat_intra_, attn_out));
  Var inter_tokens;
  if (out.graphs.inter) inter_tokens = gat_forward(*out.graphs.inter, *gat_inter_, attn_out);

  if (cfg_.variant == Variant::no_GFF) {
    std::vector<Var> pooled;
    for (const auto& t : intra_outs) pooled.push_back(ag::mean_rows(t));
    if (inter_tokens) pooled.push_back(ag::mean_rows(inter_tokens));
    Var cat = pooled.size() == 1 ? pooled[0] : ag::concat_cols(pooled);
    out.logits = classify_head(cat, head_);
    return out;
  }

  Var intra_tokens;
  if (!intra_outs.empty())
    intra_tokens = intra_outs.size() == 1 ? intra_outs[0] : ag::concat_rows(intra_outs);
  FusedRepresentation fused = fuse(intra_tokens ? &intra_tokens : nullptr,
                                   inter_tokens ? &inter_tokens : nullptr, cfg_.fusion,
                                   *fusion_, attn_out);
  out.joint_tokens = fused.tokens;
  out.logits = classify_head(fused.pooled, head_);
  return out;
}

json parameter_report(const ParamStore& ps) {
  json by_module = json::object();
  for (const auto& [name, v] : ps.items()) {
    const std::string mod = name.substr(0, name.find('.'));
    by_module[mod] = by_module.value(mod, int64_t{0}) + v->value.numel();
  }
  return json{{"modules", by_module}, {"total", ps.total_count()}};
}

}  // namespace dgsan
