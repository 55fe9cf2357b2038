#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgsan/data.hpp"
#include "dgsan/fusion.hpp"
#include "dgsan/glfe.hpp"
#include "dgsan/graph.hpp"
#include "dgsan/params.hpp"

namespace dgsan {

enum class Variant { full, t0_only, t0_clinical, t1_only, t1_clinical, no_GFF, no_HCC_GFF };

Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);
const std::vector<Variant>& all_variants();

struct ModelConfig {
  EncoderConfig encoder;
  FusionConfig fusion;
  int scheme = 5;
  Variant variant = Variant::full;
  int gat_heads = 4;
  double gat_slope = 0.2;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Full network: shared-weight GLFE over both time points, clinical encoder,
// node projections, GAT over the intra/inter graphs, HCMGFM fusion, linear
// head. Ablation variants rewire the tail; see forward().
class DgsanModel {
 public:
  DgsanModel(ParamStore& ps, const ModelConfig& cfg);

  struct Forward {
    ag::Var logits;  // [1, 2]
    GraphSet graphs;
    ag::Var joint_tokens;  // set for attention-fusion variants
  };

  Forward forward(const data::Case& c, const data::NormStats& stats,
                  std::vector<ag::Var>* attn_out = nullptr) const;

  const ModelConfig& config() const { return cfg_; }
  const Glfe& encoder() const { return glfe_; }
  bool uses_t0() const { return opts_.use_t0; }
  bool uses_t1() const { return opts_.use_t1; }
  bool uses_clinical() const { return opts_.use_clinical; }

 private:
  ModelConfig cfg_;
  GraphBuildOptions opts_;
  Glfe glfe_;
  std::optional<ClinicalEncoderParams> clinical_;
  GraphBuilderParams gproj_;
  std::optional<GatParams> gat_intra_, gat_inter_;
  std::optional<FusionParams> fusion_;
  HeadParams head_;
};

// Per-module (first name segment) and total parameter counts.
nlohmann::json parameter_report(const ParamStore& ps);

}  // namespace dgsan
