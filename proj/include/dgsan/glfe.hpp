#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgsan/attention.hpp"
#include "dgsan/autograd.hpp"
#include "dgsan/params.hpp"

namespace dgsan {

struct EncoderConfig {
  std::array<int, 4> stage_channels{16, 32, 64, 128};
  std::array<int, 3> patch_size{4, 4, 2};  // (height, width, depth)
  int window_size = 4;
  std::array<int, 4> heads_per_stage{1, 2, 4, 4};
  int clinical_hidden = 64;
  int feature_dim = 128;
  // Edge length of the fusion Conv3D per stage. 3x3x3 at the two deepest
  // stages lands the parameter budget; 1x1x1 earlier keeps the large grids
  // cheap.
  std::array<int, 4> aff_kernels{1, 1, 3, 3};

  void validate() const;
  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

// ---- AGCA channel gating ----
struct AgcaParams {
  ag::Var a1_diag;          // learnable diagonal, stored as [1,C]
  ag::Var a2;               // learnable adjacency [C,C]
  ag::Var w;                // weight matrix [C,C]
  ag::Var fr_w, fr_b;       // embedding in
  ag::Var fr2_w, fr2_b;     // embedding out
};
AgcaParams make_agca_params(ParamStore& ps, const std::string& prefix, int channels);
ag::Var agca(const ag::Var& m, const AgcaParams& p);
// The sigmoid gate alone, [1,C]; exposed for the gate-boundedness checks.
ag::Var agca_gate(const ag::Var& m, const AgcaParams& p);

// ---- local branch ----
struct LocalStageParams {
  ag::Var dw_w, dw_b;  // depthwise 3x3x3
  ag::Var ln_g, ln_b;
  ag::Var pw_w, pw_b;  // pointwise 1x1x1
};
LocalStageParams make_local_stage_params(ParamStore& ps, const std::string& prefix, int in_ch,
                                         int out_ch);
// Depthwise -> layer norm -> pointwise, on an already-downsampled map.
ag::Var local_stage(const ag::Var& x, const LocalStageParams& p, bool normalize = true);

// ---- global branch (windowed attention) ----
struct WindowPlan {
  int gd = 0, gh = 0, gw = 0;        // token grid
  int n_windows = 0, win_len = 0;
  std::vector<int> perm, inv_perm;   // grid order <-> (window, slot) order
  std::vector<Tensor> masks;         // additive [len,len] per window; empty when unmasked
};
// Effective window per axis is min(window, grid); shift (half window) only
// where the window does not already cover the axis.
WindowPlan make_window_plan(int gd, int gh, int gw, int window, bool shifted);

struct SwinBlockParams {
  ag::Var ln1_g, ln1_b, ln2_g, ln2_b;
  MhaParams mha;
  FeedForwardParams ff;
};
SwinBlockParams make_swin_block_params(ParamStore& ps, const std::string& prefix, int dim,
                                       int heads);
ag::Var swin_block(const ag::Var& tokens, const WindowPlan& plan, const SwinBlockParams& p,
                   std::vector<ag::Var>* attn_out = nullptr);

struct PatchMergeParams {
  ag::Var w, b;  // 8*C -> C_out
};
// `copies` row-concatenated token sets of the same grid are merged in one
// call (used when two volumes share a batched token matrix).
ag::Var patch_merge(const ag::Var& tokens, int gd, int gh, int gw, const PatchMergeParams& p,
                    int copies = 1);

// One global stage: optional patch merging, then W-MSA + SW-MSA blocks.
struct GlobalStageParams {
  std::optional<PatchMergeParams> merge;
  SwinBlockParams wmsa, swmsa;
};
ag::Var global_stage(const ag::Var& tokens, int gd, int gh, int gw, int window,
                     const GlobalStageParams& p, std::vector<ag::Var>* attn_out = nullptr);

// ---- fusion block (Eq-style AFF) ----
struct AffParams {
  AgcaParams agca_l, agca_g;
  ag::Var ln_g, ln_b;
  ag::Var conv_w, conv_b;                     // concat conv, kernel k^3
  std::optional<ag::Var> prev_w, prev_b;      // 1x1x1 projection of F_{i-1}
};
AffParams make_aff_params(ParamStore& ps, const std::string& prefix, int channels, int prev_channels,
                          int kernel);  // prev_channels < 0 for stage 1
// F_prev == nullptr selects the stage-1 form; otherwise the pooled previous
// fused map joins the concat and the output adds it as a residual.
ag::Var aff_fuse(const ag::Var& local, const ag::Var& global, const ag::Var* f_prev,
                 const AffParams& p, int kernel);
// aff_fuse for two volumes at once; the fusion convolutions run batched.
std::pair<ag::Var, ag::Var> aff_fuse_pair(const ag::Var& l0, const ag::Var& g0, const ag::Var& l1,
                                          const ag::Var& g1, const ag::Var* fp0,
                                          const ag::Var* fp1, const AffParams& p, int kernel);

// ---- clinical encoder ----
struct ClinicalEncoderParams {
  ag::Var w1, b1, w2, b2;
};
ClinicalEncoderParams make_clinical_params(ParamStore& ps, const std::string& prefix, int hidden,
                                           int out_dim);
ag::Var encode_clinical(const ag::Var& vec, const ClinicalEncoderParams& p);

// ---- whole encoder ----
struct StageFeaturesV {
  std::vector<ag::Var> local;   // L_i
  std::vector<ag::Var> global;  // G_i
  std::vector<ag::Var> fused;   // F_i
};

class Glfe {
 public:
  Glfe(ParamStore& ps, const EncoderConfig& cfg, const std::string& prefix = "glfe");

  // Shared weights: callers run t0 and t1 through the same instance.
  StageFeaturesV forward(const Tensor& volume, std::vector<ag::Var>* attn_out = nullptr) const;
  // Both timepoints in lockstep: token matrices are row-batched and the
  // convolutions share GEMMs, matching forward() on each volume exactly up
  // to floating-point summation order. Preferred on the training path.
  std::pair<StageFeaturesV, StageFeaturesV> forward_pair(const Tensor& v0,
                                                         const Tensor& v1) const;

  const EncoderConfig& config() const { return cfg_; }
  // (gd, gh, gw) token grid at each stage
  std::array<std::array<int, 3>, 4> grids() const { return grids_; }

 private:
  EncoderConfig cfg_;
  ag::Var embed_w_, embed_b_;
  std::array<ag::Var, 4> entry_w_, entry_b_;  // local branch downsampling convs
  std::array<LocalStageParams, 4> local_;
  std::array<GlobalStageParams, 4> global_;
  std::array<AffParams, 4> aff_;
  std::array<std::array<int, 3>, 4> grids_;
  std::array<WindowPlan, 4> plan_plain_, plan_shift_;  // built once per config
  std::array<WindowPlan, 4> plan_plain2_, plan_shift2_;  // two-volume variants
};

}  // namespace dgsan
