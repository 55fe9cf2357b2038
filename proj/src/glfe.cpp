#include "dgsan/glfe.hpp"

#include <cmath>
#include <stdexcept>
#include <tuple>

#include "dgsan/data.hpp"

namespace dgsan {

using ag::Var;
using nlohmann::json;

void EncoderConfig::validate() const {
  for (int i = 1; i < 4; ++i)
    if (stage_channels[i] <= stage_channels[i - 1])
      throw std::invalid_argument("EncoderConfig: stage_channels must be strictly increasing");
  for (int i = 0; i < 4; ++i) {
    if (stage_channels[i] % heads_per_stage[i] != 0)
      throw std::invalid_argument("EncoderConfig: stage " + std::to_string(i + 1) +
                                  " channels not divisible by head count");
    if (aff_kernels[i] != 1 && aff_kernels[i] != 3)
      throw std::invalid_argument("EncoderConfig: aff_kernels entries must be 1 or 3");
  }
  if (data::kHeight % patch_size[0] || data::kWidth % patch_size[1] || data::kDepth % patch_size[2])
    throw std::invalid_argument("EncoderConfig: patch size " + std::to_string(patch_size[0]) + "x" +
                                std::to_string(patch_size[1]) + "x" + std::to_string(patch_size[2]) +
                                " does not divide the 64x64x16 input");
  if (window_size < 1) throw std::invalid_argument("EncoderConfig: window_size must be positive");
}

json EncoderConfig::to_json() const {
  return json{{"stage_channels", stage_channels}, {"patch_size", patch_size},
              {"window_size", window_size},       {"heads_per_stage", heads_per_stage},
              {"clinical_hidden", clinical_hidden}, {"feature_dim", feature_dim},
              {"aff_kernels", aff_kernels}};
}

EncoderConfig EncoderConfig::from_json(const json& j) {
  EncoderConfig c;
  if (j.contains("stage_channels")) c.stage_channels = j["stage_channels"];
  if (j.contains("patch_size")) c.patch_size = j["patch_size"];
  if (j.contains("window_size")) c.window_size = j["window_size"];
  if (j.contains("heads_per_stage")) c.heads_per_stage = j["heads_per_stage"];
  if (j.contains("clinical_hidden")) c.clinical_hidden = j["clinical_hidden"];
  if (j.contains("feature_dim")) c.feature_dim = j["feature_dim"];
  if (j.contains("aff_kernels")) c.aff_kernels = j["aff_kernels"];
  c.validate();
  return c;
}

// ---- AGCA ----

AgcaParams make_agca_params(ParamStore& ps, const std::string& prefix, int channels) {
  AgcaParams p;
  p.a1_diag = ps.create(prefix + ".a1", {1, channels}, Init::Ones);
  p.a2 = ps.create(prefix + ".a2", {channels, channels}, Init::Zeros);
  p.w = ps.create(prefix + ".w", {channels, channels}, Init::Identity);
  p.fr_w = ps.create(prefix + ".fr.w", {channels, channels}, Init::XavierUniform);
  p.fr_b = ps.create(prefix + ".fr.b", {channels}, Init::Zeros);
  p.fr2_w = ps.create(prefix + ".fr2.w", {channels, channels}, Init::XavierUniform);
  p.fr2_b = ps.create(prefix + ".fr2.b", {channels}, Init::Zeros);
  return p;
}

ag::Var agca_gate(const Var& m, const AgcaParams& p) {
  // row-vector convention: gate = sigmoid(Fr'(ReLU(Fr(GAP(m)) * W * (A1 + A2))))
  // with the identity component folded into A1's diagonal placement.
  Var u = ag::linear(ag::global_avg_pool(m), p.fr_w, p.fr_b);
  u = ag::matmul(u, p.w);
  u = ag::matmul(u, ag::add(ag::diag(p.a1_diag), p.a2));
  u = ag::relu(u);
  u = ag::linear(u, p.fr2_w, p.fr2_b);
  return ag::sigmoid(u);
}

ag::Var agca(const Var& m, const AgcaParams& p) {
  for (double v : m->value.data)
    if (!std::isfinite(v)) throw std::invalid_argument("agca: non-finite input");
  return ag::scale_channels(m, agca_gate(m, p));
}

// ---- local branch ----

LocalStageParams make_local_stage_params(ParamStore& ps, const std::string& prefix, int in_ch,
                                         int out_ch) {
  LocalStageParams p;
  p.dw_w = ps.create(prefix + ".dw.w", {in_ch, 3, 3, 3}, Init::XavierUniform);
  p.dw_b = ps.create(prefix + ".dw.b", {in_ch}, Init::Zeros);
  p.ln_g = ps.create(prefix + ".ln.g", {in_ch}, Init::Ones);
  p.ln_b = ps.create(prefix + ".ln.b", {in_ch}, Init::Zeros);
  p.pw_w = ps.create(prefix + ".pw.w", {out_ch, in_ch, 1, 1, 1}, Init::XavierUniform);
  p.pw_b = ps.create(prefix + ".pw.b", {out_ch}, Init::Zeros);
  return p;
}

ag::Var local_stage(const Var& x, const LocalStageParams& p, bool normalize) {
  Var h = ag::depthwise_conv3d(x, p.dw_w, p.dw_b);
  if (normalize) h = ag::layer_norm_channels(h, p.ln_g, p.ln_b);
  static const int s1[3] = {1, 1, 1}, p0[3] = {0, 0, 0};
  return ag::conv3d(h, p.pw_w, p.pw_b, s1, p0);
}

// ---- windowed attention ----

WindowPlan make_window_plan(int gd, int gh, int gw, int window, bool shifted) {
  WindowPlan plan;
  plan.gd = gd;
  plan.gh = gh;
  plan.gw = gw;
  const int wd = std::min(window, gd), wh = std::min(window, gh), ww = std::min(window, gw);
  if (gd % wd || gh % wh || gw % ww)
    throw std::invalid_argument("window size " + std::to_string(window) +
                                " does not tile token grid " + std::to_string(gd) + "x" +
                                std::to_string(gh) + "x" + std::to_string(gw));
  const int sd = (shifted && wd < gd) ? wd / 2 : 0;
  const int sh = (shifted && wh < gh) ? wh / 2 : 0;
  const int sw = (shifted && ww < gw) ? ww / 2 : 0;
  plan.win_len = wd * wh * ww;
  plan.n_windows = (gd / wd) * (gh / wh) * (gw / ww);
  const int n = gd * gh * gw;
  plan.perm.resize(n);
  plan.inv_perm.resize(n);

  auto region = [](int r, int g, int w, int s) {
    if (s == 0) return 0;
    if (r < g - w) return 0;
    if (r < g - s) return 1;
    return 2;
  };

  std::vector<int> regions(n);
  int slot = 0;
  for (int bd = 0; bd < gd / wd; ++bd)
    for (int bh = 0; bh < gh / wh; ++bh)
      for (int bw = 0; bw < gw / ww; ++bw)
        for (int od = 0; od < wd; ++od)
          for (int oh = 0; oh < wh; ++oh)
            for (int ow = 0; ow < ww; ++ow, ++slot) {
              const int rd = bd * wd + od, rh = bh * wh + oh, rw = bw * ww + ow;
              const int orig =
                  (((rd + sd) % gd) * gh + ((rh + sh) % gh)) * gw + ((rw + sw) % gw);
              plan.perm[slot] = orig;
              plan.inv_perm[orig] = slot;
              regions[slot] =
                  region(rd, gd, wd, sd) * 9 + region(rh, gh, wh, sh) * 3 + region(rw, gw, ww, sw);
            }

  if (sd || sh || sw) {
    plan.masks.resize(plan.n_windows);
    for (int wi = 0; wi < plan.n_windows; ++wi) {
      const int base = wi * plan.win_len;
      bool mixed = false;
      for (int i = 1; i < plan.win_len && !mixed; ++i)
        mixed = regions[base + i] != regions[base];
      if (!mixed) continue;  // empty tensor = no mask needed
      Tensor mask({plan.win_len, plan.win_len});
      for (int i = 0; i < plan.win_len; ++i)
        for (int j = 0; j < plan.win_len; ++j)
          if (regions[base + i] != regions[base + j]) mask[i * plan.win_len + j] = -1e9;
      plan.masks[wi] = std::move(mask);
    }
  }
  return plan;
}

namespace {

// The same plan applied to two row-concatenated token sets: twice the
// windows, second-half indices offset by one token count, masks repeated.
WindowPlan doubled_plan(const WindowPlan& p) {
  WindowPlan d = p;
  const int n = static_cast<int>(p.perm.size());
  d.n_windows = 2 * p.n_windows;
  d.perm.resize(2 * static_cast<size_t>(n));
  d.inv_perm.resize(2 * static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    d.perm[static_cast<size_t>(n) + i] = n + p.perm[i];
    d.inv_perm[static_cast<size_t>(n) + i] = n + p.inv_perm[i];
  }
  if (!p.masks.empty()) d.masks.insert(d.masks.end(), p.masks.begin(), p.masks.end());
  return d;
}

}  // namespace

SwinBlockParams make_swin_block_params(ParamStore& ps, const std::string& prefix, int dim,
                                       int heads) {
  SwinBlockParams p;
  p.ln1_g = ps.create(prefix + ".ln1.g", {dim}, Init::Ones);
  p.ln1_b = ps.create(prefix + ".ln1.b", {dim}, Init::Zeros);
  p.mha = make_mha_params(ps, prefix + ".mha", dim, heads);
  p.ln2_g = ps.create(prefix + ".ln2.g", {dim}, Init::Ones);
  p.ln2_b = ps.create(prefix + ".ln2.b", {dim}, Init::Zeros);
  p.ff = make_ff_params(ps, prefix + ".ff", dim);
  return p;
}

ag::Var swin_block(const Var& tokens, const WindowPlan& plan, const SwinBlockParams& p,
                   std::vector<Var>* attn_out) {
  Var h = ag::layer_norm_rows(tokens, p.ln1_g, p.ln1_b);
  Var part = ag::gather_rows(h, plan.perm);
  Var q = ag::linear(part, p.mha.wq, p.mha.bq);
  Var k = ag::linear(part, p.mha.wk, p.mha.bk);
  Var v = ag::linear(part, p.mha.wv, p.mha.bv);
  std::vector<Tensor> probs;
  Var ctx = ag::windowed_mha(q, k, v, plan.n_windows, p.mha.heads,
                             plan.masks.empty() ? nullptr : &plan.masks,
                             attn_out ? &probs : nullptr);
  if (attn_out)
    for (auto& t : probs) attn_out->push_back(ag::constant(std::move(t)));
  Var merged = ag::linear(ctx, p.mha.wo, p.mha.bo);
  Var y = ag::add(tokens, ag::gather_rows(merged, plan.inv_perm));
  return ag::add(y, feed_forward(ag::layer_norm_rows(y, p.ln2_g, p.ln2_b), p.ff));
}

ag::Var patch_merge(const Var& tokens, int gd, int gh, int gw, const PatchMergeParams& p,
                    int copies) {
  if (gd % 2 || gh % 2 || gw % 2)
    throw std::invalid_argument("patch_merge: grid not divisible by 2");
  const int od = gd / 2, oh = gh / 2, ow = gw / 2;
  const int n_in = gd * gh * gw, n_out = od * oh * ow;
  std::vector<Var> parts;
  for (int kd = 0; kd < 2; ++kd)
    for (int kh = 0; kh < 2; ++kh)
      for (int kw = 0; kw < 2; ++kw) {
        std::vector<int> idx(static_cast<size_t>(copies) * n_out);
        size_t i = 0;
        for (int v = 0; v < copies; ++v)
          for (int d = 0; d < od; ++d)
            for (int h = 0; h < oh; ++h)
              for (int w = 0; w < ow; ++w, ++i)
                idx[i] = v * n_in + ((2 * d + kd) * gh + 2 * h + kh) * gw + 2 * w + kw;
        parts.push_back(ag::gather_rows(tokens, std::move(idx)));
      }
  return ag::linear(ag::concat_cols(parts), p.w, p.b);
}

ag::Var global_stage(const Var& tokens, int gd, int gh, int gw, int window,
                     const GlobalStageParams& p, std::vector<Var>* attn_out) {
  Var t = tokens;
  if (p.merge) t = patch_merge(t, gd * 2, gh * 2, gw * 2, *p.merge);
  const WindowPlan plain = make_window_plan(gd, gh, gw, window, false);
  const WindowPlan shifted = make_window_plan(gd, gh, gw, window, true);
  t = swin_block(t, plain, p.wmsa, attn_out);
  return swin_block(t, shifted, p.swmsa, attn_out);
}

// ---- AFF ----

AffParams make_aff_params(ParamStore& ps, const std::string& prefix, int channels,
                          int prev_channels, int kernel) {
  AffParams p;
  p.agca_l = make_agca_params(ps, prefix + ".agca_l", channels);
  p.agca_g = make_agca_params(ps, prefix + ".agca_g", channels);
  const int cat = prev_channels < 0 ? 2 * channels : 3 * channels;
  p.ln_g = ps.create(prefix + ".ln.g", {cat}, Init::Ones);
  p.ln_b = ps.create(prefix + ".ln.b", {cat}, Init::Zeros);
  p.conv_w = ps.create(prefix + ".conv.w", {channels, cat, kernel, kernel, kernel},
                       Init::XavierUniform);
  p.conv_b = ps.create(prefix + ".conv.b", {channels}, Init::Zeros);
  if (prev_channels >= 0) {
    p.prev_w = ps.create(prefix + ".prev.w", {channels, prev_channels, 1, 1, 1},
                         Init::XavierUniform);
    p.prev_b = ps.create(prefix + ".prev.b", {channels}, Init::Zeros);
  }
  return p;
}

namespace {

// Shared front half of aff_fuse: gated branches (+ pooled previous map when
// present) concatenated and normalized, ready for the fusion convolution.
// Returns the normalized concat and the residual term (empty at stage 1).
std::pair<Var, Var> aff_preconv(const Var& local, const Var& global, const Var* f_prev,
                                const AffParams& p) {
  if (!local->value.same_shape(global->value))
    throw std::invalid_argument("aff_fuse: local/global shape mismatch " +
                                shape_str(local->value.shape) + " vs " +
                                shape_str(global->value.shape));
  if (f_prev && !p.prev_w) throw std::invalid_argument("aff_fuse: F_prev given at stage 1");
  if (!f_prev && p.prev_w) throw std::invalid_argument("aff_fuse: stage >= 2 requires F_prev");
  static const int s1[3] = {1, 1, 1}, p0[3] = {0, 0, 0};
  Var l = agca(local, p.agca_l);
  Var g = agca(global, p.agca_g);
  std::vector<Var> parts;
  Var fp;
  if (f_prev) {
    fp = ag::avg_pool_halve(ag::conv3d(*f_prev, *p.prev_w, *p.prev_b, s1, p0));
    parts = {fp, l, g};
  } else {
    parts = {l, g};
  }
  Var cat = ag::layer_norm_channels(ag::channel_concat(parts), p.ln_g, p.ln_b);
  return {cat, fp};
}

}  // namespace

ag::Var aff_fuse(const Var& local, const Var& global, const Var* f_prev, const AffParams& p,
                 int kernel) {
  auto [cat, fp] = aff_preconv(local, global, f_prev, p);
  static const int s1[3] = {1, 1, 1};
  const int pad = kernel / 2;
  const int pk[3] = {pad, pad, pad};
  Var out = ag::gelu(ag::conv3d(cat, p.conv_w, p.conv_b, s1, pk));
  return fp ? ag::add(out, fp) : out;
}

std::pair<ag::Var, ag::Var> aff_fuse_pair(const Var& l0, const Var& g0, const Var& l1,
                                          const Var& g1, const Var* fp0, const Var* fp1,
                                          const AffParams& p, int kernel) {
  auto [cat0, res0] = aff_preconv(l0, g0, fp0, p);
  auto [cat1, res1] = aff_preconv(l1, g1, fp1, p);
  static const int s1[3] = {1, 1, 1};
  const int pad = kernel / 2;
  const int pk[3] = {pad, pad, pad};
  auto [c0, c1] = ag::conv3d_pair(cat0, cat1, p.conv_w, p.conv_b, s1, pk);
  Var o0 = ag::gelu(c0), o1 = ag::gelu(c1);
  return {res0 ? ag::add(o0, res0) : o0, res1 ? ag::add(o1, res1) : o1};
}

// ---- clinical encoder ----

ClinicalEncoderParams make_clinical_params(ParamStore& ps, const std::string& prefix, int hidden,
                                           int out_dim) {
  ClinicalEncoderParams p;
  p.w1 = ps.create(prefix + ".w1", {data::kClinicalDim, hidden}, Init::XavierUniform);
  p.b1 = ps.create(prefix + ".b1", {hidden}, Init::Zeros);
  p.w2 = ps.create(prefix + ".w2", {hidden, out_dim}, Init::XavierUniform);
  p.b2 = ps.create(prefix + ".b2", {out_dim}, Init::Zeros);
  return p;
}

ag::Var encode_clinical(const Var& vec, const ClinicalEncoderParams& p) {
  check_shape(vec->value, {1, data::kClinicalDim}, "encode_clinical input");
  return ag::linear(ag::gelu(ag::linear(vec, p.w1, p.b1)), p.w2, p.b2);
}

// ---- encoder assembly ----

Glfe::Glfe(ParamStore& ps, const EncoderConfig& cfg, const std::string& prefix) : cfg_(cfg) {
  cfg_.validate();
  const int ph = cfg.patch_size[0], pw = cfg.patch_size[1], pd = cfg.patch_size[2];
  grids_[0] = {data::kDepth / pd, data::kHeight / ph, data::kWidth / pw};
  for (int i = 1; i < 4; ++i)
    grids_[i] = {std::max(1, grids_[i - 1][0] / 2), grids_[i - 1][1] / 2, grids_[i - 1][2] / 2};

  const int patch_vox = pd * ph * pw;
  embed_w_ = ps.create(prefix + ".embed.w", {patch_vox, cfg.stage_channels[0]},
                       Init::XavierUniform);
  embed_b_ = ps.create(prefix + ".embed.b", {cfg.stage_channels[0]}, Init::Zeros);

  for (int i = 0; i < 4; ++i) {
    const std::string sp = prefix + ".s" + std::to_string(i + 1);
    const int c = cfg.stage_channels[i];
    const int cin = i == 0 ? 1 : cfg.stage_channels[i - 1];
    if (i == 0)
      entry_w_[i] = ps.create(sp + ".entry.w", {c, 1, pd, ph, pw}, Init::XavierUniform);
    else
      entry_w_[i] = ps.create(sp + ".entry.w", {c, cin, 2, 2, 2}, Init::XavierUniform);
    entry_b_[i] = ps.create(sp + ".entry.b", {c}, Init::Zeros);
    local_[i] = make_local_stage_params(ps, sp + ".local", c, c);

    if (i > 0) {
      GlobalStageParams gs;
      PatchMergeParams mp;
      mp.w = ps.create(sp + ".merge.w", {8 * cin, c}, Init::XavierUniform);
      mp.b = ps.create(sp + ".merge.b", {c}, Init::Zeros);
      gs.merge = mp;
      gs.wmsa = make_swin_block_params(ps, sp + ".wmsa", c, cfg.heads_per_stage[i]);
      gs.swmsa = make_swin_block_params(ps, sp + ".swmsa", c, cfg.heads_per_stage[i]);
      global_[i] = std::move(gs);
    } else {
      global_[i].wmsa = make_swin_block_params(ps, sp + ".wmsa", c, cfg.heads_per_stage[i]);
      global_[i].swmsa = make_swin_block_params(ps, sp + ".swmsa", c, cfg.heads_per_stage[i]);
    }
    aff_[i] = make_aff_params(ps, sp + ".aff", c, i == 0 ? -1 : cfg.stage_channels[i - 1],
                              cfg.aff_kernels[i]);
    const auto [gd, gh, gw] = grids_[i];
    plan_plain_[i] = make_window_plan(gd, gh, gw, cfg.window_size, false);
    plan_shift_[i] = make_window_plan(gd, gh, gw, cfg.window_size, true);
    plan_plain2_[i] = doubled_plan(plan_plain_[i]);
    plan_shift2_[i] = doubled_plan(plan_shift_[i]);
  }
}

StageFeaturesV Glfe::forward(const Tensor& volume, std::vector<Var>* attn_out) const {
  check_shape(volume, {data::kDepth, data::kHeight, data::kWidth}, "Glfe::forward input");
  const int ph = cfg_.patch_size[0], pw = cfg_.patch_size[1], pd = cfg_.patch_size[2];
  Var vol = ag::constant(volume);
  Var tokens = ag::linear(ag::extract_patches(vol, pd, ph, pw), embed_w_, embed_b_);
  Var lmap = ag::reshape(vol, {1, data::kDepth, data::kHeight, data::kWidth});

  StageFeaturesV out;
  Var f_prev;
  static const int pad0[3] = {0, 0, 0};
  for (int i = 0; i < 4; ++i) {
    const auto [gd, gh, gw] = grids_[i];
    if (i == 0) {
      const int stride[3] = {pd, ph, pw};
      lmap = ag::conv3d(lmap, entry_w_[i], entry_b_[i], stride, pad0);
    } else {
      static const int s2[3] = {2, 2, 2};
      lmap = ag::conv3d(lmap, entry_w_[i], entry_b_[i], s2, pad0);
      tokens = patch_merge(tokens, gd * 2, gh * 2, gw * 2, *global_[i].merge);
    }
    tokens = swin_block(tokens, plan_plain_[i], global_[i].wmsa, attn_out);
    tokens = swin_block(tokens, plan_shift_[i], global_[i].swmsa, attn_out);
    lmap = local_stage(lmap, local_[i]);
    Var gmap = ag::tokens_to_map(tokens, gd, gh, gw);
    Var fused = aff_fuse(lmap, gmap, i == 0 ? nullptr : &f_prev, aff_[i], cfg_.aff_kernels[i]);
    out.local.push_back(lmap);
    out.global.push_back(gmap);
    out.fused.push_back(fused);
    f_prev = fused;
  }
  return out;
}

std::pair<StageFeaturesV, StageFeaturesV> Glfe::forward_pair(const Tensor& v0,
                                                             const Tensor& v1) const {
  check_shape(v0, {data::kDepth, data::kHeight, data::kWidth}, "Glfe::forward_pair input");
  check_shape(v1, {data::kDepth, data::kHeight, data::kWidth}, "Glfe::forward_pair input");
  const int ph = cfg_.patch_size[0], pw = cfg_.patch_size[1], pd = cfg_.patch_size[2];
  Var vol0 = ag::constant(v0), vol1 = ag::constant(v1);
  Var tokens = ag::linear(ag::concat_rows({ag::extract_patches(vol0, pd, ph, pw),
                                           ag::extract_patches(vol1, pd, ph, pw)}),
                          embed_w_, embed_b_);
  Var lm0 = ag::reshape(vol0, {1, data::kDepth, data::kHeight, data::kWidth});
  Var lm1 = ag::reshape(vol1, {1, data::kDepth, data::kHeight, data::kWidth});

  StageFeaturesV out0, out1;
  Var fp0, fp1;
  static const int pad0[3] = {0, 0, 0};
  for (int i = 0; i < 4; ++i) {
    const auto [gd, gh, gw] = grids_[i];
    if (i == 0) {
      const int stride[3] = {pd, ph, pw};
      std::tie(lm0, lm1) = ag::conv3d_pair(lm0, lm1, entry_w_[i], entry_b_[i], stride, pad0);
    } else {
      static const int s2[3] = {2, 2, 2};
      std::tie(lm0, lm1) = ag::conv3d_pair(lm0, lm1, entry_w_[i], entry_b_[i], s2, pad0);
      tokens = patch_merge(tokens, gd * 2, gh * 2, gw * 2, *global_[i].merge, 2);
    }
    tokens = swin_block(tokens, plan_plain2_[i], global_[i].wmsa);
    tokens = swin_block(tokens, plan_shift2_[i], global_[i].swmsa);
    lm0 = local_stage(lm0, local_[i]);
    lm1 = local_stage(lm1, local_[i]);
    const int n = gd * gh * gw;
    Var gm0 = ag::tokens_to_map(ag::slice_rows(tokens, 0, n), gd, gh, gw);
    Var gm1 = ag::tokens_to_map(ag::slice_rows(tokens, n, 2 * n), gd, gh, gw);
    auto [f0, f1] = aff_fuse_pair(lm0, gm0, lm1, gm1, i == 0 ? nullptr : &fp0,
                                  i == 0 ? nullptr : &fp1, aff_[i], cfg_.aff_kernels[i]);
    out0.local.push_back(lm0);
    out0.global.push_back(gm0);
    out0.fused.push_back(f0);
    out1.local.push_back(lm1);
    out1.global.push_back(gm1);
    out1.fused.push_back(f1);
    fp0 = f0;
    fp1 = f1;
  }
  return {std::move(out0), std::move(out1)};
}

}  // namespace dgsan
