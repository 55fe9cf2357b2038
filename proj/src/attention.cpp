#include "dgsan/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace dgsan {

using ag::Var;

MhaParams make_mha_params(ParamStore& ps, const std::string& prefix, int dim, int heads) {
  if (dim % heads != 0)
    throw std::invalid_argument(prefix + ": dim " + std::to_string(dim) +
                                " not divisible by heads " + std::to_string(heads));
  MhaParams p;
  p.heads = heads;
  p.wq = ps.create(prefix + ".wq", {dim, dim}, Init::XavierUniform);
  p.bq = ps.create(prefix + ".bq", {dim}, Init::Zeros);
  p.wk = ps.create(prefix + ".wk", {dim, dim}, Init::XavierUniform);
  p.bk = ps.create(prefix + ".bk", {dim}, Init::Zeros);
  p.wv = ps.create(prefix + ".wv", {dim, dim}, Init::XavierUniform);
  p.bv = ps.create(prefix + ".bv", {dim}, Init::Zeros);
  p.wo = ps.create(prefix + ".wo", {dim, dim}, Init::XavierUniform);
  p.bo = ps.create(prefix + ".bo", {dim}, Init::Zeros);
  return p;
}

FeedForwardParams make_ff_params(ParamStore& ps, const std::string& prefix, int dim) {
  FeedForwardParams p;
  p.w1 = ps.create(prefix + ".w1", {dim, 4 * dim}, Init::XavierUniform);
  p.b1 = ps.create(prefix + ".b1", {4 * dim}, Init::Zeros);
  p.w2 = ps.create(prefix + ".w2", {4 * dim, dim}, Init::XavierUniform);
  p.b2 = ps.create(prefix + ".b2", {dim}, Init::Zeros);
  return p;
}

SelfAttentionBlockParams make_sab_params(ParamStore& ps, const std::string& prefix, int dim,
                                         int heads) {
  SelfAttentionBlockParams p;
  p.ln1_g = ps.create(prefix + ".ln1.g", {dim}, Init::Ones);
  p.ln1_b = ps.create(prefix + ".ln1.b", {dim}, Init::Zeros);
  p.mha = make_mha_params(ps, prefix + ".mha", dim, heads);
  p.ln2_g = ps.create(prefix + ".ln2.g", {dim}, Init::Ones);
  p.ln2_b = ps.create(prefix + ".ln2.b", {dim}, Init::Zeros);
  p.ff = make_ff_params(ps, prefix + ".ff", dim);
  return p;
}

CrossAttentionBlockParams make_cab_params(ParamStore& ps, const std::string& prefix, int dim,
                                          int heads) {
  auto dir = [&](const std::string& dprefix) {
    CrossDirectionParams d;
    d.lnq_g = ps.create(dprefix + ".lnq.g", {dim}, Init::Ones);
    d.lnq_b = ps.create(dprefix + ".lnq.b", {dim}, Init::Zeros);
    d.lnkv_g = ps.create(dprefix + ".lnkv.g", {dim}, Init::Ones);
    d.lnkv_b = ps.create(dprefix + ".lnkv.b", {dim}, Init::Zeros);
    d.mha = make_mha_params(ps, dprefix + ".mha", dim, heads);
    d.lnf_g = ps.create(dprefix + ".lnf.g", {dim}, Init::Ones);
    d.lnf_b = ps.create(dprefix + ".lnf.b", {dim}, Init::Zeros);
    d.ff = make_ff_params(ps, dprefix + ".ff", dim);
    return d;
  };
  CrossAttentionBlockParams p;
  p.fwd = dir(prefix + ".fwd");
  p.rev = dir(prefix + ".rev");
  return p;
}

Var multihead_attention(const Var& q_in, const Var& kv_in, const MhaParams& p, const Tensor* mask,
                        std::vector<Var>* attn_out) {
  const int dim = q_in->value.dim(1);
  if (kv_in->value.dim(1) != dim)
    throw std::invalid_argument("multihead_attention: query/key dim mismatch");
  Var q = ag::linear(q_in, p.wq, p.bq);
  Var k = ag::linear(kv_in, p.wk, p.bk);
  Var v = ag::linear(kv_in, p.wv, p.bv);
  std::vector<Tensor> masks;
  if (mask) masks.push_back(*mask);
  std::vector<Tensor> probs;
  Var ctx = ag::windowed_mha(q, k, v, 1, p.heads, mask ? &masks : nullptr,
                             attn_out ? &probs : nullptr);
  if (attn_out)
    for (auto& a : probs) attn_out->push_back(ag::constant(std::move(a)));
  return ag::linear(ctx, p.wo, p.bo);
}

Var feed_forward(const Var& x, const FeedForwardParams& p) {
  return ag::linear(ag::gelu(ag::linear(x, p.w1, p.b1)), p.w2, p.b2);
}

Var self_attention_block(const Var& x, const SelfAttentionBlockParams& p,
                         std::vector<Var>* attn_out) {
  Var h = ag::layer_norm_rows(x, p.ln1_g, p.ln1_b);
  Var y = ag::add(x, multihead_attention(h, h, p.mha, nullptr, attn_out));
  return ag::add(y, feed_forward(ag::layer_norm_rows(y, p.ln2_g, p.ln2_b), p.ff));
}

namespace {

Var cross_direction(const Var& q, const Var& kv, const CrossDirectionParams& p,
                    std::vector<Var>* attn_out) {
  Var qn = ag::layer_norm_rows(q, p.lnq_g, p.lnq_b);
  Var kn = ag::layer_norm_rows(kv, p.lnkv_g, p.lnkv_b);
  Var y = ag::add(q, multihead_attention(qn, kn, p.mha, nullptr, attn_out));
  return ag::add(y, feed_forward(ag::layer_norm_rows(y, p.lnf_g, p.lnf_b), p.ff));
}

}  // namespace

std::pair<Var, Var> cross_attention_block(const Var& a, const Var& b,
                                          const CrossAttentionBlockParams& p,
                                          std::vector<Var>* attn_out) {
  Var a2 = cross_direction(a, b, p.fwd, attn_out);
  Var b2 = cross_direction(b, a, p.rev, attn_out);
  return {a2, b2};
}

}  // namespace dgsan
