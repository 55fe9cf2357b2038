#pragma once

#include <string>
#include <vector>

#include "dgsan/autograd.hpp"
#include "dgsan/params.hpp"

namespace dgsan {

struct MhaParams {
  ag::Var wq, bq, wk, bk, wv, bv, wo, bo;
  int heads = 1;
};

struct FeedForwardParams {
  ag::Var w1, b1, w2, b2;  // d -> 4d -> d
};

// Pre-norm transformer block: x + MHA(LN(x)), then + FF(LN(.)).
struct SelfAttentionBlockParams {
  ag::Var ln1_g, ln1_b, ln2_g, ln2_b;
  MhaParams mha;
  FeedForwardParams ff;
};

// One direction of a bidirectional cross block; the two directions share
// no projections.
struct CrossDirectionParams {
  ag::Var lnq_g, lnq_b, lnkv_g, lnkv_b, lnf_g, lnf_b;
  MhaParams mha;
  FeedForwardParams ff;
};

struct CrossAttentionBlockParams {
  CrossDirectionParams fwd;  // queries from a, keys/values from b
  CrossDirectionParams rev;  // queries from b, keys/values from a
};

MhaParams make_mha_params(ParamStore& ps, const std::string& prefix, int dim, int heads);
FeedForwardParams make_ff_params(ParamStore& ps, const std::string& prefix, int dim);
SelfAttentionBlockParams make_sab_params(ParamStore& ps, const std::string& prefix, int dim,
                                         int heads);
CrossAttentionBlockParams make_cab_params(ParamStore& ps, const std::string& prefix, int dim,
                                          int heads);

// Scaled dot-product multi-head attention with optional additive mask over
// the score matrix. When attn_out is given, every per-head softmax row
// matrix is appended (used by the normalization checks).
ag::Var multihead_attention(const ag::Var& q_in, const ag::Var& kv_in, const MhaParams& p,
                            const Tensor* mask = nullptr,
                            std::vector<ag::Var>* attn_out = nullptr);

ag::Var feed_forward(const ag::Var& x, const FeedForwardParams& p);

ag::Var self_attention_block(const ag::Var& x, const SelfAttentionBlockParams& p,
                             std::vector<ag::Var>* attn_out = nullptr);

std::pair<ag::Var, ag::Var> cross_attention_block(const ag::Var& a, const ag::Var& b,
                                                  const CrossAttentionBlockParams& p,
                                                  std::vector<ag::Var>* attn_out = nullptr);

}  // namespace dgsan
