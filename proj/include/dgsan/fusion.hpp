#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgsan/attention.hpp"
#include "dgsan/autograd.hpp"
#include "dgsan/params.hpp"

namespace dgsan {

enum class BlockKind { SAB, CAB };

struct FusionConfig {
  std::vector<BlockKind> sequence{BlockKind::SAB, BlockKind::CAB, BlockKind::SAB};
  int d = 128;
  int heads = 4;

  void validate() const;
  std::string sequence_str() const;  // "SAB,CAB,SAB"
  static std::vector<BlockKind> parse_sequence(const std::string& s);
  nlohmann::json to_json() const;
  static FusionConfig from_json(const nlohmann::json& j);
};

// Parameter layout mirrors the stream semantics of fuse(): SABs before the
// last CAB carry separate per-stream parameter sets, later SABs act on the
// concatenated joint set.
struct FusionParams {
  struct Block {
    BlockKind kind = BlockKind::SAB;
    std::optional<SelfAttentionBlockParams> intra, inter;  // dual-path SAB
    std::optional<SelfAttentionBlockParams> joint;         // post-concat SAB
    std::optional<CrossAttentionBlockParams> cab;
  };
  std::vector<Block> blocks;
};
FusionParams make_fusion_params(ParamStore& ps, const std::string& prefix,
                                const FusionConfig& cfg);

struct FusedRepresentation {
  ag::Var tokens;  // joint [m, d]
  ag::Var pooled;  // [1, d] mean over tokens
};

// Streams: dual-path SABs and bidirectional CABs until the last CAB, then the
// two streams concatenate (intra first) and remaining SABs run jointly. With
// no CAB in the sequence the streams concatenate before the first block. An
// absent inter stream degrades gracefully: CABs become no-ops and the intra
// stream alone forms the joint set.
FusedRepresentation fuse(const ag::Var* intra_tokens, const ag::Var* inter_tokens,
                         const FusionConfig& cfg, const FusionParams& p,
                         std::vector<ag::Var>* attn_out = nullptr);

struct HeadParams {
  ag::Var w, b;
};
HeadParams make_head_params(ParamStore& ps, const std::string& prefix, int in_dim);
ag::Var classify_head(const ag::Var& pooled, const HeadParams& p);  // -> [1, 2]

}  // namespace dgsan
