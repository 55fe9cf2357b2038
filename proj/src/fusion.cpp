#include "dgsan/fusion.hpp"

#include <sstream>
#include <stdexcept>

namespace dgsan {

using ag::Var;
using nlohmann::json;

void FusionConfig::validate() const {
  if (sequence.empty()) throw std::invalid_argument("FusionConfig: empty sequence");
  if (d < 1 || heads < 1 || d % heads != 0)
    throw std::invalid_argument("FusionConfig: d " + std::to_string(d) +
                                " not divisible by heads " + std::to_string(heads));
}

std::string FusionConfig::sequence_str() const {
  std::string s;
  for (size_t i = 0; i < sequence.size(); ++i) {
    if (i) s += ",";
    s += sequence[i] == BlockKind::SAB ? "SAB" : "CAB";
  }
  return s;
}

std::vector<BlockKind> FusionConfig::parse_sequence(const std::string& s) {
  std::vector<BlockKind> seq;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok == "SAB" || tok == "sab")
      seq.push_back(BlockKind::SAB);
    else if (tok == "CAB" || tok == "cab")
      seq.push_back(BlockKind::CAB);
    else
      throw std::invalid_argument("unknown fusion block '" + tok + "' (expected SAB or CAB)");
  }
  if (seq.empty()) throw std::invalid_argument("empty fusion sequence");
  return seq;
}

json FusionConfig::to_json() const {
  json seq = json::array();
  for (auto k : sequence) seq.push_back(k == BlockKind::SAB ? "SAB" : "CAB");
  return json{{"sequence", seq}, {"d", d}, {"heads", heads}};
}

FusionConfig FusionConfig::from_json(const json& j) {
  FusionConfig c;
  if (j.contains("sequence")) {
    c.sequence.clear();
    for (const auto& s : j["sequence"]) {
      const std::string v = s.get<std::string>();
      if (v == "SAB")
        c.sequence.push_back(BlockKind::SAB);
      else if (v == "CAB")
        c.sequence.push_back(BlockKind::CAB);
      else
        throw std::invalid_argument("unknown fusion block '" + v + "' in config");
    }
  }
  if (j.contains("d")) c.d = j["d"];
  if (j.contains("heads")) c.heads = j["heads"];
  c.validate();
  return c;
}

namespace {

int last_cab_index(const std::vector<BlockKind>& seq) {
  int last = -1;
  for (size_t i = 0; i < seq.size(); ++i)
    if (seq[i] == BlockKind::CAB) last = static_cast<int>(i);
  return last;
}

}  // namespace

FusionParams make_fusion_params(ParamStore& ps, const std::string& prefix,
                                const FusionConfig& cfg) {
  cfg.validate();
  const int last_cab = last_cab_index(cfg.sequence);
  FusionParams p;
  for (size_t i = 0; i < cfg.sequence.size(); ++i) {
    const std::string bp = prefix + ".b" + std::to_string(i);
    FusionParams::Block b;
    b.kind = cfg.sequence[i];
    if (b.kind == BlockKind::CAB) {
      b.cab = make_cab_params(ps, bp + ".cab", cfg.d, cfg.heads);
    } else if (static_cast<int>(i) < last_cab) {
      b.intra = make_sab_params(ps, bp + ".intra", cfg.d, cfg.heads);
      b.inter = make_sab_params(ps, bp + ".inter", cfg.d, cfg.heads);
    } else {
      b.joint = make_sab_params(ps, bp + ".joint", cfg.d, cfg.heads);
    }
    p.blocks.push_back(std::move(b));
  }
  return p;
}

FusedRepresentation fuse(const ag::Var* intra_tokens, const ag::Var* inter_tokens,
                         const FusionConfig& cfg, const FusionParams& p,
                         std::vector<ag::Var>* attn_out) {
  cfg.validate();
  if (p.blocks.size() != cfg.sequence.size())
    throw std::invalid_argument("fuse: params built for a different sequence");
  const bool has_intra = intra_tokens && *intra_tokens;
  const bool has_inter = inter_tokens && *inter_tokens;
  if (!has_intra && !has_inter) throw std::invalid_argument("fuse: both token sets empty");
  if (has_intra && (*intra_tokens)->value.dim(1) != cfg.d)
    throw std::invalid_argument("fuse: intra token dim != " + std::to_string(cfg.d));
  if (has_inter && (*inter_tokens)->value.dim(1) != cfg.d)
    throw std::invalid_argument("fuse: inter token dim != " + std::to_string(cfg.d));

  const int last_cab = last_cab_index(cfg.sequence);
  Var a = has_intra ? *intra_tokens : Var{};
  Var b = has_inter ? *inter_tokens : Var{};
  Var joint;
  auto concat_streams = [&]() {
    if (a && b)
      joint = ag::concat_rows({a, b});
    else
      joint = a ? a : b;
  };
  if (last_cab < 0) concat_streams();

  for (size_t i = 0; i < p.blocks.size(); ++i) {
    const auto& blk = p.blocks[i];
    if (joint) {
      // post-concat region: remaining blocks act on the joint set
      if (blk.kind != BlockKind::SAB || !blk.joint)
        throw std::invalid_argument("fuse: CAB after the concat point");
      joint = self_attention_block(joint, *blk.joint, attn_out);
      continue;
    }
    if (blk.kind == BlockKind::CAB) {
      if (a && b) {
        auto [a2, b2] = cross_attention_block(a, b, *blk.cab, attn_out);
        a = a2;
        b = b2;
      }
      if (static_cast<int>(i) == last_cab) concat_streams();
    } else {
      if (a) a = self_attention_block(a, *blk.intra, attn_out);
      if (b) b = self_attention_block(b, *blk.inter, attn_out);
    }
  }

  FusedRepresentation out;
  out.tokens = joint;
  out.pooled = ag::mean_rows(joint);
  return out;
}

HeadParams make_head_params(ParamStore& ps, const std::string& prefix, int in_dim) {
  HeadParams p;
  p.w = ps.create(prefix + ".w", {in_dim, 2}, Init::XavierUniform);
  p.b = ps.create(prefix + ".b", {2}, Init::Zeros);
  return p;
}

ag::Var classify_head(const ag::Var& pooled, const HeadParams& p) {
  if (pooled->value.ndim() != 2 || pooled->value.dim(0) != 1 ||
      pooled->value.dim(1) != p.w->value.dim(0))
    throw std::invalid_argument("classify_head: expected [1," +
                                std::to_string(p.w->value.dim(0)) + "], got " +
                                shape_str(pooled->value.shape));
  return ag::linear(pooled, p.w, p.b);
}

}  // namespace dgsan
