#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "repmech/tensor.hpp"

namespace repmech {

enum class NormKind { kRmsNorm, kLayerNorm };
// kLinear is a diagnostic variant (identity activation) used to check the
// nonlinearity-gap tooling against a purely linear block.
enum class MlpKind { kSwiGlu, kGeluMlp, kLinear };
enum class PosKind { kRope, kLearned };

struct ModelConfig {
  std::size_t n_layers = 1;
  std::size_t d_model = 8;
  std::size_t n_heads = 1;
  std::size_t d_mlp = 16;
  std::size_t vocab_size = 16;
  std::size_t max_seq = 64;
  NormKind norm_kind = NormKind::kRmsNorm;
  MlpKind mlp_kind = MlpKind::kSwiGlu;
  PosKind pos_kind = PosKind::kRope;
  double rope_theta = 10000.0;
  float norm_eps = 1e-5f;
  bool use_bias = false;

  std::size_t d_head() const { return d_model / n_heads; }
  // Throws DataError when the sizes are inconsistent.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

std::string to_string(NormKind k);
std::string to_string(MlpKind k);
std::string to_string(PosKind k);

// Names a hookable site in the residual decomposition.
struct ComponentId {
  enum class Kind : std::uint8_t { kEmbed, kAttnOut, kMlpOut, kHeadOut, kResidPre, kResidPost };

  Kind kind = Kind::kEmbed;
  std::int32_t layer = -1;
  std::int32_t head = -1;

  static ComponentId embed() { return {Kind::kEmbed, -1, -1}; }
  static ComponentId attn_out(int l) { return {Kind::kAttnOut, l, -1}; }
  static ComponentId mlp_out(int l) { return {Kind::kMlpOut, l, -1}; }
  static ComponentId head_out(int l, int h) { return {Kind::kHeadOut, l, h}; }
  static ComponentId resid_pre(int l) { return {Kind::kResidPre, l, -1}; }
  static ComponentId resid_post(int l) { return {Kind::kResidPost, l, -1}; }

  // "embed", "attn.3", "mlp.3", "head.3.1", "resid_pre.3", "resid_post.3".
  std::string to_string() const;
  static ComponentId parse(const std::string& text);

  // Throws HookError when layer/head are out of range for `cfg`.
  void validate(const ModelConfig& cfg) const;

  // Ordering: by layer first (embed before layer 0), then kind, then head.
  auto operator<=>(const ComponentId& o) const {
    if (auto c = layer <=> o.layer; c != 0) return c;
    if (auto c = kind <=> o.kind; c != 0) return c;
    return head <=> o.head;
  }
  bool operator==(const ComponentId&) const = default;
};

// Embed, AttnOut(0), MlpOut(0), ..., AttnOut(L-1), MlpOut(L-1).
std::vector<ComponentId> residual_components(const ModelConfig& cfg);

// Weight naming (all matrices are stored [in x out] and applied as x * W):
//   embed.W_E [V, d], embed.W_pos [max_seq, d] (learned positions)
//   blocks.{l}.ln1.w [d], blocks.{l}.ln2.w [d]  (+ .b for layernorm)
//   blocks.{l}.attn.W_Q/W_K/W_V/W_O [d, d]      (+ b_Q/b_K/b_V/b_O when use_bias)
//   blocks.{l}.mlp.W_gate [d, d_mlp] (swiglu), W_in [d, d_mlp], W_out [d_mlp, d]
//                                               (+ b_in/b_out when use_bias)
//   ln_final.w [d] (+ ln_final.b), unembed.W_U [d, V] (+ unembed.b_U)
std::map<std::string, Shape> required_weights(const ModelConfig& cfg);

using WeightMap = std::map<std::string, Tensor>;

// Immutable configuration + weights. Construction validates every required
// weight is present with the exact shape, finite, and no extras exist.
class ModelBundle {
 public:
  ModelBundle(ModelConfig config, WeightMap weights);

  const ModelConfig& config() const noexcept { return config_; }
  const WeightMap& weights() const noexcept { return weights_; }
  const Tensor& weight(const std::string& name) const;
  // Empty tensor when absent (optional biases).
  const Tensor& weight_or_empty(const std::string& name) const;

  // FNV-1a 64 over the canonical config JSON and every weight (name, shape,
  // bytes) in name order; stable across save/load.
  const std::string& hash() const noexcept { return hash_; }

 private:
  ModelConfig config_;
  WeightMap weights_;
  std::string hash_;
};

using ModelPtr = std::shared_ptr<const ModelBundle>;

// Seeded random weights. Deterministic for a given (config, seed).
ModelBundle make_toy_model(const ModelConfig& cfg, std::uint64_t seed);

// The default desk-scale toy: L=4, d_model=64, H=4, SwiGLU, rope.
ModelConfig toy_config(std::size_t vocab_size = 512);

}  // namespace repmech
