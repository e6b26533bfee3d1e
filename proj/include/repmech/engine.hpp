#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "repmech/model.hpp"
#include "repmech/tensor.hpp"

namespace repmech {

using TokenId = std::int32_t;

// Which positions a hook touches. "Last" is the final position of the chunk
// being processed: the last token for a forward pass, and the newly decoded
// token at every generation step.
struct PositionMask {
  enum class Kind { kAll, kLast, kExplicit };
  Kind kind = Kind::kAll;
  std::set<std::size_t> positions;  // kExplicit only; absolute positions

  static PositionMask all() { return {}; }
  static PositionMask last() { return {Kind::kLast, {}}; }
  static PositionMask explicit_set(std::set<std::size_t> p) { return {Kind::kExplicit, std::move(p)}; }
  static PositionMask parse(const std::string& text);  // "all", "last", "0,3,5"
  std::string to_string() const;

  bool contains(std::size_t pos, std::size_t chunk_last) const;
};

// Adds alpha * delta to ResidPost(layer) at masked positions.
struct Injection {
  ComponentId site;
  PositionMask mask;
  std::vector<float> delta;
  float alpha = 0.0f;
};

// Overwrites a component's output (or a residual site) at scoped positions
// with rows from `replacement` [seq x d_model].
struct Patch {
  ComponentId site;
  PositionMask scope;
  Tensor replacement;
};

struct HookSet {
  std::vector<Injection> injections;
  std::vector<Patch> patches;

  bool empty() const noexcept { return injections.empty() && patches.empty(); }
  // Throws HookError on an invalid site, a bad delta length, a replacement of
  // the wrong shape, or two patches claiming the same (site, position).
  void validate(const ModelConfig& cfg, std::size_t seq_len) const;
};

// Which components a forward pass should cache.
struct RecordSet {
  bool everything = true;
  std::set<ComponentId> items;

  static RecordSet all() { return {}; }
  static RecordSet only(std::set<ComponentId> ids) { return {false, std::move(ids)}; }
  static RecordSet none() { return {false, {}}; }
  bool wants(const ComponentId& id) const { return everything || items.count(id) > 0; }
};

struct ActivationCache {
  std::vector<TokenId> tokens;
  std::map<ComponentId, Tensor> entries;  // each [seq x d_model]
  // Sum of every edit written straight into the residual stream (injections
  // and residual-site patches), [seq x d_model].
  Tensor stream_edits;
  bool has_stream_edits = false;
  Tensor final_resid;  // pre-norm residual after the last layer
  // Inverse scale realized by the final norm at each position.
  std::vector<double> final_norm_scale;

  std::size_t seq_len() const noexcept { return tokens.size(); }
  bool has(const ComponentId& id) const { return entries.count(id) > 0; }
  // Throws DataError when the entry was not recorded.
  const Tensor& at(const ComponentId& id) const;
};

struct RunResult {
  Tensor logits;  // [seq x V]
  ActivationCache cache;

  ProbDist probs(std::size_t position) const;
  ProbDist last_probs() const { return probs(logits.rows() - 1); }
};

// Causal forward pass with hooks. Throws VocabularyError for ids >= V,
// LengthError for empty or too-long sequences, HookError for bad hooks.
RunResult forward(const ModelBundle& model, std::span<const TokenId> tokens, const HookSet& hooks = {},
                  const RecordSet& record = RecordSet::all());

struct GenerateOptions {
  std::size_t max_new = 32;
  std::optional<TokenId> eos;
  bool use_kv_cache = true;
  bool keep_step_logits = false;
};

struct GenerateResult {
  std::vector<TokenId> tokens;  // newly generated tokens only
  std::vector<std::vector<float>> step_logits;
};

// Greedy decoding, ties toward the lowest id. Injections apply at every step.
// Stops at max_new, after emitting eos, or when max_seq is reached. Patches
// are not supported here (HookError).
GenerateResult generate(const ModelBundle& model, std::span<const TokenId> prompt, const HookSet& hooks,
                        const GenerateOptions& opts);

struct ResidualTerm {
  std::string label;
  std::optional<ComponentId> component;  // empty for the closure term
  std::vector<float> vec;
};

// [Embed, AttnOut(0), MlpOut(0), ..., AttnOut(L-1), MlpOut(L-1)] at
// `position`, plus a "closure" term holding the hook edits when any were
// applied. The terms sum to the final pre-norm residual.
std::vector<ResidualTerm> decompose_residual(const ActivationCache& cache, const ModelConfig& cfg,
                                             std::size_t position);

// Greedy choice over one logit row: argmax, lowest id on ties.
TokenId argmax_token(std::span<const float> logits);

}  // namespace repmech
