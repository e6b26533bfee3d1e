#pragma once

#include <optional>
#include <string>
#include <vector>

#include "repmech/direction_set.hpp"
#include "repmech/engine.hpp"
#include "repmech/model.hpp"
#include "repmech/tokenizer.hpp"

namespace repmech {

// alpha * unit(direction) added at ResidPost(layer) on masked positions.
struct InjectionSpec {
  std::vector<float> direction;
  std::size_t layer = 0;
  float alpha = 0.0f;
  PositionMask mask = PositionMask::all();

  static InjectionSpec from_directions(const DirectionSet& ds, std::size_t layer, float alpha,
                                       PositionMask mask = PositionMask::all());
  // Throws HookError when layer >= L or the direction has the wrong length.
  HookSet to_hooks(const ModelConfig& cfg) const;
};

struct SteerOutput {
  std::vector<TokenId> tokens;
  std::string text;
};

SteerOutput steer_generate(const ModelBundle& model, const Tokenizer& tokenizer, const std::string& prompt,
                           const InjectionSpec& inj, std::size_t max_new);

// Teacher-forces `reference` after `prompt` with and without the injection.
// Entry t is log p_injected(reference[t]) - log p_base(reference[t]).
std::vector<double> token_logprob_diff(const ModelBundle& model, std::span<const TokenId> prompt,
                                       std::span<const TokenId> reference, const InjectionSpec& inj);

struct TopKEntry {
  TokenId id = 0;
  std::string token;
  double prob = 0.0;
  double logprob = 0.0;
};

// Softmax of W_U applied to the direction (optionally passed through the
// final norm first); top k by probability, ties toward the lower id.
std::vector<TopKEntry> unembed_topk(const ModelBundle& model, std::span<const float> direction, std::size_t k,
                                    bool apply_final_norm, const Tokenizer* tokenizer = nullptr);

// Either a token id (logit attribution) or a residual-space direction.
struct DlaTarget {
  std::optional<TokenId> token;
  std::vector<float> direction;
};

// Default grid {-8, -4, -2, -1, 0, 1, 2, 4, 8}.
std::vector<float> default_alpha_grid();

struct DlaTable {
  std::vector<float> alphas;
  std::vector<std::string> row_labels;  // embed, attn.l, mlp.l, ..., closure[, bias]
  std::vector<std::vector<double>> values;  // [row][alpha]
  // Target quantity recomputed from the final residual under the frozen
  // norm scale; rows sum to this.
  std::vector<double> frozen_total;
  // Logit the injected run actually produced (token targets only).
  std::vector<double> actual_logit;
  std::optional<TokenId> target_token;
  std::vector<double> frozen_scale;  // final-norm inverse scale used (per eval position)
};

// Runs the prompt once per alpha with an injection at `inj_layer`, decomposes
// the last-position residual, and attributes each term to the target. Token
// targets use the final-norm scale of the unhooked run, held fixed across the
// grid, so every row is an exact linear share of the frozen-norm logit.
DlaTable dla_sweep(const ModelBundle& model, std::span<const TokenId> prompt, std::size_t inj_layer,
                   std::span<const float> direction, const std::vector<float>& alphas, const DlaTarget& target,
                   const PositionMask& mask = PositionMask::all());

enum class PatchMode { kDenoise, kNoise };
std::string to_string(PatchMode m);

struct PatchSpec {
  std::vector<ComponentId> sites;
  PositionMask scope = PositionMask::all();
  PatchMode mode = PatchMode::kDenoise;
};

struct PatchOutcome {
  double kl_recovery = 0.0;  // 1 - KL(clean || patched) / KL(clean || corrupted)
  double score = 0.0;        // kl_recovery (denoise) or 1 - kl_recovery (noise)
  Tensor patched_logits;
  ProbDist p_clean, p_corrupted, p_patched;
};

// Threshold below which KL(clean || corrupted) is treated as indistinguishable.
constexpr double kDegenerateBaseline = 1e-9;

// The metric alone. Throws DegenerateError when the baseline KL < 1e-9.
double kl_recovery(const ProbDist& clean, const ProbDist& corrupted, const ProbDist& patched);

// Clean (injected) and corrupted (base) runs for one prompt.
struct PatchContext {
  std::vector<TokenId> tokens;
  HookSet clean_hooks;
  RunResult clean;
  RunResult corrupted;
};

PatchContext make_patch_context(const ModelBundle& model, std::span<const TokenId> prompt, const InjectionSpec& inj);
PatchOutcome run_patch(const ModelBundle& model, const PatchContext& ctx, const PatchSpec& patch);
PatchOutcome run_patch(const ModelBundle& model, std::span<const TokenId> prompt, const InjectionSpec& inj,
                       const PatchSpec& patch);

// Every site whose transplant reproduces the clean run: embed, attn, mlp and
// resid_post of every layer.
std::vector<ComponentId> full_patch_sites(const ModelConfig& cfg);

// Results per site, averaged (arithmetic mean) over prompts.
struct SiteSweep {
  std::vector<ComponentId> sites;
  std::vector<double> denoise;
  std::vector<double> noise;
  std::vector<std::string> failures;
};

struct PairSweep {
  std::vector<ComponentId> sites;           // attn.0, mlp.0, attn.1, ...
  std::vector<std::vector<double>> denoise;  // symmetric, singles on the diagonal
  std::vector<std::vector<double>> noise;
  std::vector<std::string> failures;
};

struct SweepOptions {
  PositionMask scope = PositionMask::all();
  std::size_t workers = 1;
};

SiteSweep patch_sweep_components(const ModelBundle& model, const std::vector<std::vector<TokenId>>& prompts,
                                 const InjectionSpec& inj, const SweepOptions& opts = {});
SiteSweep patch_sweep_heads(const ModelBundle& model, const std::vector<std::vector<TokenId>>& prompts,
                            const InjectionSpec& inj, const SweepOptions& opts = {});
PairSweep patch_sweep_pairs(const ModelBundle& model, const std::vector<std::vector<TokenId>>& prompts,
                            const InjectionSpec& inj, const SweepOptions& opts = {});

struct ContributionTable {
  std::vector<std::string> row_labels;  // embed, attn.0, mlp.0, ...
  std::vector<std::vector<double>> values;  // [(2L+1)][L]
};

// dot(component output at the last position, ds.dirs[t]) for every residual
// component and target layer t, on the injected run.
ContributionTable direction_contributions(const ModelBundle& model, std::span<const TokenId> prompt,
                                          const InjectionSpec& inj, const DirectionSet& ds);

// Value-path image of `d` through one head: (d W_V[:, head]) W_O[head, :].
std::vector<float> attention_direction_image(const ModelBundle& model, std::size_t layer, std::size_t head,
                                             std::span<const float> d);

struct MlpGap {
  std::vector<double> y_base;     // MLP(r)
  std::vector<double> y_shifted;  // MLP(r + alpha d)
  std::vector<double> gap;        // y_shifted - y_base - alpha * J d
  double gap_norm = 0.0;
};

constexpr double kJacobianStep = 1e-3;

// Evaluates the layer's MLP block (its input taken as already normalized) in
// double precision. J d is the central finite difference at step 1e-3.
MlpGap mlp_nonlinearity_gap(const ModelBundle& model, std::size_t layer, std::span<const float> r,
                            std::span<const float> d, double alpha);

}  // namespace repmech
