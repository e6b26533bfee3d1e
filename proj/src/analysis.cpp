#include "repmech/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "repmech/errors.hpp"
#include "repmech/kernels.hpp"
#include "repmech/parallel.hpp"

namespace repmech {

InjectionSpec InjectionSpec::from_directions(const DirectionSet& ds, std::size_t layer, float alpha,
                                             PositionMask mask) {
  if (layer >= ds.n_layers()) {
    throw HookError("injection layer " + std::to_string(layer) + " outside direction set with " +
                    std::to_string(ds.n_layers()) + " layers");
  }
  return InjectionSpec{ds.dirs[layer], layer, alpha, std::move(mask)};
}

HookSet InjectionSpec::to_hooks(const ModelConfig& cfg) const {
  if (layer >= cfg.n_layers) {
    throw HookError("injection layer " + std::to_string(layer) + " outside model with " +
                    std::to_string(cfg.n_layers) + " layers");
  }
  if (direction.size() != cfg.d_model) {
    throw HookError("injection direction has length " + std::to_string(direction.size()) + ", expected " +
                    std::to_string(cfg.d_model));
  }
  HookSet hooks;
  hooks.injections.push_back({ComponentId::resid_post(static_cast<int>(layer)), mask, normalized(direction), alpha});
  return hooks;
}

SteerOutput steer_generate(const ModelBundle& model, const Tokenizer& tokenizer, const std::string& prompt,
                           const InjectionSpec& inj, std::size_t max_new) {
  const auto ids = tokenizer.encode(prompt);
  GenerateOptions opts;
  opts.max_new = max_new;
  opts.eos = tokenizer.eos();
  auto gen = generate(model, ids, inj.to_hooks(model.config()), opts);
  SteerOutput out;
  out.text = tokenizer.decode(gen.tokens);
  out.tokens = std::move(gen.tokens);
  return out;
}

std::vector<double> token_logprob_diff(const ModelBundle& model, std::span<const TokenId> prompt,
                                       std::span<const TokenId> reference, const InjectionSpec& inj) {
  if (prompt.empty()) throw LengthError("token_logprob_diff needs a nonempty prompt");
  if (reference.empty()) throw LengthError("token_logprob_diff needs a nonempty reference continuation");
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), reference.begin(), reference.end());
  const auto base = forward(model, seq, {}, RecordSet::none());
  const auto injected = forward(model, seq, inj.to_hooks(model.config()), RecordSet::none());
  std::vector<double> out;
  for (std::size_t t = 0; t < reference.size(); ++t) {
    const std::size_t pos = prompt.size() + t - 1;
    const auto tok = static_cast<std::size_t>(reference[t]);
    out.push_back(log_softmax(injected.logits.row(pos))[tok] - log_softmax(base.logits.row(pos))[tok]);
  }
  return out;
}

std::vector<TopKEntry> unembed_topk(const ModelBundle& model, std::span<const float> direction, std::size_t k,
                                    bool apply_final_norm, const Tokenizer* tokenizer) {
  const auto& cfg = model.config();
  if (direction.size() != cfg.d_model) {
    throw DimensionError("direction has length " + std::to_string(direction.size()) + ", expected " +
                         std::to_string(cfg.d_model));
  }
  if (k > cfg.vocab_size) {
    throw DataError("top-k of " + std::to_string(k) + " exceeds vocabulary size " + std::to_string(cfg.vocab_size));
  }
  Tensor x = Tensor::matrix(1, cfg.d_model, std::vector<float>(direction.begin(), direction.end()));
  if (apply_final_norm) {
    x = cfg.norm_kind == NormKind::kRmsNorm
            ? rmsnorm(x, model.weight("ln_final.w"), cfg.norm_eps)
            : layernorm(x, model.weight("ln_final.w"), model.weight("ln_final.b"), cfg.norm_eps);
  }
  const Tensor logits = matmul(x, model.weight("unembed.W_U"));
  const auto lp = log_softmax(logits.row(0));
  std::vector<std::size_t> order(lp.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return lp[a] > lp[b]; });
  std::vector<TopKEntry> out;
  for (std::size_t i = 0; i < k; ++i) {
    TopKEntry e;
    e.id = static_cast<TokenId>(order[i]);
    e.logprob = lp[order[i]];
    e.prob = std::exp(e.logprob);
    if (tokenizer) e.token = tokenizer->token_bytes(e.id);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<float> default_alpha_grid() { return {-8, -4, -2, -1, 0, 1, 2, 4, 8}; }

namespace {

// Frozen final-norm map applied to one residual-space term and dotted with a
// unembedding column: s * (gamma (.) center(v)) . W_U[:, t].
double frozen_logit_share(const ModelBundle& model, std::span<const float> v, double scale, TokenId t) {
  const auto& cfg = model.config();
  const Tensor& gamma = model.weight("ln_final.w");
  const Tensor& W_U = model.weight("unembed.W_U");
  double mean = 0.0;
  if (cfg.norm_kind == NormKind::kLayerNorm) {
    for (float x : v) mean += x;
    mean /= static_cast<double>(v.size());
  }
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    s += (v[i] - mean) * scale * gamma[i] * W_U.at(i, static_cast<std::size_t>(t));
  }
  return s;
}

double frozen_bias(const ModelBundle& model, TokenId t) {
  double s = 0.0;
  const Tensor& beta = model.weight_or_empty("ln_final.b");
  const Tensor& W_U = model.weight("unembed.W_U");
  for (std::size_t i = 0; i < beta.numel(); ++i) s += static_cast<double>(beta[i]) * W_U.at(i, static_cast<std::size_t>(t));
  const Tensor& b_U = model.weight_or_empty("unembed.b_U");
  if (!b_U.empty()) s += b_U[static_cast<std::size_t>(t)];
  return s;
}

}  // namespace

DlaTable dla_sweep(const ModelBundle& model, std::span<const TokenId> prompt, std::size_t inj_layer,
                   std::span<const float> direction, const std::vector<float>& alphas, const DlaTarget& target,
                   const PositionMask& mask) {
  const auto& cfg = model.config();
  if (alphas.empty()) throw UsageError("alpha grid is empty");
  if (target.token) {
    if (*target.token < 0 || static_cast<std::size_t>(*target.token) >= cfg.vocab_size) {
      throw VocabularyError("target token " + std::to_string(*target.token) + " outside vocabulary");
    }
  } else if (target.direction.size() != cfg.d_model) {
    throw DimensionError("DLA target needs a token id or a direction of length d_model");
  }
  const std::size_t last = prompt.size() - 1;

  // Frozen scale from the unhooked run.
  std::set<ComponentId> none;
  const auto reference = forward(model, prompt, {}, RecordSet::only(none));
  const double scale = reference.cache.final_norm_scale.at(last);

  DlaTable table;
  table.alphas = alphas;
  table.target_token = target.token;
  table.frozen_scale = {scale};

  for (std::size_t a = 0; a < alphas.size(); ++a) {
    InjectionSpec inj{std::vector<float>(direction.begin(), direction.end()), inj_layer, alphas[a], mask};
    const auto run = forward(model, prompt, inj.to_hooks(cfg));
    const auto terms = decompose_residual(run.cache, cfg, last);
    std::vector<double> col;
    for (const auto& term : terms) {
      col.push_back(target.token ? frozen_logit_share(model, term.vec, scale, *target.token)
                                 : dot(term.vec, target.direction));
    }
    if (target.token) col.push_back(frozen_bias(model, *target.token));
    if (a == 0) {
      for (const auto& term : terms) table.row_labels.push_back(term.label);
      if (target.token) table.row_labels.push_back("bias");
      table.values.resize(col.size());
    }
    if (col.size() != table.values.size()) throw DataError("DLA row set changed across the alpha grid");
    for (std::size_t r = 0; r < col.size(); ++r) table.values[r].push_back(col[r]);

    auto resid = run.cache.final_resid.row(last);
    if (target.token) {
      table.frozen_total.push_back(frozen_logit_share(model, resid, scale, *target.token) +
                                   frozen_bias(model, *target.token));
      table.actual_logit.push_back(run.logits.at(last, static_cast<std::size_t>(*target.token)));
    } else {
      table.frozen_total.push_back(dot(resid, target.direction));
    }
  }
  return table;
}

std::string to_string(PatchMode m) { return m == PatchMode::kDenoise ? "denoise" : "noise"; }

double kl_recovery(const ProbDist& clean, const ProbDist& corrupted, const ProbDist& patched) {
  const double baseline = kl_divergence(clean, corrupted);
  if (baseline < kDegenerateBaseline) {
    throw DegenerateError("clean and corrupted runs are indistinguishable (KL = " + std::to_string(baseline) + ")");
  }
  return 1.0 - kl_divergence(clean, patched) / baseline;
}

PatchContext make_patch_context(const ModelBundle& model, std::span<const TokenId> prompt, const InjectionSpec& inj) {
  PatchContext ctx;
  ctx.tokens.assign(prompt.begin(), prompt.end());
  ctx.clean_hooks = inj.to_hooks(model.config());
  ctx.clean = forward(model, prompt, ctx.clean_hooks);
  ctx.corrupted = forward(model, prompt, {});
  return ctx;
}

PatchOutcome run_patch(const ModelBundle& model, const PatchContext& ctx, const PatchSpec& patch) {
  const bool denoise = patch.mode == PatchMode::kDenoise;
  const RunResult& source = denoise ? ctx.clean : ctx.corrupted;
  HookSet hooks = denoise ? HookSet{} : ctx.clean_hooks;

  std::set<ComponentId> seen;
  for (const auto& site : patch.sites) {
    site.validate(model.config());
    if (!seen.insert(site).second) continue;  // duplicate sites collapse
    hooks.patches.push_back({site, patch.scope, source.cache.at(site)});
  }

  PatchOutcome out;
  const std::size_t last = ctx.tokens.size() - 1;
  out.patched_logits = forward(model, ctx.tokens, hooks, RecordSet::none()).logits;
  out.p_clean = ctx.clean.probs(last);
  out.p_corrupted = ctx.corrupted.probs(last);
  out.p_patched = softmax_dist(out.patched_logits.row(last));
  out.kl_recovery = kl_recovery(out.p_clean, out.p_corrupted, out.p_patched);
  out.score = denoise ? out.kl_recovery : 1.0 - out.kl_recovery;
  return out;
}

PatchOutcome run_patch(const ModelBundle& model, std::span<const TokenId> prompt, const InjectionSpec& inj,
                       const PatchSpec& patch) {
  return run_patch(model, make_patch_context(model, prompt, inj), patch);
}

std::vector<ComponentId> full_patch_sites(const ModelConfig& cfg) {
  std::vector<ComponentId> sites{ComponentId::embed()};
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const int li = static_cast<int>(l);
    sites.push_back(ComponentId::attn_out(li));
    sites.push_back(ComponentId::mlp_out(li));
    sites.push_back(ComponentId::resid_post(li));
  }
  return sites;
}

namespace {

struct ItemResult {
  double denoise = std::numeric_limits<double>::quiet_NaN();
  double noise = std::numeric_limits<double>::quiet_NaN();
  std::string error;
};

struct ContextSlot {
  PatchContext ctx;
  std::string error;  // prompt could not be run at all
};

std::vector<ContextSlot> build_contexts(const ModelBundle& model, const std::vector<std::vector<TokenId>>& prompts,
                                        const InjectionSpec& inj, std::size_t workers, std::vector<std::string>& failures) {
  if (prompts.empty()) throw DataError("patch sweep needs at least one prompt");
  std::vector<ContextSlot> slots(prompts.size());
  parallel_for(prompts.size(), workers, [&](std::size_t i) {
    try {
      slots[i].ctx = make_patch_context(model, prompts[i], inj);
    } catch (const Error& e) {
      slots[i].error = e.what();
    }
  });
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (!slots[i].error.empty()) failures.push_back("prompt " + std::to_string(i) + ": " + slots[i].error);
  }
  return slots;
}

// Runs every (site set, prompt) item and averages per site set over prompts
// in prompt order.
std::vector<ItemResult> sweep(const ModelBundle& model, const std::vector<ContextSlot>& ctxs,
                              const std::vector<std::vector<ComponentId>>& site_sets, const SweepOptions& opts,
                              std::vector<std::string>& failures) {
  const std::size_t P = ctxs.size(), S = site_sets.size();
  std::vector<ItemResult> items(S * P);
  parallel_for(S * P, opts.workers, [&](std::size_t idx) {
    const std::size_t s = idx / P, p = idx % P;
    ItemResult& r = items[idx];
    if (!ctxs[p].error.empty()) return;
    try {
      r.denoise = run_patch(model, ctxs[p].ctx, {site_sets[s], opts.scope, PatchMode::kDenoise}).score;
      r.noise = run_patch(model, ctxs[p].ctx, {site_sets[s], opts.scope, PatchMode::kNoise}).score;
    } catch (const Error& e) {
      r.error = e.what();
    }
  });

  std::vector<ItemResult> out(S);
  for (std::size_t s = 0; s < S; ++s) {
    double sum_d = 0.0, sum_n = 0.0;
    std::size_t ok = 0;
    for (std::size_t p = 0; p < P; ++p) {
      const auto& r = items[s * P + p];
      if (!ctxs[p].error.empty()) continue;
      if (!r.error.empty()) {
        std::string label;
        for (const auto& c : site_sets[s]) label += (label.empty() ? "" : "+") + c.to_string();
        failures.push_back(label + " prompt " + std::to_string(p) + ": " + r.error);
        continue;
      }
      sum_d += r.denoise;
      sum_n += r.noise;
      ++ok;
    }
    if (ok) {
      out[s].denoise = sum_d / static_cast<double>(ok);
      out[s].noise = sum_n / static_cast<double>(ok);
    }
  }
  return out;
}

SiteSweep single_site_sweep(const ModelBundle& model, const std::vector<std::vector<TokenId>>& prompts,
                            const InjectionSpec& inj, const SweepOptions& opts, std::vector<ComponentId> sites) {
  SiteSweep out;
  const auto ctxs = build_contexts(model, prompts, inj, opts.workers, out.failures);
  std::vector<std::vector<ComponentId>> sets;
  for (const auto& s : sites) sets.push_back({s});
  const auto res = sweep(model, ctxs, sets, opts, out.failures);
  out.sites = std::move(sites);
  for (const auto& r : res) {
    out.denoise.push_back(r.denoise);
    out.noise.push_back(r.noise);
  }
  return out;
}

std::vector<ComponentId> block_sites(const ModelConfig& cfg) {
  std::vector<ComponentId> sites;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    sites.push_back(ComponentId::attn_out(static_cast<int>(l)));
    sites.push_back(ComponentId::mlp_out(static_cast<int>(l)));
  }
  return sites;
}

}  // namespace

SiteSweep patch_sweep_components(const ModelBundle& model, const std::vector<std::vector<TokenId>>& prompts,
                                 const InjectionSpec& inj, const SweepOptions& opts) {
  return single_site_sweep(model, prompts, inj, opts, block_sites(model.config()));
}

SiteSweep patch_sweep_heads(const ModelBundle& model, const std::vector<std::vector<TokenId>>& prompts,
                            const InjectionSpec& inj, const SweepOptions& opts) {
  std::vector<ComponentId> sites;
  const auto& cfg = model.config();
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      sites.push_back(ComponentId::head_out(static_cast<int>(l), static_cast<int>(h)));
    }
  }
  return single_site_sweep(model, prompts, inj, opts, std::move(sites));
}

PairSweep patch_sweep_pairs(const ModelBundle& model, const std::vector<std::vector<TokenId>>& prompts,
                            const InjectionSpec& inj, const SweepOptions& opts) {
  PairSweep out;
  const auto ctxs = build_contexts(model, prompts, inj, opts.workers, out.failures);
  out.sites = block_sites(model.config());
  const std::size_t n = out.sites.size();
  std::vector<std::vector<ComponentId>> sets;
  std::vector<std::pair<std::size_t, std::size_t>> cells;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      // (c, c) collapses to the single-site set, matching the single sweep.
      sets.push_back(i == j ? std::vector<ComponentId>{out.sites[i]}
                            : std::vector<ComponentId>{out.sites[i], out.sites[j]});
      cells.emplace_back(i, j);
    }
  }
  const auto res = sweep(model, ctxs, sets, opts, out.failures);
  out.denoise.assign(n, std::vector<double>(n, 0.0));
  out.noise.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const auto [i, j] = cells[c];
    out.denoise[i][j] = out.denoise[j][i] = res[c].denoise;
    out.noise[i][j] = out.noise[j][i] = res[c].noise;
  }
  return out;
}

ContributionTable direction_contributions(const ModelBundle& model, std::span<const TokenId> prompt,
                                          const InjectionSpec& inj, const DirectionSet& ds) {
  const auto& cfg = model.config();
  if (ds.n_layers() != cfg.n_layers || ds.dim() != cfg.d_model) {
    throw DimensionError("direction set has " + std::to_string(ds.n_layers()) + " x " + std::to_string(ds.dim()) +
                         " vectors, model needs " + std::to_string(cfg.n_layers) + " x " +
                         std::to_string(cfg.d_model));
  }
  const auto run = forward(model, prompt, inj.to_hooks(cfg));
  const std::size_t last = prompt.size() - 1;
  ContributionTable table;
  for (const auto& id : residual_components(cfg)) {
    table.row_labels.push_back(id.to_string());
    auto v = run.cache.at(id).row(last);
    std::vector<double> row;
    for (std::size_t t = 0; t < cfg.n_layers; ++t) row.push_back(dot(v, ds.dirs[t]));
    table.values.push_back(std::move(row));
  }
  return table;
}

std::vector<float> attention_direction_image(const ModelBundle& model, std::size_t layer, std::size_t head,
                                             std::span<const float> d) {
  const auto& cfg = model.config();
  if (layer >= cfg.n_layers || head >= cfg.n_heads) {
    throw HookError("head " + std::to_string(layer) + "." + std::to_string(head) + " out of range");
  }
  if (d.size() != cfg.d_model) throw DimensionError("direction length does not match d_model");
  const std::string p = "blocks." + std::to_string(layer) + ".attn.";
  const Tensor& W_V = model.weight(p + "W_V");
  const Tensor& W_O = model.weight(p + "W_O");
  const std::size_t dh = cfg.d_head(), off = head * dh;
  std::vector<double> v(dh, 0.0);
  for (std::size_t i = 0; i < cfg.d_model; ++i) {
    for (std::size_t c = 0; c < dh; ++c) v[c] += static_cast<double>(d[i]) * W_V.at(i, off + c);
  }
  std::vector<float> out(cfg.d_model);
  for (std::size_t j = 0; j < cfg.d_model; ++j) {
    double s = 0.0;
    for (std::size_t c = 0; c < dh; ++c) s += v[c] * W_O.at(off + c, j);
    out[j] = static_cast<float>(s);
  }
  return out;
}

namespace {

std::vector<double> mlp_f64(const ModelBundle& model, std::size_t layer, const std::vector<double>& x) {
  const auto& cfg = model.config();
  const std::string p = "blocks." + std::to_string(layer) + ".mlp.";
  const Tensor& W_in = model.weight(p + "W_in");
  const Tensor& W_out = model.weight(p + "W_out");
  const Tensor& W_gate = model.weight_or_empty(p + "W_gate");
  const Tensor& b_in = model.weight_or_empty(p + "b_in");
  const Tensor& b_gate = model.weight_or_empty(p + "b_gate");
  const Tensor& b_out = model.weight_or_empty(p + "b_out");
  const std::size_t d = cfg.d_model, m = cfg.d_mlp;
  std::vector<double> hidden(m);
  for (std::size_t k = 0; k < m; ++k) {
    double a = b_in.empty() ? 0.0 : b_in[k];
    for (std::size_t i = 0; i < d; ++i) a += x[i] * W_in.at(i, k);
    switch (cfg.mlp_kind) {
      case MlpKind::kSwiGlu: {
        double g = b_gate.empty() ? 0.0 : b_gate[k];
        for (std::size_t i = 0; i < d; ++i) g += x[i] * W_gate.at(i, k);
        a *= g / (1.0 + std::exp(-g));
        break;
      }
      case MlpKind::kGeluMlp: {
        constexpr double kC = 0.7978845608028654;
        a = 0.5 * a * (1.0 + std::tanh(kC * (a + 0.044715 * a * a * a)));
        break;
      }
      case MlpKind::kLinear:
        break;
    }
    hidden[k] = a;
  }
  std::vector<double> y(d);
  for (std::size_t j = 0; j < d; ++j) {
    double s = b_out.empty() ? 0.0 : b_out[j];
    for (std::size_t k = 0; k < m; ++k) s += hidden[k] * W_out.at(k, j);
    y[j] = s;
  }
  return y;
}

}  // namespace

MlpGap mlp_nonlinearity_gap(const ModelBundle& model, std::size_t layer, std::span<const float> r,
                            std::span<const float> d, double alpha) {
  const auto& cfg = model.config();
  if (layer >= cfg.n_layers) throw HookError("layer " + std::to_string(layer) + " out of range");
  if (r.size() != cfg.d_model || d.size() != cfg.d_model) throw DimensionError("vectors must have length d_model");
  auto shifted = [&](double step) {
    std::vector<double> x(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) x[i] = static_cast<double>(r[i]) + step * d[i];
    return x;
  };
  MlpGap out;
  out.y_base = mlp_f64(model, layer, shifted(0.0));
  out.y_shifted = mlp_f64(model, layer, shifted(alpha));
  const auto y_plus = mlp_f64(model, layer, shifted(kJacobianStep));
  const auto y_minus = mlp_f64(model, layer, shifted(-kJacobianStep));
  double ss = 0.0;
  for (std::size_t j = 0; j < cfg.d_model; ++j) {
    const double jd = (y_plus[j] - y_minus[j]) / (2.0 * kJacobianStep);
    const double g = out.y_shifted[j] - out.y_base[j] - alpha * jd;
    out.gap.push_back(g);
    ss += g * g;
  }
  out.gap_norm = std::sqrt(ss);
  return out;
}

}  // namespace repmech
