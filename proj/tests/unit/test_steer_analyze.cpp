#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "repmech/analysis.hpp"
#include "repmech/errors.hpp"
#include "repmech/kernels.hpp"

using namespace repmech;

namespace {

std::vector<TokenId> random_prompt(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(static_cast<TokenId>(rng.below(vocab)));
  return out;
}

InjectionSpec make_inj(Rng& rng, std::size_t d, std::size_t layer, float alpha) {
  return InjectionSpec{oracle::random_unit(rng, d), layer, alpha, PositionMask::all()};
}

std::vector<float> negated(std::vector<float> v) {
  for (auto& x : v) x = -x;
  return v;
}

// Reference MLP blocks in double precision, written out from the weights.
std::vector<double> oracle_mlp(const ModelBundle& m, std::size_t l, const std::vector<double>& x) {
  const auto& cfg = m.config();
  const std::string p = "blocks." + std::to_string(l) + ".mlp.";
  const Tensor& W_in = m.weight(p + "W_in");
  const Tensor& W_out = m.weight(p + "W_out");
  std::vector<double> h(cfg.d_mlp, 0.0), y(cfg.d_model, 0.0);
  for (std::size_t k = 0; k < cfg.d_mlp; ++k) {
    double a = 0;
    for (std::size_t i = 0; i < cfg.d_model; ++i) a += x[i] * W_in.at(i, k);
    if (cfg.mlp_kind == MlpKind::kSwiGlu) {
      double g = 0;
      for (std::size_t i = 0; i < cfg.d_model; ++i) g += x[i] * m.weight(p + "W_gate").at(i, k);
      a *= g / (1.0 + std::exp(-g));
    }
    h[k] = a;
  }
  for (std::size_t j = 0; j < cfg.d_model; ++j)
    for (std::size_t k = 0; k < cfg.d_mlp; ++k) y[j] += h[k] * W_out.at(k, j);
  return y;
}

}  // namespace

TEST_SUITE("steer-analyze") {

TEST_CASE("steering with zero alpha is unsteered generation") {
  const Tokenizer tok = train_bpe("", 0);
  const auto model = make_toy_model(oracle::small_config(2, tok.vocab_size()), 3);
  Rng rng(1);
  const auto inj = make_inj(rng, 16, 1, 0.0f);
  const auto steered = steer_generate(model, tok, "hello", inj, 8);
  GenerateOptions opts;
  opts.max_new = 8;
  opts.eos = tok.eos();
  const auto ids = tok.encode("hello");
  const auto plain = generate(model, ids, {}, opts);
  CHECK(steered.tokens == plain.tokens);
  CHECK(steered.text == tok.decode(plain.tokens));
}

TEST_CASE("negated direction with negated alpha is identical") {
  const Tokenizer tok = train_bpe("", 0);
  const auto model = make_toy_model(oracle::small_config(2, tok.vocab_size()), 4);
  Rng rng(2);
  auto a = make_inj(rng, 16, 0, 6.0f);
  auto b = a;
  b.direction = negated(a.direction);
  b.alpha = -6.0f;
  CHECK(steer_generate(model, tok, "steer me", a, 10).tokens == steer_generate(model, tok, "steer me", b, 10).tokens);
  const auto ids = tok.encode("steer me");
  CHECK(forward(model, ids, a.to_hooks(model.config())).logits.storage() == forward(model, ids, b.to_hooks(model.config())).logits.storage());
}

TEST_CASE("injection hooks are validated and normalized") {
  const auto cfg = oracle::small_config(2);
  CHECK_THROWS_AS(InjectionSpec({std::vector<float>(16, 1.0f), 2, 1.0f}).to_hooks(cfg), HookError);
  CHECK_THROWS_AS(InjectionSpec({std::vector<float>(15, 1.0f), 0, 1.0f}).to_hooks(cfg), HookError);
  const auto hooks = InjectionSpec({std::vector<float>(16, 2.0f), 1, 1.0f}).to_hooks(cfg);
  REQUIRE(hooks.injections.size() == 1);
  CHECK(std::fabs(l2_norm(hooks.injections[0].delta) - 1.0) <= 1e-6);
}

TEST_CASE("token logprob difference") {
  const auto model = make_toy_model(oracle::small_config(2), 5);
  Rng rng(3);
  const auto prompt = random_prompt(rng, 5, 32);
  const std::vector<TokenId> ref{7, 19};

  const auto zero = token_logprob_diff(model, prompt, ref, make_inj(rng, 16, 0, 0.0f));
  REQUIRE(zero.size() == 2);
  CHECK(zero[0] == 0.0);
  CHECK(zero[1] == 0.0);

  const auto inj = make_inj(rng, 16, 0, 5.0f);
  const auto got = token_logprob_diff(model, prompt, ref, inj);
  REQUIRE(got.size() == ref.size());

  std::vector<TokenId> full = prompt;
  full.insert(full.end(), ref.begin(), ref.end());
  const auto steered = forward(model, full, inj.to_hooks(model.config()));
  const auto base = forward(model, full);
  for (std::size_t t = 0; t < ref.size(); ++t) {
    const std::size_t pos = prompt.size() - 1 + t;
    const auto ls = oracle::log_softmax(steered.logits.row(pos));
    const auto lb = oracle::log_softmax(base.logits.row(pos));
    const auto tok = static_cast<std::size_t>(ref[t]);
    CHECK(std::fabs(got[t] - static_cast<double>(ls[tok] - lb[tok])) <= 1e-6);
  }
  CHECK_THROWS_AS(token_logprob_diff(model, prompt, {}, inj), LengthError);
}

TEST_CASE("unembed top-k") {
  auto cfg = oracle::small_config(1, 16);
  auto weights = make_toy_model(cfg, 6).weights();
  Tensor eye = Tensor(Shape{16, 16});
  for (std::size_t i = 0; i < 16; ++i) eye.at(i, i) = 1.0f;
  weights["unembed.W_U"] = eye;
  const ModelBundle model(cfg, weights);
  std::vector<float> e3(16, 0.0f);
  e3[3] = 1.0f;
  const auto top = unembed_topk(model, e3, 16, false);
  REQUIRE(top.size() == 16);
  CHECK(top[0].id == 3);
  // the remaining ids tie and come out in id order
  CHECK(top[1].id == 0);
  CHECK(top[2].id == 1);
  double sum = 0;
  for (std::size_t i = 0; i < top.size(); ++i) {
    sum += top[i].prob;
    CHECK(std::fabs(top[i].logprob - std::log(top[i].prob)) <= 1e-5);
    if (i > 0) CHECK(top[i].prob <= top[i - 1].prob);
  }
  CHECK(std::fabs(sum - 1.0) <= 1e-5);
  CHECK_THROWS_AS(unembed_topk(model, e3, 17, false), DataError);

  Rng rng(4);
  const auto normed = unembed_topk(make_toy_model(oracle::small_config(2), 7), oracle::random_unit(rng, 16), 5, true);
  CHECK(normed.size() == 5);
}

TEST_CASE("dla: pre-injection rows are constant and columns sum to the frozen logit") {
  const auto model = make_toy_model(toy_config(64), 8);
  Rng rng(5);
  const auto prompt = random_prompt(rng, 12, 64);
  const auto dir = oracle::random_unit(rng, 64);
  const std::size_t layer = 2;
  const auto table = dla_sweep(model, prompt, layer, dir, default_alpha_grid(), DlaTarget{TokenId{9}, {}});
  REQUIRE(table.alphas.size() == 9);
  for (std::size_t a = 0; a < table.alphas.size(); ++a) {
    double col = 0;
    for (const auto& row : table.values) col += row[a];
    CHECK(std::fabs(col - table.frozen_total[a]) <= 1e-4);
  }
  // with no injection the frozen scale is the realized one
  CHECK(std::fabs(table.frozen_total[4] - table.actual_logit[4]) <= 1e-4);
  for (std::size_t r = 0; r < table.row_labels.size(); ++r) {
    const auto& label = table.row_labels[r];
    if (label == "closure" || label == "bias") continue;
    const auto id = ComponentId::parse(label);
    if (id.layer >= 0 && static_cast<std::size_t>(id.layer) >= layer) continue;
    for (double v : table.values[r]) CHECK(v == table.values[r][0]);
  }

  const auto dtab = dla_sweep(model, prompt, layer, dir, {-2, 3}, DlaTarget{std::nullopt, dir});
  for (std::size_t a = 0; a < 2; ++a) {
    double col = 0;
    for (const auto& row : dtab.values) col += row[a];
    CHECK(std::fabs(col - dtab.frozen_total[a]) <= 1e-4);
  }
  CHECK_THROWS_AS(dla_sweep(model, prompt, layer, dir, {}, DlaTarget{TokenId{1}, {}}), UsageError);
}

TEST_CASE("dla matches a hand-assembled decomposition on a 2-layer model") {
  const auto model = make_toy_model(oracle::small_config(2), 9);
  const auto& cfg = model.config();
  Rng rng(6);
  const auto prompt = random_prompt(rng, 6, 32);
  const auto dir = oracle::random_unit(rng, 16);
  const TokenId target = 4;
  const auto table = dla_sweep(model, prompt, 1, dir, {0.0f, 1.0f}, DlaTarget{target, {}});
  const std::size_t last = prompt.size() - 1;

  const auto base = forward(model, prompt);
  double ms = 0;
  for (float x : base.cache.final_resid.row(last)) ms += static_cast<double>(x) * x;
  const double scale = 1.0 / std::sqrt(ms / 16 + cfg.norm_eps);
  const Tensor& gamma = model.weight("ln_final.w");
  const Tensor& W_U = model.weight("unembed.W_U");
  auto share = [&](std::span<const float> v) {
    double s = 0;
    for (std::size_t i = 0; i < 16; ++i) s += v[i] * scale * gamma[i] * W_U.at(i, target);
    return s;
  };

  for (std::size_t a = 0; a < 2; ++a) {
    const auto run = forward(model, prompt, InjectionSpec{dir, 1, table.alphas[a]}.to_hooks(cfg));
    const std::vector<double> want{share(run.cache.at(ComponentId::embed()).row(last)),
                                   share(run.cache.at(ComponentId::attn_out(0)).row(last)),
                                   share(run.cache.at(ComponentId::mlp_out(0)).row(last)),
                                   share(run.cache.at(ComponentId::attn_out(1)).row(last)),
                                   share(run.cache.at(ComponentId::mlp_out(1)).row(last)),
                                   share(run.cache.stream_edits.row(last))};
    for (std::size_t r = 0; r < want.size(); ++r) CHECK(std::fabs(table.values[r][a] - want[r]) <= 1e-5);
  }
}

TEST_CASE("kl recovery on synthetic distributions") {
  const ProbDist clean{{0.8f, 0.2f}}, corrupted{{0.5f, 0.5f}}, patched{{0.7f, 0.3f}};
  // KL in closed form with the exact decimal inputs
  const long double base = 0.8L * std::log(0.8L / 0.5L) + 0.2L * std::log(0.2L / 0.5L);
  const long double part = 0.8L * std::log(0.8L / 0.7L) + 0.2L * std::log(0.2L / 0.3L);
  const double want = static_cast<double>(1.0L - part / base);
  CHECK(std::fabs(want - 0.8665) <= 1e-3);
  CHECK(std::fabs(kl_recovery(clean, corrupted, patched) - want) <= 1e-6);
  CHECK_THROWS_AS(kl_recovery(clean, clean, patched), DegenerateError);
}

TEST_CASE("patch identities") {
  const auto model = make_toy_model(toy_config(64), 10);
  Rng rng(7);
  const auto prompt = random_prompt(rng, 10, 64);
  const auto inj = make_inj(rng, 64, 1, 8.0f);
  const auto ctx = make_patch_context(model, prompt, inj);

  const auto full = run_patch(model, ctx, {full_patch_sites(model.config()), PositionMask::all(), PatchMode::kDenoise});
  CHECK(std::fabs(full.kl_recovery - 1.0) <= 1e-6);
  const auto empty = run_patch(model, ctx, {{}, PositionMask::all(), PatchMode::kDenoise});
  CHECK(empty.kl_recovery == 0.0);

  const auto noise_full = run_patch(model, ctx, {full_patch_sites(model.config()), PositionMask::all(), PatchMode::kNoise});
  CHECK(std::fabs(noise_full.score - 1.0) <= 1e-6);
  const auto noise_empty = run_patch(model, ctx, {{}, PositionMask::all(), PatchMode::kNoise});
  CHECK(noise_empty.score == 0.0);

  // sites upstream of the injection carry no clean-only signal
  const auto upstream = run_patch(model, ctx, {{ComponentId::mlp_out(0)}, PositionMask::all(), PatchMode::kDenoise});
  CHECK(upstream.kl_recovery == 0.0);

  const auto dup = run_patch(model, ctx, {{ComponentId::attn_out(2), ComponentId::attn_out(2)}});
  const auto single = run_patch(model, ctx, {{ComponentId::attn_out(2)}});
  CHECK(dup.kl_recovery == single.kl_recovery);

  CHECK_THROWS_AS(run_patch(model, prompt, make_inj(rng, 64, 1, 0.0f), {{ComponentId::attn_out(2)}}), DegenerateError);
}

TEST_CASE("pair sweep consistency on a 2-layer model") {
  const auto model = make_toy_model(oracle::small_config(2), 11);
  Rng rng(8);
  std::vector<std::vector<TokenId>> prompts{random_prompt(rng, 7, 32), random_prompt(rng, 9, 32)};
  const InjectionSpec inj{oracle::random_unit(rng, 16), 0, 6.0f};
  const auto pairs = patch_sweep_pairs(model, prompts, inj);
  const auto singles = patch_sweep_components(model, prompts, inj);
  REQUIRE(pairs.sites == singles.sites);
  const std::size_t n = pairs.sites.size();
  CHECK(n == 4);
  double max_pair = -1e9, max_single = -1e9;
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(pairs.denoise[i][i] == singles.denoise[i]);
    CHECK(pairs.noise[i][i] == singles.noise[i]);
    max_single = std::max(max_single, singles.denoise[i]);
    for (std::size_t j = 0; j < n; ++j) {
      CHECK(pairs.denoise[i][j] == pairs.denoise[j][i]);
      CHECK(pairs.noise[i][j] == pairs.noise[j][i]);
      max_pair = std::max(max_pair, pairs.denoise[i][j]);
    }
  }
  CHECK(max_pair >= max_single);
  CHECK(pairs.failures.empty());
}

TEST_CASE("sweeps are independent of worker count") {
  const auto model = make_toy_model(oracle::small_config(2), 12);
  Rng rng(9);
  std::vector<std::vector<TokenId>> prompts{random_prompt(rng, 6, 32), random_prompt(rng, 8, 32),
                                            random_prompt(rng, 5, 32)};
  const InjectionSpec inj{oracle::random_unit(rng, 16), 0, 5.0f};
  const auto h1 = patch_sweep_heads(model, prompts, inj, {PositionMask::all(), 1});
  const auto h3 = patch_sweep_heads(model, prompts, inj, {PositionMask::all(), 3});
  CHECK(h1.sites.size() == 4);
  CHECK(h1.denoise == h3.denoise);
  CHECK(h1.noise == h3.noise);
  const auto p1 = patch_sweep_pairs(model, prompts, inj, {PositionMask::all(), 1});
  const auto p3 = patch_sweep_pairs(model, prompts, inj, {PositionMask::all(), 3});
  CHECK(p1.denoise == p3.denoise);
  CHECK(p1.noise == p3.noise);
}

TEST_CASE("sweep mean is the per-prompt arithmetic mean and failures are recorded") {
  const auto model = make_toy_model(oracle::small_config(2), 13);
  Rng rng(10);
  const auto a = random_prompt(rng, 6, 32), b = random_prompt(rng, 7, 32);
  const InjectionSpec inj{oracle::random_unit(rng, 16), 0, 5.0f};
  const auto sweep = patch_sweep_components(model, {a, b}, inj);
  const auto ra = run_patch(model, a, inj, {{ComponentId::mlp_out(1)}});
  const auto rb = run_patch(model, b, inj, {{ComponentId::mlp_out(1)}});
  CHECK(std::fabs(sweep.denoise[3] - (ra.score + rb.score) / 2) <= 1e-12);

  const auto bad = patch_sweep_components(model, {a, {}}, inj);
  CHECK_FALSE(bad.failures.empty());
  CHECK(std::fabs(bad.denoise[3] - ra.score) <= 1e-12);
}

TEST_CASE("direction contributions") {
  const auto model = make_toy_model(oracle::small_config(3), 14);
  Rng rng(11);
  const auto prompt = random_prompt(rng, 6, 32);
  const InjectionSpec inj{oracle::random_unit(rng, 16), 1, 3.0f};
  const auto run = forward(model, prompt, inj.to_hooks(model.config()));
  const std::size_t last = prompt.size() - 1;

  // each target direction is the unit vector along one component's output
  DirectionSet ds;
  const auto comps = residual_components(model.config());
  std::vector<double> beta;
  for (std::size_t t = 0; t < 3; ++t) {
    auto v = run.cache.at(comps[t]).row(last);
    std::vector<float> u(v.begin(), v.end());
    const double nrm = l2_norm(u);
    for (auto& x : u) x = static_cast<float>(x / nrm);
    ds.dirs.push_back(u);
    beta.push_back(nrm);
  }
  const auto table = direction_contributions(model, prompt, inj, ds);
  REQUIRE(table.values.size() == 7);
  REQUIRE(table.row_labels.size() == 7);
  for (const auto& row : table.values) CHECK(row.size() == 3);
  for (std::size_t t = 0; t < 3; ++t) CHECK(std::fabs(table.values[t][t] - beta[t]) <= 1e-5 * std::max(1.0, beta[t]));
  for (std::size_t r = 0; r < 7; ++r) {
    const auto v = run.cache.at(comps[r]).row(last);
    for (std::size_t t = 0; t < 3; ++t) {
      double s = 0;
      for (std::size_t j = 0; j < 16; ++j) s += static_cast<double>(v[j]) * ds.dirs[t][j];
      CHECK(std::fabs(table.values[r][t] - s) <= 1e-5);
    }
  }
  DirectionSet short_ds;
  short_ds.dirs = {ds.dirs[0]};
  CHECK_THROWS_AS(direction_contributions(model, prompt, inj, short_ds), DimensionError);
}

TEST_CASE("attention direction image") {
  auto cfg = oracle::small_config(1);
  const auto model = make_toy_model(cfg, 15);
  CHECK(attention_direction_image(model, 0, 1, std::vector<float>(16, 0.0f)) == std::vector<float>(16, 0.0f));

  Rng rng(12);
  const auto d1 = oracle::random_unit(rng, 16), d2 = oracle::random_unit(rng, 16);
  std::vector<float> mix(16);
  for (std::size_t i = 0; i < 16; ++i) mix[i] = 2.5f * d1[i] - 0.75f * d2[i];
  const auto i1 = attention_direction_image(model, 0, 0, d1), i2 = attention_direction_image(model, 0, 0, d2);
  const auto im = attention_direction_image(model, 0, 0, mix);
  for (std::size_t i = 0; i < 16; ++i) CHECK(std::fabs(im[i] - (2.5 * i1[i] - 0.75 * i2[i])) <= 1e-5);

  auto weights = model.weights();
  Tensor eye = Tensor(Shape{16, 16});
  for (std::size_t i = 0; i < 16; ++i) eye.at(i, i) = 1.0f;
  weights["blocks.0.attn.W_V"] = eye;
  weights["blocks.0.attn.W_O"] = eye;
  const ModelBundle ident(cfg, weights);
  const auto img = attention_direction_image(ident, 0, 1, d1);
  for (std::size_t i = 0; i < 16; ++i) CHECK(img[i] == (i >= 8 ? d1[i] : 0.0f));
  CHECK_THROWS(attention_direction_image(model, 0, 2, d1));
  CHECK_THROWS(attention_direction_image(model, 1, 0, d1));
}

TEST_CASE("mlp nonlinearity gap") {
  Rng rng(13);
  const auto r = oracle::random_unit(rng, 16), d = oracle::random_unit(rng, 16);
  const auto swiglu = make_toy_model(oracle::small_config(1), 16);

  const auto zero = mlp_nonlinearity_gap(swiglu, 0, r, d, 0.0);
  CHECK(zero.gap_norm == 0.0);
  for (double g : zero.gap) CHECK(g == 0.0);

  auto lin_cfg = oracle::small_config(1);
  lin_cfg.mlp_kind = MlpKind::kLinear;
  const auto linear = make_toy_model(lin_cfg, 17);
  for (double alpha : {-8.0, -1.0, 0.5, 4.0, 16.0}) CHECK(mlp_nonlinearity_gap(linear, 0, r, d, alpha).gap_norm <= 1e-4);

  // independent oracle: double-precision MLP, central differences at two step sizes
  const auto got = mlp_nonlinearity_gap(swiglu, 0, r, d, 1.0);
  std::vector<double> x(r.begin(), r.end());
  auto at = [&](double s) {
    std::vector<double> z(16);
    for (std::size_t i = 0; i < 16; ++i) z[i] = x[i] + s * d[i];
    return oracle_mlp(swiglu, 0, z);
  };
  const auto y0 = at(0.0), y1 = at(1.0);
  for (std::size_t j = 0; j < 16; ++j) CHECK(std::fabs(got.y_base[j] - y0[j]) <= 1e-9);
  for (double h : {1e-3, 1e-4}) {
    const auto yp = at(h), ym = at(-h);
    double diff = 0, ref = 0;
    for (std::size_t j = 0; j < 16; ++j) {
      const double gap = y1[j] - y0[j] - (yp[j] - ym[j]) / (2 * h);
      diff += (got.gap[j] - gap) * (got.gap[j] - gap);
      ref += gap * gap;
    }
    CHECK(std::sqrt(diff) <= 1e-3 * std::sqrt(ref));
  }
  CHECK(got.gap_norm > 0.0);
}

}  // TEST_SUITE
