#include "repmech/engine.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "repmech/errors.hpp"
#include "repmech/kernels.hpp"

namespace repmech {

PositionMask PositionMask::parse(const std::string& text) {
  if (text == "all") return all();
  if (text == "last") return last();
  std::set<std::size_t> pos;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError("bad position list '" + text + "' (expected all, last, or comma-separated indices)");
    }
    pos.insert(std::stoul(item));
  }
  if (pos.empty()) throw UsageError("empty position list");
  return explicit_set(std::move(pos));
}

std::string PositionMask::to_string() const {
  if (kind == Kind::kAll) return "all";
  if (kind == Kind::kLast) return "last";
  std::string out;
  for (auto p : positions) {
    if (!out.empty()) out += ",";
    out += std::to_string(p);
  }
  return out;
}

bool PositionMask::contains(std::size_t pos, std::size_t chunk_last) const {
  switch (kind) {
    case Kind::kAll:
      return true;
    case Kind::kLast:
      return pos == chunk_last;
    case Kind::kExplicit:
      return positions.count(pos) > 0;
  }
  return false;
}

void HookSet::validate(const ModelConfig& cfg, std::size_t seq_len) const {
  for (const auto& inj : injections) {
    if (inj.site.kind != ComponentId::Kind::kResidPost) {
      throw HookError("injections are only supported at resid_post sites, got " + inj.site.to_string());
    }
    inj.site.validate(cfg);
    if (inj.delta.size() != cfg.d_model) {
      throw HookError("injection delta has length " + std::to_string(inj.delta.size()) + ", expected d_model " +
                      std::to_string(cfg.d_model));
    }
  }
  std::set<std::pair<ComponentId, std::size_t>> claimed;
  for (const auto& p : patches) {
    p.site.validate(cfg);
    if (p.replacement.shape() != Shape{seq_len, cfg.d_model}) {
      throw HookError("patch for " + p.site.to_string() + " has shape " + shape_to_string(p.replacement.shape()) +
                      ", expected " + shape_to_string({seq_len, cfg.d_model}));
    }
    for (std::size_t t = 0; t < seq_len; ++t) {
      if (!p.scope.contains(t, seq_len - 1)) continue;
      if (!claimed.emplace(p.site, t).second) {
        throw HookError("two patches for " + p.site.to_string() + " at position " + std::to_string(t));
      }
    }
  }
}

const Tensor& ActivationCache::at(const ComponentId& id) const {
  auto it = entries.find(id);
  if (it == entries.end()) throw DataError("activation cache has no entry for " + id.to_string());
  return it->second;
}

ProbDist RunResult::probs(std::size_t position) const { return softmax_dist(logits.row(position)); }

TokenId argmax_token(std::span<const float> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

namespace {

// Per-layer weight views, resolved once per run.
struct LayerWeights {
  const Tensor* ln1_w;
  const Tensor* ln1_b;
  const Tensor* ln2_w;
  const Tensor* ln2_b;
  const Tensor* W_Q;
  const Tensor* W_K;
  const Tensor* W_V;
  const Tensor* W_O;
  const Tensor* b_Q;
  const Tensor* b_K;
  const Tensor* b_V;
  const Tensor* b_O;
  const Tensor* W_gate;
  const Tensor* W_in;
  const Tensor* W_out;
  const Tensor* b_gate;
  const Tensor* b_in;
  const Tensor* b_out;
};

struct LayerKv {
  std::vector<float> k;  // [pos x d_model], rotary already applied
  std::vector<float> v;
};

// Processes consecutive chunks of a sequence. A single chunk is a full
// forward pass; generation feeds one token at a time through the same code,
// which keeps incremental decoding bit-identical to full recomputation.
class Runner {
 public:
  Runner(const ModelBundle& model, const HookSet& hooks) : model_(model), cfg_(model.config()), hooks_(hooks) {
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      LayerWeights w{};
      w.ln1_w = &model.weight(p + "ln1.w");
      w.ln1_b = &model.weight_or_empty(p + "ln1.b");
      w.ln2_w = &model.weight(p + "ln2.w");
      w.ln2_b = &model.weight_or_empty(p + "ln2.b");
      w.W_Q = &model.weight(p + "attn.W_Q");
      w.W_K = &model.weight(p + "attn.W_K");
      w.W_V = &model.weight(p + "attn.W_V");
      w.W_O = &model.weight(p + "attn.W_O");
      w.b_Q = &model.weight_or_empty(p + "attn.b_Q");
      w.b_K = &model.weight_or_empty(p + "attn.b_K");
      w.b_V = &model.weight_or_empty(p + "attn.b_V");
      w.b_O = &model.weight_or_empty(p + "attn.b_O");
      w.W_gate = &model.weight_or_empty(p + "mlp.W_gate");
      w.W_in = &model.weight(p + "mlp.W_in");
      w.W_out = &model.weight(p + "mlp.W_out");
      w.b_gate = &model.weight_or_empty(p + "mlp.b_gate");
      w.b_in = &model.weight_or_empty(p + "mlp.b_in");
      w.b_out = &model.weight_or_empty(p + "mlp.b_out");
      layers_.push_back(w);
    }
    kv_.resize(cfg_.n_layers);
    if (cfg_.pos_kind == PosKind::kRope) {
      const std::size_t half = cfg_.d_head() / 2;
      inv_freq_.resize(half);
      for (std::size_t i = 0; i < half; ++i) {
        inv_freq_[i] = 1.0 / std::pow(cfg_.rope_theta, static_cast<double>(2 * i) / static_cast<double>(cfg_.d_head()));
      }
    }
  }

  std::size_t position() const noexcept { return pos_; }

  // Runs tokens at positions [pos_, pos_ + n). Returns logits [n x V].
  Tensor run_chunk(std::span<const TokenId> tokens, const RecordSet& record, ActivationCache* cache) {
    const std::size_t n = tokens.size(), d = cfg_.d_model, p0 = pos_;
    const std::size_t chunk_last = p0 + n - 1;
    for (auto t : tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab_size) {
        throw VocabularyError("token id " + std::to_string(t) + " outside vocabulary of size " +
                              std::to_string(cfg_.vocab_size));
      }
    }
    if (p0 + n > cfg_.max_seq) {
      throw LengthError("sequence of length " + std::to_string(p0 + n) + " exceeds max_seq " +
                        std::to_string(cfg_.max_seq));
    }

    auto keep = [&](const ComponentId& id, const Tensor& t) {
      if (cache && record.wants(id)) cache->entries.insert_or_assign(id, t);
    };
    Tensor edits({n, d});
    bool any_edit = false;

    // Embedding.
    Tensor x({n, d});
    const Tensor& W_E = model_.weight("embed.W_E");
    const Tensor& W_pos = model_.weight_or_empty("embed.W_pos");
    for (std::size_t i = 0; i < n; ++i) {
      auto row = x.row(i);
      auto e = W_E.row(static_cast<std::size_t>(tokens[i]));
      std::copy(e.begin(), e.end(), row.begin());
      if (!W_pos.empty()) {
        auto pe = W_pos.row(p0 + i);
        for (std::size_t j = 0; j < d; ++j) row[j] += pe[j];
      }
    }
    apply_patches(ComponentId::embed(), x, p0, chunk_last, nullptr);
    keep(ComponentId::embed(), x);

    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const int li = static_cast<int>(l);
      const LayerWeights& w = layers_[l];
      any_edit |= apply_patches(ComponentId::resid_pre(li), x, p0, chunk_last, &edits);
      keep(ComponentId::resid_pre(li), x);

      Tensor attn = attention(l, norm(x, *w.ln1_w, *w.ln1_b, nullptr), p0, chunk_last, record, cache);
      apply_patches(ComponentId::attn_out(li), attn, p0, chunk_last, nullptr);
      keep(ComponentId::attn_out(li), attn);
      add_inplace(x, attn);

      Tensor mlp_out = mlp(l, norm(x, *w.ln2_w, *w.ln2_b, nullptr));
      apply_patches(ComponentId::mlp_out(li), mlp_out, p0, chunk_last, nullptr);
      keep(ComponentId::mlp_out(li), mlp_out);
      add_inplace(x, mlp_out);

      for (const auto& inj : hooks_.injections) {
        if (inj.site != ComponentId::resid_post(li)) continue;
        any_edit = true;
        for (std::size_t i = 0; i < n; ++i) {
          if (!inj.mask.contains(p0 + i, chunk_last)) continue;
          auto row = x.row(i);
          auto er = edits.row(i);
          for (std::size_t j = 0; j < d; ++j) {
            const float add = inj.alpha * inj.delta[j];
            row[j] += add;
            er[j] += add;
          }
        }
      }
      any_edit |= apply_patches(ComponentId::resid_post(li), x, p0, chunk_last, &edits);
      keep(ComponentId::resid_post(li), x);
    }

    std::vector<double> scales;
    Tensor normed = norm(x, model_.weight("ln_final.w"), model_.weight_or_empty("ln_final.b"), &scales);
    Tensor logits = matmul(normed, model_.weight("unembed.W_U"));
    add_bias(logits, model_.weight_or_empty("unembed.b_U"));

    if (cache) {
      cache->final_resid = x;
      cache->final_norm_scale = std::move(scales);
      cache->stream_edits = std::move(edits);
      cache->has_stream_edits = any_edit || !hooks_.injections.empty();
    }
    pos_ += n;
    return logits;
  }

 private:
  Tensor norm(const Tensor& x, const Tensor& w, const Tensor& b, std::vector<double>* scales) const {
    const std::size_t n = x.rows();
    Tensor out({n, cfg_.d_model});
    for (std::size_t i = 0; i < n; ++i) {
      const double s = cfg_.norm_kind == NormKind::kRmsNorm
                           ? rmsnorm_row(x.row(i), w.data(), cfg_.norm_eps, out.row(i))
                           : layernorm_row(x.row(i), w.data(), b.data(), cfg_.norm_eps, out.row(i));
      if (scales) scales->push_back(s);
    }
    return out;
  }

  static void add_inplace(Tensor& x, const Tensor& y) {
    auto xd = x.data();
    auto yd = y.data();
    for (std::size_t i = 0; i < xd.size(); ++i) xd[i] += yd[i];
  }

  static void add_bias(Tensor& x, const Tensor& b) {
    if (b.empty()) return;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto row = x.row(i);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
    }
  }

  // Overwrites scoped rows with the patch replacement. When `edits` is given
  // the difference is accumulated there (residual-site patches).
  bool apply_patches(const ComponentId& id, Tensor& x, std::size_t p0, std::size_t chunk_last, Tensor* edits) const {
    bool touched = false;
    for (const auto& p : hooks_.patches) {
      if (p.site != id) continue;
      for (std::size_t i = 0; i < x.rows(); ++i) {
        if (!p.scope.contains(p0 + i, chunk_last)) continue;
        auto row = x.row(i);
        auto rep = p.replacement.row(p0 + i);
        if (edits) {
          auto er = edits->row(i);
          for (std::size_t j = 0; j < row.size(); ++j) er[j] += rep[j] - row[j];
        }
        std::copy(rep.begin(), rep.end(), row.begin());
        touched = true;
      }
    }
    return touched;
  }

  void rope(std::span<float> v, std::size_t pos) const {
    const std::size_t dh = cfg_.d_head(), half = dh / 2;
    for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
      float* base = v.data() + h * dh;
      for (std::size_t i = 0; i < half; ++i) {
        const double ang = static_cast<double>(pos) * inv_freq_[i];
        const float c = static_cast<float>(std::cos(ang));
        const float s = static_cast<float>(std::sin(ang));
        const float a = base[i], b = base[i + half];
        base[i] = a * c - b * s;
        base[i + half] = b * c + a * s;
      }
    }
  }

  Tensor attention(std::size_t l, const Tensor& h, std::size_t p0, std::size_t chunk_last, const RecordSet& record,
                   ActivationCache* cache) {
    const LayerWeights& w = layers_[l];
    const std::size_t n = h.rows(), d = cfg_.d_model, H = cfg_.n_heads, dh = cfg_.d_head();
    const int li = static_cast<int>(l);
    Tensor q = matmul(h, *w.W_Q);
    Tensor k = matmul(h, *w.W_K);
    Tensor v = matmul(h, *w.W_V);
    add_bias(q, *w.b_Q);
    add_bias(k, *w.b_K);
    add_bias(v, *w.b_V);
    if (cfg_.pos_kind == PosKind::kRope) {
      for (std::size_t i = 0; i < n; ++i) {
        rope(q.row(i), p0 + i);
        rope(k.row(i), p0 + i);
      }
    }
    LayerKv& kv = kv_[l];
    kv.k.insert(kv.k.end(), k.data().begin(), k.data().end());
    kv.v.insert(kv.v.end(), v.data().begin(), v.data().end());

    const float inv_sqrt = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh)));
    const std::vector<float> b_O_share = [&] {
      std::vector<float> s;
      if (!w.b_O->empty()) {
        for (float b : w.b_O->data()) s.push_back(b / static_cast<float>(H));
      }
      return s;
    }();

    Tensor attn({n, d});
    std::vector<float> scores;
    std::vector<float> z(dh);
    for (std::size_t hd = 0; hd < H; ++hd) {
      Tensor head_out({n, d});
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t t = p0 + i;
        const float* qi = q.row(i).data() + hd * dh;
        scores.assign(t + 1, 0.0f);
        for (std::size_t j = 0; j <= t; ++j) {
          const float* kj = kv.k.data() + j * d + hd * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += static_cast<double>(qi[c]) * kj[c];
          scores[j] = static_cast<float>(s) * inv_sqrt;
        }
        softmax_inplace(scores);
        std::fill(z.begin(), z.end(), 0.0f);
        for (std::size_t j = 0; j <= t; ++j) {
          const float* vj = kv.v.data() + j * d + hd * dh;
          const float a = scores[j];
          for (std::size_t c = 0; c < dh; ++c) z[c] += a * vj[c];
        }
        auto out = head_out.row(i);
        for (std::size_t c = 0; c < dh; ++c) {
          const float zc = z[c];
          auto wo = w.W_O->row(hd * dh + c);
          for (std::size_t j = 0; j < d; ++j) out[j] += zc * wo[j];
        }
        for (std::size_t j = 0; j < b_O_share.size(); ++j) out[j] += b_O_share[j];
      }
      const auto id = ComponentId::head_out(li, static_cast<int>(hd));
      apply_patches(id, head_out, p0, chunk_last, nullptr);
      if (cache && record.wants(id)) cache->entries.insert_or_assign(id, head_out);
      add_inplace(attn, head_out);
    }
    return attn;
  }

  Tensor mlp(std::size_t l, const Tensor& h) const {
    const LayerWeights& w = layers_[l];
    Tensor a = matmul(h, *w.W_in);
    add_bias(a, *w.b_in);
    switch (cfg_.mlp_kind) {
      case MlpKind::kSwiGlu: {
        Tensor g = matmul(h, *w.W_gate);
        add_bias(g, *w.b_gate);
        auto ad = a.data();
        auto gd = g.data();
        for (std::size_t i = 0; i < ad.size(); ++i) ad[i] *= silu(gd[i]);
        break;
      }
      case MlpKind::kGeluMlp:
        for (auto& v : a.data()) v = gelu(v);
        break;
      case MlpKind::kLinear:
        break;
    }
    Tensor out = matmul(a, *w.W_out);
    add_bias(out, *w.b_out);
    return out;
  }

  const ModelBundle& model_;
  const ModelConfig& cfg_;
  const HookSet& hooks_;
  std::vector<LayerWeights> layers_;
  std::vector<LayerKv> kv_;
  std::vector<double> inv_freq_;
  std::size_t pos_ = 0;
};

}  // namespace

RunResult forward(const ModelBundle& model, std::span<const TokenId> tokens, const HookSet& hooks,
                  const RecordSet& record) {
  const auto& cfg = model.config();
  if (tokens.empty()) throw LengthError("cannot run an empty token sequence");
  if (tokens.size() > cfg.max_seq) {
    throw LengthError("sequence of length " + std::to_string(tokens.size()) + " exceeds max_seq " +
                      std::to_string(cfg.max_seq));
  }
  hooks.validate(cfg, tokens.size());
  for (const auto& id : record.items) id.validate(cfg);

  RunResult result;
  result.cache.tokens.assign(tokens.begin(), tokens.end());
  Runner runner(model, hooks);
  result.logits = runner.run_chunk(tokens, record, &result.cache);
  return result;
}

GenerateResult generate(const ModelBundle& model, std::span<const TokenId> prompt, const HookSet& hooks,
                        const GenerateOptions& opts) {
  const auto& cfg = model.config();
  if (prompt.empty()) throw LengthError("generation needs a nonempty prompt");
  if (!hooks.patches.empty()) throw HookError("patches are not supported during generation");
  if (prompt.size() > cfg.max_seq) {
    throw LengthError("prompt of length " + std::to_string(prompt.size()) + " exceeds max_seq " +
                      std::to_string(cfg.max_seq));
  }
  hooks.validate(cfg, prompt.size());

  GenerateResult out;
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  const RecordSet nothing = RecordSet::none();

  auto emit = [&](std::span<const float> last_logits) {
    const TokenId next = argmax_token(last_logits);
    if (opts.keep_step_logits) out.step_logits.emplace_back(last_logits.begin(), last_logits.end());
    out.tokens.push_back(next);
    seq.push_back(next);
    return next;
  };
  auto done = [&](TokenId last) {
    return out.tokens.size() >= opts.max_new || (opts.eos && last == *opts.eos) || seq.size() >= cfg.max_seq;
  };

  if (opts.max_new == 0) return out;
  if (opts.use_kv_cache) {
    Runner runner(model, hooks);
    Tensor logits = runner.run_chunk(seq, nothing, nullptr);
    TokenId last = emit(logits.row(logits.rows() - 1));
    while (!done(last)) {
      const TokenId step[1] = {last};
      logits = runner.run_chunk(step, nothing, nullptr);
      last = emit(logits.row(0));
    }
  } else {
    TokenId last;
    do {
      // Full recomputation: every position is in its own "last" chunk exactly
      // once, matching the incremental path's mask semantics.
      Runner runner(model, hooks);
      Tensor logits = runner.run_chunk(std::span<const TokenId>(seq).first(prompt.size()), nothing, nullptr);
      for (std::size_t i = prompt.size(); i < seq.size(); ++i) {
        const TokenId step[1] = {seq[i]};
        logits = runner.run_chunk(step, nothing, nullptr);
      }
      last = emit(logits.row(logits.rows() - 1));
    } while (!done(last));
  }
  return out;
}

std::vector<ResidualTerm> decompose_residual(const ActivationCache& cache, const ModelConfig& cfg,
                                             std::size_t position) {
  if (position >= cache.seq_len()) {
    throw DataError("position " + std::to_string(position) + " outside cached sequence of length " +
                    std::to_string(cache.seq_len()));
  }
  std::vector<std::string> missing;
  const auto ids = residual_components(cfg);
  for (const auto& id : ids) {
    if (!cache.has(id)) missing.push_back(id.to_string());
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw DataError("incomplete activation cache, missing: " + list);
  }
  std::vector<ResidualTerm> terms;
  for (const auto& id : ids) {
    auto row = cache.at(id).row(position);
    terms.push_back({id.to_string(), id, std::vector<float>(row.begin(), row.end())});
  }
  if (cache.has_stream_edits) {
    auto row = cache.stream_edits.row(position);
    terms.push_back({"closure", std::nullopt, std::vector<float>(row.begin(), row.end())});
  }
  return terms;
}

}  // namespace repmech
