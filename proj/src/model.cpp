#include "repmech/model.hpp"

#include <cmath>
#include <cstring>

#include "repmech/errors.hpp"
#include "repmech/util.hpp"

namespace repmech {

namespace {

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> table, const char* what) {
  for (const auto& [name, value] : table) {
    if (s == name) return value;
  }
  throw DataError(std::string("unknown ") + what + " '" + s + "'");
}

}  // namespace

std::string to_string(NormKind k) { return k == NormKind::kRmsNorm ? "rmsnorm" : "layernorm"; }

std::string to_string(MlpKind k) {
  switch (k) {
    case MlpKind::kSwiGlu:
      return "swiglu";
    case MlpKind::kGeluMlp:
      return "gelu-mlp";
    case MlpKind::kLinear:
      return "linear-mlp";
  }
  return "?";
}

std::string to_string(PosKind k) { return k == PosKind::kRope ? "rope" : "learned"; }

void ModelConfig::validate() const {
  if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_mlp == 0 || vocab_size == 0 || max_seq == 0) {
    throw DataError("model config sizes must all be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw DataError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (pos_kind == PosKind::kRope && d_head() % 2 != 0) {
    throw DataError("rotary positions need an even head dimension, got " + std::to_string(d_head()));
  }
  if (!(norm_eps > 0.0f)) throw DataError("norm_eps must be positive");
  if (pos_kind == PosKind::kRope && !(rope_theta > 0.0)) throw DataError("rope_theta must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j;
  j["n_layers"] = n_layers;
  j["d_model"] = d_model;
  j["n_heads"] = n_heads;
  j["d_head"] = d_head();
  j["d_mlp"] = d_mlp;
  j["vocab_size"] = vocab_size;
  j["max_seq"] = max_seq;
  j["norm_kind"] = to_string(norm_kind);
  j["mlp_kind"] = to_string(mlp_kind);
  j["pos_kind"] = to_string(pos_kind);
  j["rope_theta"] = rope_theta;
  j["norm_eps"] = norm_eps;
  j["use_bias"] = use_bias;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  static const char* kKnown[] = {"n_layers", "d_model",  "n_heads",  "d_head",     "d_mlp",    "vocab_size", "max_seq",
                                 "norm_kind", "mlp_kind", "pos_kind", "rope_theta", "norm_eps", "use_bias"};
  if (!j.is_object()) throw DataError("model config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (const char* k : kKnown) known = known || key == k;
    if (!known) throw DataError("unknown model config field '" + key + "'");
  }
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_mlp = j.at("d_mlp").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq = j.at("max_seq").get<std::size_t>();
    c.norm_kind = parse_enum<NormKind>(j.value("norm_kind", "rmsnorm"),
                                       {{"rmsnorm", NormKind::kRmsNorm}, {"layernorm", NormKind::kLayerNorm}},
                                       "norm_kind");
    c.mlp_kind = parse_enum<MlpKind>(
        j.value("mlp_kind", "swiglu"),
        {{"swiglu", MlpKind::kSwiGlu}, {"gelu-mlp", MlpKind::kGeluMlp}, {"linear-mlp", MlpKind::kLinear}},
        "mlp_kind");
    c.pos_kind = parse_enum<PosKind>(j.value("pos_kind", "rope"),
                                     {{"rope", PosKind::kRope}, {"learned", PosKind::kLearned}}, "pos_kind");
    c.rope_theta = j.value("rope_theta", 10000.0);
    c.norm_eps = j.value("norm_eps", 1e-5f);
    c.use_bias = j.value("use_bias", false);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad model config: ") + e.what());
  }
  c.validate();
  if (j.contains("d_head") && j["d_head"].get<std::size_t>() != c.d_head()) {
    throw DataError("d_head must equal d_model / n_heads");
  }
  return c;
}

std::string ComponentId::to_string() const {
  switch (kind) {
    case Kind::kEmbed:
      return "embed";
    case Kind::kAttnOut:
      return "attn." + std::to_string(layer);
    case Kind::kMlpOut:
      return "mlp." + std::to_string(layer);
    case Kind::kHeadOut:
      return "head." + std::to_string(layer) + "." + std::to_string(head);
    case Kind::kResidPre:
      return "resid_pre." + std::to_string(layer);
    case Kind::kResidPost:
      return "resid_post." + std::to_string(layer);
  }
  return "?";
}

ComponentId ComponentId::parse(const std::string& text) {
  if (text == "embed") return embed();
  const auto dot = text.find('.');
  if (dot == std::string::npos) throw HookError("unknown component '" + text + "'");
  const std::string prefix = text.substr(0, dot);
  const std::string rest = text.substr(dot + 1);
  auto parse_int = [&](const std::string& s) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos || s.size() > 6) {
      throw HookError("bad index in component '" + text + "'");
    }
    return std::stoi(s);
  };
  if (prefix == "head") {
    const auto dot2 = rest.find('.');
    if (dot2 == std::string::npos) throw HookError("head component needs layer.head: '" + text + "'");
    return head_out(parse_int(rest.substr(0, dot2)), parse_int(rest.substr(dot2 + 1)));
  }
  const int l = parse_int(rest);
  if (prefix == "attn") return attn_out(l);
  if (prefix == "mlp") return mlp_out(l);
  if (prefix == "resid_pre") return resid_pre(l);
  if (prefix == "resid_post") return resid_post(l);
  throw HookError("unknown component '" + text + "'");
}

void ComponentId::validate(const ModelConfig& cfg) const {
  if (kind == Kind::kEmbed) return;
  if (layer < 0 || static_cast<std::size_t>(layer) >= cfg.n_layers) {
    throw HookError("component " + to_string() + " refers to a layer outside [0, " + std::to_string(cfg.n_layers) + ")");
  }
  if (kind == Kind::kHeadOut && (head < 0 || static_cast<std::size_t>(head) >= cfg.n_heads)) {
    throw HookError("component " + to_string() + " refers to a head outside [0, " + std::to_string(cfg.n_heads) + ")");
  }
}

std::vector<ComponentId> residual_components(const ModelConfig& cfg) {
  std::vector<ComponentId> out{ComponentId::embed()};
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    out.push_back(ComponentId::attn_out(static_cast<int>(l)));
    out.push_back(ComponentId::mlp_out(static_cast<int>(l)));
  }
  return out;
}

std::map<std::string, Shape> required_weights(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, V = cfg.vocab_size, m = cfg.d_mlp;
  const bool ln = cfg.norm_kind == NormKind::kLayerNorm;
  std::map<std::string, Shape> w;
  w["embed.W_E"] = {V, d};
  if (cfg.pos_kind == PosKind::kLearned) w["embed.W_pos"] = {cfg.max_seq, d};
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    for (const char* n : {"ln1", "ln2"}) {
      w[p + n + ".w"] = {d};
      if (ln) w[p + n + ".b"] = {d};
    }
    for (const char* n : {"W_Q", "W_K", "W_V", "W_O"}) w[p + "attn." + n] = {d, d};
    if (cfg.use_bias) {
      for (const char* n : {"b_Q", "b_K", "b_V", "b_O"}) w[p + "attn." + n] = {d};
    }
    if (cfg.mlp_kind == MlpKind::kSwiGlu) w[p + "mlp.W_gate"] = {d, m};
    w[p + "mlp.W_in"] = {d, m};
    w[p + "mlp.W_out"] = {m, d};
    if (cfg.use_bias) {
      w[p + "mlp.b_in"] = {m};
      w[p + "mlp.b_out"] = {d};
      if (cfg.mlp_kind == MlpKind::kSwiGlu) w[p + "mlp.b_gate"] = {m};
    }
  }
  w["ln_final.w"] = {d};
  if (ln) w["ln_final.b"] = {d};
  w["unembed.W_U"] = {d, V};
  if (cfg.use_bias) w["unembed.b_U"] = {V};
  return w;
}

ModelBundle::ModelBundle(ModelConfig config, WeightMap weights)
    : config_(std::move(config)), weights_(std::move(weights)) {
  config_.validate();
  const auto required = required_weights(config_);
  for (const auto& [name, shape] : required) {
    auto it = weights_.find(name);
    if (it == weights_.end()) throw DataError("missing weight '" + name + "'");
    if (it->second.shape() != shape) {
      throw DataError("weight '" + name + "' has shape " + shape_to_string(it->second.shape()) + ", expected " +
                      shape_to_string(shape));
    }
    if (!it->second.all_finite()) throw DataError("weight '" + name + "' has non-finite values");
  }
  for (const auto& [name, _] : weights_) {
    if (!required.count(name)) throw DataError("unexpected weight '" + name + "' for this config");
  }

  Fnv1a64 h;
  h.update(config_.to_json().dump());
  for (const auto& [name, t] : weights_) {
    h.update(name);
    for (auto d : t.shape()) h.update_u64(d);
    const auto bytes = t.data();
    h.update(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(bytes.data()),
                                           bytes.size() * sizeof(float)));
  }
  hash_ = h.hex();
}

const Tensor& ModelBundle::weight(const std::string& name) const {
  auto it = weights_.find(name);
  if (it == weights_.end()) throw DataError("model has no weight '" + name + "'");
  return it->second;
}

const Tensor& ModelBundle::weight_or_empty(const std::string& name) const {
  static const Tensor kEmpty;
  auto it = weights_.find(name);
  return it == weights_.end() ? kEmpty : it->second;
}

ModelBundle make_toy_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  WeightMap w;
  for (const auto& [name, shape] : required_weights(cfg)) {
    Tensor t(shape);
    const bool is_norm = name.find(".w") == name.size() - 2 && shape.size() == 1;
    const bool is_bias = shape.size() == 1 && !is_norm;
    double stddev = 0.0;
    if (name == "embed.W_E") {
      stddev = 1.0;
    } else if (name == "embed.W_pos") {
      stddev = 0.1;
    } else if (is_bias) {
      stddev = 0.02;
    } else if (!is_norm) {
      stddev = 1.0 / std::sqrt(static_cast<double>(shape[0]));
    }
    for (auto& v : t.data()) {
      v = is_norm ? static_cast<float>(1.0 + 0.1 * rng.normal()) : static_cast<float>(stddev * rng.normal());
    }
    w.emplace(name, std::move(t));
  }
  return ModelBundle(cfg, std::move(w));
}

ModelConfig toy_config(std::size_t vocab_size) {
  ModelConfig c;
  c.n_layers = 4;
  c.d_model = 64;
  c.n_heads = 4;
  c.d_mlp = 128;
  c.vocab_size = vocab_size;
  c.max_seq = 256;
  c.norm_kind = NormKind::kRmsNorm;
  c.mlp_kind = MlpKind::kSwiGlu;
  c.pos_kind = PosKind::kRope;
  c.rope_theta = 10000.0;
  c.norm_eps = 1e-5f;
  return c;
}

}  // namespace repmech
