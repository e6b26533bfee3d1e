#include "repmech/export.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "repmech/errors.hpp"
#include "repmech/io.hpp"
#include "repmech/util.hpp"

namespace repmech {

using json = nlohmann::json;

json ExportManifest::to_json() const {
  json map = json::array();
  for (const auto& w : weight_map) map.push_back({{"engine", w.engine}, {"source", w.source}, {"transform", w.transform}});
  json prompts = json::array();
  for (const auto& p : golden_prompts) {
    json e = {{"id", p.id}, {"text", p.text}};
    if (!p.tokens.empty()) e["tokens"] = p.tokens;
    prompts.push_back(std::move(e));
  }
  return {{"source", source},
          {"files", {{"archive", archive}, {"vocab", vocab}, {"merges", merges}, {"config", config}}},
          {"weight_map", map},
          {"golden", {{"file", golden_file}, {"positions", golden_positions}, {"prompts", prompts}}}};
}

ExportManifest ExportManifest::from_json(const json& j) {
  try {
    ExportManifest m;
    m.source = j.at("source").get<std::string>();
    const auto& files = j.at("files");
    m.archive = files.at("archive").get<std::string>();
    m.vocab = files.at("vocab").get<std::string>();
    m.merges = files.at("merges").get<std::string>();
    m.config = files.at("config").get<std::string>();
    for (const auto& w : j.at("weight_map")) {
      m.weight_map.push_back({w.at("engine").get<std::string>(), w.at("source").get<std::string>(),
                              w.value("transform", std::string())});
    }
    const auto& g = j.at("golden");
    m.golden_file = g.at("file").get<std::string>();
    m.golden_positions = g.at("positions").get<std::size_t>();
    for (const auto& p : g.at("prompts")) {
      GoldenPrompt gp{p.at("id").get<std::string>(), p.at("text").get<std::string>(), {}};
      if (p.contains("tokens")) gp.tokens = p.at("tokens").get<std::vector<TokenId>>();
      m.golden_prompts.push_back(std::move(gp));
    }
    return m;
  } catch (const json::exception& e) {
    throw DataError(std::string("export manifest: ") + e.what());
  }
}

void ExportManifest::validate(const ModelConfig& cfg) const {
  std::map<std::string, int> seen;
  for (const auto& w : weight_map) ++seen[w.engine];
  const auto required = required_weights(cfg);
  for (const auto& [name, shape] : required) {
    const int n = seen.count(name) ? seen.at(name) : 0;
    if (n != 1) throw DataError("export manifest maps " + name + " " + std::to_string(n) + " times");
  }
  for (const auto& [name, n] : seen) {
    if (!required.count(name)) throw DataError("export manifest maps unknown engine weight " + name);
  }
  if (golden_positions == 0) throw DataError("export manifest: golden positions must be positive");
}

ExportManifest load_export_manifest(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError::at_byte(e.byte, path.string() + ": " + e.what());
  }
  return ExportManifest::from_json(j);
}

void save_export_manifest(const ExportManifest& m, const std::filesystem::path& path) {
  write_file(path, m.to_json().dump(2) + "\n");
}

std::string golden_key(const std::string& prompt_id) { return "golden." + prompt_id; }

bool ParityReport::passed() const {
  return std::all_of(prompts.begin(), prompts.end(),
                     [&](const PromptParity& p) { return p.tokens_match && p.max_abs_diff <= tolerance; });
}

ParityReport check_golden_parity(const ModelBundle& model, const Tokenizer& tokenizer, const ExportManifest& manifest,
                                 const std::map<std::string, Tensor>& golden, double tolerance) {
  const auto& cfg = model.config();
  ParityReport report;
  report.tolerance = tolerance;
  for (const auto& p : manifest.golden_prompts) {
    const auto it = golden.find(golden_key(p.id));
    if (it == golden.end()) throw DataError("golden logits missing for prompt '" + p.id + "'");
    const Tensor& ref = it->second;
    const auto ids = tokenizer.encode(p.text);
    PromptParity out;
    out.id = p.id;
    if (!p.tokens.empty()) out.tokens_match = p.tokens == ids;
    out.positions = std::min({manifest.golden_positions, ids.size()});
    if (ref.rank() != 2 || ref.rows() != out.positions || ref.cols() != cfg.vocab_size) {
      throw DimensionError("golden logits for '" + p.id + "' have shape " + shape_to_string(ref.shape()) +
                           ", expected [" + std::to_string(out.positions) + "x" + std::to_string(cfg.vocab_size) + "]");
    }
    const auto run = forward(model, ids, {}, RecordSet::none());
    for (std::size_t r = 0; r < out.positions; ++r) {
      for (std::size_t c = 0; c < cfg.vocab_size; ++c) {
        out.max_abs_diff = std::max(out.max_abs_diff, std::fabs(static_cast<double>(run.logits.at(r, c)) - ref.at(r, c)));
      }
    }
    report.prompts.push_back(std::move(out));
  }
  return report;
}

ParityReport check_golden_parity(const std::filesystem::path& dir, double tolerance) {
  const auto manifest = load_export_manifest(dir / "export_manifest.json");
  const auto model = load_model(dir / manifest.archive, dir / manifest.config);
  manifest.validate(model.config());
  const auto tokenizer = Tokenizer::load(dir / manifest.vocab, dir / manifest.merges);
  return check_golden_parity(model, tokenizer, manifest, load_archive(dir / manifest.golden_file).tensors(), tolerance);
}

}  // namespace repmech
