#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "repmech/engine.hpp"
#include "repmech/model.hpp"
#include "repmech/tokenizer.hpp"

// Consumer side of checkpoint export: the manifest an exporter writes next to
// the converted files, and the golden-logit parity check run against it. The
// exporter itself lives outside this library.

namespace repmech {

// One engine weight and where it came from in the source checkpoint.
struct WeightMapping {
  std::string engine;     // e.g. "blocks.0.attn.W_Q"
  std::string source;     // source tensor name
  std::string transform;  // free text: "transpose", "split qkv 0/3", ...
};

struct GoldenPrompt {
  std::string id;
  std::string text;
  std::vector<TokenId> tokens;  // source tokenizer's ids; empty when not recorded
};

struct ExportManifest {
  std::string source;  // checkpoint identifier and revision
  std::string archive = "model.rta";
  std::string vocab = "vocab.json";
  std::string merges = "merges.txt";
  std::string config = "config.json";
  std::vector<WeightMapping> weight_map;
  std::string golden_file = "golden.rta";
  std::size_t golden_positions = 8;
  std::vector<GoldenPrompt> golden_prompts;

  nlohmann::json to_json() const;
  static ExportManifest from_json(const nlohmann::json& j);  // DataError on bad fields
  // Every weight the config requires is mapped exactly once and nothing else is.
  void validate(const ModelConfig& cfg) const;
};

ExportManifest load_export_manifest(const std::filesystem::path& path);
void save_export_manifest(const ExportManifest& m, const std::filesystem::path& path);

// Archive key holding one prompt's reference logits [positions x V].
std::string golden_key(const std::string& prompt_id);

struct PromptParity {
  std::string id;
  bool tokens_match = true;  // true when the manifest holds no source ids
  double max_abs_diff = 0.0;
  std::size_t positions = 0;
};

struct ParityReport {
  double tolerance = 1e-3;
  std::vector<PromptParity> prompts;

  bool passed() const;
};

// Loads the exported model, tokenizer and golden archive from `dir` and
// compares engine logits with the golden rows position by position.
ParityReport check_golden_parity(const std::filesystem::path& dir, double tolerance = 1e-3);
ParityReport check_golden_parity(const ModelBundle& model, const Tokenizer& tokenizer, const ExportManifest& manifest,
                                 const std::map<std::string, Tensor>& golden, double tolerance = 1e-3);

}  // namespace repmech
