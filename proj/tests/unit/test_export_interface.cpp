#include <doctest.h>

#include <filesystem>

#include "oracles.hpp"
#include "repmech/errors.hpp"
#include "repmech/export.hpp"
#include "repmech/io.hpp"

using namespace repmech;
namespace fs = std::filesystem;

namespace {

// Stands in for an exporter run: the toy model's own files plus golden rows
// produced by the engine, so parity must hold exactly.
ExportManifest fake_export(const fs::path& dir, const ModelBundle& model, const Tokenizer& tok) {
  fs::create_directories(dir);
  save_model(model, dir / "model.rta", dir / "config.json");
  tok.save(dir / "vocab.json", dir / "merges.txt");
  ExportManifest m;
  m.source = "toy/seed-3";
  for (const auto& [name, shape] : required_weights(model.config())) m.weight_map.push_back({name, "src." + name, ""});
  m.golden_prompts = {{"a", "hello there", tok.encode("hello there")}, {"b", "x", {}},
                      {"c", "a rather longer prompt than eight tokens", {}}};
  std::map<std::string, Tensor> golden;
  for (const auto& p : m.golden_prompts) {
    const auto ids = tok.encode(p.text);
    const auto run = forward(model, ids);
    const std::size_t n = std::min<std::size_t>(m.golden_positions, ids.size());
    std::vector<float> rows(run.logits.storage().begin(), run.logits.storage().begin() + n * model.config().vocab_size);
    golden[golden_key(p.id)] = Tensor::matrix(n, model.config().vocab_size, rows);
  }
  save_archive(golden, dir / m.golden_file);
  save_export_manifest(m, dir / "export_manifest.json");
  return m;
}

}  // namespace

TEST_SUITE("artifact-io") {

TEST_CASE("export manifest json round trip and validation") {
  const auto cfg = oracle::small_config(1);
  ExportManifest m;
  m.source = "src";
  for (const auto& [name, shape] : required_weights(cfg)) m.weight_map.push_back({name, name, "transpose"});
  m.golden_prompts = {{"p", "text", {1, 2}}};
  const auto back = ExportManifest::from_json(m.to_json());
  CHECK(back.to_json() == m.to_json());
  CHECK_NOTHROW(back.validate(cfg));

  auto dup = m;
  dup.weight_map.push_back(m.weight_map.front());
  CHECK_THROWS_AS(dup.validate(cfg), DataError);
  auto missing = m;
  missing.weight_map.pop_back();
  CHECK_THROWS_AS(missing.validate(cfg), DataError);
  auto extra = m;
  extra.weight_map.push_back({"blocks.9.attn.W_Q", "x", ""});
  CHECK_THROWS_AS(extra.validate(cfg), DataError);
  CHECK_THROWS_AS(ExportManifest::from_json(nlohmann::json::object()), DataError);
}

TEST_CASE("golden parity against an export directory") {
  const Tokenizer tok = train_bpe("hello there rather longer prompt", 10);
  const auto model = make_toy_model(oracle::small_config(2, tok.vocab_size()), 3);
  const fs::path dir = fs::temp_directory_path() / "repmech_export_ok";
  fs::remove_all(dir);
  const auto m = fake_export(dir, model, tok);

  const auto rep = check_golden_parity(dir);
  CHECK(rep.passed());
  REQUIRE(rep.prompts.size() == 3);
  CHECK(rep.prompts[0].max_abs_diff == 0.0);
  CHECK(rep.prompts[1].positions == 1);
  CHECK(rep.prompts[2].positions == 8);

  auto golden = load_archive(dir / m.golden_file).tensors();
  golden[golden_key("a")].at(0, 3) += 2e-3f;
  CHECK_FALSE(check_golden_parity(model, tok, m, golden).passed());

  auto wrong_ids = m;
  wrong_ids.golden_prompts[0].tokens.push_back(0);
  const auto tok_rep = check_golden_parity(model, tok, wrong_ids, load_archive(dir / m.golden_file).tensors());
  CHECK_FALSE(tok_rep.prompts[0].tokens_match);
  CHECK_FALSE(tok_rep.passed());

  golden.erase(golden_key("b"));
  CHECK_THROWS_AS(check_golden_parity(model, tok, m, golden), DataError);
  fs::remove_all(dir);
}

}  // TEST_SUITE
