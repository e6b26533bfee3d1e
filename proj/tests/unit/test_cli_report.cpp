#include <doctest.h>

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <regex>

#include <json.hpp>

#include "repmech/analysis.hpp"
#include "repmech/cli.hpp"
#include "repmech/errors.hpp"
#include "repmech/io.hpp"
#include "repmech/report.hpp"
#include "repmech/util.hpp"

using namespace repmech;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("repmech_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::string> fills(const std::string& svg) {
  std::vector<std::string> out;
  const std::regex re("<rect x=[^>]*fill=\"(#[0-9a-f]{6})\"");
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), re); it != std::sregex_iterator(); ++it) {
    out.push_back((*it)[1]);
  }
  return out;
}

// A 2-layer toy model and its directions, built once through the CLI from a
// small slice of the bundled stimuli.
struct Workspace {
  fs::path root, model, directions;

  Workspace() {
    root = fresh_dir("ws");
    std::ifstream in(fs::path(REPMECH_DATA_DIR) / "stimuli.jsonl");
    std::ofstream out(root / "stimuli.jsonl");
    std::string line;
    for (int i = 0; i < 2 && std::getline(in, line); ++i) out << line << "\n";
    out.close();
    const std::string stim = (root / "stimuli.jsonl").string();
    REQUIRE(cli_main({"init-toy", "--out", (root / "m").string(), "--stimuli", stim, "--n-layers", "2",
                      "--num-merges", "40"}) == 0);
    model = root / "m" / "model.rta";
    REQUIRE(cli_main({"extract-directions", "--out", (root / "d").string(), "--model", model.string(),
                      "--stimuli", stim}) == 0);
    directions = root / "d" / "directions.rta";
  }
};

const Workspace& workspace() {
  static const Workspace ws;
  return ws;
}

json read_json(const fs::path& p) { return json::parse(read_file(p)); }

}  // namespace

TEST_SUITE("cli-report") {

TEST_CASE("heatmap colours") {
  const std::string mid = render_heatmap({{{0.0}}, {"r"}, {"c"}, "t"});
  CHECK(fills(mid) == std::vector<std::string>{"#f7f7f7"});

  const std::string ext = render_heatmap({{{-2.0, 0.0}, {1.0, 2.0}}, {"a", "b"}, {"x", "y"}, "t"});
  CHECK(fills(ext) == std::vector<std::string>{"#053061", "#f7f7f7", "#d6604d", "#67001f"});
  CHECK(palette_index(0.5, 1.0) == 8);
  CHECK(palette_index(-0.5, 1.0) == 3);
  CHECK(palette_index(3.0, 0.0) == 5);
}

TEST_CASE("heatmap output is deterministic and escaped") {
  const HeatmapSpec spec{{{0.25, -1.5}, {3.0, 1e-9}}, {"a<b", "c&d"}, {"x", "\"y\""}, "t"};
  const std::string a = render_heatmap(spec), b = render_heatmap(spec);
  CHECK(a == b);
  CHECK(a.find("a&lt;b") != std::string::npos);
  CHECK(a.find("c&amp;d") != std::string::npos);
  CHECK(a.find("a<b") == std::string::npos);
}

TEST_CASE("heatmap input errors") {
  CHECK_THROWS_AS(render_heatmap({{{1.0, 2.0}}, {"r"}, {"c"}, ""}), UsageError);
  CHECK_THROWS_AS(render_heatmap({{{1.0}}, {"r", "s"}, {"c"}, ""}), UsageError);
  CHECK_THROWS_AS(render_heatmap({{{1.0, 2.0}, {3.0}}, {"r", "s"}, {"c", "d"}, ""}), UsageError);
  CHECK_THROWS_AS(render_heatmap({{}, {}, {}, ""}), UsageError);
  CHECK_THROWS_AS(render_heatmap({{{NAN}}, {"r"}, {"c"}, ""}), DataError);
}

TEST_CASE("numbers print in shortest round-trip form") {
  for (double v : {0.0, 1.0, -2.5, 0.1, 1.0 / 3.0, 6.02214076e23, -1e-300}) {
    const std::string s = format_number(v);
    double back = 0;
    std::from_chars(s.data(), s.data() + s.size(), back);
    CHECK(back == v);
  }
  CHECK(format_number(0.1) == "0.1");
}

TEST_CASE("csv quoting") {
  CsvTable t{{"name", "value"}, {{"plain", "1"}, {"with,comma", "say \"hi\""}}};
  CHECK(t.render() == "name,value\nplain,1\n\"with,comma\",\"say \"\"hi\"\"\"\n");
}

TEST_CASE("usage errors exit with 1") {
  CHECK(cli_main(std::vector<std::string>{}) == 1);
  CHECK(cli_main({"no-such-command"}) == 1);
  CHECK(cli_main({"cosine-map", "--out", fresh_dir("usage").string()}) == 1);
  CHECK(cli_main({"selftest", "--bogus"}) == 1);
}

TEST_CASE("missing or malformed inputs exit with 2") {
  const fs::path out = fresh_dir("missing");
  CHECK(cli_main({"cosine-map", "--out", out.string(), "--directions", (out / "nope.rta").string()}) == 2);
  write_file(out / "bad.rta", "not an archive");
  CHECK(cli_main({"cosine-map", "--out", out.string(), "--directions", (out / "bad.rta").string()}) == 2);
  write_file(out / "bad.json", "{");
  CHECK(cli_main({"selftest", "--config", (out / "bad.json").string()}) == 2);
}

TEST_CASE("selftest passes") {
  const fs::path out = fresh_dir("selftest");
  CHECK(cli_main({"selftest", "--out", out.string()}) == 0);
  const auto j = read_json(out / "selftest.json");
  for (const auto& c : j) CHECK_MESSAGE(c["passed"].get<bool>(), c["name"].get<std::string>());
  for (const auto& c : run_selftest(7)) CHECK_MESSAGE(c.passed, (c.name + ": " + c.detail));
}

TEST_CASE("patch scalar equals the library call") {
  const auto& ws = workspace();
  const fs::path out = fresh_dir("patch");
  REQUIRE(cli_main({"patch", "--out", out.string(), "--model", ws.model.string(), "--directions",
                    ws.directions.string(), "--layer", "0", "--alpha", "6", "--sites", "mlp.1", "--prompt",
                    "Tell me about the credit report"}) == 0);
  const auto j = read_json(out / "patch.json");

  const auto model = load_model(ws.model, ws.model.parent_path() / "config.json");
  const auto tok = Tokenizer::load(ws.model.parent_path() / "vocab.json", ws.model.parent_path() / "merges.txt");
  const auto ds = load_directions(ws.directions);
  const auto ids = tok.encode("Tell me about the credit report");
  const auto want = run_patch(model, ids, InjectionSpec::from_directions(ds, 0, 6.0f), {{ComponentId::mlp_out(1)}});
  CHECK(j["prompts"][0]["kl_recovery"].get<double>() == want.kl_recovery);
  CHECK(j["mean_score"].get<double>() == want.score);
  CHECK(want.kl_recovery != 0.0);

  const auto m = read_json(out / "manifest.json");
  CHECK(m["command"] == "patch");
  CHECK(m["model_hash"] == model.hash());
  CHECK_FALSE(m["args"].contains("out"));
  CHECK_FALSE(m["args"].contains("workers"));
  CHECK(m["args"]["sites"] == "mlp.1");
  CHECK(m["outputs"].contains("patch.json"));
}

TEST_CASE("config file supplies flags and the command line wins") {
  const auto& ws = workspace();
  const fs::path a = fresh_dir("cfg_a"), b = fresh_dir("cfg_b"), c = fresh_dir("cfg_c");
  const std::vector<std::string> base{"--model", ws.model.string(), "--directions", ws.directions.string(),
                                      "--sites", "attn.1", "--prompt", "Is the sky green?"};
  auto with = [&](std::vector<std::string> head, std::vector<std::string> tail) {
    head.insert(head.end(), base.begin(), base.end());
    head.insert(head.end(), tail.begin(), tail.end());
    return head;
  };
  REQUIRE(cli_main(with({"patch", "--out", a.string()}, {"--alpha", "3", "--layer", "0"})) == 0);
  write_file(b / "cfg.json", R"({"patch.alpha": 3, "layer": 0})");
  REQUIRE(cli_main(with({"patch", "--out", b.string()}, {"--config", (b / "cfg.json").string()})) == 0);
  CHECK(read_file(a / "patch.json") == read_file(b / "patch.json"));

  write_file(c / "cfg.json", R"({"alpha": 100, "layer": 0})");
  REQUIRE(cli_main(with({"patch", "--out", c.string()}, {"--config", (c / "cfg.json").string(), "--alpha", "3"})) == 0);
  CHECK(read_file(a / "patch.json") == read_file(c / "patch.json"));
}

TEST_CASE("outputs do not depend on worker count") {
  const auto& ws = workspace();
  const fs::path a = fresh_dir("w1"), b = fresh_dir("w3");
  for (const auto& [dir, w] : {std::pair{a, "1"}, std::pair{b, "3"}}) {
    REQUIRE(cli_main({"patch-heads", "--out", dir.string(), "--workers", w, "--model", ws.model.string(),
                      "--directions", ws.directions.string(), "--layer", "0", "--prompt", "one", "--prompt",
                      "two words"}) == 0);
  }
  for (const auto& f : {"patch_heads.csv", "patch_heads.json", "patch_heads_denoise.svg", "manifest.json"}) {
    CHECK_MESSAGE(read_file(a / f) == read_file(b / f), f);
  }
}

TEST_CASE("cosine map command") {
  const auto& ws = workspace();
  const fs::path out = fresh_dir("cos");
  REQUIRE(cli_main({"cosine-map", "--out", out.string(), "--directions", ws.directions.string()}) == 0);
  const std::string csv = read_file(out / "cosine_map.csv");
  CHECK(csv.find("layer") != std::string::npos);
  CHECK(fs::exists(out / "cosine_map.svg"));
  const auto m = read_json(out / "manifest.json");
  CHECK(m.contains("directions_hash"));
}

}  // TEST_SUITE
