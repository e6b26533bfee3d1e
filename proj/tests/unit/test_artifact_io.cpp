#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "oracles.hpp"
#include "repmech/direction_set.hpp"
#include "repmech/errors.hpp"
#include "repmech/io.hpp"
#include "repmech/tokenizer.hpp"

using namespace repmech;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "repmech_unit";
  fs::create_directories(dir);
  return dir / name;
}

// Hand-assembled archive bytes: magic, u64 LE header length, header, zero
// padding to 64, payload.
std::string raw_archive(const std::string& header, const std::string& payload) {
  std::string out = "RTA1";
  std::uint64_t n = header.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((n >> (8 * i)) & 0xff));
  out += header;
  while (out.size() % 64) out.push_back('\0');
  return out + payload;
}

std::string floats(std::initializer_list<float> v) {
  std::string s(v.size() * 4, '\0');
  std::memcpy(s.data(), v.begin(), s.size());
  return s;
}

std::int64_t parse_error_byte(std::string_view bytes) {
  try {
    parse_archive(bytes);
  } catch (const ParseError& e) {
    return e.byte();
  }
  return -2;
}

}  // namespace

TEST_SUITE("artifact-io") {

TEST_CASE("archive round trip") {
  std::map<std::string, Tensor> t;
  t["a"] = Tensor::matrix(2, 2, {1.5f, -2.0f, 3.25f, 1e-30f});
  t["b.c"] = Tensor({3, 1, 2}, {0, 1, 2, 3, 4, 5});
  const auto path = scratch("round.rta");
  save_archive(t, path);
  const auto back = load_archive(path).tensors();
  REQUIRE(back.size() == 2);
  for (const auto& [name, tensor] : t) CHECK(back.at(name).bitwise_equal(tensor));
  // Saving is deterministic.
  CHECK(serialize_archive(t) == serialize_archive(back));
}

TEST_CASE("archive layout follows the fixed format") {
  std::map<std::string, Tensor> t;
  t["x"] = Tensor::vector({1, 2, 3});
  t["y"] = Tensor::vector({4});
  const std::string bytes = serialize_archive(t);
  CHECK(bytes.substr(0, 4) == "RTA1");
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[4 + i])) << (8 * i);
  const auto header = nlohmann::json::parse(bytes.substr(12, hlen));
  CHECK(header["x"]["dtype"] == "f32");
  CHECK(header["x"]["length"] == 12);
  for (const auto& [name, e] : header.items()) CHECK(e["offset"].get<std::uint64_t>() % 64 == 0);
  const std::size_t payload = ((12 + hlen + 63) / 64) * 64;
  float y;
  std::memcpy(&y, bytes.data() + payload + header["y"]["offset"].get<std::size_t>(), 4);
  CHECK(y == 4.0f);
}

TEST_CASE("empty archive") {
  const auto bytes = serialize_archive({});
  CHECK(parse_archive(bytes).tensors().empty());
}

TEST_CASE("truncated payload reports the file end") {
  std::map<std::string, Tensor> t;
  t["w"] = Tensor({4, 16});
  t["v"] = Tensor({8});
  const std::string bytes = serialize_archive(t);
  for (std::size_t cut : {bytes.size() - 1, bytes.size() - 100, bytes.size() - 200}) {
    const std::string sliced = bytes.substr(0, cut);
    CHECK(parse_error_byte(sliced) == static_cast<std::int64_t>(cut));
  }
}

TEST_CASE("distinct archive errors") {
  const std::string one = floats({1.0f});
  CHECK(parse_error_byte("XXXX" + raw_archive("{}", "").substr(4)) == 0);
  CHECK(parse_error_byte("RTA") == 3);
  CHECK_THROWS_WITH_AS(parse_archive(raw_archive(R"({"a":{"dtype":"f16","shape":[1],"offset":0,"length":4}})", one)),
                       doctest::Contains("unknown dtype"), ParseError);
  CHECK_THROWS_WITH_AS(parse_archive(raw_archive(R"({"a":{"dtype":"f32","shape":[1],"offset":4,"length":4}})", one + one)),
                       doctest::Contains("aligned"), ParseError);
  const std::string pay(128, '\0');
  CHECK_THROWS_WITH_AS(parse_archive(raw_archive(R"({"a":{"dtype":"f32","shape":[32],"offset":0,"length":128},)"
                                                 R"("b":{"dtype":"f32","shape":[1],"offset":64,"length":4}})", pay)),
                       doctest::Contains("overlap"), ParseError);
  CHECK_THROWS_WITH_AS(parse_archive(raw_archive(R"({"a":{"dtype":"f32","shape":[2],"offset":0,"length":4}})", one)),
                       doctest::Contains("length"), ParseError);
  CHECK_THROWS_WITH_AS(parse_archive(raw_archive(R"({"a":{"dtype":"f32","shape":[1],"offset":0,"length":4,"x":1}})", one)),
                       doctest::Contains("unknown field"), ParseError);
  CHECK_THROWS_AS(parse_archive(raw_archive(R"({"a":)", one)), ParseError);
  const float inf = std::numeric_limits<float>::infinity();
  std::string bad(4, '\0');
  std::memcpy(bad.data(), &inf, 4);
  CHECK_THROWS_AS(parse_archive(raw_archive(R"({"a":{"dtype":"f32","shape":[1],"offset":0,"length":4}})", bad)), ParseError);
}

TEST_CASE("parser survives random corruption") {
  std::map<std::string, Tensor> t;
  t["w"] = Tensor({3, 5});
  const std::string good = serialize_archive(t);
  Rng rng(17);
  for (int i = 0; i < 300; ++i) {
    std::string b = good;
    const std::size_t flips = 1 + rng.below(4);
    for (std::size_t f = 0; f < flips; ++f) b[rng.below(b.size())] = static_cast<char>(rng.below(256));
    try {
      parse_archive(b);
    } catch (const ParseError& e) {
      CHECK(e.byte() >= 0);
    }
  }
}

TEST_CASE("model save and load round trip") {
  ModelConfig cfg = oracle::small_config(2);
  cfg.use_bias = true;
  const auto model = make_toy_model(cfg, 4);
  const auto a = scratch("model.rta"), c = scratch("model.json");
  save_model(model, a, c);
  const auto back = load_model(a, c);
  CHECK(back.hash() == model.hash());
  for (const auto& [name, w] : model.weights()) CHECK(back.weight(name).bitwise_equal(w));
}

TEST_CASE("tokenizer merge order") {
  std::map<std::string, TokenId> vocab{{"a", 0}, {"b", 1}, {"ab", 2}};
  const Tokenizer tok(vocab, {{"a", "b"}});
  CHECK(tok.encode("ab") == std::vector<TokenId>{2});
  CHECK(tok.encode("ba") == std::vector<TokenId>{1, 0});
  CHECK_THROWS_AS(tok.decode(std::vector<TokenId>{3}), VocabularyError);
  CHECK_THROWS(Tokenizer({{"a", 0}, {"b", 2}}, {}));
  CHECK_THROWS(Tokenizer({{"a", 0}, {"b", 1}}, {{"a", "b"}}));
}

TEST_CASE("tokenizer merges apply by rank, not position") {
  // "abc" with ranks (b,c) < (a,b) must merge bc first.
  std::map<std::string, TokenId> vocab{{"a", 0}, {"b", 1}, {"c", 2}, {"bc", 3}, {"ab", 4}};
  const Tokenizer tok(vocab, {{"b", "c"}, {"a", "b"}});
  CHECK(tok.encode("abc") == std::vector<TokenId>{0, 3});
}

TEST_CASE("trained tokenizer round trips text and random bytes") {
  const std::string corpus = "hello world, hello there. the world is wide and the hello is loud.\n";
  const Tokenizer tok = train_bpe(corpus, 40);
  CHECK(tok.vocab_size() > 256);
  CHECK(tok.decode(tok.encode("hello world")) == "hello world");
  CHECK(tok.encode("hello world").size() < std::string("hello world").size());
  Rng rng(2024);
  int bad = 0;
  for (int i = 0; i < 1000; ++i) {
    std::string s(rng.below(40), '\0');
    for (auto& c : s) c = static_cast<char>(rng.below(256));
    if (tok.decode(tok.encode(s)) != s) ++bad;
  }
  CHECK(bad == 0);
  CHECK(tok.encode("the world") == tok.encode("the world"));
}

TEST_CASE("tokenizer files round trip") {
  const Tokenizer tok = train_bpe("aaab aaab abab cdcd cdcd", 10);
  const auto v = scratch("vocab.json"), m = scratch("merges.txt");
  tok.save(v, m);
  const Tokenizer back = Tokenizer::load(v, m);
  CHECK(back.vocab_size() == tok.vocab_size());
  CHECK(back.merges() == tok.merges());
  for (const auto* s : {"aaab cdcd", "zzz", "ab ab"}) CHECK(back.encode(s) == tok.encode(s));
  CHECK(back.eos().has_value());
}

TEST_CASE("pretokenizer covers the input") {
  const std::string text = "Hello,  world's 42 tests\n\tdone!";
  std::string joined;
  for (auto p : pretokenize(text)) joined += p;
  CHECK(joined == text);
}

TEST_CASE("bundled stimuli include the steering prompts") {
  const auto recs = load_stimuli(fs::path(REPMECH_DATA_DIR) / "stimuli.jsonl");
  CHECK(recs.size() >= 8);
  bool found = false;
  for (const auto& r : recs) found |= r.instruction.rfind("I took credit for my colleague's work", 0) == 0;
  CHECK(found);
  CHECK_NOTHROW(load_templates(fs::path(REPMECH_DATA_DIR) / "templates.json").validate());
}

TEST_CASE("stimuli parsing") {
  CHECK(parse_stimuli("").empty());
  CHECK(parse_stimuli("\n\n").empty());
  const auto r = parse_stimuli(R"({"id":"a","instruction":"q","response":"r","label":"dishonest"})");
  REQUIRE(r.size() == 1);
  CHECK(r[0].label == Label::kDishonest);
  const std::string two = "{\"id\":\"a\",\"instruction\":\"q\",\"response\":\"r\"}\n"
                          "{\"id\":\"b\",\"instruction\":\"q\",\"response\":\"r\",\"extra\":1}\n";
  try {
    parse_stimuli(two);
    FAIL("expected parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  CHECK_THROWS_AS(parse_stimuli("{\"id\":\"a\",\"instruction\":\"q\",\"response\":\"r\"}\nnot json"), ParseError);
  CHECK_THROWS_AS(parse_stimuli(R"({"id":"a","instruction":"","response":"r"})"), ParseError);
  CHECK_THROWS_AS(parse_stimuli(R"({"id":"a","instruction":"q","response":"r","label":"maybe"})"), ParseError);
}

TEST_CASE("templates") {
  const auto t = parse_templates(R"({"positive":"P {q} :: {a}","negative":"N {q} :: {a}"})");
  CHECK(t.render_positive("Q?", "A.") == "P Q? :: A.");
  CHECK(t.render_negative("{a}", "x") == "N {a} :: x");
  CHECK_THROWS_AS(parse_templates(R"({"positive":"P {q}","negative":"N {q} {a}"})"), TemplateError);
  CHECK_THROWS_AS(parse_templates(R"({"positive":"{q}{q}{a}","negative":"N {q} {a}"})"), TemplateError);
  CHECK_THROWS_AS(parse_templates(R"({"positive":"{q}{a}","negative":"{q}{a}","other":""})"), ParseError);
}

TEST_CASE("direction set round trip") {
  Rng rng(5);
  DirectionSet ds;
  ds.method = DirectionMethod::kMassMean;
  ds.model_hash = "abc";
  for (int l = 0; l < 3; ++l) ds.dirs.push_back(oracle::random_unit(rng, 16));
  const auto p = scratch("dirs.rta");
  save_directions(ds, p);
  CHECK(fs::exists(direction_sidecar_path(p)));
  const auto back = load_directions(p);
  CHECK(back.dirs == ds.dirs);
  CHECK(back.method == ds.method);
  CHECK(back.model_hash == "abc");
  CHECK(back.behavior == "dishonesty");
  DirectionSet bad = ds;
  bad.dirs[1][0] += 0.5f;
  CHECK_THROWS_AS(bad.validate(), DataError);
}

}  // TEST_SUITE
