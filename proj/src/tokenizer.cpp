#include "repmech/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <climits>
#include <cstdio>
#include <limits>
#include <set>

#include <json.hpp>

#include "repmech/errors.hpp"
#include "repmech/util.hpp"

namespace repmech {

namespace {

std::string utf8(std::uint32_t cp) {
  std::string s;
  if (cp < 0x80) {
    s.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
  return s;
}

struct ByteTable {
  std::array<std::string, 256> to_symbol;
  std::unordered_map<std::string, unsigned char> to_byte;

  ByteTable() {
    std::array<bool, 256> direct{};
    for (int b = '!'; b <= '~'; ++b) direct[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) direct[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) direct[b] = true;
    std::uint32_t next = 256;
    for (int b = 0; b < 256; ++b) {
      const std::uint32_t cp = direct[b] ? static_cast<std::uint32_t>(b) : next++;
      to_symbol[b] = utf8(cp);
      to_byte.emplace(to_symbol[b], static_cast<unsigned char>(b));
    }
  }
};

const ByteTable& table() {
  static const ByteTable t;
  return t;
}

// Length of the UTF-8 sequence starting with lead byte `c` (1 for invalid).
std::size_t utf8_len(unsigned char c) {
  if (c >= 0xF0) return 4;
  if (c >= 0xE0) return 3;
  if (c >= 0xC0) return 2;
  return 1;
}

std::vector<std::string> split_symbols(const std::string& s) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < s.size();) {
    const std::size_t n = std::min(utf8_len(static_cast<unsigned char>(s[i])), s.size() - i);
    out.push_back(s.substr(i, n));
    i += n;
  }
  return out;
}

bool is_special_name(const std::string& s) {
  if (s == "<s>" || s == "</s>" || s == "<unk>" || s == "<pad>") return true;
  return s.size() > 4 && s.rfind("<|", 0) == 0 && s.compare(s.size() - 2, 2, "|>") == 0;
}

// "<0xAB>" -> 0xAB
std::optional<unsigned char> fallback_byte(const std::string& s) {
  if (s.size() != 6 || s.compare(0, 3, "<0x") != 0 || s[5] != '>') return std::nullopt;
  unsigned v = 0;
  for (int i = 3; i < 5; ++i) {
    const char c = s[i];
    v <<= 4;
    if (c >= '0' && c <= '9') {
      v |= static_cast<unsigned>(c - '0');
    } else if (c >= 'A' && c <= 'F') {
      v |= static_cast<unsigned>(c - 'A' + 10);
    } else {
      return std::nullopt;
    }
  }
  return static_cast<unsigned char>(v);
}

enum class CharClass { kLetter, kDigit, kSpace, kOther };

CharClass classify(unsigned char c) {
  if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80) return CharClass::kLetter;
  if (c >= '0' && c <= '9') return CharClass::kDigit;
  if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') return CharClass::kSpace;
  return CharClass::kOther;
}

}  // namespace

const std::string& byte_to_symbol(unsigned char b) { return table().to_symbol[b]; }

std::vector<std::string_view> pretokenize(std::string_view s) {
  std::vector<std::string_view> out;
  const std::size_t n = s.size();
  auto cls = [&](std::size_t i) { return classify(static_cast<unsigned char>(s[i])); };
  std::size_t i = 0;
  while (i < n) {
    if (s[i] == '\'') {
      bool matched = false;
      for (const char* c : {"s", "t", "re", "ve", "m", "ll", "d"}) {
        const std::string_view suf(c);
        if (s.substr(i + 1, suf.size()) == suf) {
          out.push_back(s.substr(i, 1 + suf.size()));
          i += 1 + suf.size();
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    std::size_t j = i;
    if (s[j] == ' ' && j + 1 < n && cls(j + 1) != CharClass::kSpace) ++j;
    if (cls(j) != CharClass::kSpace) {
      const CharClass c = cls(j);
      std::size_t k = j + 1;
      while (k < n && cls(k) == c) ++k;
      out.push_back(s.substr(i, k - i));
      i = k;
      continue;
    }
    std::size_t k = i;
    while (k < n && cls(k) == CharClass::kSpace) ++k;
    if (k < n && k - i > 1) --k;  // leave the last space for the next word
    out.push_back(s.substr(i, k - i));
    i = k;
  }
  return out;
}

Tokenizer::Tokenizer(std::map<std::string, TokenId> vocab, std::vector<Merge> merges, bool byte_fallback)
    : merges_(std::move(merges)), byte_fallback_(byte_fallback) {
  id_to_token_.assign(vocab.size(), std::string());
  std::vector<bool> seen(vocab.size(), false);
  for (auto& [tok, id] : vocab) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size() || seen[id]) {
      throw DataError("vocabulary ids must be dense and unique in [0, " + std::to_string(vocab.size()) + "); bad id " +
                      std::to_string(id) + " for '" + tok + "'");
    }
    seen[id] = true;
    id_to_token_[id] = tok;
    vocab_.emplace(tok, id);
    if (tok == "<|endoftext|>") {
      bos_ = id;
      eos_ = id;
    } else if (tok == "<s>") {
      bos_ = id;
    } else if (tok == "</s>") {
      eos_ = id;
    }
  }
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const auto& [a, b] = merges_[r];
    if (!vocab_.count(a) || !vocab_.count(b) || !vocab_.count(a + b)) {
      throw DataError("merge " + std::to_string(r) + " ('" + a + "' '" + b + "') references symbols outside the vocabulary");
    }
    ranks_.emplace(merges_[r], r);
  }
}

Tokenizer Tokenizer::load(const std::filesystem::path& vocab_path, const std::filesystem::path& merges_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(vocab_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError::at_byte(static_cast<std::int64_t>(e.byte), "vocab.json is not valid JSON");
  }
  if (!j.is_object()) throw ParseError::at_byte(0, "vocab.json must map token strings to ids");
  std::map<std::string, TokenId> vocab;
  for (const auto& [tok, id] : j.items()) {
    if (!id.is_number_integer()) throw ParseError::at_byte(0, "vocab.json id for '" + tok + "' is not an integer");
    vocab.emplace(tok, id.get<TokenId>());
  }

  const std::string text = read_file(merges_path);
  std::vector<Merge> merges;
  std::vector<std::int64_t> merge_lines;
  std::size_t start = 0;
  std::int64_t line_no = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (line_no == 1 && line.rfind("#version", 0) == 0)) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size() || line.find(' ', sp + 1) != std::string::npos) {
      throw ParseError::at_line(line_no, "merge line must hold exactly two symbols");
    }
    merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    merge_lines.push_back(line_no);
  }
  for (std::size_t r = 0; r < merges.size(); ++r) {
    const auto& [a, b] = merges[r];
    if (!vocab.count(a) || !vocab.count(b) || !vocab.count(a + b)) {
      throw ParseError::at_line(merge_lines[r], "merge '" + a + " " + b + "' references symbols outside the vocabulary");
    }
  }
  bool byte_fallback = false;
  for (const auto& [tok, _] : vocab) byte_fallback = byte_fallback || fallback_byte(tok).has_value();
  return Tokenizer(std::move(vocab), std::move(merges), byte_fallback);
}

void Tokenizer::save(const std::filesystem::path& vocab_path, const std::filesystem::path& merges_path) const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (std::size_t id = 0; id < id_to_token_.size(); ++id) j[id_to_token_[id]] = id;
  write_file(vocab_path, j.dump() + "\n");
  std::string m = "#version: 0.2\n";
  for (const auto& [a, b] : merges_) m += a + " " + b + "\n";
  write_file(merges_path, m);
}

void Tokenizer::encode_word(std::string_view word, std::vector<TokenId>& out) const {
  std::vector<std::string> syms;
  syms.reserve(word.size());
  for (char c : word) syms.push_back(byte_to_symbol(static_cast<unsigned char>(c)));

  while (syms.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    std::size_t best_i = 0;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      auto it = ranks_.find({syms[i], syms[i + 1]});
      if (it != ranks_.end() && it->second < best_rank) {
        best_rank = it->second;
        best_i = i;
      }
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    const Merge pair{syms[best_i], syms[best_i + 1]};
    std::vector<std::string> next;
    next.reserve(syms.size());
    for (std::size_t i = 0; i < syms.size();) {
      if (i + 1 < syms.size() && syms[i] == pair.first && syms[i + 1] == pair.second) {
        next.push_back(pair.first + pair.second);
        i += 2;
      } else {
        next.push_back(std::move(syms[i]));
        ++i;
      }
    }
    syms.swap(next);
  }

  for (const auto& s : syms) {
    auto it = vocab_.find(s);
    if (it != vocab_.end()) {
      out.push_back(it->second);
      continue;
    }
    bool ok = byte_fallback_;
    if (ok) {
      for (const auto& ch : split_symbols(s)) {
        char name[7];
        std::snprintf(name, sizeof(name), "<0x%02X>", table().to_byte.at(ch));
        auto fb = vocab_.find(name);
        if (fb == vocab_.end()) {
          ok = false;
          break;
        }
        out.push_back(fb->second);
      }
    }
    if (!ok) throw VocabularyError("symbol '" + s + "' is not in the vocabulary and has no byte fallback");
  }
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (auto word : pretokenize(text)) encode_word(word, ids);
  return ids;
}

const std::string& Tokenizer::token_string(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(id_to_token_.size()));
  }
  return id_to_token_[id];
}

std::string Tokenizer::token_bytes(TokenId id) const {
  const std::string& tok = token_string(id);
  if (is_special_name(tok)) return {};
  if (byte_fallback_) {
    if (auto b = fallback_byte(tok)) return std::string(1, static_cast<char>(*b));
  }
  std::string out;
  for (const auto& ch : split_symbols(tok)) {
    auto it = table().to_byte.find(ch);
    if (it == table().to_byte.end()) {
      out += ch;
    } else {
      out.push_back(static_cast<char>(it->second));
    }
  }
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (auto id : ids) out += token_bytes(id);
  return out;
}

Tokenizer train_bpe(std::string_view corpus, std::size_t num_merges) {
  std::map<std::string, std::size_t> word_counts;
  for (auto w : pretokenize(corpus)) ++word_counts[std::string(w)];

  std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
  for (const auto& [w, c] : word_counts) {
    std::vector<std::string> syms;
    for (char ch : w) syms.push_back(byte_to_symbol(static_cast<unsigned char>(ch)));
    words.emplace_back(std::move(syms), c);
  }

  std::map<std::string, TokenId> vocab;
  for (int b = 0; b < 256; ++b) vocab.emplace(byte_to_symbol(static_cast<unsigned char>(b)), b);
  std::vector<Tokenizer::Merge> merges;

  for (std::size_t m = 0; m < num_merges; ++m) {
    std::map<Tokenizer::Merge, std::size_t> pair_counts;
    for (const auto& [syms, c] : words) {
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) pair_counts[{syms[i], syms[i + 1]}] += c;
    }
    const Tokenizer::Merge* best = nullptr;
    std::size_t best_count = 0;
    for (const auto& [pair, c] : pair_counts) {
      if (c > best_count) {
        best = &pair;
        best_count = c;
      }
    }
    if (!best || best_count < 2) break;
    const Tokenizer::Merge pair = *best;
    merges.push_back(pair);
    const std::string joined = pair.first + pair.second;
    if (!vocab.count(joined)) vocab.emplace(joined, static_cast<TokenId>(vocab.size()));
    for (auto& [syms, c] : words) {
      std::vector<std::string> next;
      for (std::size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && syms[i] == pair.first && syms[i + 1] == pair.second) {
          next.push_back(joined);
          i += 2;
        } else {
          next.push_back(syms[i]);
          ++i;
        }
      }
      syms.swap(next);
    }
  }
  vocab.emplace("<|endoftext|>", static_cast<TokenId>(vocab.size()));
  return Tokenizer(std::move(vocab), std::move(merges));
}

}  // namespace repmech
