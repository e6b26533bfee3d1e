#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "repmech/engine.hpp"

namespace repmech {

// GPT-2 style byte-level BPE.
//
// Text is split into pre-tokens with the GPT-2 pattern (contractions, an
// optional leading space plus a run of letters / digits / other symbols,
// whitespace runs). Character classes are evaluated per byte: ASCII letters
// and every byte >= 0x80 count as letters. Each pre-token's bytes are mapped
// through the GPT-2 byte-to-unicode table and merged by lowest merge rank.
class Tokenizer {
 public:
  using Merge = std::pair<std::string, std::string>;

  // `vocab` ids must be dense in [0, V). Each merge's halves and their
  // concatenation must be in the vocabulary.
  Tokenizer(std::map<std::string, TokenId> vocab, std::vector<Merge> merges, bool byte_fallback = false);

  // vocab.json (token -> id) and merges.txt (one "left right" pair per line,
  // rank = line order, an optional leading "#version" line).
  static Tokenizer load(const std::filesystem::path& vocab_path, const std::filesystem::path& merges_path);
  void save(const std::filesystem::path& vocab_path, const std::filesystem::path& merges_path) const;

  std::vector<TokenId> encode(std::string_view text) const;
  // Special tokens decode to nothing. Throws VocabularyError on bad ids.
  std::string decode(std::span<const TokenId> ids) const;
  // Raw bytes of one token (empty for specials).
  std::string token_bytes(TokenId id) const;

  std::size_t vocab_size() const noexcept { return id_to_token_.size(); }
  const std::string& token_string(TokenId id) const;  // vocabulary form
  std::optional<TokenId> bos() const noexcept { return bos_; }
  std::optional<TokenId> eos() const noexcept { return eos_; }
  bool byte_fallback() const noexcept { return byte_fallback_; }
  const std::vector<Merge>& merges() const noexcept { return merges_; }

 private:
  void encode_word(std::string_view word, std::vector<TokenId>& out) const;

  std::unordered_map<std::string, TokenId> vocab_;
  std::vector<std::string> id_to_token_;
  std::vector<Merge> merges_;
  std::map<Merge, std::size_t> ranks_;
  bool byte_fallback_ = false;
  std::optional<TokenId> bos_, eos_;
};

// Splits text into GPT-2 style pre-tokens (concatenation == input).
std::vector<std::string_view> pretokenize(std::string_view text);

// GPT-2 byte <-> unicode table as UTF-8 strings.
const std::string& byte_to_symbol(unsigned char b);

// Deterministic BPE trainer: repeatedly merges the most frequent adjacent
// pair (ties toward the lexicographically smallest pair) over the corpus's
// pre-tokens. Vocabulary: 256 byte symbols, then merges in order, then
// "<|endoftext|>".
Tokenizer train_bpe(std::string_view corpus, std::size_t num_merges);

}  // namespace repmech
