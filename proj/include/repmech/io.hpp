#pragma once

// File formats: the tensor archive, model directories, stimuli, templates,
// and direction files.
//
// Tensor archive layout (all integers little-endian):
//   bytes 0..3    magic "RTA1"
//   bytes 4..11   u64 header length H
//   bytes 12..    H bytes of UTF-8 JSON:
//                 {"name": {"dtype": "f32", "shape": [...], "offset": o, "length": n}, ...}
//   zero padding up to the next 64-byte boundary (payload start)
//   payload; each tensor's offset is relative to the payload start, 64-byte
//   aligned, and n == 4 * numel(shape).

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "repmech/direction_set.hpp"
#include "repmech/model.hpp"
#include "repmech/tensor.hpp"

namespace repmech {

struct ArchiveEntry {
  std::string dtype;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

class TensorArchive {
 public:
  TensorArchive() = default;
  TensorArchive(std::map<std::string, ArchiveEntry> header, std::string payload)
      : header_(std::move(header)), payload_(std::move(payload)) {}

  const std::map<std::string, ArchiveEntry>& header() const noexcept { return header_; }
  bool contains(const std::string& name) const { return header_.count(name) > 0; }
  Tensor tensor(const std::string& name) const;
  std::map<std::string, Tensor> tensors() const;

 private:
  std::map<std::string, ArchiveEntry> header_;
  std::string payload_;
};

constexpr std::size_t kArchiveAlign = 64;

// Throws ParseError (with byte position) on any malformed input.
TensorArchive parse_archive(std::string_view bytes);
TensorArchive load_archive(const std::filesystem::path& path);
std::string serialize_archive(const std::map<std::string, Tensor>& tensors);
void save_archive(const std::map<std::string, Tensor>& tensors, const std::filesystem::path& path);

// A model is an archive of weights plus a config JSON file.
ModelBundle load_model(const std::filesystem::path& archive_path, const std::filesystem::path& config_path);
void save_model(const ModelBundle& model, const std::filesystem::path& archive_path,
                const std::filesystem::path& config_path);

enum class Label { kNone, kHonest, kDishonest, kTrue, kFalse };
std::string to_string(Label l);
// honest/true are the positive class.
inline bool is_positive(Label l) { return l == Label::kHonest || l == Label::kTrue; }

struct StimulusRecord {
  std::string id;
  std::string instruction;
  std::string response;
  Label label = Label::kNone;
};

// JSONL with keys {id, instruction, response, label?}. Blank lines are
// skipped; anything else malformed raises ParseError with the line number.
std::vector<StimulusRecord> parse_stimuli(std::string_view text);
std::vector<StimulusRecord> load_stimuli(const std::filesystem::path& path);

// Text templates with one {q} and one {a} placeholder each.
struct TemplatePair {
  std::string positive;
  std::string negative;
  std::string description;

  void validate() const;  // TemplateError
  std::string render_positive(std::string_view q, std::string_view a) const;
  std::string render_negative(std::string_view q, std::string_view a) const;
};

std::string render_template(std::string_view tmpl, std::string_view q, std::string_view a);
TemplatePair parse_templates(std::string_view json_text);
TemplatePair load_templates(const std::filesystem::path& path);

// Archive with dir.layer.{l} vectors plus a JSON sidecar next to it
// (same stem, ".json").
std::filesystem::path direction_sidecar_path(const std::filesystem::path& archive_path);
void save_directions(const DirectionSet& ds, const std::filesystem::path& archive_path);
DirectionSet load_directions(const std::filesystem::path& archive_path);

}  // namespace repmech
