#include "repmech/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <set>

#include <json.hpp>

#include "repmech/errors.hpp"
#include "repmech/util.hpp"

namespace repmech {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'R', 'T', 'A', '1'};
constexpr std::size_t kPrefix = 12;

std::size_t align_up(std::size_t v) { return (v + kArchiveAlign - 1) / kArchiveAlign * kArchiveAlign; }

}  // namespace

Tensor TensorArchive::tensor(const std::string& name) const {
  auto it = header_.find(name);
  if (it == header_.end()) throw DataError("archive has no tensor '" + name + "'");
  const auto& e = it->second;
  std::vector<float> data(e.length / sizeof(float));
  if (e.length) std::memcpy(data.data(), payload_.data() + e.offset, e.length);
  return Tensor(e.shape, std::move(data));
}

std::map<std::string, Tensor> TensorArchive::tensors() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, _] : header_) out.emplace(name, tensor(name));
  return out;
}

TensorArchive parse_archive(std::string_view bytes) {
  const auto size = static_cast<std::int64_t>(bytes.size());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    if (bytes.size() < 4) throw ParseError::at_byte(size, "truncated archive: missing magic");
    throw ParseError::at_byte(0, "bad archive magic");
  }
  if (bytes.size() < kPrefix) throw ParseError::at_byte(size, "truncated archive: missing header length");
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 4, 8);
  if (hlen > bytes.size() - kPrefix) throw ParseError::at_byte(size, "truncated archive header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(kPrefix, hlen));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError::at_byte(static_cast<std::int64_t>(kPrefix + (e.byte ? e.byte - 1 : 0)),
                              std::string("archive header is not valid JSON: ") + e.what());
  }
  if (!header.is_object()) throw ParseError::at_byte(kPrefix, "archive header must be a JSON object");

  const std::size_t payload_start = align_up(kPrefix + hlen);
  if (payload_start > bytes.size() && !header.empty()) {
    throw ParseError::at_byte(size, "truncated archive: header padding");
  }
  for (std::size_t i = kPrefix + hlen; i < std::min(payload_start, bytes.size()); ++i) {
    if (bytes[i] != '\0') throw ParseError::at_byte(static_cast<std::int64_t>(i), "nonzero header padding");
  }

  std::map<std::string, ArchiveEntry> entries;
  for (const auto& [name, spec] : header.items()) {
    auto bad = [&](const std::string& msg) {
      return ParseError::at_byte(kPrefix, "tensor '" + name + "': " + msg);
    };
    if (!spec.is_object()) throw bad("entry must be an object");
    for (const auto& [key, _] : spec.items()) {
      if (key != "dtype" && key != "shape" && key != "offset" && key != "length") throw bad("unknown field '" + key + "'");
    }
    ArchiveEntry e;
    try {
      e.dtype = spec.at("dtype").get<std::string>();
      e.shape = spec.at("shape").get<Shape>();
      e.offset = spec.at("offset").get<std::uint64_t>();
      e.length = spec.at("length").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& ex) {
      throw bad(std::string("malformed entry: ") + ex.what());
    }
    if (e.dtype != "f32") throw bad("unknown dtype '" + e.dtype + "'");
    for (auto d : e.shape) {
      if (d == 0) throw bad("zero-sized dimension");
    }
    if (e.length != 4 * shape_numel(e.shape)) throw bad("byte length does not match shape");
    if (e.offset % kArchiveAlign != 0) {
      throw ParseError::at_byte(static_cast<std::int64_t>(payload_start + e.offset),
                                "tensor '" + name + "' has misaligned offset " + std::to_string(e.offset));
    }
    entries.emplace(name, std::move(e));
  }

  std::vector<std::pair<std::uint64_t, std::string>> by_offset;
  for (const auto& [name, e] : entries) by_offset.emplace_back(e.offset, name);
  std::sort(by_offset.begin(), by_offset.end());
  for (std::size_t i = 1; i < by_offset.size(); ++i) {
    const auto& prev = entries.at(by_offset[i - 1].second);
    if (prev.offset + prev.length > by_offset[i].first) {
      throw ParseError::at_byte(static_cast<std::int64_t>(payload_start + by_offset[i].first),
                                "tensor '" + by_offset[i].second + "' overlaps '" + by_offset[i - 1].second + "'");
    }
  }
  std::uint64_t payload_len = 0;
  for (const auto& [name, e] : entries) {
    const std::uint64_t end = payload_start + e.offset + e.length;
    if (end > bytes.size()) {
      throw ParseError::at_byte(size, "truncated payload: tensor '" + name + "' ends at byte " + std::to_string(end));
    }
    payload_len = std::max(payload_len, e.offset + e.length);
  }
  std::string payload(bytes.substr(std::min(payload_start, bytes.size()), payload_len));
  TensorArchive archive(std::move(entries), std::move(payload));
  for (const auto& [name, _] : archive.header()) {
    if (!archive.tensor(name).all_finite()) {
      throw ParseError::at_byte(static_cast<std::int64_t>(payload_start + archive.header().at(name).offset),
                                "tensor '" + name + "' has non-finite values");
    }
  }
  return archive;
}

TensorArchive load_archive(const std::filesystem::path& path) { return parse_archive(read_file(path)); }

std::string serialize_archive(const std::map<std::string, Tensor>& tensors) {
  nlohmann::json header = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const std::uint64_t len = t.numel() * sizeof(float);
    header[name] = {{"dtype", "f32"}, {"shape", t.shape()}, {"offset", offset}, {"length", len}};
    offset = align_up(offset + len);
  }
  const std::string hjson = header.dump();
  const std::uint64_t hlen = hjson.size();
  const std::size_t payload_start = align_up(kPrefix + hlen);

  std::string out(kMagic, 4);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((hlen >> (8 * i)) & 0xff));
  out += hjson;
  out.resize(payload_start, '\0');
  for (const auto& [name, t] : tensors) {
    const auto& e = header[name];
    const std::size_t start = payload_start + e["offset"].get<std::uint64_t>();
    out.resize(start, '\0');
    out.append(reinterpret_cast<const char*>(t.data().data()), t.numel() * sizeof(float));
  }
  return out;
}

void save_archive(const std::map<std::string, Tensor>& tensors, const std::filesystem::path& path) {
  write_file(path, serialize_archive(tensors));
}

ModelBundle load_model(const std::filesystem::path& archive_path, const std::filesystem::path& config_path) {
  nlohmann::json cfg_json;
  try {
    cfg_json = nlohmann::json::parse(read_file(config_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError::at_byte(static_cast<std::int64_t>(e.byte), "model config is not valid JSON");
  }
  auto archive = load_archive(archive_path);
  return ModelBundle(ModelConfig::from_json(cfg_json), archive.tensors());
}

void save_model(const ModelBundle& model, const std::filesystem::path& archive_path,
                const std::filesystem::path& config_path) {
  save_archive(model.weights(), archive_path);
  write_file(config_path, model.config().to_json().dump(2) + "\n");
}

std::string to_string(Label l) {
  switch (l) {
    case Label::kNone:
      return "";
    case Label::kHonest:
      return "honest";
    case Label::kDishonest:
      return "dishonest";
    case Label::kTrue:
      return "true";
    case Label::kFalse:
      return "false";
  }
  return "";
}

std::vector<StimulusRecord> parse_stimuli(std::string_view text) {
  std::vector<StimulusRecord> out;
  std::set<std::string> ids;
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;

    const auto ln = static_cast<std::int64_t>(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError::at_line(ln, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError::at_line(ln, "record must be a JSON object");
    for (const auto& [key, _] : j.items()) {
      if (key != "id" && key != "instruction" && key != "response" && key != "label") {
        throw ParseError::at_line(ln, "unknown field '" + key + "'");
      }
    }
    StimulusRecord r;
    auto get_string = [&](const char* key) {
      if (!j.contains(key) || !j[key].is_string()) throw ParseError::at_line(ln, std::string("missing string field '") + key + "'");
      return j[key].get<std::string>();
    };
    r.id = get_string("id");
    r.instruction = get_string("instruction");
    r.response = get_string("response");
    if (r.id.empty()) throw ParseError::at_line(ln, "empty id");
    if (r.instruction.empty()) throw ParseError::at_line(ln, "empty instruction");
    if (j.contains("label") && !j["label"].is_null()) {
      if (!j["label"].is_string()) throw ParseError::at_line(ln, "label must be a string");
      const auto l = j["label"].get<std::string>();
      if (l == "honest") {
        r.label = Label::kHonest;
      } else if (l == "dishonest") {
        r.label = Label::kDishonest;
      } else if (l == "true") {
        r.label = Label::kTrue;
      } else if (l == "false") {
        r.label = Label::kFalse;
      } else {
        throw ParseError::at_line(ln, "unknown label '" + l + "'");
      }
    }
    if (!ids.insert(r.id).second) throw ParseError::at_line(ln, "duplicate id '" + r.id + "'");
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<StimulusRecord> load_stimuli(const std::filesystem::path& path) { return parse_stimuli(read_file(path)); }

namespace {

std::size_t count_of(std::string_view s, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = s.find(needle); pos != std::string_view::npos; pos = s.find(needle, pos + needle.size())) ++n;
  return n;
}

void check_template(std::string_view t, const char* which) {
  for (const char* ph : {"{q}", "{a}"}) {
    const auto n = count_of(t, ph);
    if (n != 1) {
      throw TemplateError(std::string(which) + " template must contain " + ph + " exactly once (found " +
                          std::to_string(n) + ")");
    }
  }
}

}  // namespace

void TemplatePair::validate() const {
  check_template(positive, "positive");
  check_template(negative, "negative");
}

std::string render_template(std::string_view tmpl, std::string_view q, std::string_view a) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl.compare(i, 3, "{q}") == 0) {
      out += q;
      i += 3;
    } else if (tmpl.compare(i, 3, "{a}") == 0) {
      out += a;
      i += 3;
    } else {
      out += tmpl[i++];
    }
  }
  return out;
}

std::string TemplatePair::render_positive(std::string_view q, std::string_view a) const {
  return render_template(positive, q, a);
}

std::string TemplatePair::render_negative(std::string_view q, std::string_view a) const {
  return render_template(negative, q, a);
}

TemplatePair parse_templates(std::string_view json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError::at_byte(static_cast<std::int64_t>(e.byte), "template file is not valid JSON");
  }
  if (!j.is_object()) throw ParseError::at_byte(0, "template file must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "positive" && key != "negative" && key != "description") {
      throw ParseError::at_byte(0, "unknown template field '" + key + "'");
    }
  }
  TemplatePair t;
  if (!j.contains("positive") || !j["positive"].is_string() || !j.contains("negative") || !j["negative"].is_string()) {
    throw TemplateError("template file needs string fields 'positive' and 'negative'");
  }
  t.positive = j["positive"].get<std::string>();
  t.negative = j["negative"].get<std::string>();
  if (j.contains("description")) t.description = j["description"].get<std::string>();
  t.validate();
  return t;
}

TemplatePair load_templates(const std::filesystem::path& path) { return parse_templates(read_file(path)); }

std::string to_string(DirectionMethod m) { return m == DirectionMethod::kPcaDiff ? "pca-diff" : "mass-mean"; }

DirectionMethod parse_direction_method(const std::string& s) {
  if (s == "pca-diff") return DirectionMethod::kPcaDiff;
  if (s == "mass-mean") return DirectionMethod::kMassMean;
  throw DataError("unknown direction method '" + s + "'");
}

void DirectionSet::validate() const {
  if (dirs.empty()) throw DataError("direction set is empty");
  for (std::size_t l = 0; l < dirs.size(); ++l) {
    if (dirs[l].size() != dim() || dirs[l].empty()) throw DataError("direction vectors differ in length");
    if (normalized) {
      double n = 0.0;
      for (float v : dirs[l]) n += static_cast<double>(v) * v;
      if (std::abs(std::sqrt(n) - 1.0) > 1e-6) {
        throw DataError("direction for layer " + std::to_string(l) + " is not unit norm");
      }
    }
  }
}

std::filesystem::path direction_sidecar_path(const std::filesystem::path& archive_path) {
  auto p = archive_path;
  return p.replace_extension(".json");
}

void save_directions(const DirectionSet& ds, const std::filesystem::path& archive_path) {
  ds.validate();
  std::map<std::string, Tensor> tensors;
  for (std::size_t l = 0; l < ds.dirs.size(); ++l) {
    tensors.emplace("dir.layer." + std::to_string(l), Tensor::vector(ds.dirs[l]));
  }
  save_archive(tensors, archive_path);
  nlohmann::json side = {{"behavior", ds.behavior},
                         {"method", to_string(ds.method)},
                         {"model_hash", ds.model_hash},
                         {"normalized", ds.normalized},
                         {"sign_convention", ds.sign_convention}};
  write_file(direction_sidecar_path(archive_path), side.dump(2) + "\n");
}

DirectionSet load_directions(const std::filesystem::path& archive_path) {
  const auto side_path = direction_sidecar_path(archive_path);
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(read_file(side_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError::at_byte(static_cast<std::int64_t>(e.byte), "direction sidecar is not valid JSON");
  }
  static const std::set<std::string> kKeys = {"behavior", "method", "model_hash", "normalized", "sign_convention"};
  if (!side.is_object()) throw ParseError::at_byte(0, "direction sidecar must be an object");
  for (const auto& [key, _] : side.items()) {
    if (!kKeys.count(key)) throw ParseError::at_byte(0, "unknown direction sidecar field '" + key + "'");
  }
  for (const auto& key : kKeys) {
    if (!side.contains(key)) throw ParseError::at_byte(0, "direction sidecar is missing '" + key + "'");
  }
  DirectionSet ds;
  try {
    ds.behavior = side["behavior"].get<std::string>();
    ds.method = parse_direction_method(side["method"].get<std::string>());
    ds.model_hash = side["model_hash"].get<std::string>();
    ds.normalized = side["normalized"].get<bool>();
    ds.sign_convention = side["sign_convention"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError::at_byte(0, std::string("bad direction sidecar: ") + e.what());
  }

  const auto archive = load_archive(archive_path);
  const std::size_t n = archive.header().size();
  for (std::size_t l = 0; l < n; ++l) {
    const std::string name = "dir.layer." + std::to_string(l);
    if (!archive.contains(name)) throw DataError("direction archive is missing '" + name + "'");
    const Tensor t = archive.tensor(name);
    if (t.rank() != 1) throw DataError("'" + name + "' must be a vector");
    ds.dirs.emplace_back(t.data().begin(), t.data().end());
  }
  ds.validate();
  return ds;
}

}  // namespace repmech
