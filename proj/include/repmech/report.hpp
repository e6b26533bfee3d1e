#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace repmech {

struct HeatmapSpec {
  std::vector<std::vector<double>> matrix;  // [rows][cols]
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  std::string title;
};

// Diverging blue-white-red scale, most negative first. Cell values map to
// bucket round(5 * (v / m + 1)) where m = max |v|; an all-zero matrix uses
// the middle bucket throughout.
inline constexpr std::array<const char*, 11> kDivergingPalette = {
    "#053061", "#2166ac", "#4393c3", "#92c5de", "#d1e5f0", "#f7f7f7",
    "#fddbc7", "#f4a582", "#d6604d", "#b2182b", "#67001f"};

std::size_t palette_index(double v, double max_abs);

// Throws UsageError on label/dimension mismatch, DataError on non-finite cells.
std::string render_heatmap(const HeatmapSpec& spec);
void emit_heatmap(const HeatmapSpec& spec, const std::filesystem::path& path);

// Shortest text that reads back to the same double.
std::string format_number(double v);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string render() const;
};

void write_csv(const CsvTable& table, const std::filesystem::path& path);
void write_json(const nlohmann::json& j, const std::filesystem::path& path);

}  // namespace repmech
