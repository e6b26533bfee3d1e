#include "repmech/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "repmech/errors.hpp"
#include "repmech/util.hpp"

namespace repmech {

namespace {

constexpr int kCell = 28;
constexpr int kLeft = 120;
constexpr int kTop = 40;
constexpr int kBottom = 90;

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default:
        // Control bytes are not allowed in XML 1.0 text.
        if (static_cast<unsigned char>(c) < 0x20 && c != '\t' && c != '\n') {
          out += '?';
        } else {
          out += c;
        }
    }
  }
  return out;
}

bool needs_quotes(const std::string& s) { return s.find_first_of(",\"\n\r") != std::string::npos; }

}  // namespace

std::size_t palette_index(double v, double max_abs) {
  if (max_abs == 0.0) return 5;
  const double t = 5.0 * (v / max_abs + 1.0);
  const auto idx = static_cast<long>(std::lround(t));
  return static_cast<std::size_t>(std::clamp(idx, 0L, 10L));
}

std::string render_heatmap(const HeatmapSpec& spec) {
  const std::size_t rows = spec.matrix.size();
  const std::size_t cols = rows ? spec.matrix[0].size() : 0;
  if (rows == 0 || cols == 0) throw UsageError("heatmap matrix is empty");
  for (const auto& r : spec.matrix) {
    if (r.size() != cols) throw UsageError("heatmap matrix is ragged");
  }
  if (spec.row_labels.size() != rows || spec.col_labels.size() != cols) {
    throw UsageError("heatmap has " + std::to_string(rows) + "x" + std::to_string(cols) + " cells but " +
                     std::to_string(spec.row_labels.size()) + " row and " + std::to_string(spec.col_labels.size()) +
                     " column labels");
  }
  double max_abs = 0.0;
  for (const auto& r : spec.matrix) {
    for (double v : r) {
      if (!std::isfinite(v)) throw DataError("heatmap cell is not finite");
      max_abs = std::max(max_abs, std::fabs(v));
    }
  }

  const int width = kLeft + static_cast<int>(cols) * kCell + 20;
  const int height = kTop + static_cast<int>(rows) * kCell + kBottom;
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"10\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n"
     << "<text x=\"" << kLeft << "\" y=\"20\" font-size=\"13\">" << xml_escape(spec.title) << "</text>\n";
  for (std::size_t i = 0; i < rows; ++i) {
    const int y = kTop + static_cast<int>(i) * kCell;
    os << "<text x=\"" << kLeft - 4 << "\" y=\"" << y + kCell / 2 + 3 << "\" text-anchor=\"end\">"
       << xml_escape(spec.row_labels[i]) << "</text>\n";
    for (std::size_t j = 0; j < cols; ++j) {
      const int x = kLeft + static_cast<int>(j) * kCell;
      const double v = spec.matrix[i][j];
      os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << kCell << "\" height=\"" << kCell
         << "\" fill=\"" << kDivergingPalette[palette_index(v, max_abs)] << "\"><title>" << format_number(v)
         << "</title></rect>\n";
    }
  }
  const int label_y = kTop + static_cast<int>(rows) * kCell + 6;
  for (std::size_t j = 0; j < cols; ++j) {
    const int x = kLeft + static_cast<int>(j) * kCell + kCell / 2;
    os << "<text x=\"" << x << "\" y=\"" << label_y << "\" transform=\"rotate(60 " << x << " " << label_y
       << ")\">" << xml_escape(spec.col_labels[j]) << "</text>\n";
  }
  os << "<text x=\"" << kLeft << "\" y=\"" << height - 6 << "\">scale: -" << format_number(max_abs) << " .. +"
     << format_number(max_abs) << "</text>\n"
     << "</svg>\n";
  return os.str();
}

void emit_heatmap(const HeatmapSpec& spec, const std::filesystem::path& path) {
  write_file(path, render_heatmap(spec));
}

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string CsvTable::render() const {
  std::string out;
  auto emit_row = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      if (needs_quotes(cells[i])) {
        out += '"';
        for (char c : cells[i]) {
          if (c == '"') out += '"';
          out += c;
        }
        out += '"';
      } else {
        out += cells[i];
      }
    }
    out += '\n';
  };
  emit_row(header);
  for (const auto& r : rows) {
    if (r.size() != header.size()) throw UsageError("CSV row width does not match the header");
    emit_row(r);
  }
  return out;
}

void write_csv(const CsvTable& table, const std::filesystem::path& path) { write_file(path, table.render()); }

void write_json(const nlohmann::json& j, const std::filesystem::path& path) { write_file(path, j.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) + "\n"); }

}  // namespace repmech
