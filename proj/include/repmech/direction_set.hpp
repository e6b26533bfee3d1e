#pragma once

#include <string>
#include <vector>

namespace repmech {

enum class DirectionMethod { kPcaDiff, kMassMean };

std::string to_string(DirectionMethod m);
DirectionMethod parse_direction_method(const std::string& s);

// One unit vector per layer for a single behavior. Positive projection onto
// a direction indicates the target behavior (by default, dishonesty).
struct DirectionSet {
  std::string behavior = "dishonesty";
  DirectionMethod method = DirectionMethod::kPcaDiff;
  std::vector<std::vector<float>> dirs;
  std::string model_hash;
  bool normalized = true;
  std::string sign_convention = "positive-projection-is-target-behavior";

  std::size_t n_layers() const noexcept { return dirs.size(); }
  std::size_t dim() const noexcept { return dirs.empty() ? 0 : dirs.front().size(); }
  // Throws DataError when vectors differ in length or are not unit-norm
  // within 1e-6 (when `normalized`).
  void validate() const;
};

}  // namespace repmech
