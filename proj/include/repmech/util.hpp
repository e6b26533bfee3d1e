#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>

namespace repmech {

// Incremental FNV-1a 64. Used for content hashes in manifests and for the
// deterministic train/eval split; not a cryptographic hash.
class Fnv1a64 {
 public:
  void update(std::span<const std::uint8_t> bytes) noexcept;
  void update(std::string_view s) noexcept;
  void update_u64(std::uint64_t v) noexcept;
  std::uint64_t digest() const noexcept { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::uint64_t fnv1a64(std::string_view s) noexcept;
std::string file_hash(const std::filesystem::path& path);

// Seeded generator with platform-independent uniform and normal draws
// (std:: distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform();  // [0, 1)
  double normal();   // Box-Muller
  std::uint64_t next() { return gen_(); }
  std::uint64_t below(std::uint64_t n) { return gen_() % n; }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace repmech
