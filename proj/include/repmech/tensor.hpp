#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace repmech {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Row-major f32 n-d array.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-filled
  Tensor(Shape shape, std::vector<float> data);

  static Tensor vector(std::vector<float> data);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Dimension i; throws DimensionError when out of range.
  std::size_t dim(std::size_t i) const;
  std::size_t rows() const;  // rank-2 only
  std::size_t cols() const;  // rank-2 only

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  std::span<float> row(std::size_t r);
  std::span<const float> row(std::size_t r) const;

  float& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  bool all_finite() const noexcept;

  // Bitwise comparison of shape and payload.
  bool bitwise_equal(const Tensor& other) const noexcept;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// A probability vector over the vocabulary.
struct ProbDist {
  std::vector<float> probs;

  // Throws DataError when an entry is negative or the sum is off by > 1e-5.
  void validate() const;
  std::size_t size() const noexcept { return probs.size(); }
};

}  // namespace repmech
