#include "repmech/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include "repmech/errors.hpp"

namespace repmech {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul shape mismatch: " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* pc = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = pa[i * k + p];
      const float* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return out;
}

void softmax_inplace(std::span<float> row) {
  if (row.empty()) return;
  const float mx = *std::max_element(row.begin(), row.end());
  std::vector<double> e(row.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    e[i] = std::exp(static_cast<double>(row[i] - mx));
    sum += e[i];
  }
  for (std::size_t i = 0; i < row.size(); ++i) row[i] = static_cast<float>(e[i] / sum);
}

Tensor softmax(const Tensor& x, int axis) {
  const int rank = static_cast<int>(x.rank());
  if (rank == 0) return x;
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("softmax axis out of range for " + shape_to_string(x.shape()));
  const auto& shape = x.shape();
  std::size_t inner = 1;
  for (int i = axis + 1; i < rank; ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  const std::size_t outer = x.numel() / (inner * len);

  Tensor out = x;
  std::vector<float> buf(len);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      for (std::size_t i = 0; i < len; ++i) buf[i] = x[base + i * inner];
      softmax_inplace(buf);
      for (std::size_t i = 0; i < len; ++i) out[base + i * inner] = buf[i];
    }
  }
  return out;
}

ProbDist softmax_dist(std::span<const float> logits) {
  ProbDist d{std::vector<float>(logits.begin(), logits.end())};
  softmax_inplace(d.probs);
  return d;
}

std::vector<double> log_softmax(std::span<const float> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (float v : logits) sum += std::exp(static_cast<double>(v) - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

double rmsnorm_row(std::span<const float> x, std::span<const float> gamma, float eps, std::span<float> out) {
  double ss = 0.0;
  for (float v : x) ss += static_cast<double>(v) * v;
  const double scale = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps);
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = static_cast<float>(x[i] * scale) * gamma[i];
  }
  return scale;
}

double layernorm_row(std::span<const float> x, std::span<const float> gamma, std::span<const float> beta,
                     float eps, std::span<float> out) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double scale = 1.0 / std::sqrt(var + eps);
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = static_cast<float>((x[i] - mean) * scale) * gamma[i];
    if (!beta.empty()) out[i] += beta[i];
  }
  return scale;
}

namespace {

void check_norm_shapes(const Tensor& x, const Tensor& gamma) {
  if (x.rank() == 0 || gamma.rank() != 1 || gamma.dim(0) != x.shape().back()) {
    throw DimensionError("norm scale " + shape_to_string(gamma.shape()) + " does not match input " +
                         shape_to_string(x.shape()));
  }
}

}  // namespace

Tensor rmsnorm(const Tensor& x, const Tensor& gamma, float eps) {
  check_norm_shapes(x, gamma);
  const std::size_t d = x.shape().back();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.numel() / d; ++r) {
    rmsnorm_row(x.data().subspan(r * d, d), gamma.data(), eps, out.data().subspan(r * d, d));
  }
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  check_norm_shapes(x, gamma);
  if (!beta.empty() && beta.numel() != gamma.numel()) {
    throw DimensionError("layernorm bias " + shape_to_string(beta.shape()) + " does not match scale");
  }
  const std::size_t d = x.shape().back();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.numel() / d; ++r) {
    layernorm_row(x.data().subspan(r * d, d), gamma.data(), beta.data(), eps, out.data().subspan(r * d, d));
  }
  return out;
}

float silu(float x) { return static_cast<float>(x / (1.0 + std::exp(-static_cast<double>(x)))); }

float gelu(float x) {
  const double v = x;
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  return static_cast<float>(0.5 * v * (1.0 + std::tanh(kC * (v + 0.044715 * v * v * v))));
}

Tensor silu(const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.data()) v = silu(v);
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.data()) v = gelu(v);
  return out;
}

double dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot of vectors of length " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

double l2_norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

std::vector<float> normalized(std::span<const float> a) {
  const double n = l2_norm(a);
  if (n == 0.0) throw DegenerateError("cannot normalize a zero vector");
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = static_cast<float>(a[i] / n);
  return out;
}

double cosine_similarity(std::span<const float> u, std::span<const float> v) {
  const double nu = l2_norm(u), nv = l2_norm(v);
  if (nu == 0.0 || nv == 0.0) throw DegenerateError("cosine similarity of a zero vector");
  return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

std::vector<float> first_principal_component(const Tensor& rows, const PowerIterationOptions& opts) {
  if (rows.rank() != 2) throw DimensionError("principal component needs a matrix, got " + shape_to_string(rows.shape()));
  const std::size_t n = rows.rows(), d = rows.cols();
  if (n < 2) throw DataError("principal component needs at least 2 rows, got " + std::to_string(n));

  std::vector<double> mean(d, 0.0);
  double sq_norms = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    auto x = rows.row(r);
    for (std::size_t j = 0; j < d; ++j) {
      mean[j] += x[j];
      sq_norms += static_cast<double>(x[j]) * x[j];
    }
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  const double rms_row = std::sqrt(sq_norms / static_cast<double>(n));

  std::vector<double> centered(n * d);
  double total_var = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    auto x = rows.row(r);
    for (std::size_t j = 0; j < d; ++j) {
      centered[r * d + j] = x[j] - mean[j];
      total_var += centered[r * d + j] * centered[r * d + j];
    }
  }
  if (!(total_var > 0.0) || total_var <= 1e-24 * sq_norms) {
    throw DegenerateError("principal component of rows with zero variance");
  }

  // Applies the (unnormalized) covariance X^T X without forming it.
  auto apply_cov = [&](const std::vector<double>& v, std::vector<double>& out) {
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      const double* x = &centered[r * d];
      double proj = 0.0;
      for (std::size_t j = 0; j < d; ++j) proj += x[j] * v[j];
      for (std::size_t j = 0; j < d; ++j) out[j] += proj * x[j];
    }
  };
  auto norm = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };

  std::mt19937_64 gen(0x5eed5eedULL);
  std::vector<double> v(d), w(d);
  for (auto& x : v) x = static_cast<double>(gen() >> 11) * 0x1.0p-53 * 2.0 - 1.0;
  {
    const double nv = norm(v);
    for (auto& x : v) x /= nv;
  }

  bool converged = false;
  int it = 0;
  for (; it < opts.max_iterations; ++it) {
    apply_cov(v, w);
    const double nw = norm(w);
    if (!(nw > 0.0)) throw DegenerateError("power iteration collapsed to zero");
    double change = 0.0, align = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      w[j] /= nw;
      align += w[j] * v[j];
    }
    const double s = align < 0.0 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < d; ++j) change += (s * w[j] - v[j]) * (s * w[j] - v[j]);
    v.swap(w);
    if (std::sqrt(change) < opts.tolerance) {
      converged = true;
      ++it;
      break;
    }
  }
  if (!converged) throw ConvergenceError("power iteration did not converge", it);

  // Orientation.
  double mean_norm = 0.0, mean_dot = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    mean_norm += mean[j] * mean[j];
    mean_dot += mean[j] * v[j];
  }
  mean_norm = std::sqrt(mean_norm);
  const double zero_tol = 1e-9 * std::max(rms_row, std::numeric_limits<double>::min());
  bool flip = false;
  if (mean_norm > zero_tol && std::abs(mean_dot) > zero_tol) {
    flip = mean_dot < 0.0;
  } else {
    for (std::size_t j = 0; j < d; ++j) {
      if (std::abs(v[j]) > 1e-12) {
        flip = v[j] < 0.0;
        break;
      }
    }
  }

  std::vector<float> out(d);
  const double vn = norm(v);
  for (std::size_t j = 0; j < d; ++j) out[j] = static_cast<float>((flip ? -v[j] : v[j]) / vn);
  return out;
}

double kl_divergence(const ProbDist& p, const ProbDist& q) {
  if (p.size() != q.size()) {
    throw DimensionError("KL divergence of distributions of size " + std::to_string(p.size()) + " and " +
                         std::to_string(q.size()));
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = p.probs[i];
    if (pi <= 0.0) continue;
    const double qi = std::max(static_cast<double>(q.probs[i]), kKlFloor);
    kl += pi * (std::log(pi) - std::log(qi));
  }
  return std::max(kl, 0.0);
}

}  // namespace repmech
