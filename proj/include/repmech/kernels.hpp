#pragma once

// Deterministic numeric kernels. Everything here is a pure function of its
// inputs; reductions accumulate in double and write f32 results.

#include <cstddef>
#include <span>
#include <vector>

#include "repmech/tensor.hpp"

namespace repmech {

// [m x k] * [k x n]. Each output row is accumulated over k in ascending order,
// so a row's result does not depend on how many other rows are in `a`.
Tensor matmul(const Tensor& a, const Tensor& b);

// Softmax along `axis` (negative counts from the back).
Tensor softmax(const Tensor& x, int axis = -1);
void softmax_inplace(std::span<float> row);
ProbDist softmax_dist(std::span<const float> logits);
// log-softmax evaluated in double precision.
std::vector<double> log_softmax(std::span<const float> logits);

// Row-wise RMS norm over the last dimension: x / sqrt(mean(x^2) + eps) * gamma.
Tensor rmsnorm(const Tensor& x, const Tensor& gamma, float eps);
// Row-wise layer norm; `beta` may be empty.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps);

// Single-row variants. Return the realized inverse scale 1/sqrt(...).
double rmsnorm_row(std::span<const float> x, std::span<const float> gamma, float eps, std::span<float> out);
double layernorm_row(std::span<const float> x, std::span<const float> gamma, std::span<const float> beta,
                     float eps, std::span<float> out);

float silu(float x);
// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
float gelu(float x);
Tensor silu(const Tensor& x);
Tensor gelu(const Tensor& x);

double dot(std::span<const float> a, std::span<const float> b);
double l2_norm(std::span<const float> a);
std::vector<float> normalized(std::span<const float> a);

// Throws DegenerateError on a zero vector.
double cosine_similarity(std::span<const float> u, std::span<const float> v);

struct PowerIterationOptions {
  double tolerance = 1e-8;
  int max_iterations = 1000;
};

// Unit top eigenvector of the covariance of the mean-centered rows of
// `rows` [n x d], found by power iteration. The sign is chosen so that
// dot(v, mean(rows)) >= 0; for a zero mean the first nonzero coordinate is
// made positive.
std::vector<float> first_principal_component(const Tensor& rows, const PowerIterationOptions& opts = {});

constexpr double kKlFloor = 1e-12;

// sum p (ln p - ln q), natural log, q floored at 1e-12, p == 0 terms dropped.
double kl_divergence(const ProbDist& p, const ProbDist& q);

}  // namespace repmech
