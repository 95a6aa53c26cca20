#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace vepo::kl {

/// Per-sample estimators of u = log p(x) - log q(x), x ~ q.
///   k1 = -u   (mean estimates KL(q || p))
///   k2 = u^2 / 2
///   k3 = e^u - 1 - u
double k1_sample(double u);
double k2_sample(double u);
double k3_sample(double u);
/// d/du of the per-sample values.
double k2_sample_du(double u);
double k3_sample_du(double u);

/// Means over a set of log-ratios. Throws std::invalid_argument on empty or non-finite input.
double k1(std::span<const double> log_ratios);
/// mean(u) without the leading minus, for comparison against the printed form.
double k1_raw(std::span<const double> log_ratios);
double k2(std::span<const double> log_ratios);
double k3(std::span<const double> log_ratios);

enum class Estimator { K1, K1Raw, K2, K3 };
std::string to_string(Estimator e);

std::vector<double> sample_values(Estimator e, std::span<const double> log_ratios);

struct Summary {
  double mean = 0.0;
  double variance = 0.0;  ///< unbiased sample variance
  double std_error = 0.0;
  std::size_t n = 0;
};

/// Throws std::invalid_argument on empty input.
Summary summarize(std::span<const double> values);

/// sum_i p_i log(p_i / q_i). +inf when p puts mass where q has none.
double exact_kl(std::span<const double> p, std::span<const double> q);

/// Draws n outcomes from q and returns log p(x) - log q(x) for each.
std::vector<double> sample_log_ratios(std::span<const double> p, std::span<const double> q, std::size_t n,
                                      std::uint64_t seed);

/// Random categorical of size n: softmax of scale * N(0, 1) logits.
std::vector<double> random_categorical(std::size_t n, double scale, std::uint64_t seed);
/// softmax(log(base) + scale * N(0, 1)); a perturbation of `base`.
std::vector<double> perturb_categorical(std::span<const double> base, double scale, std::uint64_t seed);

struct CalibrationRow {
  Estimator estimator;
  Summary summary;
  double exact = 0.0;  ///< KL(q || p), the quantity the estimators target
};

std::vector<CalibrationRow> calibrate(std::span<const double> p, std::span<const double> q, std::size_t n,
                                      std::uint64_t seed);

}  // namespace vepo::kl
