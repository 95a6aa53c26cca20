#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "json.hpp"
#include "vepo/policy.hpp"
#include "vepo/toyenv.hpp"

namespace vepo {

/// exp(R / beta) / Z, computed in log space. Throws when beta <= 0 or R is empty.
std::vector<double> gibbs_target(std::span<const double> rewards, double beta);

/// Single-step softmax policy trained by exact gradient ascent on E[R] + beta * H,
/// starting from uniform logits.
std::vector<double> fit_entropy_bandit(std::span<const double> rewards, double beta, int steps,
                                       double step_size = 1.0);

double total_variation(std::span<const double> p, std::span<const double> q);

struct FisherReport {
  std::size_t n = 0;
  std::vector<double> matrix;       ///< row-major n x n
  std::vector<double> eigenvalues;  ///< ascending
};

/// diag(p) - p p^T and its spectrum. n <= 64.
FisherReport fisher_matrix(std::span<const double> p);

/// Eigenvalues of a symmetric row-major matrix by cyclic Jacobi rotations, ascending.
std::vector<double> jacobi_eigenvalues(std::vector<double> a, std::size_t n, double tol = 1e-14,
                                       int max_sweeps = 100);

inline constexpr double kEnumerationLimit = 1e6;

/// Number of distinct trajectories of length <= max_len for a vocabulary whose last token is EOS.
double trajectory_count(int vocab_size, int max_len);

/// Exact E_{y ~ pi^tau(.|x)}[f(y)] by enumerating every trajectory up to max_len
/// (EOS terminates; length max_len is the truncation point, as in sampling).
/// Throws std::length_error when more than kEnumerationLimit trajectories exist.
double enumerate_expectation(const PolicyParams& params, Temperature tau, const Prompt& x,
                             const std::function<double(std::span<const TokenId>)>& f, int max_len);

/// Central differences, (L(theta + h e_i) - L(theta - h e_i)) / 2h.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& loss,
                                     std::span<const double> theta, double step = 1e-5);
PolicyParams finite_diff_grad(const std::function<double(const PolicyParams&)>& loss, const PolicyParams& params,
                              double step = 1e-5);

/// max|a - b| / max(max|a|, max|b|); 0 when both vanish.
double max_relative_error(std::span<const double> a, std::span<const double> b);

struct ProbeProbabilities {
  double literal = 0.0;
  double paraphrastic = 0.0;
  double ratio = 0.0;  ///< paraphrastic / literal, 0 when literal == 0
};

struct LogitProbeReport {
  TokenId source = 0;
  TokenId literal_token = 0;
  TokenId paraphrastic_token = 0;
  ProbeProbabilities before;
  ProbeProbabilities after;
};

/// First-position probabilities of the literal and designated paraphrastic
/// renderings of a length-1 source prompt.
ProbeProbabilities probe_probabilities(const PolicyParams& params, const Environment& env, TokenId source,
                                       Temperature tau);
LogitProbeReport logit_probe(const PolicyParams& before, const PolicyParams& after, const Environment& env,
                             TokenId source, Temperature tau);

nlohmann::json to_json(const FisherReport& r);
nlohmann::json to_json(const LogitProbeReport& r);

}  // namespace vepo
