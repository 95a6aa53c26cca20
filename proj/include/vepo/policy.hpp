#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "vepo/toyenv.hpp"

namespace vepo {

/// Softmax temperature; always strictly positive.
class Temperature {
 public:
  explicit Temperature(double tau) : tau_(tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("temperature must be > 0");
  }
  double value() const { return tau_; }

 private:
  double tau_;
};

/// Decoding context of output position t: the aligned source token x_t (or a
/// past-the-end marker), the previous output token (or BOS), and a position bucket.
struct Context {
  int source = 0;
  int prev = 0;
  int bucket = 0;
};

/// Dense indexing of contexts for a given vocabulary.
///   source axis: S source-script tokens, 2P markup tokens, 1 past-end slot
///   prev axis:   V vocabulary tokens, 1 BOS slot
///   bucket axis: ceil(max_len / bucket_width) buckets, last one absorbing
struct ContextSchema {
  VocabDims dims{};
  int bucket_width = 4;
  int position_buckets = 1;

  static ContextSchema make(VocabDims dims, int max_len, int bucket_width = 4);

  int vocab_size() const { return dims.source_script_size + dims.target_script_size + 2 * dims.markup_pairs + 1; }
  int source_contexts() const { return dims.source_script_size + 2 * dims.markup_pairs + 1; }
  int prev_contexts() const { return vocab_size() + 1; }
  int past_end() const { return source_contexts() - 1; }
  int bos() const { return vocab_size(); }
  int count() const { return source_contexts() * prev_contexts() * position_buckets; }

  int index(const Context& c) const { return (c.source * prev_contexts() + c.prev) * position_buckets + c.bucket; }
  Context decode(int index) const;

  /// Context for emitting output position t after `prefix` (prefix.size() >= t).
  Context context_at(const Prompt& x, std::span<const TokenId> prefix, std::size_t t) const;

  bool operator==(const ContextSchema&) const = default;
};

/// Logit table indexed by (context, token). Also used as the gradient container.
class PolicyParams {
 public:
  PolicyParams() = default;
  explicit PolicyParams(ContextSchema schema, double fill = 0.0);

  const ContextSchema& schema() const { return schema_; }
  int vocab_size() const { return schema_.vocab_size(); }
  std::size_t size() const { return table_.size(); }

  std::span<double> logits(int ctx) { return {table_.data() + offset(ctx), static_cast<std::size_t>(vocab_size())}; }
  std::span<const double> logits(int ctx) const { return {table_.data() + offset(ctx), static_cast<std::size_t>(vocab_size())}; }
  double& at(int ctx, TokenId tok) { return table_[offset(ctx) + static_cast<std::size_t>(tok)]; }
  double at(int ctx, TokenId tok) const { return table_[offset(ctx) + static_cast<std::size_t>(tok)]; }

  std::vector<double>& table() { return table_; }
  const std::vector<double>& table() const { return table_; }

  PolicyParams zeros_like() const { return PolicyParams(schema_, 0.0); }
  bool all_finite() const;

 private:
  std::size_t offset(int ctx) const { return static_cast<std::size_t>(ctx) * static_cast<std::size_t>(vocab_size()); }
  ContextSchema schema_{};
  std::vector<double> table_;
};

/// One sampled output; per-step quantities are recorded under the behavior policy.
struct Trajectory {
  TokenSeq tokens;                  ///< generated tokens, EOS included when emitted
  std::vector<int> contexts;        ///< context index of each step
  std::vector<double> logp;         ///< log pi_old^tau(o_t | .)
  std::vector<double> entropy;      ///< exact entropy of pi_old^tau(. | .) at each step
  std::size_t size() const { return tokens.size(); }
};

// Distributions over a logit row ------------------------------------------------

/// softmax(logits / tau). Throws std::domain_error on non-finite logits.
std::vector<double> tempered_probs(std::span<const double> logits, Temperature tau);
std::vector<double> tempered_log_probs(std::span<const double> logits, Temperature tau);
std::vector<double> tempered_probs(const PolicyParams& params, int ctx, Temperature tau);

double entropy_exact(std::span<const double> p);
/// Entropy restricted to the ceil(fraction * V) most probable tokens
/// (ties at the cutoff broken by ascending token id).
double entropy_topfrac(std::span<const double> p, double fraction = 0.2);

// Sequences ---------------------------------------------------------------------

Trajectory sample_trajectory(const PolicyParams& params, const Environment& env, const Prompt& x,
                             Temperature tau, int max_len, std::uint64_t seed);

/// Argmax decoding (lowest token id wins ties).
TokenSeq greedy_decode(const PolicyParams& params, const Prompt& x, int max_len);

/// Context indices for every step of `tokens`.
std::vector<int> trajectory_contexts(const ContextSchema& schema, const Prompt& x,
                                     std::span<const TokenId> tokens);

/// Per-token log pi^tau(o_t | x, o_<t). Throws VocabError for out-of-range tokens.
std::vector<double> log_prob(const PolicyParams& params, Temperature tau, const Prompt& x,
                             std::span<const TokenId> tokens);

/// d/dz [sum_t log pi^tau(o_t | .)] as a table shaped like params.
PolicyParams grad_log_prob(const PolicyParams& params, Temperature tau, const Prompt& x,
                           std::span<const TokenId> tokens);

/// grad += weight * d/dz log pi^tau(token | ctx).
void accumulate_score(PolicyParams& grad, const PolicyParams& params, int ctx, TokenId token,
                      Temperature tau, double weight);

// Checkpoints -------------------------------------------------------------------

nlohmann::json to_json(const ContextSchema& schema);
ContextSchema schema_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PolicyParams& params);
PolicyParams policy_from_json(const nlohmann::json& j);

// Linear critic -----------------------------------------------------------------

/// Features: bias, one-hot position bucket, one-hot aligned-source slot.
std::vector<double> critic_features(const ContextSchema& schema, int ctx);

struct CriticParams {
  ContextSchema schema{};
  std::vector<double> weights;
};

CriticParams make_critic(const ContextSchema& schema);
double critic_value(const CriticParams& critic, std::span<const double> features);
/// Ridge-regularized least squares of returns on features.
CriticParams fit_critic(const ContextSchema& schema, std::span<const std::vector<double>> features,
                        std::span<const double> returns, double ridge = 1e-8);

}  // namespace vepo
