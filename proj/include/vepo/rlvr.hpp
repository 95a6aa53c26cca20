#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "json.hpp"
#include "vepo/toyenv.hpp"

namespace vepo {

/// Verifiable-reward weights and thresholds. Defaults: lambda_* and the length
/// band, theta_lid and c_max follow the published defaults; sigma_len, eta_lid,
/// zeta_mix and the format weights are unit scale.
struct RlvrConfig {
  double lambda_len = 0.3;
  double lambda_fmt = 0.2;
  double lambda_lid = 0.4;
  double lambda_mix = 0.3;
  double range_lo = 0.5;
  double range_hi = 2.0;
  double sigma_len = 1.0;
  double w_preserve = 1.0;
  double w_broken = 1.0;
  double theta_lid = 0.8;
  double eta_lid = 1.0;
  double tau_mix = 0.15;
  double zeta_mix = 1.0;
  double c_max = 5.0;

  /// Throws ConfigError when an invariant is violated.
  void validate() const;
};

nlohmann::json to_json(const RlvrConfig& cfg);
RlvrConfig rlvr_config_from_json(const nlohmann::json& j);

struct RewardBreakdown {
  double r_mt = 0.0;
  double r_len = 0.0;
  double r_fmt = 0.0;
  double r_lid = 0.0;
  double r_mix = 0.0;
  double composite = 0.0;
  bool compliant = false;

  // Gate inputs, kept for diagnostics and per-category rates.
  double rho = 0.0;
  double f_preserve = 0.0;
  int f_broken = 0;
  double lid_confidence = 0.0;
  double p_mix = 0.0;
  bool lang_ok = false;
  bool length_ok = false;
  bool format_ok = false;
  bool mix_ok = false;
};

nlohmann::json to_json(const RewardBreakdown& r);

/// Length ratio |y| / |x| (EOS excluded from y). Throws std::invalid_argument on empty x.
double length_ratio(std::span<const TokenId> x, std::span<const TokenId> y, const Vocab& vocab);
double length_reward(std::span<const TokenId> x, std::span<const TokenId> y, const Vocab& vocab,
                     const RlvrConfig& cfg);
/// Same as length_reward from the ratio alone.
double length_reward_from_ratio(double rho, const RlvrConfig& cfg);

/// |struct(x) ∩ struct(y)| / |struct(x)| over markup multisets; 1 when x has no markup.
double format_preserve(std::span<const TokenId> x, std::span<const TokenId> y, const Vocab& vocab);
/// Unmatched or mis-nested markup tokens in y (single-pass stack validator).
int format_broken(std::span<const TokenId> y, const Vocab& vocab);
double format_reward(std::span<const TokenId> x, std::span<const TokenId> y, const Vocab& vocab,
                     const RlvrConfig& cfg);

struct LidResult {
  Script script = Script::Structural;  ///< Structural when y has no content tokens
  double confidence = 0.0;
};
LidResult identify_script(std::span<const TokenId> y, const Vocab& vocab);
double lid_reward(std::span<const TokenId> y, Script target, const Vocab& vocab, const RlvrConfig& cfg);

/// Share of content (non-structural) tokens outside the target script; 0 for empty content.
double mixing_proportion(std::span<const TokenId> y, Script target, const Vocab& vocab);
double mixing_reward(std::span<const TokenId> y, Script target, const Vocab& vocab, const RlvrConfig& cfg);

double clip_term(double value, double c_max);

/// All terms clipped to [-c_max, c_max], then r_mt + sum_k lambda_k r_k.
RewardBreakdown composite_reward(const Environment& env, const Prompt& x, std::span<const TokenId> y,
                                 const RlvrConfig& cfg);

struct Candidate {
  RewardBreakdown reward;
  std::size_t length = 0;  ///< output length used for tie-breaking
};

/// Indices of the G selected candidates, best first: compliant ones by
/// composite descending, then the best non-compliant ones to fill any shortfall.
/// Ties: shorter first, then sampling order. Throws std::invalid_argument if K < G or G < 1.
std::vector<std::size_t> filter_candidates(std::span<const Candidate> candidates, std::size_t group_size);

}  // namespace vepo
