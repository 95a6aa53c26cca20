#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vepo/advantage.hpp"
#include "vepo/policy.hpp"

namespace vepo {

enum class Algorithm { Vepo, Grpo, Dapo, Rloo, ReinforcePlusPlus, Ppo };
enum class KlRegime { None, K2, K3 };
/// Exact: both tempered softmaxes fully normalized. Approx: exp((log pi - log pi_old) / tau)
/// on untempered log-probabilities.
enum class RatioMode { Exact, Approx };
/// TokenMean: 1/N over all tokens. SequenceMean: mean over sequences of the
/// per-sequence token mean. SequenceSum: mean over sequences of the token sum.
enum class LossAggregation { TokenMean, SequenceMean, SequenceSum };
enum class OptimizerMode { Sgd, Adam };

std::string to_string(Algorithm a);
std::string to_string(KlRegime k);
std::string to_string(RatioMode m);
std::string to_string(LossAggregation m);
std::string to_string(OptimizerMode m);
Algorithm algorithm_from_string(const std::string& s);
KlRegime kl_regime_from_string(const std::string& s);

inline constexpr Algorithm kAllAlgorithms[] = {Algorithm::Vepo, Algorithm::Ppo,  Algorithm::Grpo,
                                               Algorithm::Dapo, Algorithm::Rloo, Algorithm::ReinforcePlusPlus};
inline constexpr KlRegime kAllKlRegimes[] = {KlRegime::None, KlRegime::K2, KlRegime::K3};

struct DapoOverlong {
  bool enabled = false;
  int threshold = 12;
  double slope = 0.25;
};

struct TrainConfig {
  double tau = 1.0;
  double eps_low = 0.20;
  double eps_high = 0.28;
  double beta = 0.01;
  AdvantageConfig advantage{};
  int group_size = 8;   ///< G
  int candidates = 16;  ///< K
  KlRegime kl_regime = KlRegime::None;
  double kl_coef = 0.05;
  Algorithm algorithm = Algorithm::Vepo;
  double step_size = 0.05;
  int max_len = 12;
  DapoOverlong dapo{};
  RatioMode ratio_mode = RatioMode::Exact;
  LossAggregation aggregation = LossAggregation::TokenMean;
  OptimizerMode optimizer = OptimizerMode::Sgd;
  int inner_epochs = 1;
  /// Constraint-driven top-G selection; off means the first G candidates in sampling order.
  bool filter = true;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Reads "train" and "advantage" sections. Unknown keys raise ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& train, const nlohmann::json& advantage);

/// Overwrites the fields that define an algorithm; everything else in `base` is kept.
TrainConfig apply_preset(TrainConfig base, Algorithm algorithm);

struct LossReport {
  double surrogate = 0.0;
  double entropy = 0.0;
  double kl = 0.0;
  double total = 0.0;
  std::size_t tokens = 0;
  double clip_fraction = 0.0;
};

struct LossAndGrad {
  LossReport report;
  PolicyParams grad;
};

/// Selected trajectories of one micro-batch plus their (stop-gradient) advantages.
struct MicroBatch {
  std::vector<RolloutGroup> groups;
  std::vector<AdvantageTensor> advantages;
};

std::vector<double> importance_ratio(const PolicyParams& params_new, const PolicyParams& params_old,
                                     Temperature tau, const Prompt& x, std::span<const TokenId> tokens,
                                     RatioMode mode = RatioMode::Exact);

double clip_ratio(double ratio, double eps_low, double eps_high);
double clipped_term(double ratio, double advantage, double eps_low, double eps_high);
/// True when the clipped branch is active, i.e. d(clipped_term)/d(ratio) = 0.
bool clip_active(double ratio, double advantage, double eps_low, double eps_high);

/// Loss and its exact gradient with respect to `params`:
///   total = -surrogate - beta * entropy + kl_coef * kl
/// Advantages and behavior log-probs are constants. `reference` is only read when
/// cfg.kl_regime != None.
LossAndGrad token_normalized_loss(const PolicyParams& params, const PolicyParams& params_old,
                                  const PolicyParams* reference, const MicroBatch& batch,
                                  const TrainConfig& cfg);

struct KlSampleSet {
  const Prompt* prompt;
  std::span<const TokenId> tokens;
};

/// Mean per-token k2/k3 between `params` (sampling distribution) and the frozen reference.
double kl_penalty(const PolicyParams& params, const PolicyParams& reference, std::span<const KlSampleSet> samples,
                  KlRegime regime, Temperature tau);

/// 0 for length <= threshold, else -slope * (length - threshold).
double dapo_overlong_penalty(std::size_t length, int threshold, double slope);

/// First/second moment state for the adaptive mode.
class Optimizer {
 public:
  explicit Optimizer(OptimizerMode mode = OptimizerMode::Sgd, double beta1 = 0.9, double beta2 = 0.999,
                     double eps = 1e-8)
      : mode_(mode), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void apply(PolicyParams& params, const PolicyParams& grad, double step_size);
  OptimizerMode mode() const { return mode_; }

 private:
  OptimizerMode mode_;
  double beta1_, beta2_, eps_;
  long steps_ = 0;
  std::vector<double> m_, v_;
};

/// theta <- theta - step * update(grad).
void apply_update(PolicyParams& params, const PolicyParams& grad, double step_size, Optimizer& optimizer);

}  // namespace vepo
