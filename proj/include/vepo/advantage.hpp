#pragma once

#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vepo/policy.hpp"
#include "vepo/rlvr.hpp"

namespace vepo {

/// Ragged per-trajectory, per-position matrix.
using Ragged = std::vector<std::vector<double>>;

/// G trajectories for one prompt. `rewards` are the sequence-level rewards
/// (composite plus any shaping) that token rewards are built from.
struct RolloutGroup {
  Prompt prompt;
  std::vector<Trajectory> trajectories;
  std::vector<RewardBreakdown> breakdowns;
  std::vector<double> rewards;
};

enum class RewardBroadcast { SequenceToAllTokens, TerminalOnly };
enum class BaselineMode { GroupMean, LeaveOneOut, BatchMean, Critic };
enum class ScaleMode { MicroBatchStd, GroupStd, None };

struct AdvantageConfig {
  double alpha = 1.0;
  double gamma = 0.95;
  double eps_std = 1e-6;
  RewardBroadcast broadcast = RewardBroadcast::SequenceToAllTokens;
  BaselineMode baseline = BaselineMode::GroupMean;
  ScaleMode scale = ScaleMode::MicroBatchStd;

  void validate() const;
};

std::string to_string(RewardBroadcast m);
std::string to_string(BaselineMode m);
std::string to_string(ScaleMode m);
RewardBroadcast broadcast_from_string(const std::string& s);

struct AdvantageTensor {
  Ragged values;          ///< final advantages
  Ragged pre_multiplier;  ///< standardized term before the entropy multiplier
  std::vector<double> group_means;
  double microbatch_std = 0.0;
};

/// Spreads each sequence reward over the tokens of its trajectory.
Ragged token_rewards(std::span<const double> sequence_rewards, std::span<const std::size_t> lengths,
                     RewardBroadcast mode);
Ragged token_rewards(const RolloutGroup& group, RewardBroadcast mode);

/// Per-position mean over the trajectories still alive at that position.
std::vector<double> group_baseline(const Ragged& rewards);

/// Population std over every token reward of every group in the micro-batch.
double microbatch_std(std::span<const Ragged> rewards);
double microbatch_std(const Ragged& rewards);

/// (1 + alpha * H * gamma^t), t zero-based.
double entropy_multiplier(double alpha, double entropy, double gamma, std::size_t t);

/// pre = (R - B_t) / (sigma + eps_std); value = pre * (1 + alpha H gamma^t).
/// Throws std::invalid_argument when R and H shapes differ.
AdvantageTensor advantages(const Ragged& rewards, std::span<const double> baseline, double sigma,
                           const Ragged& entropies, const AdvantageConfig& cfg);

/// Same with an arbitrary per-token baseline and divisor (used by the baseline presets).
AdvantageTensor advantages_with_baseline(const Ragged& rewards, const Ragged& baseline, double divisor,
                                         const Ragged& entropies, const AdvantageConfig& cfg);

/// Advantages for a whole micro-batch under cfg's baseline/scale modes. The
/// critic is only read for BaselineMode::Critic. Nothing is shared across micro-batches.
std::vector<AdvantageTensor> microbatch_advantages(std::span<const RolloutGroup> groups,
                                                   const AdvantageConfig& cfg,
                                                   const CriticParams* critic = nullptr);

/// Entropies recorded at sampling time, as a ragged matrix.
Ragged recorded_entropies(const RolloutGroup& group);

/// Writes one CSV row per token: group, trajectory, position, reward, pre, advantage.
void dump_advantages_csv(std::ostream& os, std::span<const RolloutGroup> groups,
                         std::span<const AdvantageTensor> adv, const AdvantageConfig& cfg);

}  // namespace vepo
