#include "vepo/advantage.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

#include "vepo/json_util.hpp"

namespace vepo {

void AdvantageConfig::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("advantage: gamma must be in (0, 1]");
  if (!(alpha >= 0.0)) throw ConfigError("advantage: alpha must be >= 0");
  if (!(eps_std > 0.0)) throw ConfigError("advantage: eps_std must be > 0");
}

std::string to_string(RewardBroadcast m) {
  return m == RewardBroadcast::SequenceToAllTokens ? "sequence" : "terminal";
}

std::string to_string(BaselineMode m) {
  switch (m) {
    case BaselineMode::GroupMean: return "group_mean";
    case BaselineMode::LeaveOneOut: return "leave_one_out";
    case BaselineMode::BatchMean: return "batch_mean";
    case BaselineMode::Critic: return "critic";
  }
  return "group_mean";
}

std::string to_string(ScaleMode m) {
  switch (m) {
    case ScaleMode::MicroBatchStd: return "microbatch_std";
    case ScaleMode::GroupStd: return "group_std";
    case ScaleMode::None: return "none";
  }
  return "none";
}

RewardBroadcast broadcast_from_string(const std::string& s) {
  if (s == "sequence") return RewardBroadcast::SequenceToAllTokens;
  if (s == "terminal") return RewardBroadcast::TerminalOnly;
  throw ConfigError("advantage.reward_broadcast must be 'sequence' or 'terminal'");
}

Ragged token_rewards(std::span<const double> sequence_rewards, std::span<const std::size_t> lengths,
                     RewardBroadcast mode) {
  if (sequence_rewards.size() != lengths.size()) throw std::invalid_argument("token_rewards: size mismatch");
  Ragged out(lengths.size());
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (mode == RewardBroadcast::SequenceToAllTokens) {
      out[i].assign(lengths[i], sequence_rewards[i]);
    } else {
      out[i].assign(lengths[i], 0.0);
      if (lengths[i] > 0) out[i].back() = sequence_rewards[i];
    }
  }
  return out;
}

Ragged token_rewards(const RolloutGroup& group, RewardBroadcast mode) {
  std::vector<std::size_t> lengths;
  for (const auto& t : group.trajectories) lengths.push_back(t.size());
  return token_rewards(group.rewards, lengths, mode);
}

std::vector<double> group_baseline(const Ragged& rewards) {
  std::size_t longest = 0;
  for (const auto& row : rewards) longest = std::max(longest, row.size());
  std::vector<double> sum(longest, 0.0), count(longest, 0.0);
  for (const auto& row : rewards)
    for (std::size_t t = 0; t < row.size(); ++t) {
      sum[t] += row[t];
      count[t] += 1.0;
    }
  for (std::size_t t = 0; t < longest; ++t) sum[t] /= count[t];
  return sum;
}

double microbatch_std(std::span<const Ragged> rewards) {
  double n = 0.0, mean = 0.0, m2 = 0.0;
  for (const auto& group : rewards)
    for (const auto& row : group)
      for (double r : row) {
        // Welford
        n += 1.0;
        const double d = r - mean;
        mean += d / n;
        m2 += d * (r - mean);
      }
  return n > 0.0 ? std::sqrt(std::max(0.0, m2 / n)) : 0.0;
}

double microbatch_std(const Ragged& rewards) { return microbatch_std(std::span<const Ragged>(&rewards, 1)); }

double entropy_multiplier(double alpha, double entropy, double gamma, std::size_t t) {
  return 1.0 + alpha * entropy * std::pow(gamma, static_cast<double>(t));
}

namespace {

void check_shapes(const Ragged& a, const Ragged& b, const char* what) {
  if (a.size() != b.size()) throw std::invalid_argument(std::string("advantages: ") + what + " row count mismatch");
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].size() != b[i].size())
      throw std::invalid_argument(std::string("advantages: ") + what + " length mismatch");
}

}  // namespace

AdvantageTensor advantages_with_baseline(const Ragged& rewards, const Ragged& baseline, double divisor,
                                         const Ragged& entropies, const AdvantageConfig& cfg) {
  check_shapes(rewards, entropies, "entropy");
  check_shapes(rewards, baseline, "baseline");
  AdvantageTensor out;
  out.values.resize(rewards.size());
  out.pre_multiplier.resize(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    const auto n = rewards[i].size();
    out.values[i].resize(n);
    out.pre_multiplier[i].resize(n);
    for (std::size_t t = 0; t < n; ++t) {
      const double pre = (rewards[i][t] - baseline[i][t]) / divisor;
      out.pre_multiplier[i][t] = pre;
      out.values[i][t] = pre * entropy_multiplier(cfg.alpha, entropies[i][t], cfg.gamma, t);
    }
  }
  return out;
}

AdvantageTensor advantages(const Ragged& rewards, std::span<const double> baseline, double sigma,
                           const Ragged& entropies, const AdvantageConfig& cfg) {
  Ragged b(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    if (rewards[i].size() > baseline.size()) throw std::invalid_argument("advantages: baseline too short");
    b[i].assign(baseline.begin(), baseline.begin() + static_cast<std::ptrdiff_t>(rewards[i].size()));
  }
  auto out = advantages_with_baseline(rewards, b, sigma + cfg.eps_std, entropies, cfg);
  out.group_means.assign(baseline.begin(), baseline.end());
  out.microbatch_std = sigma;
  return out;
}

Ragged recorded_entropies(const RolloutGroup& group) {
  Ragged h;
  for (const auto& t : group.trajectories) h.push_back(t.entropy);
  return h;
}

namespace {

// Baseline that depends only on sequence rewards, placed where token rewards are nonzero by construction.
Ragged sequence_baseline(const RolloutGroup& g, std::span<const double> per_traj, RewardBroadcast mode) {
  Ragged b(g.trajectories.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    const auto n = g.trajectories[i].size();
    if (mode == RewardBroadcast::SequenceToAllTokens) {
      b[i].assign(n, per_traj[i]);
    } else {
      b[i].assign(n, 0.0);
      if (n > 0) b[i].back() = per_traj[i];
    }
  }
  return b;
}

}  // namespace

std::vector<AdvantageTensor> microbatch_advantages(std::span<const RolloutGroup> groups,
                                                   const AdvantageConfig& cfg, const CriticParams* critic) {
  std::vector<Ragged> rewards;
  rewards.reserve(groups.size());
  for (const auto& g : groups) rewards.push_back(token_rewards(g, cfg.broadcast));
  const double sigma_mb = microbatch_std(rewards);

  double batch_mean = 0.0;
  std::size_t batch_n = 0;
  for (const auto& g : groups)
    for (double r : g.rewards) {
      batch_mean += r;
      ++batch_n;
    }
  if (batch_n > 0) batch_mean /= static_cast<double>(batch_n);

  std::vector<AdvantageTensor> out;
  out.reserve(groups.size());
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    const auto& r = rewards[gi];
    const auto h = recorded_entropies(g);
    double sigma = 0.0;
    switch (cfg.scale) {
      case ScaleMode::MicroBatchStd: sigma = sigma_mb; break;
      case ScaleMode::GroupStd: sigma = microbatch_std(r); break;
      case ScaleMode::None: break;
    }
    const double divisor = cfg.scale == ScaleMode::None ? 1.0 : sigma + cfg.eps_std;

    if (cfg.baseline == BaselineMode::GroupMean) {
      const auto b = group_baseline(r);
      if (cfg.scale == ScaleMode::None) {
        Ragged bm(r.size());
        for (std::size_t i = 0; i < r.size(); ++i) bm[i].assign(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(r[i].size()));
        auto a = advantages_with_baseline(r, bm, 1.0, h, cfg);
        a.group_means = b;
        out.push_back(std::move(a));
      } else {
        auto a = advantages(r, b, sigma, h, cfg);
        out.push_back(std::move(a));
      }
      continue;
    }

    Ragged b;
    if (cfg.baseline == BaselineMode::LeaveOneOut) {
      const auto n = g.rewards.size();
      if (n < 2) throw std::invalid_argument("leave-one-out baseline needs G >= 2");
      double total = 0.0;
      for (double v : g.rewards) total += v;
      std::vector<double> loo(n);
      for (std::size_t i = 0; i < n; ++i) loo[i] = (total - g.rewards[i]) / static_cast<double>(n - 1);
      b = sequence_baseline(g, loo, cfg.broadcast);
    } else if (cfg.baseline == BaselineMode::BatchMean) {
      std::vector<double> m(g.rewards.size(), batch_mean);
      b = sequence_baseline(g, m, cfg.broadcast);
    } else {
      if (critic == nullptr) throw std::invalid_argument("critic baseline requested without critic");
      b.resize(g.trajectories.size());
      for (std::size_t i = 0; i < b.size(); ++i) {
        const auto& traj = g.trajectories[i];
        b[i].resize(traj.size());
        for (std::size_t t = 0; t < traj.size(); ++t) {
          b[i][t] = critic_value(*critic, critic_features(critic->schema, traj.contexts[t]));
        }
      }
    }
    auto a = advantages_with_baseline(r, b, divisor, h, cfg);
    a.microbatch_std = sigma;
    out.push_back(std::move(a));
  }
  return out;
}

void dump_advantages_csv(std::ostream& os, std::span<const RolloutGroup> groups,
                         std::span<const AdvantageTensor> adv, const AdvantageConfig& cfg) {
  os << "group,trajectory,position,reward,pre_multiplier,advantage\n";
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto r = token_rewards(groups[g], cfg.broadcast);
    for (std::size_t i = 0; i < r.size(); ++i)
      for (std::size_t t = 0; t < r[i].size(); ++t)
        os << g << ',' << i << ',' << t << ',' << r[i][t] << ',' << adv[g].pre_multiplier[i][t] << ','
           << adv[g].values[i][t] << '\n';
  }
}

}  // namespace vepo
