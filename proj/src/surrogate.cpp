#include "vepo/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "vepo/json_util.hpp"
#include "vepo/klprobe.hpp"

namespace vepo {

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::Vepo: return "vepo";
    case Algorithm::Grpo: return "grpo";
    case Algorithm::Dapo: return "dapo";
    case Algorithm::Rloo: return "rloo";
    case Algorithm::ReinforcePlusPlus: return "reinforce_pp";
    case Algorithm::Ppo: return "ppo";
  }
  return "vepo";
}

std::string to_string(KlRegime k) {
  switch (k) {
    case KlRegime::None: return "none";
    case KlRegime::K2: return "k2";
    case KlRegime::K3: return "k3";
  }
  return "none";
}

std::string to_string(RatioMode m) { return m == RatioMode::Exact ? "exact" : "approx"; }

std::string to_string(LossAggregation m) {
  switch (m) {
    case LossAggregation::TokenMean: return "token_mean";
    case LossAggregation::SequenceMean: return "sequence_mean";
    case LossAggregation::SequenceSum: return "sequence_sum";
  }
  return "token_mean";
}

std::string to_string(OptimizerMode m) { return m == OptimizerMode::Sgd ? "sgd" : "adam"; }

Algorithm algorithm_from_string(const std::string& s) {
  for (auto a : kAllAlgorithms)
    if (to_string(a) == s) return a;
  throw ConfigError("unknown algorithm '" + s + "'");
}

KlRegime kl_regime_from_string(const std::string& s) {
  for (auto k : kAllKlRegimes)
    if (to_string(k) == s) return k;
  throw ConfigError("unknown kl_regime '" + s + "'");
}

void TrainConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("train: tau must be > 0");
  if (!(eps_low > 0.0 && eps_low < 1.0 && eps_high > 0.0 && eps_high < 1.0))
    throw ConfigError("train: eps_low and eps_high must be in (0, 1)");
  if (!(beta >= 0.0)) throw ConfigError("train: beta must be >= 0");
  if (group_size < 1) throw ConfigError("train: G must be >= 1");
  if (candidates < group_size) throw ConfigError("train: K must be >= G");
  if (!(kl_coef >= 0.0)) throw ConfigError("train: kl_coef must be >= 0");
  if (!(step_size >= 0.0)) throw ConfigError("train: step_size must be >= 0");
  if (max_len < 1) throw ConfigError("train: max_len must be >= 1");
  if (inner_epochs < 1) throw ConfigError("train: inner_epochs must be >= 1");
  if (dapo.enabled && !(dapo.slope >= 0.0)) throw ConfigError("train: dapo slope must be >= 0");
  if (advantage.baseline == BaselineMode::LeaveOneOut && group_size < 2)
    throw ConfigError("train: leave-one-out baseline needs G >= 2");
  advantage.validate();
}

nlohmann::json to_json(const TrainConfig& c) {
  return {
      {"algorithm", to_string(c.algorithm)},
      {"tau", c.tau},
      {"eps_low", c.eps_low},
      {"eps_high", c.eps_high},
      {"beta", c.beta},
      {"G", c.group_size},
      {"K", c.candidates},
      {"kl_regime", to_string(c.kl_regime)},
      {"kl_coef", c.kl_coef},
      {"step_size", c.step_size},
      {"max_len", c.max_len},
      {"dapo_overlong", {{"enabled", c.dapo.enabled}, {"threshold", c.dapo.threshold}, {"slope", c.dapo.slope}}},
      {"ratio_mode", to_string(c.ratio_mode)},
      {"optimizer", to_string(c.optimizer)},
      {"inner_epochs", c.inner_epochs},
      // Preset-owned fields, echoed for the record.
      {"aggregation", to_string(c.aggregation)},
      {"filter", c.filter},
      {"baseline", to_string(c.advantage.baseline)},
      {"scale", to_string(c.advantage.scale)},
  };
}

TrainConfig train_config_from_json(const nlohmann::json& train, const nlohmann::json& advantage) {
  TrainConfig c;
  if (!train.is_null()) {
    constexpr std::string_view where = "train";
    json_util::reject_unknown(train, where,
                              {"algorithm", "tau", "eps_low", "eps_high", "beta", "G", "K", "kl_regime", "kl_coef",
                               "step_size", "max_len", "dapo_overlong", "ratio_mode", "optimizer", "inner_epochs",
                               "aggregation", "filter", "baseline", "scale"});
    std::string s;
    if (train.contains("algorithm")) {
      json_util::read(train, "algorithm", s, where);
      c.algorithm = algorithm_from_string(s);
    }
    json_util::read(train, "tau", c.tau, where);
    json_util::read(train, "eps_low", c.eps_low, where);
    json_util::read(train, "eps_high", c.eps_high, where);
    json_util::read(train, "beta", c.beta, where);
    json_util::read(train, "G", c.group_size, where);
    json_util::read(train, "K", c.candidates, where);
    if (train.contains("kl_regime")) {
      json_util::read(train, "kl_regime", s, where);
      c.kl_regime = kl_regime_from_string(s);
    }
    json_util::read(train, "kl_coef", c.kl_coef, where);
    json_util::read(train, "step_size", c.step_size, where);
    json_util::read(train, "max_len", c.max_len, where);
    json_util::read(train, "inner_epochs", c.inner_epochs, where);
    if (train.contains("dapo_overlong")) {
      const auto& d = train.at("dapo_overlong");
      json_util::reject_unknown(d, "train.dapo_overlong", {"enabled", "threshold", "slope"});
      json_util::read(d, "enabled", c.dapo.enabled, "train.dapo_overlong");
      json_util::read(d, "threshold", c.dapo.threshold, "train.dapo_overlong");
      json_util::read(d, "slope", c.dapo.slope, "train.dapo_overlong");
    }
    if (train.contains("ratio_mode")) {
      json_util::read(train, "ratio_mode", s, where);
      if (s == "exact") c.ratio_mode = RatioMode::Exact;
      else if (s == "approx") c.ratio_mode = RatioMode::Approx;
      else throw ConfigError("train.ratio_mode must be 'exact' or 'approx'");
    }
    if (train.contains("optimizer")) {
      json_util::read(train, "optimizer", s, where);
      if (s == "sgd") c.optimizer = OptimizerMode::Sgd;
      else if (s == "adam") c.optimizer = OptimizerMode::Adam;
      else throw ConfigError("train.optimizer must be 'sgd' or 'adam'");
    }
  }
  if (!advantage.is_null()) {
    constexpr std::string_view where = "advantage";
    json_util::reject_unknown(advantage, where, {"alpha", "gamma", "eps_std", "reward_broadcast"});
    json_util::read(advantage, "alpha", c.advantage.alpha, where);
    json_util::read(advantage, "gamma", c.advantage.gamma, where);
    json_util::read(advantage, "eps_std", c.advantage.eps_std, where);
    if (advantage.contains("reward_broadcast")) {
      std::string s;
      json_util::read(advantage, "reward_broadcast", s, where);
      c.advantage.broadcast = broadcast_from_string(s);
    }
  }
  c = apply_preset(c, c.algorithm);
  // Preset-owned fields appear in the resolved-config echo; they may be read
  // back but not changed.
  if (!train.is_null()) {
    const auto echo = to_json(c);
    for (const char* key : {"aggregation", "filter", "baseline", "scale"})
      if (train.contains(key) && train.at(key) != echo.at(key))
        throw ConfigError(std::string("train.") + key + " is fixed by the '" + to_string(c.algorithm) + "' preset");
  }
  c.validate();
  return c;
}

TrainConfig apply_preset(TrainConfig c, Algorithm algorithm) {
  c.algorithm = algorithm;
  auto symmetric = [&c] { c.eps_low = c.eps_high = 0.20; };
  auto no_entropy = [&c] {
    c.advantage.alpha = 0.0;
    c.beta = 0.0;
  };
  switch (algorithm) {
    case Algorithm::Vepo:
      c.advantage.baseline = BaselineMode::GroupMean;
      c.advantage.scale = ScaleMode::MicroBatchStd;
      c.aggregation = LossAggregation::TokenMean;
      c.filter = true;
      break;
    case Algorithm::Grpo:
      c.advantage.baseline = BaselineMode::GroupMean;
      c.advantage.scale = ScaleMode::GroupStd;
      c.aggregation = LossAggregation::SequenceMean;
      c.filter = false;
      symmetric();
      no_entropy();
      break;
    case Algorithm::Dapo:
      c.advantage.baseline = BaselineMode::GroupMean;
      c.advantage.scale = ScaleMode::GroupStd;
      c.aggregation = LossAggregation::TokenMean;
      c.filter = false;
      c.eps_low = 0.20;
      c.eps_high = 0.28;
      c.dapo.enabled = true;
      no_entropy();
      break;
    case Algorithm::Rloo:
      c.advantage.baseline = BaselineMode::LeaveOneOut;
      c.advantage.scale = ScaleMode::None;
      c.aggregation = LossAggregation::SequenceSum;
      c.filter = false;
      symmetric();
      no_entropy();
      break;
    case Algorithm::ReinforcePlusPlus:
      c.advantage.baseline = BaselineMode::BatchMean;
      c.advantage.scale = ScaleMode::MicroBatchStd;
      c.aggregation = LossAggregation::TokenMean;
      c.filter = false;
      symmetric();
      no_entropy();
      break;
    case Algorithm::Ppo:
      c.advantage.baseline = BaselineMode::Critic;
      c.advantage.scale = ScaleMode::MicroBatchStd;
      c.aggregation = LossAggregation::TokenMean;
      c.filter = false;
      symmetric();
      no_entropy();
      break;
  }
  return c;
}

double clip_ratio(double ratio, double eps_low, double eps_high) {
  return std::clamp(ratio, 1.0 - eps_low, 1.0 + eps_high);
}

double clipped_term(double ratio, double advantage, double eps_low, double eps_high) {
  return std::min(ratio * advantage, clip_ratio(ratio, eps_low, eps_high) * advantage);
}

bool clip_active(double ratio, double advantage, double eps_low, double eps_high) {
  return (advantage > 0.0 && ratio > 1.0 + eps_high) || (advantage < 0.0 && ratio < 1.0 - eps_low);
}

namespace {

std::vector<double> untempered_log_probs(std::span<const double> logits) {
  return tempered_log_probs(logits, Temperature(1.0));
}

}  // namespace

std::vector<double> importance_ratio(const PolicyParams& params_new, const PolicyParams& params_old,
                                     Temperature tau, const Prompt& x, std::span<const TokenId> tokens,
                                     RatioMode mode) {
  if (!(params_new.schema() == params_old.schema())) throw std::invalid_argument("importance_ratio: schema mismatch");
  std::vector<double> r(tokens.size());
  if (mode == RatioMode::Exact) {
    const auto lp_new = log_prob(params_new, tau, x, tokens);
    const auto lp_old = log_prob(params_old, tau, x, tokens);
    for (std::size_t t = 0; t < r.size(); ++t) {
      if (!std::isfinite(lp_old[t])) throw std::domain_error("importance_ratio: zero behavior probability");
      r[t] = std::exp(lp_new[t] - lp_old[t]);
    }
    return r;
  }
  const auto ctx = trajectory_contexts(params_new.schema(), x, tokens);
  for (std::size_t t = 0; t < r.size(); ++t) {
    const auto a = static_cast<std::size_t>(tokens[t]);
    const double ln = untempered_log_probs(params_new.logits(ctx[t]))[a];
    const double lo = untempered_log_probs(params_old.logits(ctx[t]))[a];
    if (!std::isfinite(lo)) throw std::domain_error("importance_ratio: zero behavior probability");
    r[t] = std::exp((ln - lo) / tau.value());
  }
  return r;
}

LossAndGrad token_normalized_loss(const PolicyParams& params, const PolicyParams& params_old,
                                  const PolicyParams* reference, const MicroBatch& batch, const TrainConfig& cfg) {
  if (batch.groups.size() != batch.advantages.size()) throw std::invalid_argument("loss: advantages/groups mismatch");
  std::size_t n_tokens = 0, n_seq = 0;
  for (const auto& g : batch.groups)
    for (const auto& t : g.trajectories) {
      n_tokens += t.size();
      n_seq += 1;
    }
  if (n_tokens == 0) throw std::invalid_argument("loss: empty micro-batch");
  const bool use_kl = cfg.kl_regime != KlRegime::None;
  if (use_kl && reference == nullptr) throw std::invalid_argument("loss: KL regime needs a reference policy");

  const Temperature tau(cfg.tau);
  const double inv_tau = 1.0 / cfg.tau;
  const double inv_n = 1.0 / static_cast<double>(n_tokens);
  LossAndGrad out{{}, params.zeros_like()};
  auto& rep = out.report;
  rep.tokens = n_tokens;
  std::size_t clipped = 0;

  for (std::size_t gi = 0; gi < batch.groups.size(); ++gi) {
    const auto& g = batch.groups[gi];
    const auto& adv = batch.advantages[gi];
    if (adv.values.size() != g.trajectories.size()) throw std::invalid_argument("loss: advantage shape mismatch");
    for (std::size_t i = 0; i < g.trajectories.size(); ++i) {
      const auto& traj = g.trajectories[i];
      if (adv.values[i].size() != traj.size()) throw std::invalid_argument("loss: advantage length mismatch");
      double w = inv_n;
      if (cfg.aggregation == LossAggregation::SequenceMean)
        w = 1.0 / (static_cast<double>(n_seq) * static_cast<double>(traj.size()));
      else if (cfg.aggregation == LossAggregation::SequenceSum)
        w = 1.0 / static_cast<double>(n_seq);

      for (std::size_t t = 0; t < traj.size(); ++t) {
        const int ctx = traj.contexts[t];
        const auto a = static_cast<std::size_t>(traj.tokens[t]);
        const auto lp = tempered_log_probs(params.logits(ctx), tau);
        std::vector<double> p(lp.size());
        for (std::size_t k = 0; k < lp.size(); ++k) p[k] = std::exp(lp[k]);
        auto grad = out.grad.logits(ctx);

        // Clipped surrogate.
        double ratio;
        std::vector<double> pu;  // untempered probabilities, approx mode only
        if (cfg.ratio_mode == RatioMode::Exact) {
          ratio = std::exp(lp[a] - traj.logp[t]);
        } else {
          const auto lu = untempered_log_probs(params.logits(ctx));
          const auto lo = untempered_log_probs(params_old.logits(ctx));
          ratio = std::exp((lu[a] - lo[a]) * inv_tau);
          pu.resize(lu.size());
          for (std::size_t k = 0; k < lu.size(); ++k) pu[k] = std::exp(lu[k]);
        }
        const double A = adv.values[i][t];
        rep.surrogate += w * clipped_term(ratio, A, cfg.eps_low, cfg.eps_high);
        if (clip_active(ratio, A, cfg.eps_low, cfg.eps_high)) {
          ++clipped;
        } else {
          // d(-w r A)/dz_k = -w A r (1[k=a] - q_k) / tau
          const double c = -w * A * ratio * inv_tau;
          const auto& q = cfg.ratio_mode == RatioMode::Exact ? p : pu;
          for (std::size_t k = 0; k < q.size(); ++k) grad[k] -= c * q[k];
          grad[a] += c;
        }

        // Global entropy bonus on the current tempered distribution.
        double h = 0.0;
        for (std::size_t k = 0; k < p.size(); ++k)
          if (p[k] > 0.0) h -= p[k] * lp[k];
        rep.entropy += inv_n * h;
        if (cfg.beta != 0.0) {
          // dH/dz_k = -(1/tau) p_k (log p_k + H); the loss carries -beta/N H.
          const double c = cfg.beta * inv_n * inv_tau;
          for (std::size_t k = 0; k < p.size(); ++k) grad[k] += c * p[k] * (lp[k] + h);
        }

        if (use_kl) {
          const double lr = tempered_log_probs(reference->logits(ctx), tau)[a];
          const double u = lr - lp[a];
          const bool k2 = cfg.kl_regime == KlRegime::K2;
          const double value = k2 ? kl::k2_sample(u) : kl::k3_sample(u);
          const double dvalue = k2 ? kl::k2_sample_du(u) : kl::k3_sample_du(u);
          rep.kl += inv_n * value;
          // du/dz_k = -(1[k=a] - p_k) / tau
          const double c = cfg.kl_coef * inv_n * dvalue * inv_tau;
          for (std::size_t k = 0; k < p.size(); ++k) grad[k] += c * p[k];
          grad[a] -= c;
        }
      }
    }
  }
  rep.clip_fraction = static_cast<double>(clipped) / static_cast<double>(n_tokens);
  rep.total = -rep.surrogate - cfg.beta * rep.entropy + (use_kl ? cfg.kl_coef * rep.kl : 0.0);
  return out;
}

double kl_penalty(const PolicyParams& params, const PolicyParams& reference, std::span<const KlSampleSet> samples,
                  KlRegime regime, Temperature tau) {
  if (regime == KlRegime::None) return 0.0;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : samples) {
    const auto lp = log_prob(params, tau, *s.prompt, s.tokens);
    const auto lr = log_prob(reference, tau, *s.prompt, s.tokens);
    for (std::size_t t = 0; t < lp.size(); ++t) {
      const double u = lr[t] - lp[t];
      sum += regime == KlRegime::K2 ? kl::k2_sample(u) : kl::k3_sample(u);
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

double dapo_overlong_penalty(std::size_t length, int threshold, double slope) {
  const auto limit = static_cast<std::size_t>(std::max(0, threshold));
  return length <= limit ? 0.0 : -slope * static_cast<double>(length - limit);
}

void Optimizer::apply(PolicyParams& params, const PolicyParams& grad, double step_size) {
  auto& theta = params.table();
  const auto& g = grad.table();
  if (theta.size() != g.size()) throw std::invalid_argument("apply_update: gradient shape mismatch");
  if (mode_ == OptimizerMode::Sgd) {
    for (std::size_t k = 0; k < theta.size(); ++k) theta[k] -= step_size * g[k];
    return;
  }
  if (m_.size() != theta.size()) {
    m_.assign(theta.size(), 0.0);
    v_.assign(theta.size(), 0.0);
    steps_ = 0;
  }
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t k = 0; k < theta.size(); ++k) {
    m_[k] = beta1_ * m_[k] + (1.0 - beta1_) * g[k];
    v_[k] = beta2_ * v_[k] + (1.0 - beta2_) * g[k] * g[k];
    theta[k] -= step_size * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + eps_);
  }
}

void apply_update(PolicyParams& params, const PolicyParams& grad, double step_size, Optimizer& optimizer) {
  optimizer.apply(params, grad, step_size);
}

}  // namespace vepo
