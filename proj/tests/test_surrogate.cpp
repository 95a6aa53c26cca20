#include <cmath>

#include "doctest.h"
#include "vepo/diagnostics.hpp"
#include "vepo/harness.hpp"
#include "vepo/json_util.hpp"
#include "vepo/klprobe.hpp"
#include "vepo/rng.hpp"
#include "vepo/surrogate.hpp"

using namespace vepo;

namespace {

struct Fixture {
  Environment env = make_env(4, {3, 4, 1}, 2);
  ContextSchema schema = ContextSchema::make(env.vocab().dims(), 5, 2);
  PolicyParams old{schema};

  explicit Fixture(std::uint64_t seed) {
    Rng rng(seed);
    for (double& v : old.table()) v = rng.normal();
  }

  PolicyParams perturbed(double scale, std::uint64_t seed) const {
    PolicyParams p = old;
    Rng rng(seed);
    for (double& v : p.table()) v += scale * rng.normal();
    return p;
  }

  MicroBatch batch(std::uint64_t seed, double tau, int groups = 2, int g = 3) const {
    MicroBatch mb;
    Rng rng(seed);
    for (int j = 0; j < groups; ++j) {
      RolloutGroup grp;
      grp.prompt = gen_prompt(env, derive_seed(seed, {1, std::uint64_t(j)}), 2, 4, 0.3);
      Ragged adv;
      for (int i = 0; i < g; ++i) {
        grp.trajectories.push_back(sample_trajectory(old, env, grp.prompt, Temperature(tau), 5,
                                                     derive_seed(seed, {2, std::uint64_t(j), std::uint64_t(i)})));
        grp.rewards.push_back(rng.normal());
        std::vector<double> a;
        for (std::size_t t = 0; t < grp.trajectories.back().size(); ++t) a.push_back(rng.normal());
        adv.push_back(a);
      }
      grp.breakdowns.resize(grp.rewards.size());
      AdvantageTensor at;
      at.values = adv;
      at.pre_multiplier = adv;
      mb.groups.push_back(grp);
      mb.advantages.push_back(at);
    }
    return mb;
  }
};

double entropy_of(const PolicyParams& p, const MicroBatch& mb, double tau) {
  double h = 0.0;
  std::size_t n = 0;
  for (const auto& g : mb.groups)
    for (const auto& t : g.trajectories)
      for (int c : t.contexts) {
        h += entropy_exact(tempered_probs(p, c, Temperature(tau)));
        ++n;
      }
  return h / static_cast<double>(n);
}

}  // namespace

TEST_CASE("clipped_term") {
  CHECK(clipped_term(1.5, 1.0, 0.20, 0.28) == doctest::Approx(1.28).epsilon(1e-15));
  CHECK(clipped_term(0.5, -1.0, 0.20, 0.28) == doctest::Approx(-0.8).epsilon(1e-15));
  for (double r : {0.81, 0.95, 1.0, 1.1, 1.27})
    for (double a : {-2.0, 0.5}) CHECK(clipped_term(r, a, 0.20, 0.28) == r * a);
  CHECK(clip_active(1.5, 1.0, 0.2, 0.28));
  CHECK_FALSE(clip_active(1.5, -1.0, 0.2, 0.28));
  CHECK(clip_active(0.5, -1.0, 0.2, 0.28));
  CHECK_FALSE(clip_active(0.5, 1.0, 0.2, 0.28));
}

TEST_CASE("importance_ratio") {
  const Fixture f(1);
  const Prompt x{{0, 1, 2}, Script::Target};
  const TokenSeq y{3, 4, 5, 9};
  for (double r : importance_ratio(f.old, f.old, Temperature(0.7), x, y)) CHECK(r == 1.0);
  const auto fresh = f.perturbed(0.5, 2);
  const auto exact = importance_ratio(fresh, f.old, Temperature(1.0), x, y, RatioMode::Exact);
  const auto approx = importance_ratio(fresh, f.old, Temperature(1.0), x, y, RatioMode::Approx);
  for (std::size_t t = 0; t < y.size(); ++t) CHECK(exact[t] == doctest::Approx(approx[t]).epsilon(1e-13));
  // Away from tau = 1 the closed form drops the partition-function term.
  const auto e7 = importance_ratio(fresh, f.old, Temperature(0.7), x, y, RatioMode::Exact);
  const auto a7 = importance_ratio(fresh, f.old, Temperature(0.7), x, y, RatioMode::Approx);
  double gap = 0.0;
  for (std::size_t t = 0; t < y.size(); ++t) gap = std::max(gap, std::abs(e7[t] - a7[t]));
  CHECK(gap > 1e-3);
}

TEST_CASE("tempered importance weighting is unbiased under enumeration") {
  const auto env = make_env(6, {2, 2, 0}, 1);
  const auto schema = ContextSchema::make(env.vocab().dims(), 2, 1);
  const Prompt x{{0, 1}, Script::Target};
  Rng rng(44);
  PolicyParams old(schema), fresh(schema);
  for (double& v : old.table()) v = rng.normal();
  for (double& v : fresh.table()) v = rng.normal();
  std::vector<double> table(64);
  for (double& v : table) v = rng.normal();
  auto f = [&](std::span<const TokenId> y) {
    std::size_t h = 7;
    for (auto t : y) h = h * 5 + static_cast<std::size_t>(t);
    return table[h % table.size()];
  };
  for (double tau : {0.7, 1.0, 1.3}) {
    const Temperature temp(tau);
    const double lhs = enumerate_expectation(old, temp, x, [&](std::span<const TokenId> y) {
      const auto r = importance_ratio(fresh, old, temp, x, y);
      double w = 1.0;
      for (double v : r) w *= v;
      return w * f(y);
    }, 2);
    const double rhs = enumerate_expectation(fresh, temp, x, f, 2);
    CHECK(std::abs(lhs - rhs) < 1e-10);
  }
}

TEST_CASE("token-level normalization weights every token equally") {
  const Fixture f(3);
  MicroBatch mb;
  RolloutGroup g;
  g.prompt = Prompt{{0, 1}, Script::Target};
  const TokenSeq a{3, 4}, b{3, 4, 5, 6, 4, 3};
  for (const auto& y : {a, b}) {
    Trajectory t;
    t.tokens = y;
    t.contexts = trajectory_contexts(f.schema, g.prompt, y);
    t.logp = log_prob(f.old, Temperature(1.0), g.prompt, y);
    g.trajectories.push_back(t);
  }
  g.rewards = {0, 0};
  g.breakdowns.resize(2);
  AdvantageTensor adv;
  adv.values = {{1.0, 0.0}, {0.0, 0.0, 0.0, 0.0, 0.0, 0.0}};
  mb.groups.push_back(g);
  mb.advantages.push_back(adv);
  TrainConfig cfg;
  cfg.beta = 0.0;
  auto out = token_normalized_loss(f.old, f.old, nullptr, mb, cfg);
  CHECK(out.report.tokens == 8);
  CHECK(out.report.surrogate == doctest::Approx(1.0 / 8).epsilon(1e-15));
  mb.advantages[0].values = {{0.0, 0.0}, {0.0, 0.0, 0.0, 0.0, 0.0, 1.0}};
  out = token_normalized_loss(f.old, f.old, nullptr, mb, cfg);
  CHECK(out.report.surrogate == doctest::Approx(1.0 / 8).epsilon(1e-15));

  cfg.aggregation = LossAggregation::SequenceMean;
  out = token_normalized_loss(f.old, f.old, nullptr, mb, cfg);
  CHECK(out.report.surrogate == doctest::Approx(1.0 / 12).epsilon(1e-15));

  mb.advantages[0].values = {{0.0, 0.0}, {0.0, 0.0, 0.0, 0.0, 0.0, 0.0}};
  cfg.aggregation = LossAggregation::TokenMean;
  out = token_normalized_loss(f.perturbed(0.3, 9), f.old, nullptr, mb, cfg);
  CHECK(out.report.surrogate == 0.0);

  mb.groups.clear();
  mb.advantages.clear();
  CHECK_THROWS_AS(token_normalized_loss(f.old, f.old, nullptr, mb, cfg), std::invalid_argument);
}

TEST_CASE("loss report decomposition") {
  const Fixture f(5);
  const auto mb = f.batch(11, 1.0);
  TrainConfig cfg;
  cfg.kl_regime = KlRegime::K3;
  cfg.beta = 0.05;
  const auto ref = f.perturbed(0.4, 12);
  const auto cur = f.perturbed(0.2, 13);
  const auto out = token_normalized_loss(cur, f.old, &ref, mb, cfg);
  const auto& r = out.report;
  CHECK(r.total == doctest::Approx(-r.surrogate - cfg.beta * r.entropy + cfg.kl_coef * r.kl).epsilon(1e-15));
  CHECK(r.entropy == doctest::Approx(entropy_of(cur, mb, 1.0)).epsilon(1e-13));
  CHECK(r.clip_fraction >= 0.0);
  CHECK(r.clip_fraction <= 1.0);
  CHECK_THROWS(token_normalized_loss(cur, f.old, nullptr, mb, cfg));
}

TEST_CASE("loss gradient matches finite differences") {
  for (auto kl : {KlRegime::None, KlRegime::K2, KlRegime::K3})
    for (auto mode : {RatioMode::Exact, RatioMode::Approx}) {
      TrainConfig cfg;
      cfg.kl_regime = kl;
      cfg.ratio_mode = mode;
      cfg.tau = 0.8;
      cfg.beta = 0.1;
      for (std::uint64_t s = 0; s < 5; ++s) CHECK(gradient_check(cfg, s).max_relative_error < 1e-5);
    }
  for (auto algo : kAllAlgorithms) {
    TrainConfig cfg = apply_preset(TrainConfig{}, algo);
    CHECK(gradient_check(cfg, 3).max_relative_error < 1e-5);
  }
}

TEST_CASE("first-step gradient is the policy gradient plus the entropy term") {
  const Fixture f(7);
  for (double tau : {0.6, 1.0, 1.4}) {
    auto mb = f.batch(21, tau);
    TrainConfig cfg;
    cfg.tau = tau;
    cfg.beta = 0.3;
    for (int variant = 0; variant < 2; ++variant) {
      if (variant == 1)  // perturbing the advantages only changes the weights, not the path
        for (auto& a : mb.advantages)
          for (auto& row : a.values)
            for (double& v : row) v = 3.0 * v + 0.5;
      const auto out = token_normalized_loss(f.old, f.old, nullptr, mb, cfg);
      PolicyParams expect = f.old.zeros_like();
      const double n = static_cast<double>(out.report.tokens);
      for (std::size_t gi = 0; gi < mb.groups.size(); ++gi)
        for (std::size_t i = 0; i < mb.groups[gi].trajectories.size(); ++i) {
          const auto& tr = mb.groups[gi].trajectories[i];
          for (std::size_t t = 0; t < tr.size(); ++t) {
            accumulate_score(expect, f.old, tr.contexts[t], tr.tokens[t], Temperature(tau), -mb.advantages[gi].values[i][t] / n);
            const auto p = tempered_probs(f.old, tr.contexts[t], Temperature(tau));
            const double h = entropy_exact(p);
            for (std::size_t k = 0; k < p.size(); ++k)
              expect.at(tr.contexts[t], static_cast<TokenId>(k)) += cfg.beta / n / tau * p[k] * (std::log(p[k]) + h);
          }
        }
      CHECK(max_relative_error(out.grad.table(), expect.table()) < 1e-10);
    }
  }
}

TEST_CASE("clipping is inert inside the trust region") {
  const Fixture f(8);
  const auto mb = f.batch(31, 1.0);
  const auto cur = f.perturbed(0.01, 32);
  TrainConfig cfg;
  const auto out = token_normalized_loss(cur, f.old, nullptr, mb, cfg);
  double plain = 0.0;
  for (std::size_t gi = 0; gi < mb.groups.size(); ++gi)
    for (std::size_t i = 0; i < mb.groups[gi].trajectories.size(); ++i) {
      const auto& tr = mb.groups[gi].trajectories[i];
      const auto r = importance_ratio(cur, f.old, Temperature(1.0), mb.groups[gi].prompt, tr.tokens);
      for (std::size_t t = 0; t < tr.size(); ++t) {
        REQUIRE(r[t] > 0.8);
        REQUIRE(r[t] < 1.28);
        plain += r[t] * mb.advantages[gi].values[i][t];
      }
    }
  CHECK(out.report.surrogate == doctest::Approx(plain / static_cast<double>(out.report.tokens)).epsilon(1e-13));
  CHECK(out.report.clip_fraction == 0.0);
}

TEST_CASE("kl_penalty") {
  const Fixture f(9);
  const auto mb = f.batch(41, 1.0, 4, 8);
  std::vector<KlSampleSet> samples;
  for (const auto& g : mb.groups)
    for (const auto& t : g.trajectories) samples.push_back({&g.prompt, t.tokens});
  for (auto regime : {KlRegime::None, KlRegime::K2, KlRegime::K3})
    CHECK(kl_penalty(f.old, f.old, samples, regime, Temperature(1.0)) == 0.0);
  CHECK(kl_penalty(f.old, f.perturbed(1.0, 1), samples, KlRegime::None, Temperature(1.0)) == 0.0);
  CHECK(kl_penalty(f.old, f.perturbed(1.0, 1), samples, KlRegime::K3, Temperature(1.0)) > 0.0);

  // Close policies: logits differ by at most 0.01.
  const auto q = kl::random_categorical(6, 1.0, 3);
  std::vector<double> p = q;
  Rng rng(4);
  double z = 0.0;
  for (double& v : p) {
    v *= std::exp(0.01 * (2 * rng.uniform() - 1));
    z += v;
  }
  for (double& v : p) v /= z;
  const auto u = kl::sample_log_ratios(p, q, 1000000, 5);
  for (double s : kl::sample_values(kl::Estimator::K3, u)) CHECK(s >= 0.0);
  const double k2 = kl::k2(u), k3 = kl::k3(u);
  CHECK(std::abs(k2 - k3) / k3 < 0.10);
}

TEST_CASE("dapo overlong penalty") {
  CHECK(dapo_overlong_penalty(12, 12, 0.25) == 0.0);
  CHECK(dapo_overlong_penalty(16, 12, 0.25) == -1.0);
  CHECK(dapo_overlong_penalty(3, 12, 0.25) == 0.0);
}

TEST_CASE("apply_update") {
  const Fixture f(10);
  for (auto mode : {OptimizerMode::Sgd, OptimizerMode::Adam}) {
    Optimizer opt(mode);
    PolicyParams p = f.old;
    apply_update(p, f.old.zeros_like(), 0.1, opt);
    CHECK(p.table() == f.old.table());
    Optimizer opt2(mode);
    apply_update(p, f.perturbed(1.0, 3), 0.0, opt2);
    CHECK(p.table() == f.old.table());
  }

  const auto mb = f.batch(51, 1.0);
  TrainConfig cfg;
  for (auto mode : {OptimizerMode::Sgd, OptimizerMode::Adam}) {
    PolicyParams p = f.old;
    Optimizer opt(mode);
    const auto before = token_normalized_loss(p, f.old, nullptr, mb, cfg);
    apply_update(p, before.grad, 1e-3, opt);
    const auto after = token_normalized_loss(p, f.old, nullptr, mb, cfg);
    CHECK(after.report.total < before.report.total);
  }
}

TEST_CASE("presets") {
  const TrainConfig base;
  const auto grpo = apply_preset(base, Algorithm::Grpo);
  CHECK(grpo.eps_low == grpo.eps_high);
  CHECK(grpo.beta == 0.0);
  CHECK(grpo.advantage.alpha == 0.0);
  CHECK(grpo.advantage.scale == ScaleMode::GroupStd);
  const auto rloo = apply_preset(base, Algorithm::Rloo);
  CHECK(rloo.advantage.baseline == BaselineMode::LeaveOneOut);
  CHECK(rloo.advantage.scale == ScaleMode::None);
  const auto dapo = apply_preset(base, Algorithm::Dapo);
  CHECK(dapo.dapo.enabled);
  CHECK(dapo.eps_low < dapo.eps_high);
  CHECK(apply_preset(base, Algorithm::Ppo).advantage.baseline == BaselineMode::Critic);
  CHECK(apply_preset(base, Algorithm::ReinforcePlusPlus).advantage.baseline == BaselineMode::BatchMean);
  for (auto a : kAllAlgorithms) CHECK(algorithm_from_string(to_string(a)) == a);
  CHECK_THROWS_AS(algorithm_from_string("sac"), ConfigError);
}

TEST_CASE("vepo without its extras collapses onto token-normalized grpo") {
  const Fixture f(12);
  auto mb = f.batch(61, 1.0, 1, 6);
  TrainConfig v = apply_preset(TrainConfig{}, Algorithm::Vepo);
  v.advantage.alpha = 0.0;
  v.advantage.gamma = 1.0;
  v.beta = 0.0;
  TrainConfig g = apply_preset(TrainConfig{}, Algorithm::Grpo);
  g.aggregation = LossAggregation::TokenMean;

  // One prompt per micro-batch: micro-batch std and group std coincide.
  const auto av = microbatch_advantages(mb.groups, v.advantage);
  const auto ag = microbatch_advantages(mb.groups, g.advantage);
  CHECK(av[0].values == ag[0].values);
  mb.advantages = av;
  const auto lv = token_normalized_loss(f.old, f.old, nullptr, mb, v);
  const auto lg = token_normalized_loss(f.old, f.old, nullptr, mb, g);
  CHECK(lv.report.total == lg.report.total);
  CHECK(lv.grad.table() == lg.grad.table());
}

TEST_CASE("train config json") {
  const auto cfg = train_config_from_json({{"algorithm", "vepo"}, {"tau", 0.9}, {"K", 32}}, {{"alpha", 0.5}});
  CHECK(cfg.tau == 0.9);
  CHECK(cfg.candidates == 32);
  CHECK(cfg.advantage.alpha == 0.5);
  CHECK_THROWS_AS(train_config_from_json({{"learning_rate", 1}}, nlohmann::json::object()), ConfigError);
  CHECK_THROWS_AS(train_config_from_json({{"G", 8}, {"K", 4}}, nlohmann::json::object()), ConfigError);
  CHECK_THROWS_AS(train_config_from_json({{"tau", 0.0}}, nlohmann::json::object()), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json::object(), {{"gamma", 0.0}}), ConfigError);
  const auto back = train_config_from_json(to_json(cfg), {{"alpha", 0.5}});
  CHECK(to_json(back).dump() == to_json(cfg).dump());
}

TEST_CASE("preset-owned fields may be echoed but not overridden") {
  const auto grpo = train_config_from_json({{"algorithm", "grpo"}}, nlohmann::json::object());
  CHECK_NOTHROW(train_config_from_json(to_json(grpo), nlohmann::json::object()));
  CHECK_THROWS_AS(train_config_from_json({{"algorithm", "grpo"}, {"filter", true}}, nlohmann::json::object()),
                  ConfigError);
}
