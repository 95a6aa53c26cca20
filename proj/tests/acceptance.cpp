// Prints one PASS/FAIL line per acceptance criterion; exits nonzero on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <sstream>
#include <string>
#include <vector>

#include "rlvr_examples.hpp"
#include "vepo/advantage.hpp"
#include "vepo/diagnostics.hpp"
#include "vepo/harness.hpp"
#include "vepo/klprobe.hpp"
#include "vepo/rng.hpp"
#include "vepo/surrogate.hpp"

using namespace vepo;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json load_config(const char* name) {
  std::ifstream in(std::filesystem::path(VEPO_CONFIG_DIR) / name);
  if (!in) throw std::runtime_error(std::string("missing config ") + name);
  return json::parse(in);
}

RunResult run_algo(json j, const char* algo) {
  j["train"]["algorithm"] = algo;
  j["train"]["kl_regime"] = "none";
  return run(run_spec_from_json(j));
}

Outcome ac1() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto env = make_env(6, {2, 2, 0}, 1);
  const auto schema = ContextSchema::make(env.vocab().dims(), 2, 1);
  const Prompt x{{0, 1}, Script::Target};
  const double taus[] = {0.7, 1.0, 1.3, 0.7, 1.3};
  Rng rng(2024);
  double worst = 0.0;
  for (int triple = 0; triple < 5; ++triple) {
    PolicyParams old(schema), fresh(schema);
    for (double& v : old.table()) v = rng.normal();
    for (double& v : fresh.table()) v = rng.normal();
    const Temperature tau(taus[triple]);
    for (int fn = 0; fn < 10; ++fn) {
      std::vector<double> table(64);
      for (double& v : table) v = 3.0 * rng.normal();
      auto f = [&](std::span<const TokenId> y) {
        std::size_t h = 7;
        for (auto t : y) h = h * 5 + static_cast<std::size_t>(t);
        return table[h % table.size()];
      };
      const double lhs = enumerate_expectation(old, tau, x, [&](std::span<const TokenId> y) {
        double w = 1.0;
        for (double r : importance_ratio(fresh, old, tau, x, y)) w *= r;
        return w * f(y);
      }, 2);
      worst = std::max(worst, std::abs(lhs - enumerate_expectation(fresh, tau, x, f, 2)));
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-10 && secs < 10.0, fmt("max |E_old[r f] - E_new[f]| = %.3e over 50 cases, %.2fs", worst, secs)};
}

Outcome ac2() {
  const auto t0 = std::chrono::steady_clock::now();
  const KlRegime regimes[] = {KlRegime::None, KlRegime::K2, KlRegime::K3};
  double worst = 0.0;
  for (int s = 0; s < 100; ++s) {
    TrainConfig cfg;
    cfg.kl_regime = regimes[s % 3];
    worst = std::max(worst, gradient_check(cfg, static_cast<std::uint64_t>(s + 1)).max_relative_error);
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-5 && secs < 60.0, fmt("max relative error %.3e over 100 micro-batches, %.2fs", worst, secs)};
}

Outcome ac3() {
  Rng rng(31);
  double worst_sum = 0.0, worst_scale = 0.0;
  AdvantageConfig cfg;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t g = 2 + rng.below(15), len = 1 + rng.below(16);
    Ragged r(g), h(g);
    for (std::size_t i = 0; i < g; ++i)
      for (std::size_t t = 0; t < len; ++t) {
        r[i].push_back(3.0 * rng.normal() + 1.0);
        h[i].push_back(2.0 * rng.uniform());
      }
    const auto a = advantages(r, group_baseline(r), microbatch_std(r), h, cfg);
    for (std::size_t t = 0; t < len; ++t) {
      double s = 0.0;
      for (std::size_t i = 0; i < g; ++i) s += a.pre_multiplier[i][t];
      worst_sum = std::max(worst_sum, std::abs(s));
    }
    for (double c : {0.1, 10.0}) {
      Ragged rc = r;
      for (auto& row : rc)
        for (double& v : row) v *= c;
      const double sigma = microbatch_std(r), sigma_c = microbatch_std(rc);
      const auto b = advantages(rc, group_baseline(rc), sigma_c, h, cfg);
      // Only the eps_std floor breaks invariance: A_c = A * (sigma + eps) / (c sigma + eps) * c.
      const double expected_factor = c * (sigma + cfg.eps_std) / (sigma_c + cfg.eps_std);
      for (std::size_t i = 0; i < g; ++i)
        for (std::size_t t = 0; t < len; ++t) {
          const double want = a.pre_multiplier[i][t] * expected_factor;
          worst_scale = std::max(worst_scale, std::abs(b.pre_multiplier[i][t] - want) / std::max(1.0, std::abs(want)));
        }
    }
  }
  return {worst_sum < 1e-9 && worst_scale < 1e-12,
          fmt("max |group sum| %.3e over 1000 groups; scaling deviation beyond eps_std %.3e", worst_sum, worst_scale)};
}

Outcome ac4() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> r(10, 0.0);
  r[1] = r[4] = r[8] = 1.0;
  const double beta = 0.25;
  const auto p = fit_entropy_bandit(r, beta, 20000, 1.0);
  const double tv = total_variation(p, gibbs_target(r, beta));
  double min_cov = 1.0;
  for (int k : {1, 4, 8}) min_cov = std::min(min_cov, p[static_cast<std::size_t>(k)] / (1.0 / 3.0));
  const double secs = seconds_since(t0);
  return {tv < 0.02 && min_cov >= 0.8 && secs < 30.0,
          fmt("TV %.3e; min plateau mass / (1/3) = %.4f; %.2fs", tv, min_cov, secs)};
}

Outcome ac5() {
  const std::vector<double> half{0.5, 0.5};
  const auto f = fisher_matrix(half);
  const double err = std::max(std::abs(f.eigenvalues[0]), std::abs(f.eigenvalues[1] - 0.5));
  bool monotone = true;
  double prev = 1.0;
  for (int k = 1; k <= 40; ++k) {
    const double eps = std::pow(0.5, k);
    const std::vector<double> p{1.0 - eps, 0.7 * eps, 0.3 * eps};
    const double top = fisher_matrix(p).eigenvalues.back();
    monotone = monotone && top < prev;
    prev = top;
  }
  return {err < 1e-10 && monotone && prev < 1e-6,
          fmt("eigen error at (0.5,0.5) %.3e; path monotone=%d; final top eigenvalue %.3e", err, monotone, prev)};
}

Outcome ac6() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t n = 1'000'000;
  int within = 0, total = 0;
  bool k3_nonneg = true, var_ok = true;
  double worst_z = 0.0;
  std::vector<std::future<std::vector<kl::CalibrationRow>>> jobs;
  for (int pair = 0; pair < 50; ++pair) {
    jobs.push_back(std::async(std::launch::async, [pair, n] {
      const auto seed = static_cast<std::uint64_t>(pair);
      const auto size = 3 + static_cast<std::size_t>(pair % 8);
      const auto q = kl::random_categorical(size, 1.0, derive_seed(seed, {1}));
      // Alternate far pairs with close perturbations.
      const auto p = pair % 2 == 0 ? kl::random_categorical(size, 1.0, derive_seed(seed, {2}))
                                   : kl::perturb_categorical(q, 0.1, derive_seed(seed, {2}));
      auto rows = kl::calibrate(p, q, n, derive_seed(seed, {3}));
      const auto u = kl::sample_log_ratios(p, q, n, derive_seed(seed, {3}));
      double min_k3 = 0.0;
      for (double v : kl::sample_values(kl::Estimator::K3, u)) min_k3 = std::min(min_k3, v);
      rows.push_back({kl::Estimator::K3, {min_k3, pair % 2 == 1 ? 1.0 : 0.0, 0.0, 0}, 0.0});
      return rows;
    }));
  }
  for (auto& job : jobs) {
    const auto rows = job.get();
    const auto& extra = rows.back();
    k3_nonneg = k3_nonneg && extra.summary.mean >= 0.0;
    const bool close = extra.summary.variance == 1.0;
    double var_k1 = 0.0, var_k3 = 0.0;
    for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
      const auto& row = rows[i];
      if (row.estimator == kl::Estimator::K1) var_k1 = row.summary.variance;
      if (row.estimator == kl::Estimator::K3) var_k3 = row.summary.variance;
      if (row.estimator != kl::Estimator::K1 && row.estimator != kl::Estimator::K3) continue;
      const double z = std::abs(row.summary.mean - row.exact) / row.summary.std_error;
      worst_z = std::max(worst_z, z);
      within += z <= 3.0;
      ++total;
    }
    if (close) var_ok = var_ok && var_k3 <= var_k1;
  }
  const double secs = seconds_since(t0);
  return {within == total && k3_nonneg && var_ok,
          fmt("%d/%d means within 3 SE (worst %.2f SE); k3 >= 0: %d; var(k3) <= var(k1) on close pairs: %d; %.1fs",
              within, total, worst_z, k3_nonneg, var_ok, secs)};
}

Outcome ac7() {
  int ok = 0, total = 0;
  std::string bad;
  for (const auto& e : testing::rlvr_worked_examples()) {
    ++total;
    if (std::abs(e.actual - e.expected) <= 1e-15) {
      ++ok;
    } else {
      bad += " " + e.name;
    }
  }
  return {ok == total, fmt("%d/%d worked examples reproduced%s", ok, total, bad.c_str())};
}

struct ToyRuns {
  RunResult vepo, grpo;
  double seconds;
};

ToyRuns toy_runs() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto j = load_config("toy_default.json");
  auto v = std::async(std::launch::async, [&] { return run_algo(j, "vepo"); });
  auto g = std::async(std::launch::async, [&] { return run_algo(j, "grpo"); });
  ToyRuns r{v.get(), g.get(), 0.0};
  r.seconds = seconds_since(t0);
  return r;
}

Outcome ac8(const ToyRuns& t) {
  const double g0 = t.grpo.records.front().entropy, g1 = t.grpo.records.back().entropy;
  const double v1 = t.vepo.records.back().entropy;
  const bool pass = g1 < 0.25 * g0 && v1 >= 2.0 * g1 && t.seconds < 600.0;
  return {pass, fmt("GRPO entropy %.4f -> %.4f (%.1f%% of initial); VEPO final %.4f (%.1fx GRPO); %.1fs", g0, g1,
                    100.0 * g1 / g0, v1, v1 / g1, t.seconds)};
}

Outcome ac9() {
  const auto j = load_config("verbosity.json");
  const char* algos[] = {"vepo", "grpo", "rloo"};
  std::vector<std::future<RunResult>> jobs;
  for (const char* a : algos) jobs.push_back(std::async(std::launch::async, [&j, a] { return run_algo(j, a); }));
  double ratio[3];
  double lens[3][2];
  for (int i = 0; i < 3; ++i) {
    const auto res = jobs[static_cast<std::size_t>(i)].get();
    lens[i][0] = res.records.front().mean_length;
    lens[i][1] = res.records.back().mean_length;
    ratio[i] = lens[i][1] / lens[i][0];
  }
  const bool pass = ratio[1] >= 1.5 && ratio[2] >= 1.5 && std::abs(ratio[0] - 1.0) <= 0.2;
  return {pass, fmt("mean length x initial: VEPO %.3f (%.2f->%.2f), GRPO %.3f (%.2f->%.2f), RLOO %.3f (%.2f->%.2f)",
                    ratio[0], lens[0][0], lens[0][1], ratio[1], lens[1][0], lens[1][1], ratio[2], lens[2][0],
                    lens[2][1])};
}

Outcome ac10(const ToyRuns& t) {
  const double v = t.vepo.records.back().rates.overall, g = t.grpo.records.back().rates.overall;
  return {v >= 0.95 && g < v, fmt("overall rate on 500 held-out prompts: VEPO %.4f, GRPO %.4f", v, g)};
}

Outcome ac11(const ToyRuns& t) {
  const double v = t.vepo.records.back().probe_ratio, g = t.grpo.records.back().probe_ratio;
  const double v0 = t.vepo.records.front().probe_ratio;
  return {v > g, fmt("paraphrastic/literal ratio: initial %.4f, VEPO %.4f, GRPO %.4f", v0, v, g)};
}

Outcome ac12() {
  auto j = load_config("toy_default.json");
  j["run"]["steps"] = 300;
  j["run"]["eval_every"] = 50;
  const auto base = std::filesystem::temp_directory_path() / "vepo_acceptance_determinism";
  std::filesystem::remove_all(base);
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  run(run_spec_from_json(j), base / "a");
  run(run_spec_from_json(j), base / "b");
  j["run"]["workers"] = 4;
  run(run_spec_from_json(j), base / "c");
  const auto a = slurp(base / "a" / "metrics.jsonl");
  const bool same = !a.empty() && a == slurp(base / "b" / "metrics.jsonl") && a == slurp(base / "c" / "metrics.jsonl");
  std::filesystem::remove_all(base);
  return {same, fmt("metrics.jsonl (%zu bytes) identical across repeats and worker counts: %d", a.size(), same)};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("AC%d %s %s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  };
  report(1, ac1);
  report(2, ac2);
  report(3, ac3);
  report(4, ac4);
  report(5, ac5);
  report(6, ac6);
  report(7, ac7);
  ToyRuns toy;
  bool toy_ok = true;
  std::string toy_error;
  try {
    toy = toy_runs();
  } catch (const std::exception& e) {
    toy_ok = false;
    toy_error = e.what();
  }
  auto toy_check = [&](Outcome (*fn)(const ToyRuns&)) {
    return [&, fn]() -> Outcome {
      if (!toy_ok) return {false, "toy runs failed: " + toy_error};
      return fn(toy);
    };
  };
  report(8, toy_check(ac8));
  report(9, ac9);
  report(10, toy_check(ac10));
  report(11, toy_check(ac11));
  report(12, ac12);
  std::printf("%d/12 criteria passed\n", 12 - failures);
  return failures == 0 ? 0 : 1;
}
