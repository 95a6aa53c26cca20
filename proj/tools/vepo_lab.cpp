// vepo-lab: experiment runner and diagnostics front end.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vepo/diagnostics.hpp"
#include "vepo/harness.hpp"
#include "vepo/json_util.hpp"
#include "vepo/klprobe.hpp"
#include "vepo/rlvr.hpp"
#include "vepo/rng.hpp"

using namespace vepo;
using nlohmann::json;

namespace {

constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

json load_json(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("not a number: '" + item + "'");
    }
  }
  return out;
}

void print(const json& j) { std::cout << j.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vepo-lab: toy VEPO experiments and diagnostics"};
  app.require_subcommand(1);

  std::string config, out_dir, checkpoint_before, checkpoint_after, input, p_list, q_list;
  std::uint64_t seed = 1;
  int steps = -1, workers = 0, cell_workers = 1;

  auto* run_cmd = app.add_subcommand("run", "Train one configuration");
  run_cmd->add_option("--config", config, "JSON config file");
  run_cmd->add_option("--out", out_dir, "Output directory")->required();
  auto* run_seed = run_cmd->add_option("--seed", seed, "Run seed");
  run_cmd->add_option("--steps", steps, "Override run.steps");
  run_cmd->add_option("--workers", workers, "Override run.workers");

  std::vector<std::string> algos, regimes;
  auto* grid_cmd = app.add_subcommand("grid", "Algorithm x KL-regime grid");
  grid_cmd->add_option("--config", config, "JSON config file");
  grid_cmd->add_option("--out", out_dir, "Output directory")->required();
  auto* grid_seed = grid_cmd->add_option("--seed", seed, "Run seed");
  grid_cmd->add_option("--steps", steps, "Override run.steps");
  grid_cmd->add_option("--algorithms", algos, "Subset of algorithms");
  grid_cmd->add_option("--kl", regimes, "Subset of KL regimes");
  grid_cmd->add_option("--cell-workers", cell_workers, "Cells run concurrently");

  auto* score_cmd = app.add_subcommand("score", "Score JSONL {source, target_script, output} lines");
  score_cmd->add_option("--config", config, "JSON config (env and rlvr sections are used)");
  score_cmd->add_option("--input", input, "Input JSONL (default stdin)");

  int outcomes = 10, plateau = 3, bandit_steps = 20000;
  double beta = 0.25;
  auto* gibbs_cmd = app.add_subcommand("gibbs-check", "Entropy-regularized bandit vs Gibbs target");
  gibbs_cmd->add_option("--outcomes", outcomes);
  gibbs_cmd->add_option("--plateau", plateau);
  gibbs_cmd->add_option("--beta", beta);
  gibbs_cmd->add_option("--steps", bandit_steps);

  auto* fisher_cmd = app.add_subcommand("fisher", "Fisher matrix diag(p) - pp^T and its spectrum");
  fisher_cmd->add_option("--p", p_list, "Comma-separated probabilities")->required();

  int batches = 10;
  std::string kl_name = "none", algo_name = "vepo";
  double tau = 1.0;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Analytic vs finite-difference loss gradient");
  grad_cmd->add_option("--batches", batches);
  grad_cmd->add_option("--seed", seed);
  grad_cmd->add_option("--kl", kl_name);
  grad_cmd->add_option("--algorithm", algo_name);
  grad_cmd->add_option("--tau", tau);

  int source = 0;
  auto* probe_cmd = app.add_subcommand("probe", "Literal vs paraphrastic probability at a probe context");
  probe_cmd->add_option("--config", config, "JSON config (env and train.tau are used)");
  probe_cmd->add_option("--before", checkpoint_before, "Checkpoint before training")->required();
  probe_cmd->add_option("--after", checkpoint_after, "Checkpoint after training")->required();
  probe_cmd->add_option("--source", source, "Probe source token");

  std::size_t samples = 1000000;
  int size = 4;
  double scale = 1.0;
  auto* kl_cmd = app.add_subcommand("klprobe", "Calibration table for k1/k2/k3");
  kl_cmd->add_option("--size", size, "Categorical size");
  kl_cmd->add_option("--samples", samples);
  kl_cmd->add_option("--scale", scale, "Logit scale of the random pair");
  kl_cmd->add_option("--seed", seed);
  kl_cmd->add_option("--p", p_list);
  kl_cmd->add_option("--q", q_list);

  CLI11_PARSE(app, argc, argv);

  try {
    if (run_cmd->parsed()) {
      auto j = load_json(config);
      if (run_seed->count() > 0) j["run"]["seed"] = seed;
      if (steps >= 0) j["run"]["steps"] = steps;
      if (workers > 0) j["run"]["workers"] = workers;
      const auto spec = run_spec_from_json(j);
      const auto result = run(spec, out_dir);
      print(to_json(result.records.back()));
    } else if (grid_cmd->parsed()) {
      auto j = load_json(config);
      if (grid_seed->count() > 0) j["run"]["seed"] = seed;
      if (steps >= 0) j["run"]["steps"] = steps;
      std::vector<Algorithm> as;
      std::vector<KlRegime> ks;
      for (const auto& a : algos) as.push_back(algorithm_from_string(a));
      for (const auto& k : regimes) ks.push_back(kl_regime_from_string(k));
      if (as.empty()) as.assign(std::begin(kAllAlgorithms), std::end(kAllAlgorithms));
      if (ks.empty()) ks.assign(std::begin(kAllKlRegimes), std::end(kAllKlRegimes));
      const auto cells = run_grid(grid_specs(j, as, ks), std::filesystem::path(out_dir), cell_workers);
      json summary = json::array();
      for (const auto& c : cells) summary.push_back(to_json(c.result.records.back()));
      print(summary);
    } else if (score_cmd->parsed()) {
      const auto j = load_json(config);
      const auto env = make_env(j.contains("env") ? env_spec_from_json(j.at("env")) : EnvSpec{});
      const auto cfg = j.contains("rlvr") ? rlvr_config_from_json(j.at("rlvr")) : RlvrConfig{};
      std::ifstream file;
      if (!input.empty()) {
        file.open(input);
        if (!file) throw ConfigError("cannot open input '" + input + "'");
      }
      std::istream& in = input.empty() ? std::cin : file;
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        json row;
        try {
          row = json::parse(line);
        } catch (const json::parse_error& e) {
          throw ConfigError(std::string("input parse error: ") + e.what());
        }
        const auto x = prompt_from_json(row);
        const auto y = row.at("output").get<TokenSeq>();
        for (auto t : y)
          if (!env.vocab().contains(t)) throw VocabError("output token out of range");
        std::cout << to_json(composite_reward(env, x, y, cfg)).dump() << '\n';
      }
    } else if (gibbs_cmd->parsed()) {
      if (plateau < 1 || plateau > outcomes) throw ConfigError("plateau must be in [1, outcomes]");
      std::vector<double> r(static_cast<std::size_t>(outcomes), 0.0);
      for (int i = 0; i < plateau; ++i) r[static_cast<std::size_t>(i)] = 1.0;
      const auto target = gibbs_target(r, beta);
      const auto learned = fit_entropy_bandit(r, beta, bandit_steps);
      double min_cov = 1.0;
      for (int i = 0; i < plateau; ++i) min_cov = std::min(min_cov, learned[static_cast<std::size_t>(i)] * plateau);
      print({{"beta", beta},
             {"rewards", r},
             {"target", target},
             {"learned", learned},
             {"total_variation", total_variation(learned, target)},
             {"min_plateau_coverage", min_cov}});
    } else if (fisher_cmd->parsed()) {
      print(to_json(fisher_matrix(parse_list(p_list))));
    } else if (grad_cmd->parsed()) {
      TrainConfig cfg;
      cfg.tau = tau;
      cfg.kl_regime = kl_regime_from_string(kl_name);
      cfg = apply_preset(cfg, algorithm_from_string(algo_name));
      double worst = 0.0;
      json rows = json::array();
      for (int b = 0; b < batches; ++b) {
        const auto r = gradient_check(cfg, derive_seed(seed, {static_cast<std::uint64_t>(b)}));
        worst = std::max(worst, r.max_relative_error);
        rows.push_back(json{{"batch", b}, {"max_relative_error", r.max_relative_error}, {"tokens", r.tokens}});
      }
      print({{"algorithm", algo_name}, {"kl_regime", kl_name}, {"batches", rows}, {"worst", worst}});
    } else if (probe_cmd->parsed()) {
      const auto j = load_json(config);
      const auto spec = run_spec_from_json(j);
      const auto env = make_env(spec.env);
      const auto before = policy_from_json(load_json(checkpoint_before));
      const auto after = policy_from_json(load_json(checkpoint_after));
      print(to_json(logit_probe(before, after, env, source, Temperature(spec.train.tau))));
    } else if (kl_cmd->parsed()) {
      std::vector<double> p, q;
      if (!p_list.empty() || !q_list.empty()) {
        p = parse_list(p_list);
        q = parse_list(q_list);
      } else {
        q = kl::random_categorical(static_cast<std::size_t>(size), scale, derive_seed(seed, {0}));
        p = kl::random_categorical(static_cast<std::size_t>(size), scale, derive_seed(seed, {1}));
      }
      const auto rows = kl::calibrate(p, q, samples, derive_seed(seed, {2}));
      std::printf("%-8s %14s %14s %14s\n", "estimator", "mean", "std_error", "exact_kl");
      for (const auto& r : rows)
        std::printf("%-8s %14.8f %14.8f %14.8f\n", kl::to_string(r.estimator).c_str(), r.summary.mean,
                    r.summary.std_error, r.exact);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return 0;
}
