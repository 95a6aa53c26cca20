#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vepo/policy.hpp"
#include "vepo/rlvr.hpp"
#include "vepo/surrogate.hpp"
#include "vepo/toyenv.hpp"

namespace vepo {

/// Starting logits. "uniform" is all zeros. "sft" mimics a supervised model:
/// the literal rendering dominates, paraphrases keep a little mass, markup is
/// copied, EOS follows the source, and a fraction of source tokens prefer
/// copying themselves (code-mixing errors for RL to repair).
struct InitSpec {
  std::string mode = "sft";
  double literal = 5.0;
  double paraphrase = 2.5;
  double markup = 5.0;
  double eos = 5.0;
  double copy = 5.5;
  double copy_fraction = 0.25;
};

struct RunOptions {
  int steps = 2000;
  int prompts_per_batch = 4;  ///< M
  int eval_every = 100;
  int eval_prompts = 500;          ///< held-out prompts for greedy constraint rates
  int rollout_eval_prompts = 64;   ///< prompts for sampled entropy/length/reward/KL
  int rollout_eval_samples = 4;
  int bucket_width = 4;
  int workers = 1;
  TokenId probe_source = 0;
  bool early_stop = false;
  int early_stop_window = 100;
  double early_stop_tol = 1e-4;
  bool dump_advantages = false;
  std::uint64_t seed = 1;
};

struct RunSpec {
  EnvSpec env{};
  PromptSpec prompts{};
  TrainConfig train{};
  RlvrConfig rlvr{};
  RunOptions run{};
  InitSpec init{};

  void validate() const;
};

/// Sections: env, prompts, train, advantage, rlvr, run, init. Unknown keys raise ConfigError.
RunSpec run_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunSpec& spec);

struct ConstraintRates {
  double language = 0.0;
  double length = 0.0;
  double format = 0.0;
  double mixing = 0.0;
  double overall = 0.0;  ///< mean of the four
  double joint = 0.0;    ///< share passing all four
};

struct MetricsRecord {
  int step = 0;
  std::uint64_t seed = 0;
  std::string algorithm;
  std::string kl_regime;
  double entropy = 0.0;
  double mean_length = 0.0;
  double mean_composite = 0.0;
  ConstraintRates rates;
  double kl_k1 = 0.0;
  double kl_k2 = 0.0;
  double kl_k3 = 0.0;
  double clip_fraction = 0.0;
  double probe_ratio = 0.0;
};

nlohmann::json to_json(const MetricsRecord& r);
std::string csv_header();
std::string to_csv(const MetricsRecord& r);

struct RunResult {
  std::vector<MetricsRecord> records;
  PolicyParams initial;
  PolicyParams final;
  int steps_run = 0;
};

PolicyParams make_initial_policy(const Environment& env, const ContextSchema& schema, const InitSpec& init);
/// Literal rendering with copied markup and EOS at the end; greedy decoding is compliant.
PolicyParams make_oracle_policy(const Environment& env, const ContextSchema& schema, double margin = 20.0);

/// Held-out prompt i for a run seed; a stream disjoint from training prompts.
Prompt eval_prompt(const Environment& env, const PromptSpec& spec, std::uint64_t seed, int i);
Prompt train_prompt(const Environment& env, const PromptSpec& spec, std::uint64_t seed, int step, int j);

/// Samples K candidates for micro-batch slot j of a training step, scores
/// them, and keeps G (filtered or in sampling order, per the preset).
RolloutGroup collect_group(const PolicyParams& params, const Environment& env, const RunSpec& spec, int step, int j);

/// Greedy-decodes n held-out prompts and reports per-gate pass rates.
ConstraintRates eval_constraints(const PolicyParams& params, const Environment& env, const RlvrConfig& rlvr,
                                 const PromptSpec& prompts, int n, std::uint64_t seed, int max_len);

/// Executes the loop; when out_dir is set, writes metrics.jsonl, summary.csv,
/// checkpoint.json and config.json there.
RunResult run(const RunSpec& spec, const std::optional<std::filesystem::path>& out_dir = std::nullopt);

struct GridCell {
  Algorithm algorithm;
  KlRegime kl_regime;
  RunResult result;
};

/// One spec per algorithm x KL regime, each resolved from the same config so
/// presets start from the user's values rather than from another preset.
std::vector<RunSpec> grid_specs(const nlohmann::json& config, std::span<const Algorithm> algorithms,
                                std::span<const KlRegime> regimes);

/// Runs every cell (identical seeds and rollout budgets). With out_dir, one
/// subdirectory per cell plus grid.csv joining all records.
std::vector<GridCell> run_grid(std::span<const RunSpec> cells,
                               const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                               int cell_workers = 1);

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t parameters = 0;
  std::size_t tokens = 0;
};

/// Analytic loss gradient vs central differences on a seeded micro-batch drawn
/// from a small random environment. params differ from params_old so clipping
/// and ratios away from 1 are exercised.
GradCheckReport gradient_check(const TrainConfig& cfg, std::uint64_t seed, double fd_step = 1e-5);

}  // namespace vepo
