#include "vepo/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "vepo/advantage.hpp"
#include "vepo/diagnostics.hpp"
#include "vepo/json_util.hpp"
#include "vepo/klprobe.hpp"
#include "vepo/rng.hpp"

namespace vepo {

namespace {

// Seed stream salts.
constexpr std::uint64_t kTrainPrompt = 1;
constexpr std::uint64_t kRollout = 2;
constexpr std::uint64_t kEvalPrompt = 3;
constexpr std::uint64_t kEvalRollout = 4;
constexpr std::uint64_t kInit = 5;

template <class F>
void parallel_for(std::size_t n, int workers, F&& f) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  const auto count = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  for (std::size_t w = 0; w < count; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

void RunSpec::validate() const {
  train.validate();
  rlvr.validate();
  if (run.steps < 0) throw ConfigError("run: steps must be >= 0");
  if (run.prompts_per_batch < 1) throw ConfigError("run: M must be >= 1");
  if (run.eval_every < 1) throw ConfigError("run: eval_every must be >= 1");
  if (run.eval_prompts < 1 || run.rollout_eval_prompts < 1 || run.rollout_eval_samples < 1)
    throw ConfigError("run: evaluation sizes must be >= 1");
  if (run.bucket_width < 1) throw ConfigError("run: bucket_width must be >= 1");
  if (run.workers < 1) throw ConfigError("run: workers must be >= 1");
  if (run.early_stop_window < 1) throw ConfigError("run: early_stop_window must be >= 1");
  if (run.probe_source < 0 || run.probe_source >= env.dims.source_script_size)
    throw ConfigError("run: probe_source must be a source-script token");
  if (init.mode != "uniform" && init.mode != "sft") throw ConfigError("init: mode must be 'uniform' or 'sft'");
  if (!(init.copy_fraction >= 0.0 && init.copy_fraction <= 1.0))
    throw ConfigError("init: copy_fraction must be in [0, 1]");
  if (prompts.min_len < 1 || prompts.max_len < prompts.min_len) throw ConfigError("prompts: bad length range");
}

RunSpec run_spec_from_json(const nlohmann::json& j) {
  json_util::reject_unknown(j, "config", {"env", "prompts", "train", "advantage", "rlvr", "run", "init"});
  RunSpec s;
  if (j.contains("env")) s.env = env_spec_from_json(j.at("env"));
  if (j.contains("prompts")) s.prompts = prompt_spec_from_json(j.at("prompts"));
  s.train = train_config_from_json(j.value("train", nlohmann::json()), j.value("advantage", nlohmann::json()));
  if (j.contains("rlvr")) s.rlvr = rlvr_config_from_json(j.at("rlvr"));
  if (j.contains("run")) {
    const auto& r = j.at("run");
    constexpr std::string_view w = "run";
    json_util::reject_unknown(r, w,
                              {"steps", "M", "eval_every", "eval_prompts", "rollout_eval_prompts",
                               "rollout_eval_samples", "bucket_width", "workers", "probe_source", "early_stop",
                               "early_stop_window", "early_stop_tol", "dump_advantages", "seed"});
    json_util::read(r, "steps", s.run.steps, w);
    json_util::read(r, "M", s.run.prompts_per_batch, w);
    json_util::read(r, "eval_every", s.run.eval_every, w);
    json_util::read(r, "eval_prompts", s.run.eval_prompts, w);
    json_util::read(r, "rollout_eval_prompts", s.run.rollout_eval_prompts, w);
    json_util::read(r, "rollout_eval_samples", s.run.rollout_eval_samples, w);
    json_util::read(r, "bucket_width", s.run.bucket_width, w);
    json_util::read(r, "workers", s.run.workers, w);
    json_util::read(r, "probe_source", s.run.probe_source, w);
    json_util::read(r, "early_stop", s.run.early_stop, w);
    json_util::read(r, "early_stop_window", s.run.early_stop_window, w);
    json_util::read(r, "early_stop_tol", s.run.early_stop_tol, w);
    json_util::read(r, "dump_advantages", s.run.dump_advantages, w);
    json_util::read(r, "seed", s.run.seed, w);
  }
  if (j.contains("init")) {
    const auto& i = j.at("init");
    constexpr std::string_view w = "init";
    json_util::reject_unknown(i, w, {"mode", "literal", "paraphrase", "markup", "eos", "copy", "copy_fraction"});
    json_util::read(i, "mode", s.init.mode, w);
    json_util::read(i, "literal", s.init.literal, w);
    json_util::read(i, "paraphrase", s.init.paraphrase, w);
    json_util::read(i, "markup", s.init.markup, w);
    json_util::read(i, "eos", s.init.eos, w);
    json_util::read(i, "copy", s.init.copy, w);
    json_util::read(i, "copy_fraction", s.init.copy_fraction, w);
  }
  s.validate();
  return s;
}

nlohmann::json to_json(const RunSpec& s) {
  auto train = to_json(s.train);
  nlohmann::json advantage = {{"alpha", s.train.advantage.alpha},
                              {"gamma", s.train.advantage.gamma},
                              {"eps_std", s.train.advantage.eps_std},
                              {"reward_broadcast", to_string(s.train.advantage.broadcast)}};
  return {{"env", to_json(s.env)},
          {"prompts", to_json(s.prompts)},
          {"train", train},
          {"advantage", advantage},
          {"rlvr", to_json(s.rlvr)},
          {"run",
           {{"steps", s.run.steps},
            {"M", s.run.prompts_per_batch},
            {"eval_every", s.run.eval_every},
            {"eval_prompts", s.run.eval_prompts},
            {"rollout_eval_prompts", s.run.rollout_eval_prompts},
            {"rollout_eval_samples", s.run.rollout_eval_samples},
            {"bucket_width", s.run.bucket_width},
            {"workers", s.run.workers},
            {"probe_source", s.run.probe_source},
            {"early_stop", s.run.early_stop},
            {"early_stop_window", s.run.early_stop_window},
            {"early_stop_tol", s.run.early_stop_tol},
            {"dump_advantages", s.run.dump_advantages},
            {"seed", s.run.seed}}},
          {"init",
           {{"mode", s.init.mode},
            {"literal", s.init.literal},
            {"paraphrase", s.init.paraphrase},
            {"markup", s.init.markup},
            {"eos", s.init.eos},
            {"copy", s.init.copy},
            {"copy_fraction", s.init.copy_fraction}}}};
}

nlohmann::json to_json(const MetricsRecord& r) {
  return {{"step", r.step},
          {"seed", r.seed},
          {"algorithm", r.algorithm},
          {"kl_regime", r.kl_regime},
          {"entropy", r.entropy},
          {"mean_length", r.mean_length},
          {"mean_composite", r.mean_composite},
          {"rate_language", r.rates.language},
          {"rate_length", r.rates.length},
          {"rate_format", r.rates.format},
          {"rate_mixing", r.rates.mixing},
          {"rate_overall", r.rates.overall},
          {"rate_joint", r.rates.joint},
          {"kl_k1", r.kl_k1},
          {"kl_k2", r.kl_k2},
          {"kl_k3", r.kl_k3},
          {"clip_fraction", r.clip_fraction},
          {"probe_ratio", r.probe_ratio}};
}

std::string csv_header() {
  return "step,seed,algorithm,kl_regime,entropy,mean_length,mean_composite,rate_language,rate_length,rate_format,"
         "rate_mixing,rate_overall,rate_joint,kl_k1,kl_k2,kl_k3,clip_fraction,probe_ratio";
}

std::string to_csv(const MetricsRecord& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.step << ',' << r.seed << ',' << r.algorithm << ',' << r.kl_regime << ',' << r.entropy << ','
     << r.mean_length << ',' << r.mean_composite << ',' << r.rates.language << ',' << r.rates.length << ','
     << r.rates.format << ',' << r.rates.mixing << ',' << r.rates.overall << ',' << r.rates.joint << ','
     << r.kl_k1 << ',' << r.kl_k2 << ',' << r.kl_k3 << ',' << r.clip_fraction << ',' << r.probe_ratio;
  return os.str();
}

// Initialization ------------------------------------------------------------------

namespace {

void fill_rows(PolicyParams& params, const Environment& env, double literal, double paraphrase, double markup,
               double eos, const std::vector<bool>& copies, double copy) {
  const auto& schema = params.schema();
  const auto& vocab = env.vocab();
  const auto& para = env.paraphrases();
  const int S = vocab.source_size();
  for (int ctx = 0; ctx < schema.count(); ++ctx) {
    const Context c = schema.decode(ctx);
    auto row = params.logits(ctx);
    if (c.source == schema.past_end()) {
      row[static_cast<std::size_t>(vocab.eos())] = eos;
    } else if (c.source < S) {
      const auto& accept = para.accept[static_cast<std::size_t>(c.source)];
      for (std::size_t k = 0; k < accept.size(); ++k)
        row[static_cast<std::size_t>(accept[k])] = k == 0 ? literal : paraphrase;
      if (copies[static_cast<std::size_t>(c.source)]) row[static_cast<std::size_t>(c.source)] = copy;
    } else {
      row[static_cast<std::size_t>(vocab.markup_base() + (c.source - S))] = markup;
    }
  }
}

}  // namespace

PolicyParams make_initial_policy(const Environment& env, const ContextSchema& schema, const InitSpec& init) {
  PolicyParams params(schema, 0.0);
  if (init.mode == "uniform") return params;
  if (init.mode != "sft") throw ConfigError("init: mode must be 'uniform' or 'sft'");
  const int S = env.vocab().source_size();
  std::vector<int> order(static_cast<std::size_t>(S));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(env.spec().seed, {kInit}));
  for (int i = S - 1; i > 0; --i)
    std::swap(order[static_cast<std::size_t>(i)], order[rng.below(static_cast<std::uint64_t>(i) + 1)]);
  const auto n_copy = static_cast<std::size_t>(std::ceil(init.copy_fraction * S - 1e-12));
  std::vector<bool> copies(static_cast<std::size_t>(S), false);
  for (std::size_t i = 0; i < n_copy; ++i) copies[static_cast<std::size_t>(order[i])] = true;
  fill_rows(params, env, init.literal, init.paraphrase, init.markup, init.eos, copies, init.copy);
  return params;
}

PolicyParams make_oracle_policy(const Environment& env, const ContextSchema& schema, double margin) {
  PolicyParams params(schema, 0.0);
  std::vector<bool> none(static_cast<std::size_t>(env.vocab().source_size()), false);
  fill_rows(params, env, margin, 0.0, margin, margin, none, 0.0);
  return params;
}

// Evaluation ----------------------------------------------------------------------

Prompt eval_prompt(const Environment& env, const PromptSpec& spec, std::uint64_t seed, int i) {
  return gen_prompt(env, derive_seed(seed, {kEvalPrompt, static_cast<std::uint64_t>(i)}), spec);
}

Prompt train_prompt(const Environment& env, const PromptSpec& spec, std::uint64_t seed, int step, int j) {
  return gen_prompt(env,
                    derive_seed(seed, {kTrainPrompt, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(j)}),
                    spec);
}

ConstraintRates eval_constraints(const PolicyParams& params, const Environment& env, const RlvrConfig& rlvr,
                                 const PromptSpec& prompts, int n, std::uint64_t seed, int max_len) {
  if (n < 1) throw std::invalid_argument("eval_constraints: n must be >= 1");
  ConstraintRates r;
  for (int i = 0; i < n; ++i) {
    const auto x = eval_prompt(env, prompts, seed, i);
    const auto y = greedy_decode(params, x, max_len);
    const auto b = composite_reward(env, x, y, rlvr);
    r.language += b.lang_ok;
    r.length += b.length_ok;
    r.format += b.format_ok;
    r.mixing += b.mix_ok;
    r.joint += b.lang_ok && b.length_ok && b.format_ok && b.mix_ok;
  }
  const double inv = 1.0 / n;
  r.language *= inv;
  r.length *= inv;
  r.format *= inv;
  r.mixing *= inv;
  r.joint *= inv;
  r.overall = (r.language + r.length + r.format + r.mixing) / 4.0;
  return r;
}

namespace {

struct RolloutStats {
  double entropy = 0.0;
  double length = 0.0;
  double composite = 0.0;
  double k1 = 0.0, k2 = 0.0, k3 = 0.0;
};

RolloutStats rollout_stats(const PolicyParams& params, const PolicyParams& reference, const Environment& env,
                           const RunSpec& spec) {
  const Temperature tau(spec.train.tau);
  const int n = spec.run.rollout_eval_prompts;
  const int m = spec.run.rollout_eval_samples;
  std::vector<RolloutStats> per(static_cast<std::size_t>(n));
  std::vector<std::size_t> tokens(static_cast<std::size_t>(n), 0);
  parallel_for(static_cast<std::size_t>(n), spec.run.workers, [&](std::size_t i) {
    const auto x = eval_prompt(env, spec.prompts, spec.run.seed, static_cast<int>(i));
    auto& s = per[i];
    for (int k = 0; k < m; ++k) {
      const auto traj = sample_trajectory(params, env, x, tau, spec.train.max_len,
                                          derive_seed(spec.run.seed, {kEvalRollout, i, static_cast<std::uint64_t>(k)}));
      s.length += static_cast<double>(traj.size());
      s.composite += composite_reward(env, x, traj.tokens, spec.rlvr).composite;
      const auto lr = log_prob(reference, tau, x, traj.tokens);
      for (std::size_t t = 0; t < traj.size(); ++t) {
        s.entropy += traj.entropy[t];
        const double u = lr[t] - traj.logp[t];
        s.k1 += kl::k1_sample(u);
        s.k2 += kl::k2_sample(u);
        s.k3 += kl::k3_sample(u);
      }
      tokens[i] += traj.size();
    }
  });
  RolloutStats out;
  std::size_t total_tokens = 0;
  for (std::size_t i = 0; i < per.size(); ++i) {
    out.entropy += per[i].entropy;
    out.length += per[i].length;
    out.composite += per[i].composite;
    out.k1 += per[i].k1;
    out.k2 += per[i].k2;
    out.k3 += per[i].k3;
    total_tokens += tokens[i];
  }
  const double seqs = static_cast<double>(n) * m;
  const double toks = static_cast<double>(std::max<std::size_t>(total_tokens, 1));
  out.length /= seqs;
  out.composite /= seqs;
  out.entropy /= toks;
  out.k1 /= toks;
  out.k2 /= toks;
  out.k3 /= toks;
  return out;
}

MetricsRecord evaluate(int step, const PolicyParams& params, const PolicyParams& reference, const Environment& env,
                       const RunSpec& spec, double clip_fraction) {
  MetricsRecord r;
  r.step = step;
  r.seed = spec.run.seed;
  r.algorithm = to_string(spec.train.algorithm);
  r.kl_regime = to_string(spec.train.kl_regime);
  const auto s = rollout_stats(params, reference, env, spec);
  r.entropy = s.entropy;
  r.mean_length = s.length;
  r.mean_composite = s.composite;
  r.kl_k1 = s.k1;
  r.kl_k2 = s.k2;
  r.kl_k3 = s.k3;
  r.rates = eval_constraints(params, env, spec.rlvr, spec.prompts, spec.run.eval_prompts, spec.run.seed,
                             spec.train.max_len);
  r.clip_fraction = clip_fraction;
  r.probe_ratio = probe_probabilities(params, env, spec.run.probe_source, Temperature(spec.train.tau)).ratio;
  return r;
}

}  // namespace

RolloutGroup collect_group(const PolicyParams& params, const Environment& env, const RunSpec& spec, int step, int j) {
  const auto& cfg = spec.train;
  const Temperature tau(cfg.tau);
  RolloutGroup g;
  g.prompt = train_prompt(env, spec.prompts, spec.run.seed, step, j);
  // Every preset samples K candidates so rollout budgets match across algorithms.
  std::vector<Trajectory> cands;
  std::vector<Candidate> scored;
  for (int k = 0; k < cfg.candidates; ++k) {
    auto traj = sample_trajectory(
        params, env, g.prompt, tau, cfg.max_len,
        derive_seed(spec.run.seed, {kRollout, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(j),
                                    static_cast<std::uint64_t>(k)}));
    scored.push_back({composite_reward(env, g.prompt, traj.tokens, spec.rlvr), traj.size()});
    cands.push_back(std::move(traj));
  }
  std::vector<std::size_t> pick(static_cast<std::size_t>(cfg.group_size));
  if (cfg.filter) {
    pick = filter_candidates(scored, static_cast<std::size_t>(cfg.group_size));
  } else {
    std::iota(pick.begin(), pick.end(), std::size_t{0});
  }
  for (auto i : pick) {
    double reward = scored[i].reward.composite;
    if (cfg.dapo.enabled) reward += dapo_overlong_penalty(cands[i].size(), cfg.dapo.threshold, cfg.dapo.slope);
    g.trajectories.push_back(std::move(cands[i]));
    g.breakdowns.push_back(scored[i].reward);
    g.rewards.push_back(reward);
  }
  return g;
}

namespace {

class Outputs {
 public:
  Outputs(const std::optional<std::filesystem::path>& dir, const RunSpec& spec) {
    if (!dir) return;
    dir_ = *dir;
    std::filesystem::create_directories(dir_);
    std::ofstream(dir_ / "config.json") << to_json(spec).dump(2) << '\n';
    jsonl_.open(dir_ / "metrics.jsonl");
    csv_.open(dir_ / "summary.csv");
    if (!jsonl_ || !csv_) throw std::runtime_error("cannot open output files in " + dir_.string());
    csv_ << csv_header() << '\n';
    if (spec.run.dump_advantages) {
      adv_.open(dir_ / "advantages.csv");
      if (!adv_) throw std::runtime_error("cannot open advantages.csv");
    }
  }

  void record(const MetricsRecord& r) {
    if (!jsonl_.is_open()) return;
    jsonl_ << to_json(r).dump() << '\n';
    csv_ << to_csv(r) << '\n';
  }

  std::ostream* advantages() { return adv_.is_open() ? &adv_ : nullptr; }

  void checkpoint(const PolicyParams& params, const RunSpec& spec, int step) {
    if (dir_.empty()) return;
    nlohmann::json j = to_json(params);
    j["step"] = step;
    j["seed"] = spec.run.seed;
    j["algorithm"] = to_string(spec.train.algorithm);
    std::ofstream(dir_ / "checkpoint.json") << j.dump() << '\n';
  }

 private:
  std::filesystem::path dir_;
  std::ofstream jsonl_, csv_, adv_;
};

}  // namespace

RunResult run(const RunSpec& spec, const std::optional<std::filesystem::path>& out_dir) {
  spec.validate();
  const auto env = make_env(spec.env);
  const auto schema = ContextSchema::make(spec.env.dims, spec.train.max_len, spec.run.bucket_width);
  const auto& cfg = spec.train;

  RunResult result;
  result.initial = make_initial_policy(env, schema, spec.init);
  PolicyParams params = result.initial;
  Outputs out(out_dir, spec);
  Optimizer optimizer(cfg.optimizer);
  CriticParams critic = make_critic(schema);
  const PolicyParams* reference = cfg.kl_regime == KlRegime::None ? nullptr : &result.initial;

  auto emit = [&](int step, double clip) {
    result.records.push_back(evaluate(step, params, result.initial, env, spec, clip));
    out.record(result.records.back());
  };

  double clip_fraction = 0.0;
  std::vector<double> step_rewards;
  int step = 0;
  for (; step < spec.run.steps; ++step) {
    if (step % spec.run.eval_every == 0) emit(step, clip_fraction);

    MicroBatch batch;
    batch.groups.resize(static_cast<std::size_t>(spec.run.prompts_per_batch));
    parallel_for(batch.groups.size(), spec.run.workers,
                 [&](std::size_t j) { batch.groups[j] = collect_group(params, env, spec, step, static_cast<int>(j)); });
    batch.advantages = microbatch_advantages(batch.groups, cfg.advantage, &critic);
    if (auto* os = out.advantages()) dump_advantages_csv(*os, batch.groups, batch.advantages, cfg.advantage);

    const PolicyParams params_old = params;
    for (int e = 0; e < cfg.inner_epochs; ++e) {
      auto lg = token_normalized_loss(params, params_old, reference, batch, cfg);
      clip_fraction = lg.report.clip_fraction;
      apply_update(params, lg.grad, cfg.step_size, optimizer);
    }
    if (!params.all_finite()) throw std::runtime_error("non-finite parameters at step " + std::to_string(step));

    if (cfg.advantage.baseline == BaselineMode::Critic) {
      std::vector<std::vector<double>> features;
      std::vector<double> returns;
      for (const auto& g : batch.groups) {
        const auto r = token_rewards(g, cfg.advantage.broadcast);
        for (std::size_t i = 0; i < g.trajectories.size(); ++i)
          for (std::size_t t = 0; t < g.trajectories[i].size(); ++t) {
            features.push_back(critic_features(schema, g.trajectories[i].contexts[t]));
            returns.push_back(r[i][t]);
          }
      }
      critic = fit_critic(schema, features, returns, 1e-6);
    }

    double mean_reward = 0.0;
    std::size_t n = 0;
    for (const auto& g : batch.groups)
      for (double r : g.rewards) {
        mean_reward += r;
        ++n;
      }
    step_rewards.push_back(mean_reward / static_cast<double>(n));
    const auto w = static_cast<std::size_t>(spec.run.early_stop_window);
    if (spec.run.early_stop && step_rewards.size() >= 2 * w) {
      const auto end = step_rewards.end();
      const double recent = std::accumulate(end - static_cast<std::ptrdiff_t>(w), end, 0.0) / static_cast<double>(w);
      const double prior = std::accumulate(end - static_cast<std::ptrdiff_t>(2 * w), end - static_cast<std::ptrdiff_t>(w),
                                           0.0) /
                           static_cast<double>(w);
      if (std::abs(recent - prior) < spec.run.early_stop_tol) {
        ++step;
        break;
      }
    }
  }
  if (result.records.empty() || result.records.back().step != step) emit(step, clip_fraction);
  result.steps_run = step;
  result.final = params;
  out.checkpoint(params, spec, step);
  return result;
}

std::vector<RunSpec> grid_specs(const nlohmann::json& config, std::span<const Algorithm> algorithms,
                                std::span<const KlRegime> regimes) {
  std::vector<RunSpec> specs;
  for (auto a : algorithms)
    for (auto k : regimes) {
      auto j = config;
      j["train"]["algorithm"] = to_string(a);
      j["train"]["kl_regime"] = to_string(k);
      specs.push_back(run_spec_from_json(j));
    }
  return specs;
}

std::vector<GridCell> run_grid(std::span<const RunSpec> cells, const std::optional<std::filesystem::path>& out_dir,
                               int cell_workers) {
  std::vector<GridCell> out;
  for (const auto& c : cells) out.push_back({c.train.algorithm, c.train.kl_regime, {}});
  parallel_for(cells.size(), cell_workers, [&](std::size_t i) {
    std::optional<std::filesystem::path> dir;
    if (out_dir) dir = *out_dir / (to_string(out[i].algorithm) + "_" + to_string(out[i].kl_regime));
    out[i].result = run(cells[i], dir);
  });
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    std::ofstream os(*out_dir / "grid.csv");
    os << csv_header() << '\n';
    for (const auto& c : out)
      for (const auto& r : c.result.records) os << to_csv(r) << '\n';
  }
  return out;
}

GradCheckReport gradient_check(const TrainConfig& base, std::uint64_t seed, double fd_step) {
  TrainConfig cfg = base;
  cfg.max_len = 4;
  cfg.validate();
  const auto env = make_env(derive_seed(seed, {0}), VocabDims{2, 2, 1}, 2);
  const auto schema = ContextSchema::make(env.vocab().dims(), cfg.max_len, 2);
  Rng rng(derive_seed(seed, {1}));
  PolicyParams old_params(schema), params(schema), reference(schema);
  for (auto& v : old_params.table()) v = rng.normal();
  for (std::size_t i = 0; i < params.size(); ++i) params.table()[i] = old_params.table()[i] + 0.3 * rng.normal();
  for (std::size_t i = 0; i < params.size(); ++i) reference.table()[i] = old_params.table()[i] + 0.3 * rng.normal();

  const PromptSpec ps{1, 3, 0.3};
  const Temperature tau(cfg.tau);
  MicroBatch batch;
  for (int j = 0; j < 2; ++j) {
    RolloutGroup g;
    g.prompt = gen_prompt(env, derive_seed(seed, {2, static_cast<std::uint64_t>(j)}), ps);
    for (int i = 0; i < cfg.group_size; ++i) {
      auto traj = sample_trajectory(old_params, env, g.prompt, tau, cfg.max_len,
                                    derive_seed(seed, {3, static_cast<std::uint64_t>(j), static_cast<std::uint64_t>(i)}));
      g.breakdowns.push_back(composite_reward(env, g.prompt, traj.tokens, RlvrConfig{}));
      g.rewards.push_back(g.breakdowns.back().composite + 0.1 * rng.normal());
      g.trajectories.push_back(std::move(traj));
    }
    batch.groups.push_back(std::move(g));
  }
  const auto critic = make_critic(schema);
  batch.advantages = microbatch_advantages(batch.groups, cfg.advantage, &critic);

  const PolicyParams* ref = cfg.kl_regime == KlRegime::None ? nullptr : &reference;
  const auto analytic = token_normalized_loss(params, old_params, ref, batch, cfg);
  const auto numeric = finite_diff_grad(
      [&](const PolicyParams& p) { return token_normalized_loss(p, old_params, ref, batch, cfg).report.total; }, params,
      fd_step);
  return {max_relative_error(analytic.grad.table(), numeric.table()), params.size(), analytic.report.tokens};
}

}  // namespace vepo
