#include "vepo/rlvr.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <stdexcept>

#include "vepo/json_util.hpp"

namespace vepo {

void RlvrConfig::validate() const {
  for (double w : {lambda_len, lambda_fmt, lambda_lid, lambda_mix, sigma_len, w_preserve, w_broken, eta_lid, zeta_mix})
    if (!(w >= 0.0)) throw ConfigError("rlvr: weights and penalties must be >= 0");
  if (!(range_lo < range_hi)) throw ConfigError("rlvr: range_lo must be < range_hi");
  if (!(theta_lid > 0.0 && theta_lid <= 1.0)) throw ConfigError("rlvr: theta_lid must be in (0, 1]");
  if (!(tau_mix >= 0.0 && tau_mix < 1.0)) throw ConfigError("rlvr: tau_mix must be in [0, 1)");
  if (!(c_max > 0.0)) throw ConfigError("rlvr: c_max must be > 0");
}

nlohmann::json to_json(const RlvrConfig& c) {
  return {{"lambda_len", c.lambda_len}, {"lambda_fmt", c.lambda_fmt}, {"lambda_lid", c.lambda_lid},
          {"lambda_mix", c.lambda_mix}, {"range_lo", c.range_lo},     {"range_hi", c.range_hi},
          {"sigma_len", c.sigma_len},   {"w_preserve", c.w_preserve}, {"w_broken", c.w_broken},
          {"theta_lid", c.theta_lid},   {"eta_lid", c.eta_lid},       {"tau_mix", c.tau_mix},
          {"zeta_mix", c.zeta_mix},     {"c_max", c.c_max}};
}

RlvrConfig rlvr_config_from_json(const nlohmann::json& j) {
  constexpr std::string_view where = "rlvr";
  json_util::reject_unknown(j, where,
                            {"lambda_len", "lambda_fmt", "lambda_lid", "lambda_mix", "range_lo", "range_hi",
                             "sigma_len", "w_preserve", "w_broken", "theta_lid", "eta_lid", "tau_mix",
                             "zeta_mix", "c_max"});
  RlvrConfig c;
  json_util::read(j, "lambda_len", c.lambda_len, where);
  json_util::read(j, "lambda_fmt", c.lambda_fmt, where);
  json_util::read(j, "lambda_lid", c.lambda_lid, where);
  json_util::read(j, "lambda_mix", c.lambda_mix, where);
  json_util::read(j, "range_lo", c.range_lo, where);
  json_util::read(j, "range_hi", c.range_hi, where);
  json_util::read(j, "sigma_len", c.sigma_len, where);
  json_util::read(j, "w_preserve", c.w_preserve, where);
  json_util::read(j, "w_broken", c.w_broken, where);
  json_util::read(j, "theta_lid", c.theta_lid, where);
  json_util::read(j, "eta_lid", c.eta_lid, where);
  json_util::read(j, "tau_mix", c.tau_mix, where);
  json_util::read(j, "zeta_mix", c.zeta_mix, where);
  json_util::read(j, "c_max", c.c_max, where);
  c.validate();
  return c;
}

nlohmann::json to_json(const RewardBreakdown& r) {
  return {{"r_mt", r.r_mt},
          {"r_len", r.r_len},
          {"r_fmt", r.r_fmt},
          {"r_lid", r.r_lid},
          {"r_mix", r.r_mix},
          {"composite", r.composite},
          {"compliant", r.compliant},
          {"rho", r.rho},
          {"f_preserve", r.f_preserve},
          {"f_broken", r.f_broken},
          {"lid_confidence", r.lid_confidence},
          {"p_mix", r.p_mix}};
}

double length_ratio(std::span<const TokenId> x, std::span<const TokenId> y, const Vocab& vocab) {
  if (x.empty()) throw std::invalid_argument("length ratio undefined for an empty source");
  return static_cast<double>(content_of(vocab, y).size()) / static_cast<double>(x.size());
}

double length_reward_from_ratio(double rho, const RlvrConfig& cfg) {
  if (rho > cfg.range_hi) return -cfg.sigma_len * (rho - cfg.range_hi);
  if (rho < cfg.range_lo) return -cfg.sigma_len * (cfg.range_lo - rho);
  return 1.0;
}

double length_reward(std::span<const TokenId> x, std::span<const TokenId> y, const Vocab& vocab,
                     const RlvrConfig& cfg) {
  return length_reward_from_ratio(length_ratio(x, y, vocab), cfg);
}

double format_preserve(std::span<const TokenId> x, std::span<const TokenId> y, const Vocab& vocab) {
  std::map<TokenId, int> want;
  int total = 0;
  for (auto t : x)
    if (vocab.is_markup(t)) {
      ++want[t];
      ++total;
    }
  if (total == 0) return 1.0;
  std::map<TokenId, int> have;
  for (auto t : y)
    if (vocab.is_markup(t)) ++have[t];
  int common = 0;
  for (const auto& [tok, n] : want) common += std::min(n, have[tok]);
  return static_cast<double>(common) / static_cast<double>(total);
}

int format_broken(std::span<const TokenId> y, const Vocab& vocab) {
  std::vector<TokenId> stack;
  int violations = 0;
  for (auto t : y) {
    if (vocab.is_open(t)) {
      stack.push_back(t);
    } else if (vocab.is_close(t)) {
      if (!stack.empty() && stack.back() == vocab.partner(t)) {
        stack.pop_back();
      } else {
        ++violations;
      }
    }
  }
  return violations + static_cast<int>(stack.size());
}

double format_reward(std::span<const TokenId> x, std::span<const TokenId> y, const Vocab& vocab,
                     const RlvrConfig& cfg) {
  return cfg.w_preserve * format_preserve(x, y, vocab) -
         cfg.w_broken * static_cast<double>(format_broken(y, vocab));
}

LidResult identify_script(std::span<const TokenId> y, const Vocab& vocab) {
  int src = 0, tgt = 0;
  for (auto t : y) {
    const Script s = vocab.script_of(t);
    src += s == Script::Source ? 1 : 0;
    tgt += s == Script::Target ? 1 : 0;
  }
  const int n = src + tgt;
  if (n == 0) return {};
  // Ties resolve to the target script; confidence is 0.5 then and never passes.
  if (tgt >= src) return {Script::Target, static_cast<double>(tgt) / n};
  return {Script::Source, static_cast<double>(src) / n};
}

double lid_reward(std::span<const TokenId> y, Script target, const Vocab& vocab, const RlvrConfig& cfg) {
  const auto lid = identify_script(y, vocab);
  if (lid.script == target && lid.script != Script::Structural && lid.confidence > cfg.theta_lid) return 1.0;
  return -cfg.eta_lid;
}

double mixing_proportion(std::span<const TokenId> y, Script target, const Vocab& vocab) {
  int content = 0, off = 0;
  for (auto t : y) {
    const Script s = vocab.script_of(t);
    if (s == Script::Structural) continue;
    ++content;
    off += s != target ? 1 : 0;
  }
  return content == 0 ? 0.0 : static_cast<double>(off) / content;
}

double mixing_reward(std::span<const TokenId> y, Script target, const Vocab& vocab, const RlvrConfig& cfg) {
  const double p = mixing_proportion(y, target, vocab);
  return p <= cfg.tau_mix ? 0.0 : -cfg.zeta_mix * (p - cfg.tau_mix);
}

double clip_term(double value, double c_max) { return std::clamp(value, -c_max, c_max); }

RewardBreakdown composite_reward(const Environment& env, const Prompt& x, std::span<const TokenId> y,
                                 const RlvrConfig& cfg) {
  const auto& vocab = env.vocab();
  const auto out = content_of(vocab, y);
  RewardBreakdown r;
  r.rho = length_ratio(x.source, out, vocab);
  r.f_preserve = format_preserve(x.source, out, vocab);
  r.f_broken = format_broken(out, vocab);
  const auto lid = identify_script(out, vocab);
  r.lid_confidence = lid.confidence;
  r.p_mix = mixing_proportion(out, x.target_script, vocab);

  r.r_mt = clip_term(semantic_reward(env, x, y), cfg.c_max);
  r.r_len = clip_term(length_reward_from_ratio(r.rho, cfg), cfg.c_max);
  r.r_fmt = clip_term(cfg.w_preserve * r.f_preserve - cfg.w_broken * r.f_broken, cfg.c_max);
  r.r_lid = clip_term(lid_reward(out, x.target_script, vocab, cfg), cfg.c_max);
  r.r_mix = clip_term(mixing_reward(out, x.target_script, vocab, cfg), cfg.c_max);
  r.composite = r.r_mt + cfg.lambda_len * r.r_len + cfg.lambda_fmt * r.r_fmt + cfg.lambda_lid * r.r_lid +
                cfg.lambda_mix * r.r_mix;

  r.lang_ok = r.r_lid > 0.0;
  r.length_ok = r.rho >= cfg.range_lo && r.rho <= cfg.range_hi;
  r.format_ok = r.f_broken == 0;
  r.mix_ok = r.p_mix <= cfg.tau_mix;
  r.compliant = r.lang_ok && r.length_ok && r.format_ok && r.mix_ok;
  return r;
}

std::vector<std::size_t> filter_candidates(std::span<const Candidate> candidates, std::size_t group_size) {
  if (group_size < 1) throw std::invalid_argument("filter: G must be >= 1");
  if (candidates.size() < group_size) throw std::invalid_argument("filter: K must be >= G");
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ca = candidates[a];
    const auto& cb = candidates[b];
    if (ca.reward.compliant != cb.reward.compliant) return ca.reward.compliant;
    if (ca.reward.composite != cb.reward.composite) return ca.reward.composite > cb.reward.composite;
    return ca.length < cb.length;
  });
  order.resize(group_size);
  return order;
}

}  // namespace vepo
