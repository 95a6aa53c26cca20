#include "vepo/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vepo/json_util.hpp"
#include "vepo/rng.hpp"

namespace vepo {

ContextSchema ContextSchema::make(VocabDims dims, int max_len, int bucket_width) {
  if (bucket_width < 1) throw std::invalid_argument("bucket_width must be >= 1");
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  ContextSchema s;
  s.dims = dims;
  s.bucket_width = bucket_width;
  s.position_buckets = (max_len + bucket_width - 1) / bucket_width;
  return s;
}

Context ContextSchema::decode(int index) const {
  Context c;
  c.bucket = index % position_buckets;
  index /= position_buckets;
  c.prev = index % prev_contexts();
  c.source = index / prev_contexts();
  return c;
}

Context ContextSchema::context_at(const Prompt& x, std::span<const TokenId> prefix, std::size_t t) const {
  Context c;
  if (t < x.source.size()) {
    const TokenId src = x.source[t];
    const int markup_base = dims.source_script_size + dims.target_script_size;
    c.source = src < dims.source_script_size ? src : dims.source_script_size + (src - markup_base);
  } else {
    c.source = past_end();
  }
  c.prev = t == 0 ? bos() : prefix[t - 1];
  c.bucket = std::min(static_cast<int>(t) / bucket_width, position_buckets - 1);
  return c;
}

PolicyParams::PolicyParams(ContextSchema schema, double fill)
    : schema_(schema),
      table_(static_cast<std::size_t>(schema.count()) * static_cast<std::size_t>(schema.vocab_size()), fill) {}

bool PolicyParams::all_finite() const {
  return std::all_of(table_.begin(), table_.end(), [](double v) { return std::isfinite(v); });
}

std::vector<double> tempered_log_probs(std::span<const double> logits, Temperature tau) {
  const double inv = 1.0 / tau.value();
  double mx = -INFINITY;
  for (double z : logits) {
    if (!std::isfinite(z)) throw std::domain_error("non-finite logit");
    mx = std::max(mx, z * inv);
  }
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z * inv - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) out[k] = logits[k] * inv - lse;
  return out;
}

std::vector<double> tempered_probs(std::span<const double> logits, Temperature tau) {
  auto lp = tempered_log_probs(logits, tau);
  for (double& v : lp) v = std::exp(v);
  return lp;
}

std::vector<double> tempered_probs(const PolicyParams& params, int ctx, Temperature tau) {
  return tempered_probs(params.logits(ctx), tau);
}

double entropy_exact(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return std::max(0.0, h);
}

double entropy_topfrac(std::span<const double> p, double fraction) {
  if (!(fraction > 0.0) || fraction > 1.0) throw std::invalid_argument("fraction must be in (0, 1]");
  const auto n = p.size();
  const auto keep = std::min(n, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n))));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  double h = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    const double v = p[order[i]];
    if (v > 0.0) h -= v * std::log(v);
  }
  return std::max(0.0, h);
}

namespace {

double entropy_from_log_probs(std::span<const double> lp) {
  double h = 0.0;
  for (double v : lp) {
    const double p = std::exp(v);
    if (p > 0.0) h -= p * v;
  }
  return std::max(0.0, h);
}

TokenId check_token(const PolicyParams& params, TokenId tok) {
  if (tok < 0 || tok >= params.vocab_size())
    throw VocabError("token " + std::to_string(tok) + " outside policy vocabulary");
  return tok;
}

}  // namespace

Trajectory sample_trajectory(const PolicyParams& params, const Environment& env, const Prompt& x,
                             Temperature tau, int max_len, std::uint64_t seed) {
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  const auto& schema = params.schema();
  const TokenId eos = env.vocab().eos();
  Rng rng(seed);
  Trajectory traj;
  for (int t = 0; t < max_len; ++t) {
    const int ctx = schema.index(schema.context_at(x, traj.tokens, static_cast<std::size_t>(t)));
    const auto lp = tempered_log_probs(params.logits(ctx), tau);
    const double u = rng.uniform();
    double acc = 0.0;
    TokenId tok = static_cast<TokenId>(lp.size() - 1);
    for (std::size_t k = 0; k < lp.size(); ++k) {
      acc += std::exp(lp[k]);
      if (u < acc) {
        tok = static_cast<TokenId>(k);
        break;
      }
    }
    // Rounding can leave acc slightly below 1; never land on a zero-mass token.
    while (std::exp(lp[static_cast<std::size_t>(tok)]) == 0.0 && tok > 0) --tok;
    traj.tokens.push_back(tok);
    traj.contexts.push_back(ctx);
    traj.logp.push_back(lp[static_cast<std::size_t>(tok)]);
    traj.entropy.push_back(entropy_from_log_probs(lp));
    if (tok == eos) break;
  }
  return traj;
}

TokenSeq greedy_decode(const PolicyParams& params, const Prompt& x, int max_len) {
  const auto& schema = params.schema();
  const TokenId eos = static_cast<TokenId>(params.vocab_size() - 1);
  TokenSeq out;
  for (int t = 0; t < max_len; ++t) {
    const int ctx = schema.index(schema.context_at(x, out, static_cast<std::size_t>(t)));
    const auto row = params.logits(ctx);
    const auto tok = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
    out.push_back(tok);
    if (tok == eos) break;
  }
  return out;
}

std::vector<int> trajectory_contexts(const ContextSchema& schema, const Prompt& x,
                                     std::span<const TokenId> tokens) {
  std::vector<int> ctx(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) ctx[t] = schema.index(schema.context_at(x, tokens, t));
  return ctx;
}

std::vector<double> log_prob(const PolicyParams& params, Temperature tau, const Prompt& x,
                             std::span<const TokenId> tokens) {
  std::vector<double> out(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const TokenId tok = check_token(params, tokens[t]);
    if (t > 0) check_token(params, tokens[t - 1]);
    const int ctx = params.schema().index(params.schema().context_at(x, tokens, t));
    out[t] = tempered_log_probs(params.logits(ctx), tau)[static_cast<std::size_t>(tok)];
  }
  return out;
}

void accumulate_score(PolicyParams& grad, const PolicyParams& params, int ctx, TokenId token,
                      Temperature tau, double weight) {
  const auto p = tempered_probs(params.logits(ctx), tau);
  const double scale = weight / tau.value();
  auto g = grad.logits(ctx);
  for (std::size_t k = 0; k < p.size(); ++k) g[k] -= scale * p[k];
  g[static_cast<std::size_t>(token)] += scale;
}

PolicyParams grad_log_prob(const PolicyParams& params, Temperature tau, const Prompt& x,
                           std::span<const TokenId> tokens) {
  PolicyParams grad = params.zeros_like();
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const TokenId tok = check_token(params, tokens[t]);
    const int ctx = params.schema().index(params.schema().context_at(x, tokens, t));
    accumulate_score(grad, params, ctx, tok, tau, 1.0);
  }
  return grad;
}

nlohmann::json to_json(const ContextSchema& schema) {
  return {
      {"source_script_size", schema.dims.source_script_size},
      {"target_script_size", schema.dims.target_script_size},
      {"markup_pairs", schema.dims.markup_pairs},
      {"bucket_width", schema.bucket_width},
      {"position_buckets", schema.position_buckets},
      {"context_axes", {"aligned_source", "previous_token", "position_bucket"}},
  };
}

ContextSchema schema_from_json(const nlohmann::json& j) {
  ContextSchema s;
  s.dims.source_script_size = j.at("source_script_size").get<int>();
  s.dims.target_script_size = j.at("target_script_size").get<int>();
  s.dims.markup_pairs = j.at("markup_pairs").get<int>();
  s.bucket_width = j.at("bucket_width").get<int>();
  s.position_buckets = j.at("position_buckets").get<int>();
  if (s.bucket_width < 1 || s.position_buckets < 1) throw ConfigError("checkpoint: invalid context schema");
  return s;
}

nlohmann::json to_json(const PolicyParams& params) {
  return {
      {"format", "vepo-policy/1"},
      {"vocab_size", params.vocab_size()},
      {"contexts", params.schema().count()},
      {"schema", to_json(params.schema())},
      {"table", params.table()},
  };
}

PolicyParams policy_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != "vepo-policy/1") throw ConfigError("checkpoint: unknown format");
  PolicyParams params(schema_from_json(j.at("schema")));
  auto table = j.at("table").get<std::vector<double>>();
  if (table.size() != params.size()) throw ConfigError("checkpoint: table size does not match schema");
  params.table() = std::move(table);
  return params;
}

std::vector<double> critic_features(const ContextSchema& schema, int ctx) {
  const Context c = schema.decode(ctx);
  std::vector<double> f(static_cast<std::size_t>(1 + schema.position_buckets + schema.source_contexts()), 0.0);
  f[0] = 1.0;
  f[static_cast<std::size_t>(1 + c.bucket)] = 1.0;
  f[static_cast<std::size_t>(1 + schema.position_buckets + c.source)] = 1.0;
  return f;
}

CriticParams make_critic(const ContextSchema& schema) {
  return {schema, std::vector<double>(static_cast<std::size_t>(1 + schema.position_buckets + schema.source_contexts()), 0.0)};
}

double critic_value(const CriticParams& critic, std::span<const double> features) {
  if (features.size() != critic.weights.size()) throw std::invalid_argument("critic feature size mismatch");
  return std::inner_product(features.begin(), features.end(), critic.weights.begin(), 0.0);
}

CriticParams fit_critic(const ContextSchema& schema, std::span<const std::vector<double>> features,
                        std::span<const double> returns, double ridge) {
  if (features.size() != returns.size()) throw std::invalid_argument("critic fit: size mismatch");
  if (features.empty()) throw std::invalid_argument("critic fit: no data");
  const std::size_t d = features.front().size();
  // Normal equations (X'X + ridge I) w = X'y, solved by Cholesky.
  std::vector<double> a(d * d, 0.0), b(d, 0.0);
  for (std::size_t n = 0; n < features.size(); ++n) {
    const auto& f = features[n];
    for (std::size_t i = 0; i < d; ++i) {
      if (f[i] == 0.0) continue;
      b[i] += f[i] * returns[n];
      for (std::size_t j = 0; j < d; ++j) a[i * d + j] += f[i] * f[j];
    }
  }
  for (std::size_t i = 0; i < d; ++i) a[i * d + i] += ridge;
  std::vector<double> l(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a[i * d + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i * d + k] * l[j * d + k];
      if (i == j) {
        l[i * d + i] = std::sqrt(std::max(s, 1e-300));
      } else {
        l[i * d + j] = s / l[j * d + j];
      }
    }
  }
  std::vector<double> z(d), w(d);
  for (std::size_t i = 0; i < d; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l[i * d + k] * z[k];
    z[i] = s / l[i * d + i];
  }
  for (std::size_t i = d; i-- > 0;) {
    double s = z[i];
    for (std::size_t k = i + 1; k < d; ++k) s -= l[k * d + i] * w[k];
    w[i] = s / l[i * d + i];
  }
  return {schema, w};
}

}  // namespace vepo
