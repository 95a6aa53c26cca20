#include "vepo/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace vepo {

std::vector<double> gibbs_target(std::span<const double> rewards, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("gibbs_target: beta must be > 0");
  if (rewards.empty()) throw std::invalid_argument("gibbs_target: empty outcome set");
  const double mx = *std::max_element(rewards.begin(), rewards.end());
  std::vector<double> p(rewards.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp((rewards[i] - mx) / beta);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

std::vector<double> fit_entropy_bandit(std::span<const double> rewards, double beta, int steps, double step_size) {
  if (rewards.empty()) throw std::invalid_argument("fit_entropy_bandit: empty outcome set");
  if (!(beta >= 0.0)) throw std::invalid_argument("fit_entropy_bandit: beta must be >= 0");
  const std::size_t n = rewards.size();
  std::vector<double> z(n, 0.0), g(n);
  const Temperature unit(1.0);
  for (int s = 0; s < steps; ++s) {
    const auto lp = tempered_log_probs(z, unit);
    double er = 0.0, h = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double p = std::exp(lp[k]);
      er += p * rewards[k];
      h -= p * lp[k];
    }
    // dJ/dz_k = p_k (R_k - E[R]) - beta p_k (log p_k + H)
    for (std::size_t k = 0; k < n; ++k) {
      const double p = std::exp(lp[k]);
      g[k] = p * (rewards[k] - er) - beta * p * (lp[k] + h);
    }
    for (std::size_t k = 0; k < n; ++k) z[k] += step_size * g[k];
  }
  return tempered_probs(z, unit);
}

double total_variation(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("total_variation: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

std::vector<double> jacobi_eigenvalues(std::vector<double> a, std::size_t n, double tol, int max_sweeps) {
  if (a.size() != n * n) throw std::invalid_argument("jacobi_eigenvalues: shape mismatch");
  auto at = [&a, n](std::size_t i, std::size_t j) -> double& { return a[i * n + j]; };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(at(i, j) - at(j, i)) > 1e-12 * (1.0 + std::abs(at(i, j))))
        throw std::invalid_argument("jacobi_eigenvalues: matrix not symmetric");

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
    if (off <= tol * tol) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (apq == 0.0) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = at(k, p), akq = at(k, q);
          at(k, p) = c * akp - s * akq;
          at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = at(p, k), aqk = at(q, k);
          at(p, k) = c * apk - s * aqk;
          at(q, k) = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = at(i, i);
  std::sort(ev.begin(), ev.end());
  return ev;
}

FisherReport fisher_matrix(std::span<const double> p) {
  const std::size_t n = p.size();
  if (n == 0 || n > 64) throw std::invalid_argument("fisher_matrix: dimension must be in [1, 64]");
  FisherReport r;
  r.n = n;
  r.matrix.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) r.matrix[i * n + j] = (i == j ? p[i] : 0.0) - p[i] * p[j];
  r.eigenvalues = jacobi_eigenvalues(r.matrix, n);
  return r;
}

double trajectory_count(int vocab_size, int max_len) {
  if (vocab_size < 1 || max_len < 1) throw std::invalid_argument("trajectory_count: bad dimensions");
  // Lengths 1..L-1 end in EOS after l-1 non-EOS tokens; length L ends in any token.
  const double m = static_cast<double>(vocab_size - 1);
  double total = 0.0, prefixes = 1.0;
  for (int l = 1; l < max_len; ++l) {
    total += prefixes;
    prefixes *= m;
  }
  return total + prefixes * static_cast<double>(vocab_size);
}

namespace {

struct Enumerator {
  const PolicyParams& params;
  Temperature tau;
  const Prompt& x;
  const std::function<double(std::span<const TokenId>)>& f;
  int max_len;
  TokenId eos;
  TokenSeq prefix;

  double visit(double log_mass) {
    const auto& schema = params.schema();
    const std::size_t t = prefix.size();
    const int ctx = schema.index(schema.context_at(x, prefix, t));
    const auto lp = tempered_log_probs(params.logits(ctx), tau);
    double s = 0.0;
    for (std::size_t k = 0; k < lp.size(); ++k) {
      const double lm = log_mass + lp[k];
      if (!std::isfinite(lm)) continue;
      prefix.push_back(static_cast<TokenId>(k));
      if (static_cast<TokenId>(k) == eos || static_cast<int>(prefix.size()) == max_len)
        s += std::exp(lm) * f(prefix);
      else
        s += visit(lm);
      prefix.pop_back();
    }
    return s;
  }
};

}  // namespace

double enumerate_expectation(const PolicyParams& params, Temperature tau, const Prompt& x,
                             const std::function<double(std::span<const TokenId>)>& f, int max_len) {
  if (max_len < 1) throw std::invalid_argument("enumerate_expectation: max_len must be >= 1");
  if (trajectory_count(params.vocab_size(), max_len) > kEnumerationLimit)
    throw std::length_error("enumerate_expectation: trajectory space exceeds the enumeration limit");
  Enumerator e{params, tau, x, f, max_len, static_cast<TokenId>(params.vocab_size() - 1), {}};
  return e.visit(0.0);
}

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& loss,
                                     std::span<const double> theta, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be > 0");
  std::vector<double> x(theta.begin(), theta.end()), g(theta.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = loss(x);
    x[i] = orig - step;
    const double down = loss(x);
    x[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

PolicyParams finite_diff_grad(const std::function<double(const PolicyParams&)>& loss, const PolicyParams& params,
                              double step) {
  PolicyParams work = params;
  auto g = finite_diff_grad(
      [&](std::span<const double> theta) {
        std::copy(theta.begin(), theta.end(), work.table().begin());
        return loss(work);
      },
      params.table(), step);
  PolicyParams out = params.zeros_like();
  out.table() = std::move(g);
  return out;
}

double max_relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("max_relative_error: size mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    na = std::max(na, std::abs(a[i]));
    nb = std::max(nb, std::abs(b[i]));
  }
  const double scale = std::max(na, nb);
  return scale == 0.0 ? 0.0 : diff / scale;
}

ProbeProbabilities probe_probabilities(const PolicyParams& params, const Environment& env, TokenId source,
                                       Temperature tau) {
  if (!env.vocab().is_source(source)) throw VocabError("logit_probe: probe token is not a source-script token");
  const Prompt x{{source}, Script::Target};
  const auto& schema = params.schema();
  const auto p = tempered_probs(params, schema.index(schema.context_at(x, {}, 0)), tau);
  ProbeProbabilities r;
  r.literal = p[static_cast<std::size_t>(env.paraphrases().literal[static_cast<std::size_t>(source)])];
  r.paraphrastic = p[static_cast<std::size_t>(env.paraphrastic(source))];
  r.ratio = r.literal > 0.0 ? r.paraphrastic / r.literal : 0.0;
  return r;
}

LogitProbeReport logit_probe(const PolicyParams& before, const PolicyParams& after, const Environment& env,
                             TokenId source, Temperature tau) {
  if (!env.vocab().is_source(source)) throw VocabError("logit_probe: probe token is not a source-script token");
  LogitProbeReport r;
  r.source = source;
  r.literal_token = env.paraphrases().literal.at(static_cast<std::size_t>(source));
  r.paraphrastic_token = env.paraphrastic(source);
  r.before = probe_probabilities(before, env, source, tau);
  r.after = probe_probabilities(after, env, source, tau);
  return r;
}

nlohmann::json to_json(const FisherReport& r) {
  return {{"n", r.n}, {"matrix", r.matrix}, {"eigenvalues", r.eigenvalues}};
}

namespace {
nlohmann::json to_json(const ProbeProbabilities& p) {
  return {{"literal", p.literal}, {"paraphrastic", p.paraphrastic}, {"ratio", p.ratio}};
}
}  // namespace

nlohmann::json to_json(const LogitProbeReport& r) {
  return {{"source", r.source},
          {"literal_token", r.literal_token},
          {"paraphrastic_token", r.paraphrastic_token},
          {"before", to_json(r.before)},
          {"after", to_json(r.after)}};
}

}  // namespace vepo
