#include "vepo/klprobe.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "vepo/rng.hpp"

namespace vepo::kl {

double k1_sample(double u) { return -u; }
double k2_sample(double u) { return 0.5 * u * u; }
double k3_sample(double u) { return std::expm1(u) - u; }
double k2_sample_du(double u) { return u; }
double k3_sample_du(double u) { return std::expm1(u); }

namespace {

template <class F>
double mean_of(std::span<const double> u, F f) {
  if (u.empty()) throw std::invalid_argument("kl estimator: empty sample set");
  double s = 0.0;
  for (double v : u) {
    if (!std::isfinite(v)) throw std::invalid_argument("kl estimator: non-finite log-ratio");
    s += f(v);
  }
  return s / static_cast<double>(u.size());
}

std::vector<double> softmax(std::vector<double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double& v : z) {
    v = std::exp(v - m);
    s += v;
  }
  for (double& v : z) v /= s;
  return z;
}

}  // namespace

double k1(std::span<const double> u) { return mean_of(u, k1_sample); }
double k1_raw(std::span<const double> u) { return mean_of(u, [](double v) { return v; }); }
double k2(std::span<const double> u) { return mean_of(u, k2_sample); }
double k3(std::span<const double> u) { return mean_of(u, k3_sample); }

std::string to_string(Estimator e) {
  switch (e) {
    case Estimator::K1: return "k1";
    case Estimator::K1Raw: return "k1_raw";
    case Estimator::K2: return "k2";
    case Estimator::K3: return "k3";
  }
  return "k1";
}

std::vector<double> sample_values(Estimator e, std::span<const double> u) {
  std::vector<double> out(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    switch (e) {
      case Estimator::K1: out[i] = k1_sample(u[i]); break;
      case Estimator::K1Raw: out[i] = u[i]; break;
      case Estimator::K2: out[i] = k2_sample(u[i]); break;
      case Estimator::K3: out[i] = k3_sample(u[i]); break;
    }
  }
  return out;
}

Summary summarize(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("summarize: empty input");
  Summary s;
  double m2 = 0.0;
  for (double v : values) {
    ++s.n;
    const double d = v - s.mean;
    s.mean += d / static_cast<double>(s.n);
    m2 += d * (v - s.mean);
  }
  if (s.n > 1) {
    s.variance = m2 / static_cast<double>(s.n - 1);
    s.std_error = std::sqrt(s.variance / static_cast<double>(s.n));
  }
  return s;
}

double exact_kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw std::invalid_argument("exact_kl: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0 || q[i] < 0.0) throw std::invalid_argument("exact_kl: negative probability");
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) return INFINITY;
    s += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(0.0, s);
}

std::vector<double> sample_log_ratios(std::span<const double> p, std::span<const double> q, std::size_t n,
                                      std::uint64_t seed) {
  if (p.size() != q.size() || p.empty()) throw std::invalid_argument("sample_log_ratios: size mismatch");
  std::vector<double> cdf(q.size()), lr(q.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    acc += q[i];
    cdf[i] = acc;
    lr[i] = q[i] > 0.0 ? std::log(p[i]) - std::log(q[i]) : 0.0;
  }
  Rng rng(seed);
  std::vector<double> out(n);
  for (auto& u : out) {
    const double r = rng.uniform() * acc;
    auto k = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), r) - cdf.begin());
    k = std::min(k, q.size() - 1);
    while (q[k] == 0.0 && k > 0) --k;
    u = lr[k];
  }
  return out;
}

std::vector<double> random_categorical(std::size_t n, double scale, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> z(n);
  for (double& v : z) v = scale * rng.normal();
  return softmax(std::move(z));
}

std::vector<double> perturb_categorical(std::span<const double> base, double scale, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> z(base.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = std::log(base[i]) + scale * rng.normal();
  return softmax(std::move(z));
}

std::vector<CalibrationRow> calibrate(std::span<const double> p, std::span<const double> q, std::size_t n,
                                      std::uint64_t seed) {
  const auto u = sample_log_ratios(p, q, n, seed);
  const double exact = exact_kl(q, p);
  std::vector<CalibrationRow> rows;
  for (auto e : {Estimator::K1, Estimator::K1Raw, Estimator::K2, Estimator::K3}) {
    const auto v = sample_values(e, u);
    rows.push_back({e, summarize(v), exact});
  }
  return rows;
}

}  // namespace vepo::kl
