#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "vepo/klprobe.hpp"

using namespace vepo;

TEST_CASE("per-sample estimators") {
  CHECK(kl::k1_sample(0.0) == 0.0);
  CHECK(kl::k2_sample(0.0) == 0.0);
  CHECK(kl::k3_sample(0.0) == 0.0);
  // A single k1 sample goes negative whenever p > q at the draw.
  CHECK(kl::k1_sample(0.3) < 0.0);
  CHECK(kl::k2_sample(0.3) == doctest::Approx(0.045).epsilon(1e-15));
  CHECK(kl::k3_sample(1.0) == doctest::Approx(std::exp(1.0) - 2.0).epsilon(1e-15));
  for (double u = -6.0; u <= 6.0; u += 0.25) {
    CHECK(kl::k2_sample(u) >= 0.0);
    CHECK(kl::k3_sample(u) >= 0.0);
    const double h = 1e-6;
    CHECK(kl::k2_sample_du(u) == doctest::Approx((kl::k2_sample(u + h) - kl::k2_sample(u - h)) / (2 * h)).epsilon(1e-6));
    CHECK(kl::k3_sample_du(u) == doctest::Approx((kl::k3_sample(u + h) - kl::k3_sample(u - h)) / (2 * h)).epsilon(1e-6));
  }
}

TEST_CASE("means and input checks") {
  const std::vector<double> u{0.5, -0.25, 1.0};
  CHECK(kl::k1(u) == doctest::Approx(-1.25 / 3));
  CHECK(kl::k1_raw(u) == doctest::Approx(1.25 / 3));
  CHECK(kl::k2(u) == doctest::Approx((0.125 + 0.03125 + 0.5) / 3));
  const std::vector<double> empty;
  CHECK_THROWS_AS(kl::k1(empty), std::invalid_argument);
  CHECK_THROWS_AS(kl::k3(empty), std::invalid_argument);
  const std::vector<double> bad{0.1, std::numeric_limits<double>::quiet_NaN()};
  CHECK_THROWS_AS(kl::k2(bad), std::invalid_argument);
  const std::vector<double> inf{std::numeric_limits<double>::infinity()};
  CHECK_THROWS_AS(kl::k3(inf), std::invalid_argument);
}

TEST_CASE("exact_kl") {
  const std::vector<double> p{0.2, 0.3, 0.5};
  CHECK(kl::exact_kl(p, p) == 0.0);
  const std::vector<double> one_hot{1.0, 0.0}, half{0.5, 0.5};
  CHECK(kl::exact_kl(one_hot, half) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(std::isinf(kl::exact_kl(half, one_hot)));
  const std::vector<double> a{0.5, 0.3, 0.2}, b{0.4, 0.4, 0.2};
  CHECK(kl::exact_kl(a, b) == doctest::Approx(0.0252671539215706)
                                  .epsilon(1e-12));  // 0.5 ln 1.25 + 0.3 ln 0.75
}

TEST_CASE("summarize") {
  const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  const auto s = kl::summarize(v);
  CHECK(s.n == 4);
  CHECK(s.mean == 2.5);
  CHECK(s.variance == doctest::Approx(5.0 / 3));
  CHECK(s.std_error == doctest::Approx(std::sqrt(5.0 / 12)));
  CHECK_THROWS(kl::summarize(std::vector<double>{}));
}

TEST_CASE("sampled estimators are unbiased for KL(q || p)") {
  const std::vector<double> p{0.1, 0.2, 0.3, 0.4}, q{0.25, 0.25, 0.25, 0.25};
  const double truth = kl::exact_kl(q, p);
  const auto u = kl::sample_log_ratios(p, q, 1'000'000, 11);
  for (auto e : {kl::Estimator::K1, kl::Estimator::K3}) {
    const auto s = kl::summarize(kl::sample_values(e, u));
    CHECK(std::abs(s.mean - truth) < 3.0 * s.std_error);
  }
  const auto k1 = kl::summarize(kl::sample_values(kl::Estimator::K1, u));
  const auto raw = kl::summarize(kl::sample_values(kl::Estimator::K1Raw, u));
  CHECK(raw.mean == doctest::Approx(-k1.mean));
  for (double x : kl::sample_values(kl::Estimator::K3, u)) REQUIRE(x >= 0.0);
}

TEST_CASE("k2 is close and k3 beats k1 on variance for nearby distributions") {
  const auto q = kl::random_categorical(6, 1.0, 3);
  const auto p = kl::perturb_categorical(q, 0.1, 4);
  const double truth = kl::exact_kl(q, p);
  REQUIRE(truth < 0.02);
  const auto u = kl::sample_log_ratios(p, q, 1'000'000, 5);
  const auto k1 = kl::summarize(kl::sample_values(kl::Estimator::K1, u));
  const auto k2 = kl::summarize(kl::sample_values(kl::Estimator::K2, u));
  const auto k3 = kl::summarize(kl::sample_values(kl::Estimator::K3, u));
  CHECK(std::abs(k2.mean - truth) / truth < 0.05);
  CHECK(k3.variance < k1.variance);
}

TEST_CASE("categorical helpers") {
  const auto q = kl::random_categorical(8, 2.0, 1);
  double sum = 0.0;
  for (double x : q) {
    CHECK(x > 0.0);
    sum += x;
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(kl::random_categorical(8, 2.0, 1) == q);
  const auto same = kl::perturb_categorical(q, 0.0, 9);
  for (std::size_t i = 0; i < q.size(); ++i) CHECK(same[i] == doctest::Approx(q[i]).epsilon(1e-12));
}

TEST_CASE("calibrate") {
  const std::vector<double> p{0.3, 0.7}, q{0.6, 0.4};
  const auto rows = kl::calibrate(p, q, 20000, 2);
  CHECK(rows.size() == 4);
  for (const auto& r : rows) {
    CHECK(r.exact == doctest::Approx(kl::exact_kl(q, p)));
    CHECK(r.summary.n == 20000);
  }
  CHECK(kl::to_string(kl::Estimator::K3) == "k3");
}
