#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cdp/schedule.hpp"

using namespace cdp;

TEST_CASE("cosine schedule shape and limits") {
  auto s = NoiseSchedule::cosine(100);
  CHECK(s.k_train() == 100);
  CHECK(s.signal(0) == 1.0);
  for (int k = 1; k < 100; ++k) CHECK(s.signal(k) < s.signal(k - 1));
  CHECK(s.signal(99) < 1e-3);
  CHECK(s.signal(99) > 0.0);
}

TEST_CASE("schedule validation") {
  CHECK_THROWS_AS(NoiseSchedule(std::vector<double>{}), TensorError);
  CHECK_THROWS_AS(NoiseSchedule({0.5, 0.6}), TensorError);
  CHECK_THROWS_AS(NoiseSchedule({1.5, 0.5}), TensorError);
  auto s = NoiseSchedule({1.0, 0.5, 0.0});
  CHECK_THROWS_AS(s.signal(3), TensorError);
  CHECK_THROWS_AS(s.signal(-1), TensorError);
}

TEST_CASE("sub-schedule is evenly spaced, descending, ends at zero") {
  auto s = NoiseSchedule::cosine(100);
  auto lv = s.sub_schedule(16);
  CHECK(lv.size() == 17);
  CHECK(lv.front() == 99);
  CHECK(lv.back() == 0);
  std::vector<int> want{99, 93, 87, 80, 74, 68, 62, 56, 50, 43, 37, 31, 25, 19, 12, 6, 0};
  CHECK(lv == want);
  CHECK_THROWS_AS(s.sub_schedule(0), TensorError);
  CHECK_THROWS_AS(s.sub_schedule(101), TensorError);
}

TEST_CASE("add_noise limiting cases") {
  NoiseSchedule s({1.0, 0.25, 0.0});
  auto a0 = Tensor::from_data({2, 2}, {1, -2, 3, 0.5f});
  auto eps = Tensor::from_data({2, 2}, {0.3f, 0.1f, -1, 2});
  auto at1 = s.add_noise(a0, eps, 0);  // signal = 1 -> a0
  for (size_t i = 0; i < 4; ++i) CHECK(at1.data()[i] == a0.data()[i]);
  auto at0 = s.add_noise(a0, eps, 2);  // signal = 0 -> eps
  for (size_t i = 0; i < 4; ++i) CHECK(at0.data()[i] == eps.data()[i]);
  CHECK_THROWS_AS(s.add_noise(a0, eps, 3), TensorError);
}

TEST_CASE("forward diffusion variance matches the schedule (Monte Carlo)") {
  auto s = NoiseSchedule::cosine(100);
  Rng rng(77);
  for (int k : {20, 50, 80}) {
    double sig = s.signal(k);
    const double var_a0 = 4.0;
    double sum = 0, sum2 = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
      auto a0 = Tensor64::from_data({1}, {rng.normal() * 2.0});
      auto eps = Tensor64::from_data({1}, {rng.normal()});
      double v = s.add_noise(a0, eps, k).data()[0];
      sum += v;
      sum2 += v * v;
    }
    double mean = sum / n;
    double var = sum2 / n - mean * mean;
    double want = sig * var_a0 + (1.0 - sig);
    CHECK(std::abs(var - want) / want < 0.05);
  }
}

TEST_CASE("ddim zero-noise identity at full signal") {
  NoiseSchedule s({1.0, 1.0});
  auto a = Tensor::from_data({3}, {1, 2, 3});
  auto eps0 = Tensor::zeros({3});
  auto out = s.ddim_step(a, eps0, 1, 0);
  for (int i = 0; i < 3; ++i) CHECK(out.data()[i] == a.data()[i]);
}

TEST_CASE("ddim scalar substitution example") {
  NoiseSchedule s({1.0, 0.25});
  auto a = Tensor64::from_data({1}, {1.0});
  auto eps = Tensor64::from_data({1}, {0.5});
  auto out = s.ddim_step(a, eps, 1, 0);
  double a0 = (1.0 - std::sqrt(0.75) * 0.5) / std::sqrt(0.25);
  CHECK(out.data()[0] == doctest::Approx(a0).epsilon(1e-9));
  CHECK(out.data()[0] == doctest::Approx(1.134).epsilon(1e-3));
}

TEST_CASE("add_noise then a0-estimate with the true noise is consistent") {
  auto s = NoiseSchedule::cosine(100);
  Rng rng(5);
  for (int k : {0, 10, 42, 99}) {
    auto a0 = Tensor::randn({4, 3}, rng);
    auto eps = Tensor::randn({4, 3}, rng);
    auto ak = s.add_noise(a0, eps, k);
    auto est = s.a0_estimate(ak, eps, k);
    for (size_t i = 0; i < est.data().size(); ++i)
      CHECK(std::abs(est.data()[i] - a0.data()[i]) < 1e-5f);
    if (k > 0) {
      auto stepped = s.ddim_step(ak, eps, k, 0);
      for (size_t i = 0; i < stepped.data().size(); ++i)
        CHECK(std::abs(stepped.data()[i] - a0.data()[i]) < 1e-5f);
    }
  }
}

TEST_CASE("ddim rejects bad steps and non-finite noise") {
  auto s = NoiseSchedule::cosine(10);
  auto a = Tensor::zeros({2});
  auto eps = Tensor::zeros({2});
  CHECK_THROWS_AS(s.ddim_step(a, eps, 3, 3), TensorError);
  CHECK_THROWS_AS(s.ddim_step(a, eps, 3, 5), TensorError);
  auto bad = Tensor::from_data({2}, {0.f, std::numeric_limits<float>::quiet_NaN()});
  CHECK_THROWS_AS(s.ddim_step(a, bad, 3, 1), TensorError);
  // zero-signal level cannot anchor an a0 estimate
  NoiseSchedule z({1.0, 0.0});
  CHECK_THROWS_AS(z.ddim_step(a, eps, 1, 0), TensorError);
}
