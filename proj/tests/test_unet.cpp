#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cdp/grad_check.hpp"
#include "cdp/unet.hpp"

using namespace cdp;

namespace {

UNetConfig tiny_cfg(bool cross_attn = true) {
  UNetConfig cfg;
  cfg.channels = {16, 32};
  cfg.kernel = 3;
  cfg.gn_groups = 8;
  cfg.temb_dim = 16;
  cfg.heads = 2;
  cfg.cross_attn = cross_attn;
  cfg.cond_rows = 2;
  cfg.cond_dim = 12;
  return cfg;
}

template <typename S>
struct TinyHead {
  DiffusionHead<S> head;
  TensorT<S> a, proprio, cond;
  TinyHead(bool cross_attn, Rng& rng, int t_a = 6)
      : head(tiny_cfg(cross_attn), /*t_o=*/2, t_a, /*d_a=*/3, /*d_p=*/3, /*k_train=*/10, rng),
        a(TensorT<S>::randn({2, t_a, 3}, rng)),
        proprio(TensorT<S>::randn({2, 2, 3}, rng)),
        cond(TensorT<S>::randn({2, 2, 12}, rng)) {}

  // The output conv is zero-initialized; give it weight so signals propagate.
  void liven(Rng& rng) {
    NamedParams<S> ps;
    head.collect("head", ps);
    for (auto& [name, p] : ps)
      if (name == "head.final.w")
        for (auto& v : p.mutable_data()) v = static_cast<S>(rng.normal() * 0.3);
  }
};

}  // namespace

TEST_CASE("sinusoid features at k=0: sin half zero, cos half one") {
  auto f = sinusoid_features<float>(0, 8);
  for (int i = 0; i < 4; ++i) {
    CHECK(f[i] == 0.0f);
    CHECK(f[4 + i] == 1.0f);
  }
}

TEST_CASE("timestep embeddings deterministic and pairwise distinct") {
  Rng rng(1);
  TinyHead<float> th(true, rng);
  auto e1 = th.head.timestep_embedding({3});
  auto e2 = th.head.timestep_embedding({3});
  for (size_t i = 0; i < e1.data().size(); ++i) CHECK(e1.data()[i] == e2.data()[i]);

  std::vector<int> ks;
  for (int k = 0; k < 10; ++k) ks.push_back(k);
  auto all = th.head.timestep_embedding(ks);
  int D = all.dim(1);
  for (int i = 0; i < 10; ++i)
    for (int j = i + 1; j < 10; ++j) {
      double l2 = 0;
      for (int d = 0; d < D; ++d) {
        double diff = all.data()[i * D + d] - all.data()[j * D + d];
        l2 += diff * diff;
      }
      CHECK(l2 > 0.0);
    }
  CHECK_THROWS_AS(th.head.timestep_embedding({10}), TensorError);
  CHECK_THROWS_AS(th.head.timestep_embedding({-1}), TensorError);
}

TEST_CASE("predict_noise output shape; prefix positions never emitted") {
  Rng rng(2);
  TinyHead<float> th(true, rng);
  auto eps = th.head.predict_noise(th.a, th.proprio, th.cond, {1, 7});
  CHECK(eps.shape() == Shape{2, 6, 3});
}

TEST_CASE("time axis is padded when T_o+T_a is not a multiple") {
  Rng rng(3);
  TinyHead<float> th(true, rng, /*t_a=*/5);  // T = 7, needs pad to 8
  auto eps = th.head.predict_noise(th.a, th.proprio, th.cond, {0, 4});
  CHECK(eps.shape() == Shape{2, 5, 3});
}

TEST_CASE("conditioning shape errors") {
  Rng rng(4);
  TinyHead<float> th(true, rng);
  auto bad_rows = Tensor::randn({2, 3, 12}, rng);
  CHECK_THROWS_AS(th.head.predict_noise(th.a, th.proprio, bad_rows, {0, 0}), TensorError);
  auto bad_p = Tensor::randn({2, 1, 3}, rng);
  CHECK_THROWS_AS(th.head.predict_noise(th.a, bad_p, th.cond, {0, 0}), TensorError);
}

TEST_CASE("untrained head predicts exactly zero noise") {
  Rng rng(44);
  TinyHead<float> th(true, rng);
  auto out = th.head.predict_noise(th.a, th.proprio, th.cond, {3, 6});
  for (float v : out.data()) CHECK(v == 0.0f);
}

TEST_CASE("cross-attention path is live; FiLM path decouples k") {
  Rng rng(5);
  TinyHead<float> th(true, rng);
  th.liven(rng);
  auto base = th.head.predict_noise(th.a, th.proprio, th.cond, {2, 2});
  auto zc = Tensor::zeros({2, 2, 12});
  auto zeroed_cond = th.head.predict_noise(th.a, th.proprio, zc, {2, 2});
  bool cond_matters = false;
  for (size_t i = 0; i < base.data().size(); ++i)
    if (base.data()[i] != zeroed_cond.data()[i]) cond_matters = true;
  CHECK(cond_matters);

  // zero the timestep-MLP output: conditioning vector becomes 0, FiLM falls
  // back to identity scaling, so k no longer affects the output
  auto& t2 = th.head.temb2();
  std::fill(t2.w.mutable_data().begin(), t2.w.mutable_data().end(), 0.f);
  std::fill(t2.b.mutable_data().begin(), t2.b.mutable_data().end(), 0.f);
  auto k_lo = th.head.predict_noise(th.a, th.proprio, th.cond, {0, 0});
  auto k_hi = th.head.predict_noise(th.a, th.proprio, th.cond, {9, 9});
  for (size_t i = 0; i < k_lo.data().size(); ++i) CHECK(k_lo.data()[i] == k_hi.data()[i]);
}

TEST_CASE("film-only head still sees observations, through FiLM") {
  Rng rng(6);
  TinyHead<float> th(false, rng);
  th.liven(rng);
  auto base = th.head.predict_noise(th.a, th.proprio, th.cond, {2, 2});
  CHECK(base.shape() == Shape{2, 6, 3});
  auto zc = Tensor::zeros({2, 2, 12});
  auto zeroed = th.head.predict_noise(th.a, th.proprio, zc, {2, 2});
  bool cond_matters = false;
  for (size_t i = 0; i < base.data().size(); ++i)
    if (base.data()[i] != zeroed.data()[i]) cond_matters = true;
  CHECK(cond_matters);
}

TEST_CASE("gradient reaches every conditioning row") {
  Rng rng(7);
  TinyHead<float> th(true, rng);
  th.liven(rng);
  th.cond.set_requires_grad(true);
  auto eps_hat = th.head.predict_noise(th.a, th.proprio, th.cond, {1, 3});
  auto target = Tensor::randn({2, 6, 3}, rng);
  mse(eps_hat, target).backward();
  for (int b = 0; b < 2; ++b)
    for (int r = 0; r < 2; ++r) {
      double norm = 0;
      for (int d = 0; d < 12; ++d) {
        float g = th.cond.grad()[(b * 2 + r) * 12 + d];
        norm += static_cast<double>(g) * g;
      }
      CHECK(norm > 0.0);
    }
}

TEST_CASE("sampling is deterministic under a fixed seed") {
  Rng rng(8);
  TinyHead<float> th(true, rng);
  auto p = Tensor::randn({2, 3}, rng);
  auto c = Tensor::randn({2, 12}, rng);
  Rng s1(42), s2(42);
  auto a1 = th.head.sample(p, c, 4, s1);
  auto a2 = th.head.sample(p, c, 4, s2);
  CHECK(a1.shape() == Shape{6, 3});
  for (size_t i = 0; i < a1.data().size(); ++i) CHECK(a1.data()[i] == a2.data()[i]);
  Rng s3(43);
  auto a3 = th.head.sample(p, c, 4, s3);
  bool differs = false;
  for (size_t i = 0; i < a1.data().size(); ++i)
    if (a1.data()[i] != a3.data()[i]) differs = true;
  CHECK(differs);
}

TEST_CASE("head gradients match finite differences (64-bit)") {
  Rng rng(9);
  TinyHead<double> th(true, rng);
  th.liven(rng);
  auto target = TensorT<double>::randn({2, 6, 3}, rng);
  NamedParams<double> params;
  th.head.collect("head", params);
  // probe inputs plus a few representative parameters
  TensorT<double> film_w, final_w;
  for (auto& [name, p] : params) {
    if (name == "head.down0.res1.film.w") film_w = p;
    if (name == "head.final.w") final_w = p;
  }
  REQUIRE(film_w.defined());
  REQUIRE(final_w.defined());
  auto res = grad_check(
      [&](const std::vector<Tensor64>& in) {
        return mse(th.head.predict_noise(in[0], th.proprio, in[1], {1, 7}), target);
      },
      {th.a, th.cond}, 1e-5);
  CHECK(res.max_rel_err < 1e-3);
  auto res2 = grad_check(
      [&](const std::vector<Tensor64>& in) {
        return mse(th.head.predict_noise(th.a, th.proprio, th.cond, {2, 5}), target);
      },
      {film_w, final_w}, 1e-5);
  CHECK(res2.max_rel_err < 1e-3);
}
