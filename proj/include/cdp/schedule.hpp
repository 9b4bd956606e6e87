#pragma once

#include <cmath>
#include <vector>

#include "cdp/tensor.hpp"

// Forward-diffusion schedule plus deterministic DDIM stepping in the
// epsilon-prediction parameterization. The schedule is stored as the
// cumulative signal coefficient signal[k] (the product-of-alphas form):
//   a^(k) = sqrt(signal_k) * a0 + sqrt(1 - signal_k) * eps.

namespace cdp {

class NoiseSchedule {
 public:
  // Explicit coefficients (used by tests to probe the signal=0/1 limits).
  explicit NoiseSchedule(std::vector<double> signal) : signal_(std::move(signal)) {
    if (signal_.empty()) throw TensorError("NoiseSchedule: empty schedule");
    for (size_t k = 0; k < signal_.size(); ++k) {
      if (signal_[k] < 0.0 || signal_[k] > 1.0)
        throw TensorError("NoiseSchedule: signal out of [0,1] at step " + std::to_string(k));
      if (k > 0 && signal_[k] > signal_[k - 1])
        throw TensorError("NoiseSchedule: signal must be non-increasing (step " +
                          std::to_string(k) + ")");
    }
  }

  // Cosine cumulative-signal schedule, normalized so signal[0] = 1 exactly.
  static NoiseSchedule cosine(int k_train, double s = 0.008) {
    if (k_train < 1) throw TensorError("NoiseSchedule: k_train must be >= 1");
    auto f = [s](double u) {
      double c = std::cos((u + s) / (1.0 + s) * M_PI / 2.0);
      return c * c;
    };
    std::vector<double> sig(k_train);
    double f0 = f(0.0);
    for (int k = 0; k < k_train; ++k) sig[k] = f(static_cast<double>(k) / k_train) / f0;
    return NoiseSchedule(std::move(sig));
  }

  int k_train() const { return static_cast<int>(signal_.size()); }

  double signal(int k) const {
    if (k < 0 || k >= k_train())
      throw TensorError("NoiseSchedule: step " + std::to_string(k) + " out of [0," +
                        std::to_string(k_train()) + ")");
    return signal_[k];
  }

  // Evenly spaced descending denoising levels, k_train-1 down to 0 inclusive
  // (k_infer steps => k_infer+1 levels).
  std::vector<int> sub_schedule(int k_infer) const {
    if (k_infer < 1 || k_infer > k_train())
      throw TensorError("NoiseSchedule: k_infer " + std::to_string(k_infer) + " out of [1," +
                        std::to_string(k_train()) + "]");
    std::vector<int> levels(k_infer + 1);
    for (int i = 0; i <= k_infer; ++i) {
      double u = static_cast<double>(i) / k_infer;
      levels[i] = static_cast<int>(std::lround((1.0 - u) * (k_train() - 1)));
    }
    return levels;
  }

  template <typename S>
  TensorT<S> add_noise(const TensorT<S>& a0, const TensorT<S>& eps, int k) const {
    double sig = signal(k);
    if (a0.shape() != eps.shape())
      throw TensorError("add_noise: a0 " + shape_str(a0.shape()) + " vs eps " +
                        shape_str(eps.shape()));
    std::vector<S> out(a0.data().size());
    S cs = static_cast<S>(std::sqrt(sig)), cn = static_cast<S>(std::sqrt(1.0 - sig));
    for (size_t i = 0; i < out.size(); ++i) out[i] = cs * a0.data()[i] + cn * eps.data()[i];
    return TensorT<S>::from_data(a0.shape(), std::move(out));
  }

  // Deterministic DDIM (eta = 0): estimate a0 from (a^(k), eps_hat), then
  // re-noise to level k_prime with the same eps_hat.
  template <typename S>
  TensorT<S> a0_estimate(const TensorT<S>& ak, const TensorT<S>& eps_hat, int k) const {
    double sig = signal(k);
    if (sig <= 0.0)
      throw TensorError("ddim: signal is zero at step " + std::to_string(k) +
                        "; a0-estimate undefined");
    S cs = static_cast<S>(std::sqrt(sig)), cn = static_cast<S>(std::sqrt(1.0 - sig));
    std::vector<S> out(ak.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
      S e = eps_hat.data()[i];
      if (!std::isfinite(static_cast<double>(e)))
        throw TensorError("ddim: non-finite noise estimate at step " + std::to_string(k) +
                          " element " + std::to_string(i));
      out[i] = (ak.data()[i] - cn * e) / cs;
    }
    return TensorT<S>::from_data(ak.shape(), std::move(out));
  }

  template <typename S>
  TensorT<S> ddim_step(const TensorT<S>& ak, const TensorT<S>& eps_hat, int k,
                       int k_prime) const {
    if (k_prime >= k || k_prime < 0)
      throw TensorError("ddim_step: need k > k' >= 0, got k=" + std::to_string(k) +
                        " k'=" + std::to_string(k_prime));
    auto a0 = a0_estimate(ak, eps_hat, k);
    return add_noise(a0, eps_hat, k_prime);
  }

 private:
  std::vector<double> signal_;
};

}  // namespace cdp
