#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace s4mt::fft {

// Below this length causal convolution is summed directly.
inline constexpr std::size_t kDirectConvCutoff = 16;

std::size_t next_pow2(std::size_t n);

// In-place iterative radix-2 transform; size must be a power of two.
// The inverse transform includes the 1/n scaling.
void transform(std::vector<std::complex<double>>& a, bool inverse);

// out[t] = sum_{i <= t} k[i] * u[t - i] for t < out.size().
void causal_conv_direct(std::span<const double> u, std::span<const double> k, std::span<double> out);

// Plans a batch of causal convolutions of length L that share one kernel.
class CausalConvolver {
 public:
  CausalConvolver(std::span<const double> kernel, std::size_t length);

  // Convolves two signals at once through one complex transform.
  void apply_pair(std::span<const double> u0, std::span<const double> u1, std::span<double> y0,
                  std::span<double> y1);
  void apply(std::span<const double> u, std::span<double> y);

 private:
  std::size_t length_;
  std::size_t size_;
  bool direct_;
  std::vector<double> kernel_;
  std::vector<std::complex<double>> kernel_hat_;
  std::vector<std::complex<double>> work_;
};

// r[i] = sum over added pairs of sum_t g[t] * u[t - i], for i < L. Used for
// kernel gradients, where one channel collects a pair per batch row.
class CorrelationAccumulator {
 public:
  explicit CorrelationAccumulator(std::size_t length);

  void add(std::span<const double> g, std::span<const double> u);
  void result(std::span<double> r);

 private:
  std::size_t length_;
  std::size_t size_;
  bool direct_;
  std::vector<double> direct_acc_;
  std::vector<std::complex<double>> acc_;
  std::vector<std::complex<double>> work_;
};

}  // namespace s4mt::fft
