#include "s4mt/fft.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>

namespace s4mt::fft {

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

namespace {

const std::vector<std::complex<double>>& twiddles(std::size_t n, bool inverse) {
  thread_local std::map<std::pair<std::size_t, bool>, std::vector<std::complex<double>>> cache;
  auto& table = cache[{n, inverse}];
  if (table.empty()) {
    const double sign = inverse ? 1.0 : -1.0;
    table.resize(n / 2);
    for (std::size_t k = 0; k < n / 2; ++k) {
      const double angle = sign * 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
      table[k] = {std::cos(angle), std::sin(angle)};
    }
  }
  return table;
}

// Plain product; std::complex's operator* takes a slow NaN-recovery path.
inline std::complex<double> mul(std::complex<double> a, std::complex<double> b) {
  return {a.real() * b.real() - a.imag() * b.imag(), a.real() * b.imag() + a.imag() * b.real()};
}

}  // namespace

void transform(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw std::invalid_argument("fft size must be a power of two");

  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }

  const auto& twiddle = twiddles(n, inverse);

  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t stride = n / len;
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < half; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = mul(a[i + k + half], twiddle[k * stride]);
        a[i + k] = {u.real() + v.real(), u.imag() + v.imag()};
        a[i + k + half] = {u.real() - v.real(), u.imag() - v.imag()};
      }
    }
  }

  if (inverse) {
    const double inv = 1.0 / static_cast<double>(n);
    for (auto& x : a) x *= inv;
  }
}

void causal_conv_direct(std::span<const double> u, std::span<const double> k, std::span<double> out) {
  const std::size_t length = out.size();
  for (std::size_t t = 0; t < length; ++t) {
    double acc = 0.0;
    for (std::size_t i = 0; i <= t; ++i) acc += k[i] * u[t - i];
    out[t] = acc;
  }
}

CausalConvolver::CausalConvolver(std::span<const double> kernel, std::size_t length)
    : length_(length),
      size_(next_pow2(2 * length)),
      direct_(length < kDirectConvCutoff),
      kernel_(kernel.begin(), kernel.begin() + static_cast<std::ptrdiff_t>(length)) {
  if (kernel.size() < length) throw std::invalid_argument("kernel shorter than convolution length");
  if (direct_) return;
  kernel_hat_.assign(size_, {0.0, 0.0});
  for (std::size_t i = 0; i < length; ++i) kernel_hat_[i] = {kernel_[i], 0.0};
  transform(kernel_hat_, false);
  work_.resize(size_);
}

void CausalConvolver::apply_pair(std::span<const double> u0, std::span<const double> u1,
                                 std::span<double> y0, std::span<double> y1) {
  if (direct_) {
    causal_conv_direct(u0, kernel_, y0);
    causal_conv_direct(u1, kernel_, y1);
    return;
  }
  // The kernel is real, so real and imaginary parts convolve independently.
  std::fill(work_.begin(), work_.end(), std::complex<double>(0.0, 0.0));
  for (std::size_t i = 0; i < length_; ++i) work_[i] = {u0[i], u1[i]};
  transform(work_, false);
  for (std::size_t i = 0; i < size_; ++i) work_[i] = mul(work_[i], kernel_hat_[i]);
  transform(work_, true);
  for (std::size_t i = 0; i < length_; ++i) {
    y0[i] = work_[i].real();
    y1[i] = work_[i].imag();
  }
}

void CausalConvolver::apply(std::span<const double> u, std::span<double> y) {
  if (direct_) {
    causal_conv_direct(u, kernel_, y);
    return;
  }
  std::fill(work_.begin(), work_.end(), std::complex<double>(0.0, 0.0));
  for (std::size_t i = 0; i < length_; ++i) work_[i] = {u[i], 0.0};
  transform(work_, false);
  for (std::size_t i = 0; i < size_; ++i) work_[i] = mul(work_[i], kernel_hat_[i]);
  transform(work_, true);
  for (std::size_t i = 0; i < length_; ++i) y[i] = work_[i].real();
}

CorrelationAccumulator::CorrelationAccumulator(std::size_t length)
    : length_(length), size_(next_pow2(2 * length)), direct_(length < kDirectConvCutoff) {
  if (direct_) {
    direct_acc_.assign(length, 0.0);
  } else {
    acc_.assign(size_, {0.0, 0.0});
    work_.resize(size_);
  }
}

void CorrelationAccumulator::add(std::span<const double> g, std::span<const double> u) {
  if (direct_) {
    for (std::size_t i = 0; i < length_; ++i) {
      double s = 0.0;
      for (std::size_t t = i; t < length_; ++t) s += g[t] * u[t - i];
      direct_acc_[i] += s;
    }
    return;
  }
  // One transform of g + i*u; the two real spectra are recovered by symmetry.
  std::fill(work_.begin(), work_.end(), std::complex<double>(0.0, 0.0));
  for (std::size_t t = 0; t < length_; ++t) work_[t] = {g[t], u[t]};
  transform(work_, false);
  for (std::size_t k = 0; k < size_; ++k) {
    const std::complex<double> x = work_[k];
    const std::complex<double> xr = std::conj(work_[(size_ - k) % size_]);
    const std::complex<double> gk{(x.real() + xr.real()) * 0.5, (x.imag() + xr.imag()) * 0.5};
    // U = (x - xr) / 2i
    const std::complex<double> uk{(x.imag() - xr.imag()) * 0.5, -(x.real() - xr.real()) * 0.5};
    const std::complex<double> p = mul(gk, std::conj(uk));
    acc_[k] = {acc_[k].real() + p.real(), acc_[k].imag() + p.imag()};
  }
}

void CorrelationAccumulator::result(std::span<double> r) {
  if (direct_) {
    std::copy(direct_acc_.begin(), direct_acc_.end(), r.begin());
    return;
  }
  work_ = acc_;
  transform(work_, true);
  for (std::size_t i = 0; i < length_; ++i) r[i] = work_[i].real();
}

}  // namespace s4mt::fft
