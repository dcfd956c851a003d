#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "s4mt/ops.hpp"
#include "s4mt/tensor.hpp"

namespace testing {

using namespace s4mt;

struct GradCheckResult {
  double norm_rel = 0.0;   // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double coord_rel = 0.0;  // max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)
  std::size_t coords = 0;
};

// Central differences of the scalar f() w.r.t. every entry of `inputs`
// (which f reads through aliasing), compared to backward().
inline GradCheckResult grad_check(std::vector<Tensor> inputs, const std::function<Tensor()>& f, double eps,
                                  double floor = 1e-3) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  backward(f());
  std::vector<std::vector<float>> analytic;
  for (auto& t : inputs) {
    if (t.has_grad()) analytic.emplace_back(t.grad().begin(), t.grad().end());
    else analytic.emplace_back(t.numel(), 0.0f);
  }

  GradCheckResult r;
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto data = inputs[i].data();
    for (std::size_t k = 0; k < data.size(); ++k) {
      const float saved = data[k];
      data[k] = static_cast<float>(saved + eps);
      const double fp = f().item();
      data[k] = static_cast<float>(saved - eps);
      const double fm = f().item();
      data[k] = saved;
      const double num = (fp - fm) / (2.0 * eps);
      const double an = analytic[i][k];
      diff2 += (an - num) * (an - num);
      a2 += an * an;
      n2 += num * num;
      r.coord_rel = std::max(r.coord_rel, std::abs(an - num) / std::max({std::abs(an), std::abs(num), floor}));
      ++r.coords;
    }
  }
  const double denom = std::sqrt(std::max(a2, n2));
  r.norm_rel = denom > 0.0 ? std::sqrt(diff2) / denom : std::sqrt(diff2);
  return r;
}

// sum(x * w) with a fixed random w, so every output entry gets its own weight.
inline Tensor weighted_sum(const Tensor& x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Tensor w = Tensor::randn(x.shape(), rng);
  return sum(mul(x, w));
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace testing
