#include "s4mt/kernel_check.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "s4mt/ssm.hpp"

namespace s4mt::ssm {

namespace {

double radius_of(const Tensor& a_bar, std::size_t n) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < n; ++k)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = a_bar.data()[r * n + k];
  return spectral_radius(m);
}

KernelTrial run_trial(const KernelCheckOptions& o, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(o.seed), static_cast<std::uint32_t>(o.seed >> 32),
                    static_cast<std::uint32_t>(index), 0x6b65u};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t n = o.state_dim, h = o.channels, len = o.length;

  const Eigen::MatrixXd a0 = hippo_legs(n);
  const Eigen::VectorXd b0 = hippo_legs_input(n);
  Tensor a({1, n, n}), b({1, n, 1});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < n; ++k)
      a.data()[r * n + k] =
          static_cast<float>(a0(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) + o.perturbation * normal(rng));
    b.data()[r] = static_cast<float>(b0(static_cast<Eigen::Index>(r)));
  }
  Tensor c = Tensor::randn({h, n}, rng, 1.0f / std::sqrt(static_cast<float>(n)));
  Tensor u = Tensor::randn({len, h}, rng);

  NoGradGuard no_grad;
  DiscretizedTensors d = discretize_bilinear(a, b, 1.0f);
  KernelTrial t;
  t.index = index;
  t.spectral_radius = radius_of(d.a_bar, n);
  if (o.inject_unstable) {
    const double scale = 1.5 / t.spectral_radius;
    for (float& v : d.a_bar.data()) v = static_cast<float>(v * scale);
    t.spectral_radius = radius_of(d.a_bar, n);
  }

  const Tensor kernel = materialize_kernel(d.a_bar, d.b_bar, c, len);
  t.kernel.assign(kernel.data().begin(), kernel.data().end());
  const Tensor y_conv = forward_conv(u, kernel);

  const FrozenSsm frozen = FrozenSsm::from_tensors(d.a_bar, d.b_bar, c);
  SsmState state = SsmState::zeros(1, h, n);
  for (std::size_t step = 0; step < len; ++step) {
    const auto y = forward_recurrent(state, u.data().subspan(step * h, h), frozen);
    for (std::size_t ch = 0; ch < h; ++ch) {
      const double diff = std::abs(static_cast<double>(y_conv.data()[step * h + ch]) - y[ch]);
      if (!std::isfinite(diff)) {
        t.residual = std::numeric_limits<double>::infinity();
        return t;
      }
      t.residual = std::max(t.residual, diff);
    }
  }
  return t;
}

}  // namespace

KernelCheckResult check_kernel_duality(const KernelCheckOptions& options) {
  KernelCheckResult result;
  result.passed = true;
  for (std::size_t i = 0; i < options.trials; ++i) {
    result.trials.push_back(run_trial(options, i));
    const KernelTrial& t = result.trials.back();
    result.max_residual = std::max(result.max_residual, t.residual);
    if (!(t.residual < options.tolerance) || !(t.spectral_radius < 1.0)) result.passed = false;
  }
  return result;
}

}  // namespace s4mt::ssm
