#pragma once

#include <cstdint>
#include <vector>

namespace s4mt::ssm {

struct KernelCheckOptions {
  std::size_t state_dim = 64;
  std::size_t channels = 8;
  std::size_t length = 128;
  std::size_t trials = 20;
  std::uint64_t seed = 1;
  double perturbation = 0.0125;  // stddev of the Gaussian added to the HiPPO A
  double tolerance = 1e-4;
  bool inject_unstable = false;  // rescale A_bar to spectral radius 1.5
};

struct KernelTrial {
  std::size_t index = 0;
  double residual = 0.0;  // max |conv - recurrent|, inf when non-finite
  double spectral_radius = 0.0;
  std::vector<float> kernel;  // [L, H]
};

struct KernelCheckResult {
  std::vector<KernelTrial> trials;
  double max_residual = 0.0;
  bool passed = false;  // every residual below tolerance and every A_bar stable
};

// Random HiPPO-initialized SSMs run once as a convolution with the
// materialized kernel and once step by step; compares the outputs.
KernelCheckResult check_kernel_duality(const KernelCheckOptions& options);

}  // namespace s4mt::ssm
