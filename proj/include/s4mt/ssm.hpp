#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "s4mt/layers.hpp"
#include "s4mt/tensor.hpp"

// Structured state-space (S4) mathematics:
//   x'(t) = A x(t) + B u(t),  y(t) = C x(t)             (D = 0)
// discretized with the bilinear transform and evaluated either as a causal
// convolution with the materialized kernel or step by step.
namespace s4mt::ssm {

// ---------------------------------------------------------------------------
// Reference math in float64.

Eigen::MatrixXd hippo_legs(std::size_t n);
// B vector that accompanies hippo_legs: b[n] = sqrt(2n + 1).
Eigen::VectorXd hippo_legs_input(std::size_t n);

struct SsmParams {
  Eigen::MatrixXd a;     // N x N
  Eigen::VectorXd b;     // N
  Eigen::RowVectorXd c;  // N
  double delta = 1.0;

  std::size_t state_dim() const { return static_cast<std::size_t>(a.rows()); }
};

struct DiscretizedSsm {
  Eigen::MatrixXd a_bar;
  Eigen::VectorXd b_bar;
  Eigen::RowVectorXd c_bar;
};

// A_bar = (I - d/2 A)^-1 (I + d/2 A), B_bar = (I - d/2 A)^-1 d B, C_bar = C.
DiscretizedSsm discretize_bilinear(const SsmParams& p);

// K[i] = C_bar A_bar^i B_bar for i < length.
std::vector<double> materialize_kernel(const DiscretizedSsm& d, std::size_t length);

double spectral_radius(const Eigen::MatrixXd& m);

// ---------------------------------------------------------------------------
// Differentiable float32 path. `a` is [G, N, N] and `b` is [G, N, 1] where G
// is 1 (A, B shared by all channels) or H (independent per channel).

struct DiscretizedTensors {
  Tensor a_bar;  // [G, N, N]
  Tensor b_bar;  // [G, N, 1]
};

DiscretizedTensors discretize_bilinear(const Tensor& a, const Tensor& b, float delta);

// Powers applied to the input vector: out[g, i, :] = A_bar_g^i B_bar_g.
Tensor krylov(const Tensor& a_bar, const Tensor& b_bar, std::size_t length);

// kernel[l, h] = c[h, :] . krylov[g(h), l, :]  ->  [L, H]
Tensor kernel_from_krylov(const Tensor& krylov_vectors, const Tensor& c);

Tensor materialize_kernel(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, std::size_t length);

// y[:, h] = kernel[:, h] * u[:, h] for u of shape [L, H] or [B, L, H].
Tensor forward_conv(const Tensor& u, const Tensor& kernel);

// Discretized parameters frozen into float64 buffers for step-wise use.
struct FrozenSsm {
  std::size_t groups = 0;
  std::size_t channels = 0;
  std::size_t n = 0;
  std::vector<double> a_bar;  // G * N * N
  std::vector<double> b_bar;  // G * N
  std::vector<double> c;      // H * N

  static FrozenSsm from_tensors(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c);
};

// Recurrent state x_k for `batch` sequences of H channels; zero at start.
struct SsmState {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::size_t n = 0;
  std::vector<double> x;  // [batch, H, N]

  static SsmState zeros(std::size_t batch, std::size_t channels, std::size_t n);
  // Keeps rows in the given order (beam reordering).
  void select_rows(std::span<const std::size_t> rows);
};

// One step x <- A_bar x + B_bar u_k, y_k = C x for every (row, channel).
// u_k and the returned y_k are [batch, H].
std::vector<float> forward_recurrent(SsmState& state, std::span<const float> u_k, const FrozenSsm& ssm);

// ---------------------------------------------------------------------------
// S4 block: per-feature SSMs, GeLU, mixing linear with GLU, residual, norm.

struct SsmChannels {
  Tensor a;  // [G, N, N]
  Tensor b;  // [G, N, 1]
  Tensor c;  // [H, N]
  float delta = 1.0f;

  static SsmChannels init(std::size_t channels, std::size_t state_dim, bool tie_state_matrices, float delta,
                          std::mt19937_64& rng, ParamList& params, const std::string& name);
  std::size_t channels() const { return c.dim(0); }
  std::size_t state_dim() const { return c.dim(1); }
  std::size_t groups() const { return a.dim(0); }

  DiscretizedTensors discretize() const { return discretize_bilinear(a, b, delta); }
  Tensor kernel(std::size_t length) const;
  FrozenSsm freeze() const;
};

enum class Mode { conv, recurrent };

struct S4Block {
  SsmChannels forward_ssm;
  std::optional<SsmChannels> backward_ssm;  // bidirectional encoders only
  Linear mix;                               // H -> 2H followed by GLU, or H -> H when !gated
  LayerNorm norm;
  NormStyle norm_style = NormStyle::post;
  bool gated = true;

  static S4Block init(std::size_t channels, std::size_t state_dim, bool tie_state_matrices, bool bidirectional,
                      float delta, NormStyle style, std::mt19937_64& rng, ParamList& params,
                      const std::string& name, bool gated = true);
};

// Raw channel outputs SSM(u) ([B, L, H]) before activation and mixing. For a
// bidirectional block the two directions are summed; `lengths` bounds each
// sequence for the reversed pass (empty = full length).
Tensor ssm_channels_forward(const S4Block& block, const Tensor& u, Mode mode,
                            std::span<const std::size_t> lengths = {});

// out = LN(u + GLU(Mix(GeLU(SSM(u))))) (post-norm) for u of shape [B, L, H].
Tensor s4_block_forward(const S4Block& block, const Tensor& u, Mode mode, const ForwardContext& ctx,
                        std::span<const std::size_t> lengths = {});

// Same as s4_block_forward on a block that carries a backward_ssm.
Tensor bidirectional_s4_forward(const S4Block& block, const Tensor& u, const ForwardContext& ctx,
                                std::span<const std::size_t> lengths = {});

// Block wiring around an arbitrary channel map (conv, recurrent, or a single
// decoding step): residual(u, Mix(GeLU(ssm(.)))) under the block's norm style.
Tensor s4_block_apply(const S4Block& block, const Tensor& u, const std::function<Tensor(const Tensor&)>& ssm,
                      const ForwardContext& ctx);

}  // namespace s4mt::ssm
