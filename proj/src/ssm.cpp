#include "s4mt/ssm.hpp"

#include <cmath>
#include <stdexcept>

#include "s4mt/ops.hpp"

namespace s4mt::ssm {

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapD = Eigen::Map<MatD>;
using CMapD = Eigen::Map<const MatD>;

}  // namespace

Eigen::MatrixXd hippo_legs(std::size_t n) {
  if (n == 0) throw std::invalid_argument("hippo_legs: state size must be at least 1");
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k <= r; ++k) {
      const auto ri = static_cast<Eigen::Index>(r);
      const auto ki = static_cast<Eigen::Index>(k);
      if (r > k) {
        a(ri, ki) = -std::sqrt(2.0 * static_cast<double>(r) + 1.0) * std::sqrt(2.0 * static_cast<double>(k) + 1.0);
      } else {
        a(ri, ki) = -(static_cast<double>(r) + 1.0);
      }
    }
  }
  return a;
}

Eigen::VectorXd hippo_legs_input(std::size_t n) {
  Eigen::VectorXd b(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) b(static_cast<Eigen::Index>(i)) = std::sqrt(2.0 * static_cast<double>(i) + 1.0);
  return b;
}

DiscretizedSsm discretize_bilinear(const SsmParams& p) {
  const auto n = p.a.rows();
  if (p.a.cols() != n || p.b.size() != n || p.c.size() != n) {
    throw ShapeError("discretize_bilinear: A must be N x N with B, C of length N");
  }
  if (!(p.delta > 0.0)) throw std::invalid_argument("discretize_bilinear: step size must be positive");
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd lhs = eye - 0.5 * p.delta * p.a;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(lhs);
  const double rcond = lu.rcond();
  if (!(rcond > 1e-12)) {
    throw NumericError("discretize_bilinear: (I - delta/2 A) is singular (reciprocal condition estimate " +
                       std::to_string(rcond) + ")");
  }
  DiscretizedSsm d;
  d.a_bar = lu.solve(eye + 0.5 * p.delta * p.a);
  d.b_bar = lu.solve(p.delta * p.b);
  d.c_bar = p.c;
  return d;
}

std::vector<double> materialize_kernel(const DiscretizedSsm& d, std::size_t length) {
  if (length == 0) throw std::invalid_argument("materialize_kernel: length must be at least 1");
  std::vector<double> k(length);
  Eigen::VectorXd v = d.b_bar;
  for (std::size_t i = 0; i < length; ++i) {
    k[i] = d.c_bar.dot(v);
    v = d.a_bar * v;
  }
  return k;
}

double spectral_radius(const Eigen::MatrixXd& m) {
  Eigen::EigenSolver<Eigen::MatrixXd> solver(m, false);
  return solver.eigenvalues().cwiseAbs().maxCoeff();
}

DiscretizedTensors discretize_bilinear(const Tensor& a, const Tensor& b, float delta) {
  if (a.rank() != 3 || a.dim(1) != a.dim(2) || b.rank() != 3 || b.dim(0) != a.dim(0) || b.dim(1) != a.dim(1) ||
      b.dim(2) != 1) {
    throw ShapeError("discretize_bilinear: expected A [G,N,N] and B [G,N,1], got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  if (!(delta > 0.0f)) throw std::invalid_argument("discretize_bilinear: step size must be positive");
  const std::size_t groups = a.dim(0);
  const std::size_t n = a.dim(1);
  Tensor eye({groups, n, n}, 0.0f);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t i = 0; i < n; ++i) eye.data()[(g * n + i) * n + i] = 1.0f;
  const Tensor half_a = scale(a, 0.5f * delta);
  const Tensor lhs = sub(eye, half_a);
  DiscretizedTensors out;
  out.a_bar = solve(lhs, add(eye, half_a));
  out.b_bar = solve(lhs, scale(b, delta));
  return out;
}

Tensor krylov(const Tensor& a_bar, const Tensor& b_bar, std::size_t length) {
  if (a_bar.rank() != 3 || b_bar.rank() != 3 || b_bar.dim(2) != 1 || a_bar.dim(0) != b_bar.dim(0) ||
      a_bar.dim(1) != b_bar.dim(1)) {
    throw ShapeError("krylov: expected A_bar [G,N,N] and B_bar [G,N,1]");
  }
  if (length == 0) throw std::invalid_argument("krylov: length must be at least 1");
  const std::size_t groups = a_bar.dim(0);
  const std::size_t n = a_bar.dim(1);
  const bool track = detail::tracking({&a_bar, &b_bar});

  std::vector<double> vd(groups * length * n);
  for (std::size_t g = 0; g < groups; ++g) {
    MatD ag(n, n);
    for (std::size_t i = 0; i < n * n; ++i) ag.data()[i] = a_bar.data()[g * n * n + i];
    double* base = vd.data() + g * length * n;
    for (std::size_t i = 0; i < n; ++i) base[i] = b_bar.data()[g * n + i];
    for (std::size_t step = 1; step < length; ++step) {
      Eigen::Map<const Eigen::VectorXd> prev(base + (step - 1) * n, static_cast<Eigen::Index>(n));
      Eigen::Map<Eigen::VectorXd> next(base + step * n, static_cast<Eigen::Index>(n));
      next.noalias() = ag * prev;
    }
  }
  std::vector<float> out(vd.begin(), vd.end());
  Tensor result = detail::make_output({groups, length, n}, std::move(out), track);
  if (track) {
    Tape::current().push("krylov", result,
                         [an = a_bar.node(), bn = b_bar.node(), vd = std::move(vd), groups, length,
                          n](std::span<const float> g) {
                           float* ga = detail::grad_sink(an);
                           float* gb = detail::grad_sink(bn);
                           for (std::size_t grp = 0; grp < groups; ++grp) {
                             MatD ag(n, n);
                             for (std::size_t i = 0; i < n * n; ++i) ag.data()[i] = an->data[grp * n * n + i];
                             const double* v = vd.data() + grp * length * n;
                             const float* gv = g.data() + grp * length * n;
                             // lambda_i = g_i + A^T lambda_{i+1};  dA += lambda_i v_{i-1}^T
                             Eigen::VectorXd lambda(n);
                             for (std::size_t i = 0; i < n; ++i) lambda(static_cast<Eigen::Index>(i)) = gv[(length - 1) * n + i];
                             MatD da = MatD::Zero(n, n);
                             for (std::size_t step = length - 1; step >= 1; --step) {
                               Eigen::Map<const Eigen::VectorXd> prev(v + (step - 1) * n, static_cast<Eigen::Index>(n));
                               da.noalias() += lambda * prev.transpose();
                               Eigen::VectorXd next = ag.transpose() * lambda;
                               for (std::size_t i = 0; i < n; ++i)
                                 next(static_cast<Eigen::Index>(i)) += gv[(step - 1) * n + i];
                               lambda = std::move(next);
                             }
                             if (ga)
                               for (std::size_t i = 0; i < n * n; ++i) ga[grp * n * n + i] += static_cast<float>(da.data()[i]);
                             if (gb)
                               for (std::size_t i = 0; i < n; ++i)
                                 gb[grp * n + i] += static_cast<float>(lambda(static_cast<Eigen::Index>(i)));
                           }
                         });
  }
  return result;
}

Tensor kernel_from_krylov(const Tensor& krylov_vectors, const Tensor& c) {
  if (krylov_vectors.rank() != 3 || c.rank() != 2 || krylov_vectors.dim(2) != c.dim(1)) {
    throw ShapeError("kernel_from_krylov: expected [G,L,N] and [H,N], got " + shape_str(krylov_vectors.shape()) +
                     " and " + shape_str(c.shape()));
  }
  const std::size_t groups = krylov_vectors.dim(0);
  const std::size_t length = krylov_vectors.dim(1);
  const std::size_t n = krylov_vectors.dim(2);
  const std::size_t channels = c.dim(0);
  if (groups != 1 && groups != channels) {
    throw ShapeError("kernel_from_krylov: group count must be 1 or the channel count");
  }
  const bool track = detail::tracking({&krylov_vectors, &c});
  auto vv = krylov_vectors.data();
  auto cv = c.data();
  std::vector<float> out(length * channels);
  if (groups == 1) {
    MatD vm(length, n), cm(channels, n);
    for (std::size_t i = 0; i < length * n; ++i) vm.data()[i] = vv[i];
    for (std::size_t i = 0; i < channels * n; ++i) cm.data()[i] = cv[i];
    const MatD k = vm * cm.transpose();
    for (std::size_t i = 0; i < length * channels; ++i) out[i] = static_cast<float>(k.data()[i]);
  } else {
    for (std::size_t h = 0; h < channels; ++h)
      for (std::size_t l = 0; l < length; ++l) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(cv[h * n + j]) * vv[(h * length + l) * n + j];
        out[l * channels + h] = static_cast<float>(acc);
      }
  }
  Tensor result = detail::make_output({length, channels}, std::move(out), track);
  if (track) {
    Tape::current().push(
        "kernel_from_krylov", result,
        [vn = krylov_vectors.node(), cn = c.node(), groups, length, n, channels](std::span<const float> g) {
          float* gv = detail::grad_sink(vn);
          float* gc = detail::grad_sink(cn);
          const auto& v = vn->data;
          const auto& cd = cn->data;
          std::vector<double> acc_c(gc ? channels * n : 0, 0.0);
          std::vector<double> acc_v(gv ? v.size() : 0, 0.0);
          for (std::size_t h = 0; h < channels; ++h) {
            const std::size_t grp = groups == 1 ? 0 : h;
            for (std::size_t l = 0; l < length; ++l) {
              const double gl = g[l * channels + h];
              if (gl == 0.0) continue;
              const std::size_t vbase = (grp * length + l) * n;
              for (std::size_t j = 0; j < n; ++j) {
                if (gc) acc_c[h * n + j] += gl * v[vbase + j];
                if (gv) acc_v[vbase + j] += gl * cd[h * n + j];
              }
            }
          }
          for (std::size_t i = 0; i < acc_c.size(); ++i) gc[i] += static_cast<float>(acc_c[i]);
          for (std::size_t i = 0; i < acc_v.size(); ++i) gv[i] += static_cast<float>(acc_v[i]);
        });
  }
  return result;
}

Tensor materialize_kernel(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, std::size_t length) {
  return kernel_from_krylov(krylov(a_bar, b_bar, length), c);
}

Tensor forward_conv(const Tensor& u, const Tensor& kernel) { return fft_causal_conv(u, kernel); }

FrozenSsm FrozenSsm::from_tensors(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c) {
  FrozenSsm f;
  f.groups = a_bar.dim(0);
  f.n = a_bar.dim(1);
  f.channels = c.dim(0);
  if (c.dim(1) != f.n || (f.groups != 1 && f.groups != f.channels)) {
    throw ShapeError("FrozenSsm: inconsistent parameter shapes");
  }
  f.a_bar.assign(a_bar.data().begin(), a_bar.data().end());
  f.b_bar.assign(b_bar.data().begin(), b_bar.data().end());
  f.c.assign(c.data().begin(), c.data().end());
  return f;
}

SsmState SsmState::zeros(std::size_t batch, std::size_t channels, std::size_t n) {
  SsmState s;
  s.batch = batch;
  s.channels = channels;
  s.n = n;
  s.x.assign(batch * channels * n, 0.0);
  return s;
}

void SsmState::select_rows(std::span<const std::size_t> rows) {
  const std::size_t stride = channels * n;
  std::vector<double> next(rows.size() * stride);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= batch) throw std::out_of_range("SsmState::select_rows: row out of range");
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(rows[i] * stride), stride,
                next.begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  x = std::move(next);
  batch = rows.size();
}

std::vector<float> forward_recurrent(SsmState& state, std::span<const float> u_k, const FrozenSsm& ssm) {
  if (state.channels != ssm.channels || state.n != ssm.n) {
    throw ContractError("forward_recurrent: state has " + std::to_string(state.channels) + " channels of size " +
                        std::to_string(state.n) + " but the SSM has " + std::to_string(ssm.channels) + " of size " +
                        std::to_string(ssm.n));
  }
  if (u_k.size() != state.batch * state.channels) {
    throw ContractError("forward_recurrent: input has " + std::to_string(u_k.size()) + " values, expected " +
                        std::to_string(state.batch * state.channels));
  }
  const std::size_t n = ssm.n;
  const std::size_t h_count = ssm.channels;
  const auto ni = static_cast<Eigen::Index>(n);
  std::vector<float> y(state.batch * h_count);
  for (std::size_t row = 0; row < state.batch; ++row) {
    MapD x(state.x.data() + row * h_count * n, static_cast<Eigen::Index>(h_count), ni);
    if (ssm.groups == 1) {
      CMapD a(ssm.a_bar.data(), ni, ni);
      MatD next = x * a.transpose();
      for (std::size_t h = 0; h < h_count; ++h) {
        const double u = u_k[row * h_count + h];
        for (std::size_t j = 0; j < n; ++j) next(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(j)) += ssm.b_bar[j] * u;
      }
      x = next;
    } else {
      for (std::size_t h = 0; h < h_count; ++h) {
        CMapD a(ssm.a_bar.data() + h * n * n, ni, ni);
        Eigen::Map<Eigen::VectorXd> xh(state.x.data() + (row * h_count + h) * n, ni);
        Eigen::Map<const Eigen::VectorXd> bh(ssm.b_bar.data() + h * n, ni);
        Eigen::VectorXd next = a * xh + bh * static_cast<double>(u_k[row * h_count + h]);
        xh = next;
      }
    }
    for (std::size_t h = 0; h < h_count; ++h) {
      double acc = 0.0;
      const double* xh = state.x.data() + (row * h_count + h) * n;
      const double* ch = ssm.c.data() + h * n;
      for (std::size_t j = 0; j < n; ++j) acc += ch[j] * xh[j];
      y[row * h_count + h] = static_cast<float>(acc);
    }
  }
  return y;
}

SsmChannels SsmChannels::init(std::size_t channels, std::size_t state_dim, bool tie_state_matrices, float delta,
                              std::mt19937_64& rng, ParamList& params, const std::string& name) {
  const std::size_t groups = tie_state_matrices ? 1 : channels;
  const Eigen::MatrixXd a0 = hippo_legs(state_dim);
  const Eigen::VectorXd b0 = hippo_legs_input(state_dim);
  Tensor a({groups, state_dim, state_dim});
  Tensor b({groups, state_dim, 1});
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t r = 0; r < state_dim; ++r) {
      for (std::size_t k = 0; k < state_dim; ++k)
        a.data()[(g * state_dim + r) * state_dim + k] =
            static_cast<float>(a0(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)));
      b.data()[g * state_dim + r] = static_cast<float>(b0(static_cast<Eigen::Index>(r)));
    }
  }
  SsmChannels s;
  s.delta = delta;
  s.a = params.add(name + ".A", std::move(a));
  s.b = params.add(name + ".B", std::move(b));
  s.c = params.add(name + ".C",
                   Tensor::randn({channels, state_dim}, rng, 1.0f / std::sqrt(static_cast<float>(state_dim))));
  return s;
}

Tensor SsmChannels::kernel(std::size_t length) const {
  const auto d = discretize();
  return materialize_kernel(d.a_bar, d.b_bar, c, length);
}

FrozenSsm SsmChannels::freeze() const {
  NoGradGuard guard;
  const auto d = discretize();
  return FrozenSsm::from_tensors(d.a_bar, d.b_bar, c);
}

S4Block S4Block::init(std::size_t channels, std::size_t state_dim, bool tie_state_matrices, bool bidirectional,
                      float delta, NormStyle style, std::mt19937_64& rng, ParamList& params,
                      const std::string& name, bool gated) {
  S4Block block;
  block.gated = gated;
  block.forward_ssm = SsmChannels::init(channels, state_dim, tie_state_matrices, delta, rng, params, name + ".ssm");
  if (bidirectional) {
    block.backward_ssm =
        SsmChannels::init(channels, state_dim, tie_state_matrices, delta, rng, params, name + ".ssm_reverse");
  }
  block.mix = Linear::init(channels, gated ? 2 * channels : channels, rng, params, name + ".mix");
  block.norm = LayerNorm::init(channels, params, name + ".norm");
  block.norm_style = style;
  return block;
}

namespace {

Tensor run_recurrent(const SsmChannels& ssm, const Tensor& u) {
  const FrozenSsm frozen = ssm.freeze();
  const std::size_t batch = u.dim(0);
  const std::size_t length = u.dim(1);
  const std::size_t channels = u.dim(2);
  SsmState state = SsmState::zeros(batch, channels, frozen.n);
  Tensor out({batch, length, channels});
  std::vector<float> step_in(batch * channels);
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(u.data().data() + (b * length + t) * channels, channels, step_in.data() + b * channels);
    const auto y = forward_recurrent(state, step_in, frozen);
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(y.data() + b * channels, channels, out.data().data() + (b * length + t) * channels);
  }
  return out;
}

Tensor run_direction(const SsmChannels& ssm, const Tensor& u, Mode mode) {
  if (u.rank() != 3 || u.dim(2) != ssm.channels()) {
    throw ShapeError("S4 block expects [B, L, " + std::to_string(ssm.channels()) + "] input, got " +
                     shape_str(u.shape()));
  }
  if (mode == Mode::recurrent) return run_recurrent(ssm, u);
  return forward_conv(u, ssm.kernel(u.dim(1)));
}

}  // namespace

Tensor ssm_channels_forward(const S4Block& block, const Tensor& u, Mode mode, std::span<const std::size_t> lengths) {
  Tensor y = run_direction(block.forward_ssm, u, mode);
  if (block.backward_ssm) {
    const Tensor reversed = reverse_time(u, lengths);
    const Tensor yb = reverse_time(run_direction(*block.backward_ssm, reversed, mode), lengths);
    y = add(y, yb);
  }
  return y;
}

Tensor s4_block_apply(const S4Block& block, const Tensor& u, const std::function<Tensor(const Tensor&)>& ssm,
                      const ForwardContext& ctx) {
  return residual(u, block.norm, block.norm_style, ctx,
                  [&](const Tensor& x) {
                    Tensor mixed = block.mix(ctx.drop(gelu(ssm(x))));
                    return block.gated ? glu(mixed) : mixed;
                  });
}

Tensor s4_block_forward(const S4Block& block, const Tensor& u, Mode mode, const ForwardContext& ctx,
                        std::span<const std::size_t> lengths) {
  return s4_block_apply(
      block, u, [&](const Tensor& x) { return ssm_channels_forward(block, x, mode, lengths); }, ctx);
}

Tensor bidirectional_s4_forward(const S4Block& block, const Tensor& u, const ForwardContext& ctx,
                                std::span<const std::size_t> lengths) {
  if (!block.backward_ssm) throw ContractError("bidirectional_s4_forward: block has no reverse-direction SSM");
  return s4_block_forward(block, u, Mode::conv, ctx, lengths);
}

}  // namespace s4mt::ssm
