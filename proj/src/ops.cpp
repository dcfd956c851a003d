#include "s4mt/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>

#include "s4mt/fft.hpp"

namespace s4mt {

namespace {

using detail::grad_sink;
using detail::make_output;
using detail::tracking;

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

MatD load(const float* p, std::size_t rows, std::size_t cols) {
  return Eigen::Map<const MatF>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols))
      .cast<double>();
}

void store(const MatD& m, float* out) {
  Eigen::Map<MatF>(out, m.rows(), m.cols()) = m.cast<float>();
}

void accumulate(const MatD& m, float* out) {
  Eigen::Map<MatF> dst(out, m.rows(), m.cols());
  dst += m.cast<float>();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const bool track = tracking({&a, &b});
  std::vector<float> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  Tensor result = make_output(a.shape(), std::move(out), track);
  if (track) {
    Tape::current().push("add", result, [an = a.node(), bn = b.node()](std::span<const float> g) {
      if (float* ga = grad_sink(an))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      if (float* gb = grad_sink(bn))
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    });
  }
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const bool track = tracking({&a, &b});
  std::vector<float> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  Tensor result = make_output(a.shape(), std::move(out), track);
  if (track) {
    Tape::current().push("sub", result, [an = a.node(), bn = b.node()](std::span<const float> g) {
      if (float* ga = grad_sink(an))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      if (float* gb = grad_sink(bn))
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    });
  }
  return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const bool track = tracking({&a, &b});
  std::vector<float> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Tensor result = make_output(a.shape(), std::move(out), track);
  if (track) {
    Tape::current().push("mul", result, [an = a.node(), bn = b.node()](std::span<const float> g) {
      if (float* ga = grad_sink(an))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
      if (float* gb = grad_sink(bn))
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
    });
  }
  return result;
}

Tensor scale(const Tensor& a, float factor) {
  const bool track = tracking({&a});
  std::vector<float> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  Tensor result = make_output(a.shape(), std::move(out), track);
  if (track) {
    Tape::current().push("scale", result, [an = a.node(), factor](std::span<const float> g) {
      if (float* ga = grad_sink(an))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return result;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank(bias, 1, "add_bias");
  const std::size_t n = bias.numel();
  if (x.rank() == 0 || x.shape().back() != n) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  }
  const bool track = tracking({&x, &bias});
  std::vector<float> out(x.numel());
  auto xv = x.data();
  auto bv = bias.data();
  for (std::size_t r = 0; r < out.size(); r += n)
    for (std::size_t j = 0; j < n; ++j) out[r + j] = xv[r + j] + bv[j];
  Tensor result = make_output(x.shape(), std::move(out), track);
  if (track) {
    Tape::current().push("add_bias", result, [xn = x.node(), bn = bias.node(), n](std::span<const float> g) {
      if (float* gx = grad_sink(xn))
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      if (float* gb = grad_sink(bn)) {
        std::vector<double> acc(n, 0.0);
        for (std::size_t r = 0; r < g.size(); r += n)
          for (std::size_t j = 0; j < n; ++j) acc[j] += g[r + j];
        for (std::size_t j = 0; j < n; ++j) gb[j] += static_cast<float>(acc[j]);
      }
    });
  }
  return result;
}

namespace {

using CMap = Eigen::Map<const MatF>;
using WMap = Eigen::Map<MatF>;

CMap cmap(const float* p, std::size_t rows, std::size_t cols) {
  return CMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
WMap wmap(float* p, std::size_t rows, std::size_t cols) {
  return WMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

// c[m, W] block at column j0 of a [k, ldb] matrix; each entry sums over k in
// ascending order, so a row's result never depends on which other rows share
// the batch. Blocked library kernels change the summation order with m.
template <std::size_t W>
void gemm_panel(const float* __restrict a, const float* __restrict b, std::size_t ldb, std::size_t m, std::size_t k,
                float* __restrict c, std::size_t ldc, std::size_t width) {
  constexpr std::size_t R = 4;
  std::size_t i = 0;
  for (; i + R <= m; i += R) {
    float acc[R][W] = {};
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float* br = b + kk * ldb;
      for (std::size_t r = 0; r < R; ++r) {
        const float av = a[(i + r) * k + kk];
        for (std::size_t j = 0; j < W; ++j) acc[r][j] += av * br[j];
      }
    }
    for (std::size_t r = 0; r < R; ++r) std::memcpy(c + (i + r) * ldc, acc[r], width * sizeof(float));
  }
  for (; i < m; ++i) {
    float acc[W] = {};
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float* br = b + kk * ldb;
      const float av = a[i * k + kk];
      for (std::size_t j = 0; j < W; ++j) acc[j] += av * br[j];
    }
    std::memcpy(c + i * ldc, acc, width * sizeof(float));
  }
}

// c = a b (or a b^T) for one [m,k] x [k,n] block; backward accumulates into ga/gb.
void gemm_forward(const float* a, const float* b, std::size_t m, std::size_t k, std::size_t n, std::size_t b_rows,
                  std::size_t b_cols, bool transpose_b, float* c) {
  constexpr std::size_t W = 32;
  std::vector<float> bt;
  if (transpose_b) {
    bt.resize(k * n);
    wmap(bt.data(), k, n) = cmap(b, b_rows, b_cols).transpose();
    b = bt.data();
  }
  std::size_t j0 = 0;
  for (; j0 + W <= n; j0 += W) gemm_panel<W>(a, b + j0, n, m, k, c + j0, n, W);
  if (j0 < n) {
    // zero-padded tail panel
    const std::size_t width = n - j0;
    std::vector<float> panel(k * W, 0.0f);
    for (std::size_t kk = 0; kk < k; ++kk) std::memcpy(&panel[kk * W], b + kk * n + j0, width * sizeof(float));
    gemm_panel<W>(a, panel.data(), W, m, k, c + j0, n, width);
  }
}

void gemm_backward(const float* g, const float* a, const float* b, std::size_t m, std::size_t k, std::size_t n,
                   std::size_t b_rows, std::size_t b_cols, bool transpose_b, float* ga, float* gb) {
  const auto gm = cmap(g, m, n);
  if (ga) {
    const auto bm = cmap(b, b_rows, b_cols);
    auto gam = wmap(ga, m, k);
    if (transpose_b)
      gam.noalias() += gm * bm;
    else
      gam.noalias() += gm * bm.transpose();
  }
  if (gb) {
    const auto am = cmap(a, m, k);
    auto gbm = wmap(gb, b_rows, b_cols);
    if (transpose_b)
      gbm.noalias() += gm.transpose() * am;
    else
      gbm.noalias() += am.transpose() * gm;
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (b.rank() != 2 || a.rank() < 1) {
    throw ShapeError("matmul: dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t k = a.shape().back();
  const std::size_t bk = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (k != bk) {
    throw ShapeError("matmul: dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                     (transpose_b ? " (transposed)" : ""));
  }
  const std::size_t m = a.numel() / std::max<std::size_t>(k, 1);
  const bool track = tracking({&a, &b});

  Shape shape = a.shape();
  shape.back() = n;
  std::vector<float> out(m * n);
  gemm_forward(a.data().data(), b.data().data(), m, k, n, b.dim(0), b.dim(1), transpose_b, out.data());
  Tensor result = make_output(std::move(shape), std::move(out), track);
  if (track) {
    Tape::current().push("matmul", result,
                         [an = a.node(), bn = b.node(), m, k, n, transpose_b](std::span<const float> g) {
                           gemm_backward(g.data(), an->data.data(), bn->data.data(), m, k, n, bn->shape[0],
                                         bn->shape[1], transpose_b, grad_sink(an), grad_sink(bn));
                         });
  }
  return result;
}

Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_rank(a, 3, "batched_matmul");
  require_rank(b, 3, "batched_matmul");
  const std::size_t groups = a.dim(0);
  const std::size_t m = a.dim(1);
  const std::size_t k = a.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if (b.dim(0) != groups || bk != k) {
    throw ShapeError("batched_matmul: dimension mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const bool track = tracking({&a, &b});
  const std::size_t b_rows = b.dim(1);
  const std::size_t b_cols = b.dim(2);
  std::vector<float> out(groups * m * n);
  for (std::size_t g = 0; g < groups; ++g)
    gemm_forward(a.data().data() + g * m * k, b.data().data() + g * b_rows * b_cols, m, k, n, b_rows, b_cols,
                 transpose_b, out.data() + g * m * n);
  Tensor result = make_output({groups, m, n}, std::move(out), track);
  if (track) {
    Tape::current().push(
        "batched_matmul", result,
        [an = a.node(), bn = b.node(), groups, m, k, n, b_rows, b_cols, transpose_b](std::span<const float> g) {
          float* ga = grad_sink(an);
          float* gb = grad_sink(bn);
          for (std::size_t i = 0; i < groups; ++i)
            gemm_backward(g.data() + i * m * n, an->data.data() + i * m * k, bn->data.data() + i * b_rows * b_cols,
                          m, k, n, b_rows, b_cols, transpose_b, ga ? ga + i * m * k : nullptr,
                          gb ? gb + i * b_rows * b_cols : nullptr);
        });
  }
  return result;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const bool track = tracking({&x});
  std::vector<float> out(x.data().begin(), x.data().end());
  Tensor result = make_output(std::move(shape), std::move(out), track);
  if (track) {
    Tape::current().push("reshape", result, [xn = x.node()](std::span<const float> g) {
      if (float* gx = grad_sink(xn))
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return result;
}

Tensor sum(const Tensor& x) {
  const bool track = tracking({&x});
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor result = make_output({1}, {static_cast<float>(acc)}, track);
  if (track) {
    Tape::current().push("sum", result, [xn = x.node()](std::span<const float> g) {
      if (float* gx = grad_sink(xn))
        for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += g[0];
    });
  }
  return result;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  const std::size_t len = x.dim(axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t outer = x.numel() / (len * inner);
  const bool track = tracking({&x});
  auto xv = x.data();
  std::vector<float> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, static_cast<double>(xv[base + i * inner]));
      if (!std::isfinite(mx)) throw NumericError("softmax: non-finite input");
      double z = 0.0;
      for (std::size_t i = 0; i < len; ++i) z += std::exp(xv[base + i * inner] - mx);
      if (!std::isfinite(z)) throw NumericError("softmax: non-finite input");
      for (std::size_t i = 0; i < len; ++i) {
        out[base + i * inner] = static_cast<float>(std::exp(xv[base + i * inner] - mx) / z);
      }
    }
  }
  Tensor result = make_output(x.shape(), std::move(out), track);
  if (track) {
    Tape::current().push("softmax", result,
                         [xn = x.node(), yn = result.node(), outer, len, inner](std::span<const float> g) {
                           float* gx = grad_sink(xn);
                           if (!gx) return;
                           const auto& y = yn->data;
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t in = 0; in < inner; ++in) {
                               const std::size_t base = o * len * inner + in;
                               double dot = 0.0;
                               for (std::size_t i = 0; i < len; ++i)
                                 dot += static_cast<double>(g[base + i * inner]) * y[base + i * inner];
                               for (std::size_t i = 0; i < len; ++i) {
                                 const std::size_t p = base + i * inner;
                                 gx[p] += static_cast<float>(y[p] * (g[p] - dot));
                               }
                             }
                           }
                         });
  }
  return result;
}

Tensor masked_softmax(const Tensor& scores, const AttentionMask& mask) {
  require_rank(scores, 3, "masked_softmax");
  const std::size_t rows = scores.dim(0);
  const std::size_t tq = scores.dim(1);
  const std::size_t tk = scores.dim(2);
  if (mask.heads == 0 || rows % mask.heads != 0) throw ShapeError("masked_softmax: head count does not divide rows");
  if (!mask.key_lengths.empty() && mask.key_lengths.size() * mask.heads != rows) {
    throw ShapeError("masked_softmax: key_lengths size does not match batch");
  }
  const bool track = tracking({&scores});
  auto sv = scores.data();
  std::vector<float> out(scores.numel(), 0.0f);
  std::vector<double> e(tk);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t klen = mask.key_lengths.empty() ? tk : std::min(tk, mask.key_lengths[r / mask.heads]);
    for (std::size_t q = 0; q < tq; ++q) {
      std::size_t limit = klen;
      if (mask.causal) limit = std::min(limit, mask.query_offset + q + 1);
      if (limit == 0) continue;
      const float* row = sv.data() + (r * tq + q) * tk;
      double mx = row[0];
      for (std::size_t j = 1; j < limit; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      if (!std::isfinite(mx)) throw NumericError("masked_softmax: non-finite scores");
      double z = 0.0;
      for (std::size_t j = 0; j < limit; ++j) {
        e[j] = std::exp(row[j] - mx);
        z += e[j];
      }
      if (!std::isfinite(z)) throw NumericError("masked_softmax: non-finite scores");
      float* orow = out.data() + (r * tq + q) * tk;
      for (std::size_t j = 0; j < limit; ++j) orow[j] = static_cast<float>(e[j] / z);
    }
  }
  Tensor result = make_output(scores.shape(), std::move(out), track);
  if (track) {
    Tape::current().push("masked_softmax", result,
                         [sn = scores.node(), yn = result.node(), rows, tq, tk](std::span<const float> g) {
                           float* gs = grad_sink(sn);
                           if (!gs) return;
                           const auto& y = yn->data;
                           for (std::size_t r = 0; r < rows * tq; ++r) {
                             const std::size_t base = r * tk;
                             double dot = 0.0;
                             for (std::size_t j = 0; j < tk; ++j) dot += static_cast<double>(g[base + j]) * y[base + j];
                             for (std::size_t j = 0; j < tk; ++j)
                               gs[base + j] += static_cast<float>(y[base + j] * (g[base + j] - dot));
                           }
                         });
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  if (eps <= 0.0f) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t n = x.shape().back();
  if (gain.numel() != n || bias.numel() != n) {
    throw ShapeError("layer_norm: affine parameters do not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  const bool track = tracking({&x, &gain, &bias});
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  std::vector<float> out(x.numel());
  std::vector<float> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = xv.data() + r * n;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += row[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (row[i] - mean) * (row[i] - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) {
      const double h = (row[i] - mean) * inv_std[r];
      xhat[r * n + i] = static_cast<float>(h);
      out[r * n + i] = static_cast<float>(h * gv[i] + bv[i]);
    }
  }
  Tensor result = make_output(x.shape(), std::move(out), track);
  if (track) {
    Tape::current().push(
        "layer_norm", result,
        [xn = x.node(), gn = gain.node(), bn = bias.node(), xhat = std::move(xhat), inv_std = std::move(inv_std),
         rows, n](std::span<const float> g) {
          float* gx = grad_sink(xn);
          float* gg = grad_sink(gn);
          float* gb = grad_sink(bn);
          std::vector<double> acc_g(gg ? n : 0, 0.0);
          std::vector<double> acc_b(gb ? n : 0, 0.0);
          const auto& gain_v = gn->data;
          for (std::size_t r = 0; r < rows; ++r) {
            const float* gr = g.data() + r * n;
            const float* hr = xhat.data() + r * n;
            if (gg)
              for (std::size_t i = 0; i < n; ++i) acc_g[i] += static_cast<double>(gr[i]) * hr[i];
            if (gb)
              for (std::size_t i = 0; i < n; ++i) acc_b[i] += gr[i];
            if (gx) {
              double mean_d = 0.0;
              double mean_dh = 0.0;
              for (std::size_t i = 0; i < n; ++i) {
                const double d = static_cast<double>(gr[i]) * gain_v[i];
                mean_d += d;
                mean_dh += d * hr[i];
              }
              mean_d /= static_cast<double>(n);
              mean_dh /= static_cast<double>(n);
              for (std::size_t i = 0; i < n; ++i) {
                const double d = static_cast<double>(gr[i]) * gain_v[i];
                gx[r * n + i] += static_cast<float>(inv_std[r] * (d - mean_d - hr[i] * mean_dh));
              }
            }
          }
          for (std::size_t i = 0; i < acc_g.size(); ++i) gg[i] += static_cast<float>(acc_g[i]);
          for (std::size_t i = 0; i < acc_b.size(); ++i) gb[i] += static_cast<float>(acc_b[i]);
        });
  }
  return result;
}

// tanh through a Cephes-style expf so the loop below vectorizes; about 1e-7
// absolute error, which is below float32 rounding of the GeLU output.
inline float tanh_approx(float z) {
  z = std::clamp(z, -9.0f, 9.0f);
  const float x = 2.0f * z;
  const float k = std::floor(x * 1.44269504088896341f + 0.5f);
  const float r = x - k * 0.693359375f + k * 2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  const float e = p * std::bit_cast<float>((static_cast<std::int32_t>(k) + 127) << 23);
  return (e - 1.0f) / (e + 1.0f);
}

Tensor gelu(const Tensor& x) {
  const bool track = tracking({&x});
  constexpr float c = 0.7978845608028654f;  // sqrt(2/pi)
  std::vector<float> out(x.numel());
  std::vector<float> deriv(track ? x.numel() : 0);
  const float* xv = x.data().data();
  float* o = out.data();
  if (track) {
    float* d = deriv.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
      const float v = xv[i];
      const float t = tanh_approx(c * (v + 0.044715f * v * v * v));
      o[i] = 0.5f * v * (1.0f + t);
      d[i] = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * c * (1.0f + 3.0f * 0.044715f * v * v);
    }
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) {
      const float v = xv[i];
      o[i] = 0.5f * v * (1.0f + tanh_approx(c * (v + 0.044715f * v * v * v)));
    }
  }
  Tensor result = make_output(x.shape(), std::move(out), track);
  if (track) {
    Tape::current().push("gelu", result, [xn = x.node(), deriv = std::move(deriv)](std::span<const float> g) {
      if (float* gx = grad_sink(xn))
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv[i];
    });
  }
  return result;
}

Tensor relu(const Tensor& x) {
  const bool track = tracking({&x});
  std::vector<float> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
  Tensor result = make_output(x.shape(), std::move(out), track);
  if (track) {
    Tape::current().push("relu", result, [xn = x.node()](std::span<const float> g) {
      if (float* gx = grad_sink(xn))
        for (std::size_t i = 0; i < g.size(); ++i)
          if (xn->data[i] > 0.0f) gx[i] += g[i];
    });
  }
  return result;
}

Tensor sigmoid(const Tensor& x) {
  const bool track = tracking({&x});
  std::vector<float> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(sigmoid_value(xv[i]));
  Tensor result = make_output(x.shape(), std::move(out), track);
  if (track) {
    Tape::current().push("sigmoid", result, [xn = x.node(), yn = result.node()](std::span<const float> g) {
      if (float* gx = grad_sink(xn))
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double y = yn->data[i];
          gx[i] += static_cast<float>(g[i] * y * (1.0 - y));
        }
    });
  }
  return result;
}

Tensor glu(const Tensor& x) {
  const std::size_t last = x.shape().back();
  if (last % 2 != 0) throw ShapeError("glu: last dimension must be even, got " + shape_str(x.shape()));
  const std::size_t half = last / 2;
  const std::size_t rows = x.numel() / last;
  const bool track = tracking({&x});
  auto xv = x.data();
  std::vector<float> out(rows * half);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double v = xv[r * last + i];
      const double s = sigmoid_value(xv[r * last + half + i]);
      out[r * half + i] = static_cast<float>(v * s);
    }
  }
  Shape shape = x.shape();
  shape.back() = half;
  Tensor result = make_output(std::move(shape), std::move(out), track);
  if (track) {
    Tape::current().push("glu", result, [xn = x.node(), rows, half, last](std::span<const float> g) {
      float* gx = grad_sink(xn);
      if (!gx) return;
      const auto& xd = xn->data;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < half; ++i) {
          const double v = xd[r * last + i];
          const double s = sigmoid_value(xd[r * last + half + i]);
          const double gi = g[r * half + i];
          gx[r * last + i] += static_cast<float>(gi * s);
          gx[r * last + half + i] += static_cast<float>(gi * v * s * (1.0 - s));
        }
      }
    });
  }
  return result;
}

Tensor dropout(const Tensor& x, float p, std::mt19937_64& rng, bool training) {
  if (!training || p <= 0.0f) return x;
  if (p >= 1.0f) throw std::invalid_argument("dropout: rate must be < 1");
  const bool track = tracking({&x});
  const float keep_scale = 1.0f / (1.0f - p);
  // keep when the top 53 bits, read as a fraction of 2^53, fall below 1 - p
  const auto threshold = static_cast<std::uint64_t>((1.0 - static_cast<double>(p)) * 9007199254740992.0);
  std::vector<float> mask(x.numel());
  std::vector<float> out(x.numel());
  auto xv = x.data();
  // one draw from the caller's engine seeds a splitmix64 stream for the mask
  std::uint64_t state = rng();
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
    mask[i] = (z >> 11) < threshold ? keep_scale : 0.0f;
    out[i] = xv[i] * mask[i];
  }
  Tensor result = make_output(x.shape(), std::move(out), track);
  if (track) {
    Tape::current().push("dropout", result, [xn = x.node(), mask = std::move(mask)](std::span<const float> g) {
      if (float* gx = grad_sink(xn))
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return result;
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, Shape id_shape,
                 std::int32_t padding_idx) {
  require_rank(table, 2, "embedding");
  if (shape_numel(id_shape) != ids.size()) throw ShapeError("embedding: id shape does not match id count");
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::out_of_range("embedding: token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
  }
  const bool track = tracking({&table});
  auto tv = table.data();
  std::vector<float> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  Shape shape = std::move(id_shape);
  shape.push_back(d);
  Tensor result = make_output(std::move(shape), std::move(out), track);
  if (track) {
    Tape::current().push("embedding", result,
                         [tn = table.node(), ids = std::vector<std::int32_t>(ids.begin(), ids.end()), d,
                          padding_idx](std::span<const float> g) {
                           float* gt = grad_sink(tn);
                           if (!gt) return;
                           for (std::size_t i = 0; i < ids.size(); ++i) {
                             if (ids[i] == padding_idx) continue;
                             float* row = gt + static_cast<std::size_t>(ids[i]) * d;
                             for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
                           }
                         });
  }
  return result;
}

Tensor concat_time(const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "concat_time");
  require_rank(b, 3, "concat_time");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) {
    throw ShapeError("concat_time: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t batch = a.dim(0);
  const std::size_t ta = a.dim(1);
  const std::size_t tb = b.dim(1);
  const std::size_t d = a.dim(2);
  const bool track = tracking({&a, &b});
  std::vector<float> out(batch * (ta + tb) * d);
  for (std::size_t i = 0; i < batch; ++i) {
    std::copy_n(a.data().data() + i * ta * d, ta * d, out.data() + i * (ta + tb) * d);
    std::copy_n(b.data().data() + i * tb * d, tb * d, out.data() + i * (ta + tb) * d + ta * d);
  }
  Tensor result = make_output({batch, ta + tb, d}, std::move(out), track);
  if (track) {
    Tape::current().push("concat_time", result,
                         [an = a.node(), bn = b.node(), batch, ta, tb, d](std::span<const float> g) {
                           float* ga = grad_sink(an);
                           float* gb = grad_sink(bn);
                           for (std::size_t i = 0; i < batch; ++i) {
                             const float* src = g.data() + i * (ta + tb) * d;
                             if (ga)
                               for (std::size_t j = 0; j < ta * d; ++j) ga[i * ta * d + j] += src[j];
                             if (gb)
                               for (std::size_t j = 0; j < tb * d; ++j) gb[i * tb * d + j] += src[ta * d + j];
                           }
                         });
  }
  return result;
}

Tensor slice_time(const Tensor& x, std::size_t start, std::size_t length) {
  require_rank(x, 3, "slice_time");
  const std::size_t batch = x.dim(0);
  const std::size_t t = x.dim(1);
  const std::size_t d = x.dim(2);
  if (start + length > t) throw ShapeError("slice_time: range exceeds " + shape_str(x.shape()));
  const bool track = tracking({&x});
  std::vector<float> out(batch * length * d);
  for (std::size_t i = 0; i < batch; ++i) {
    std::copy_n(x.data().data() + (i * t + start) * d, length * d, out.data() + i * length * d);
  }
  Tensor result = make_output({batch, length, d}, std::move(out), track);
  if (track) {
    Tape::current().push("slice_time", result,
                         [xn = x.node(), batch, t, d, start, length](std::span<const float> g) {
                           float* gx = grad_sink(xn);
                           if (!gx) return;
                           for (std::size_t i = 0; i < batch; ++i)
                             for (std::size_t j = 0; j < length * d; ++j)
                               gx[(i * t + start) * d + j] += g[i * length * d + j];
                         });
  }
  return result;
}

Tensor reverse_time(const Tensor& x, std::span<const std::size_t> lengths) {
  require_rank(x, 3, "reverse_time");
  const std::size_t batch = x.dim(0);
  const std::size_t t = x.dim(1);
  const std::size_t d = x.dim(2);
  if (!lengths.empty() && lengths.size() != batch) throw ShapeError("reverse_time: one length per batch entry");
  std::vector<std::size_t> source(batch * t);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t len = lengths.empty() ? t : std::min(lengths[i], t);
    for (std::size_t j = 0; j < t; ++j) source[i * t + j] = j < len ? len - 1 - j : j;
  }
  const bool track = tracking({&x});
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t j = 0; j < t; ++j)
      std::copy_n(x.data().data() + (i * t + source[i * t + j]) * d, d, out.data() + (i * t + j) * d);
  Tensor result = make_output(x.shape(), std::move(out), track);
  if (track) {
    Tape::current().push("reverse_time", result,
                         [xn = x.node(), source = std::move(source), batch, t, d](std::span<const float> g) {
                           float* gx = grad_sink(xn);
                           if (!gx) return;
                           for (std::size_t i = 0; i < batch; ++i)
                             for (std::size_t j = 0; j < t; ++j) {
                               float* dst = gx + (i * t + source[i * t + j]) * d;
                               const float* src = g.data() + (i * t + j) * d;
                               for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                             }
                         });
  }
  return result;
}

Tensor pack_concat(const Tensor& a, std::span<const std::size_t> a_lengths, const Tensor& b) {
  require_rank(a, 3, "pack_concat");
  require_rank(b, 3, "pack_concat");
  const std::size_t batch = a.dim(0);
  const std::size_t ta = a.dim(1);
  const std::size_t tb = b.dim(1);
  const std::size_t d = a.dim(2);
  if (b.dim(0) != batch || b.dim(2) != d || a_lengths.size() != batch) {
    throw ShapeError("pack_concat: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  for (std::size_t len : a_lengths)
    if (len > ta) throw ShapeError("pack_concat: length exceeds time axis");
  const bool track = tracking({&a, &b});
  const std::size_t t = ta + tb;
  std::vector<float> out(batch * t * d, 0.0f);
  for (std::size_t i = 0; i < batch; ++i) {
    std::copy_n(a.data().data() + i * ta * d, a_lengths[i] * d, out.data() + i * t * d);
    std::copy_n(b.data().data() + i * tb * d, tb * d, out.data() + (i * t + a_lengths[i]) * d);
  }
  Tensor result = make_output({batch, t, d}, std::move(out), track);
  if (track) {
    Tape::current().push("pack_concat", result,
                         [an = a.node(), bn = b.node(), lens = std::vector<std::size_t>(a_lengths.begin(), a_lengths.end()),
                          batch, ta, tb, d](std::span<const float> g) {
                           float* ga = grad_sink(an);
                           float* gb = grad_sink(bn);
                           const std::size_t t = ta + tb;
                           for (std::size_t i = 0; i < batch; ++i) {
                             const float* row = g.data() + i * t * d;
                             if (ga)
                               for (std::size_t j = 0; j < lens[i] * d; ++j) ga[i * ta * d + j] += row[j];
                             if (gb)
                               for (std::size_t j = 0; j < tb * d; ++j) gb[i * tb * d + j] += row[lens[i] * d + j];
                           }
                         });
  }
  return result;
}

Tensor gather_segment(const Tensor& x, std::span<const std::size_t> offsets, std::size_t length) {
  require_rank(x, 3, "gather_segment");
  const std::size_t batch = x.dim(0);
  const std::size_t t = x.dim(1);
  const std::size_t d = x.dim(2);
  if (offsets.size() != batch) throw ShapeError("gather_segment: one offset per row required");
  for (std::size_t off : offsets)
    if (off + length > t) throw ShapeError("gather_segment: segment exceeds " + shape_str(x.shape()));
  const bool track = tracking({&x});
  std::vector<float> out(batch * length * d);
  for (std::size_t i = 0; i < batch; ++i)
    std::copy_n(x.data().data() + (i * t + offsets[i]) * d, length * d, out.data() + i * length * d);
  Tensor result = make_output({batch, length, d}, std::move(out), track);
  if (track) {
    Tape::current().push("gather_segment", result,
                         [xn = x.node(), offs = std::vector<std::size_t>(offsets.begin(), offsets.end()), batch, t, d,
                          length](std::span<const float> g) {
                           float* gx = grad_sink(xn);
                           if (!gx) return;
                           for (std::size_t i = 0; i < batch; ++i)
                             for (std::size_t j = 0; j < length * d; ++j)
                               gx[(i * t + offs[i]) * d + j] += g[i * length * d + j];
                         });
  }
  return result;
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() == 0) throw ShapeError("select_rows: scalar input");
  const std::size_t stride = x.numel() / x.dim(0);
  std::vector<float> out(rows.size() * stride);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0)) throw std::out_of_range("select_rows: row out of range");
    std::copy_n(x.data().data() + rows[i] * stride, stride, out.data() + i * stride);
  }
  Shape shape = x.shape();
  shape[0] = rows.size();
  return Tensor(std::move(shape), std::move(out));
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  require_rank(x, 3, "split_heads");
  const std::size_t batch = x.dim(0);
  const std::size_t t = x.dim(1);
  const std::size_t d = x.dim(2);
  if (heads == 0 || d % heads != 0) throw ShapeError("split_heads: heads must divide " + shape_str(x.shape()));
  const std::size_t dh = d / heads;
  const bool track = tracking({&x});
  std::vector<float> out(x.numel());
  auto xv = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < t; ++j)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(xv.data() + (b * t + j) * d + h * dh, dh, out.data() + ((b * heads + h) * t + j) * dh);
  Tensor result = make_output({batch * heads, t, dh}, std::move(out), track);
  if (track) {
    Tape::current().push("split_heads", result, [xn = x.node(), batch, t, heads, dh](std::span<const float> g) {
      float* gx = grad_sink(xn);
      if (!gx) return;
      const std::size_t d = heads * dh;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < t; ++j)
          for (std::size_t h = 0; h < heads; ++h) {
            float* dst = gx + (b * t + j) * d + h * dh;
            const float* src = g.data() + ((b * heads + h) * t + j) * dh;
            for (std::size_t c = 0; c < dh; ++c) dst[c] += src[c];
          }
    });
  }
  return result;
}

Tensor merge_heads(const Tensor& x, std::size_t heads) {
  require_rank(x, 3, "merge_heads");
  if (heads == 0 || x.dim(0) % heads != 0) throw ShapeError("merge_heads: heads must divide " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0) / heads;
  const std::size_t t = x.dim(1);
  const std::size_t dh = x.dim(2);
  const std::size_t d = heads * dh;
  const bool track = tracking({&x});
  std::vector<float> out(x.numel());
  auto xv = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < t; ++j)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(xv.data() + ((b * heads + h) * t + j) * dh, dh, out.data() + (b * t + j) * d + h * dh);
  Tensor result = make_output({batch, t, d}, std::move(out), track);
  if (track) {
    Tape::current().push("merge_heads", result, [xn = x.node(), batch, t, heads, dh](std::span<const float> g) {
      float* gx = grad_sink(xn);
      if (!gx) return;
      const std::size_t d = heads * dh;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < t; ++j)
          for (std::size_t h = 0; h < heads; ++h) {
            float* dst = gx + ((b * heads + h) * t + j) * dh;
            const float* src = g.data() + (b * t + j) * d + h * dh;
            for (std::size_t c = 0; c < dh; ++c) dst[c] += src[c];
          }
    });
  }
  return result;
}

namespace {

// Runs y[b, :, h] = k[:, h] (*) u[b, :, h] over all (b, h), in float64.
// When `correlate` is set both signals are time-reversed around the
// convolution, which yields the adjoint (cross-correlation) needed by the
// backward pass: out[t] = sum_{s >= t} k[s - t] u[s].
void conv_channels(const float* u, const double* kernel_cols, std::size_t batch, std::size_t length,
                   std::size_t channels, bool correlate, double* out) {
  std::vector<double> col0(length), col1(length), y0(length), y1(length);
  for (std::size_t h = 0; h < channels; ++h) {
    fft::CausalConvolver conv(std::span<const double>(kernel_cols + h * length, length), length);
    for (std::size_t b = 0; b < batch; b += 2) {
      const bool pair = b + 1 < batch;
      for (std::size_t t = 0; t < length; ++t) {
        const std::size_t src = correlate ? length - 1 - t : t;
        col0[t] = u[(b * length + src) * channels + h];
        col1[t] = pair ? u[((b + 1) * length + src) * channels + h] : 0.0;
      }
      if (pair) {
        conv.apply_pair(col0, col1, y0, y1);
      } else {
        conv.apply(col0, y0);
      }
      for (std::size_t t = 0; t < length; ++t) {
        const std::size_t dst = correlate ? length - 1 - t : t;
        out[(b * length + dst) * channels + h] = y0[t];
        if (pair) out[((b + 1) * length + dst) * channels + h] = y1[t];
      }
    }
  }
}

// Direct O(L^2) path, vectorized over channels. Faster than the FFT up to a
// few hundred steps because every kernel tap is shared by all H channels.
constexpr std::size_t kDirectConvMaxLength = 256;

// acc[h] += sum over taps of a[tap][h] * b[tap][h] for one block of channels.
// Pointers advance by `stride` per tap (a) and `b_step` per tap (b, may be negative).
template <typename TA, typename TB>
void fma_taps(const TA* __restrict a, const TB* __restrict b, std::size_t taps, std::size_t channels,
              std::ptrdiff_t b_step, double* __restrict out) {
  constexpr std::size_t W = 8;
  std::size_t h0 = 0;
  for (; h0 + W <= channels; h0 += W) {
    double acc[W] = {};
    const TA* ap = a + h0;
    const TB* bp = b + h0;
    for (std::size_t i = 0; i < taps; ++i, ap += channels, bp += b_step)
      for (std::size_t j = 0; j < W; ++j) acc[j] += static_cast<double>(ap[j]) * static_cast<double>(bp[j]);
    for (std::size_t j = 0; j < W; ++j) out[h0 + j] += acc[j];
  }
  for (std::size_t h = h0; h < channels; ++h) {
    double acc = 0.0;
    const TA* ap = a + h;
    const TB* bp = b + h;
    for (std::size_t i = 0; i < taps; ++i, ap += channels, bp += b_step) acc += static_cast<double>(*ap) * *bp;
    out[h] += acc;
  }
}

void direct_forward(const float* u, const double* k, std::size_t batch, std::size_t length, std::size_t channels,
                    double* y) {
  const auto step = -static_cast<std::ptrdiff_t>(channels);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < length; ++t)
      fma_taps(k, u + (b * length + t) * channels, t + 1, channels, step, y + (b * length + t) * channels);
}

// du[s] = sum_{t >= s} k[t - s] g[t]
void direct_input_grad(const float* g, const double* k, std::size_t batch, std::size_t length, std::size_t channels,
                       double* du) {
  const auto step = static_cast<std::ptrdiff_t>(channels);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t s = 0; s < length; ++s)
      fma_taps(k, g + (b * length + s) * channels, length - s, channels, step, du + (b * length + s) * channels);
}

// dk[i] = sum_b sum_{t >= i} g[t] u[t - i]
void direct_kernel_grad(const float* g, const float* u, std::size_t batch, std::size_t length, std::size_t channels,
                        double* dk) {
  const auto step = static_cast<std::ptrdiff_t>(channels);
  for (std::size_t i = 0; i < length; ++i)
    for (std::size_t b = 0; b < batch; ++b)
      fma_taps(g + (b * length + i) * channels, u + b * length * channels, length - i, channels, step,
               dk + i * channels);
}

Tensor direct_causal_conv(const Tensor& u, const Tensor& k, std::size_t batch, std::size_t length,
                          std::size_t channels) {
  const bool track = tracking({&u, &k});
  std::vector<double> kd(k.data().begin(), k.data().end());
  std::vector<double> y(u.numel(), 0.0);
  direct_forward(u.data().data(), kd.data(), batch, length, channels, y.data());
  Tensor result = make_output(u.shape(), std::vector<float>(y.begin(), y.end()), track);
  if (track) {
    Tape::current().push("fft_causal_conv", result,
                         [un = u.node(), kn = k.node(), kd = std::move(kd), batch, length, channels](
                             std::span<const float> g) {
                           if (float* gu = grad_sink(un)) {
                             std::vector<double> du(g.size(), 0.0);
                             direct_input_grad(g.data(), kd.data(), batch, length, channels, du.data());
                             for (std::size_t i = 0; i < du.size(); ++i) gu[i] += static_cast<float>(du[i]);
                           }
                           if (float* gk = grad_sink(kn)) {
                             std::vector<double> dk(length * channels, 0.0);
                             direct_kernel_grad(g.data(), un->data.data(), batch, length, channels, dk.data());
                             for (std::size_t i = 0; i < dk.size(); ++i) gk[i] += static_cast<float>(dk[i]);
                           }
                         });
  }
  return result;
}

}  // namespace

Tensor fft_causal_conv(const Tensor& u, const Tensor& k) {
  require_rank(k, 2, "fft_causal_conv");
  if (u.rank() != 2 && u.rank() != 3) throw ShapeError("fft_causal_conv: input must be [L,H] or [B,L,H]");
  const std::size_t batch = u.rank() == 3 ? u.dim(0) : 1;
  const std::size_t length = u.dim(u.rank() - 2);
  const std::size_t channels = u.dim(u.rank() - 1);
  if (k.dim(0) != length || k.dim(1) != channels) {
    throw ShapeError("fft_causal_conv: kernel " + shape_str(k.shape()) + " does not match input " +
                     shape_str(u.shape()));
  }
  if (length <= kDirectConvMaxLength) return direct_causal_conv(u, k, batch, length, channels);
  const bool track = tracking({&u, &k});

  std::vector<double> kcols(channels * length);
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t h = 0; h < channels; ++h) kcols[h * length + t] = k.data()[t * channels + h];

  std::vector<double> y(u.numel());
  conv_channels(u.data().data(), kcols.data(), batch, length, channels, false, y.data());
  std::vector<float> out(y.begin(), y.end());
  Tensor result = make_output(u.shape(), std::move(out), track);
  if (track) {
    Tape::current().push(
        "fft_causal_conv", result,
        [un = u.node(), kn = k.node(), kcols = std::move(kcols), batch, length, channels](std::span<const float> g) {
          if (float* gu = grad_sink(un)) {
            // du[t] = sum_{s >= t} k[s - t] g[s]
            std::vector<double> du(g.size());
            conv_channels(g.data(), kcols.data(), batch, length, channels, true, du.data());
            for (std::size_t i = 0; i < du.size(); ++i) gu[i] += static_cast<float>(du[i]);
          }
          if (float* gk = grad_sink(kn)) {
            // dk[i] = sum_b sum_t g[t] u[t - i]
            std::vector<double> acc(length * channels, 0.0);
            std::vector<double> ucol(length), gcol(length), r(length);
            for (std::size_t h = 0; h < channels; ++h) {
              fft::CorrelationAccumulator corr(length);
              for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t t = 0; t < length; ++t) {
                  ucol[t] = un->data[(b * length + t) * channels + h];
                  gcol[t] = g[(b * length + t) * channels + h];
                }
                corr.add(gcol, ucol);
              }
              corr.result(r);
              for (std::size_t i = 0; i < length; ++i) acc[i * channels + h] = r[i];
            }
            for (std::size_t i = 0; i < acc.size(); ++i) gk[i] += static_cast<float>(acc[i]);
          }
        });
  }
  return result;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask) {
  const std::size_t vocab = logits.shape().back();
  const std::size_t rows = logits.numel() / vocab;
  if (targets.size() != rows || mask.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(rows) + " logit rows but " +
                     std::to_string(targets.size()) + " targets / " + std::to_string(mask.size()) + " mask entries");
  }
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw std::out_of_range("cross_entropy: target id " + std::to_string(targets[r]) + " outside [0, " +
                              std::to_string(vocab) + ")");
    }
  }
  const bool track = tracking({&logits});
  auto lv = logits.data();
  std::size_t count = 0;
  double total = 0.0;
  std::vector<double> logz(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const float* row = lv.data() + r * vocab;
    double mx = row[0];
    for (std::size_t v = 1; v < vocab; ++v) mx = std::max(mx, static_cast<double>(row[v]));
    double z = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) z += std::exp(row[v] - mx);
    logz[r] = mx + std::log(z);
    total += logz[r] - row[targets[r]];
    ++count;
  }
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
  Tensor result = make_output({1}, {static_cast<float>(loss)}, track);
  if (track) {
    Tape::current().push("cross_entropy", result,
                         [ln = logits.node(), t = std::vector<std::int32_t>(targets.begin(), targets.end()),
                          m = std::vector<std::uint8_t>(mask.begin(), mask.end()), logz = std::move(logz), rows, vocab,
                          count](std::span<const float> g) {
                           float* gl = grad_sink(ln);
                           if (!gl || count == 0) return;
                           const double w = g[0] / static_cast<double>(count);
                           for (std::size_t r = 0; r < rows; ++r) {
                             if (!m[r]) continue;
                             const float* row = ln->data.data() + r * vocab;
                             float* grow = gl + r * vocab;
                             for (std::size_t v = 0; v < vocab; ++v) {
                               const double p = std::exp(row[v] - logz[r]);
                               grow[v] += static_cast<float>(w * (p - (static_cast<std::int32_t>(v) == t[r] ? 1.0 : 0.0)));
                             }
                           }
                         });
  }
  return result;
}

Tensor solve(const Tensor& m, const Tensor& rhs) {
  const bool batched = m.rank() == 3;
  if (!(m.rank() == 2 || batched) || rhs.rank() != m.rank()) {
    throw ShapeError("solve: expected [n,n]/[n,k] or [g,n,n]/[g,n,k], got " + shape_str(m.shape()) + " and " +
                     shape_str(rhs.shape()));
  }
  const std::size_t groups = batched ? m.dim(0) : 1;
  const std::size_t n = m.dim(m.rank() - 1);
  const std::size_t k = rhs.dim(rhs.rank() - 1);
  if (m.dim(m.rank() - 2) != n || rhs.dim(rhs.rank() - 2) != n || (batched && rhs.dim(0) != groups)) {
    throw ShapeError("solve: incompatible " + shape_str(m.shape()) + " and " + shape_str(rhs.shape()));
  }
  const bool track = tracking({&m, &rhs});
  std::vector<float> out(groups * n * k);
  for (std::size_t g = 0; g < groups; ++g) {
    const MatD md = load(m.data().data() + g * n * n, n, n);
    const MatD rd = load(rhs.data().data() + g * n * k, n, k);
    Eigen::PartialPivLU<MatD> lu(md);
    const double rcond = lu.rcond();
    if (!(rcond > 1e-12)) {
      throw NumericError("solve: matrix is singular to working precision (reciprocal condition estimate " +
                         std::to_string(rcond) + ")");
    }
    store(lu.solve(rd), out.data() + g * n * k);
  }
  Tensor result = make_output(rhs.shape(), std::move(out), track);
  if (track) {
    Tape::current().push("solve", result,
                         [mn = m.node(), rn = rhs.node(), yn = result.node(), groups, n, k](std::span<const float> g) {
                           float* gm = grad_sink(mn);
                           float* gr = grad_sink(rn);
                           for (std::size_t i = 0; i < groups; ++i) {
                             const MatD md = load(mn->data.data() + i * n * n, n, n);
                             const MatD gd = load(g.data() + i * n * k, n, k);
                             // d rhs = M^-T g ; d M = -(d rhs) y^T
                             const MatD grhs = md.transpose().partialPivLu().solve(gd);
                             if (gr) accumulate(grhs, gr + i * n * k);
                             if (gm) {
                               const MatD yd = load(yn->data.data() + i * n * k, n, k);
                               accumulate(MatD(-grhs * yd.transpose()), gm + i * n * n);
                             }
                           }
                         });
  }
  return result;
}

}  // namespace s4mt
