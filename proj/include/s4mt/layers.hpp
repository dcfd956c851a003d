#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "s4mt/ops.hpp"
#include "s4mt/tensor.hpp"

namespace s4mt {

// Ordered, uniquely named parameter handles. Entries alias the model's
// tensors, so writing through them updates the model in place.
class ParamList {
 public:
  Tensor& add(std::string name, Tensor tensor);
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  std::size_t count() const;
  const Tensor* find(const std::string& name) const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

enum class NormStyle { pre, post };

// Per-call forward settings.
struct ForwardContext {
  bool training = false;
  float dropout = 0.0f;
  std::mt19937_64* rng = nullptr;

  Tensor drop(const Tensor& x) const {
    if (!training || dropout <= 0.0f || rng == nullptr) return x;
    return s4mt::dropout(x, dropout, *rng, true);
  }
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, std::mt19937_64& rng, ParamList& params,
                     const std::string& name);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm init(std::size_t dim, ParamList& params, const std::string& name);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, 1e-5f); }
};

// Residual wrapper: post-norm LN(x + drop(f(x))) or pre-norm x + drop(f(LN(x))).
template <typename Fn>
Tensor residual(const Tensor& x, const LayerNorm& norm, NormStyle style, const ForwardContext& ctx, Fn&& sublayer) {
  if (style == NormStyle::post) return norm(add(x, ctx.drop(sublayer(x))));
  return add(x, ctx.drop(sublayer(norm(x))));
}

}  // namespace s4mt
