#include "s4mt/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace s4mt {

Tensor& ParamList::add(std::string name, Tensor tensor) {
  if (find(name) != nullptr) throw std::logic_error("duplicate parameter name: " + name);
  tensor.set_requires_grad(true);
  items_.emplace_back(std::move(name), std::move(tensor));
  return items_.back().second;
}

std::size_t ParamList::count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : items_) total += t.numel();
  return total;
}

const Tensor* ParamList::find(const std::string& name) const {
  auto it = std::find_if(items_.begin(), items_.end(), [&](const auto& p) { return p.first == name; });
  return it == items_.end() ? nullptr : &it->second;
}

Linear Linear::init(std::size_t in, std::size_t out, std::mt19937_64& rng, ParamList& params,
                    const std::string& name) {
  Linear l;
  const float bound = 1.0f / std::sqrt(static_cast<float>(in));
  l.weight = params.add(name + ".weight", Tensor::uniform({in, out}, rng, bound));
  l.bias = params.add(name + ".bias", Tensor({out}, 0.0f));
  return l;
}

LayerNorm LayerNorm::init(std::size_t dim, ParamList& params, const std::string& name) {
  LayerNorm n;
  n.gain = params.add(name + ".gain", Tensor({dim}, 1.0f));
  n.bias = params.add(name + ".bias", Tensor({dim}, 0.0f));
  return n;
}

}  // namespace s4mt
