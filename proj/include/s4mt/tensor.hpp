#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace s4mt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool is_leaf = true;

  float* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
    return grad.data();
  }
};

using NodePtr = std::shared_ptr<TensorNode>;

}  // namespace detail

// Dense row-major float32 tensor with value-shared storage. Copies of a
// Tensor alias the same node; use clone() for an independent buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor scalar(float value);
  static Tensor randn(Shape shape, std::mt19937_64& rng, float stddev = 1.0f);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, float bound);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<float> data() { return node_->data; }
  std::span<const float> data() const { return node_->data; }
  float item() const;
  float at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const { return node_->is_leaf; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const float> grad() const { return node_->grad; }
  std::span<float> mutable_grad();
  void zero_grad();

  Tensor clone() const;   // deep copy, leaf, no grad tracking
  Tensor detach() const { return clone(); }

  const detail::NodePtr& node() const { return node_; }
  static Tensor from_node(detail::NodePtr node);

 private:
  detail::NodePtr node_;
};

// Ordered record of differentiable operations executed on this thread.
// backward() replays it in reverse and then clears it.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const float> out_grad)>;

  struct Record {
    const char* op;
    detail::NodePtr output;
    BackwardFn backward;
  };

  static Tape& current();

  bool enabled() const { return enabled_; }
  void push(const char* op, const Tensor& output, BackwardFn fn);
  bool contains(const detail::TensorNode* node) const;
  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

 private:
  friend class NoGradGuard;
  std::vector<Record> records_;
  bool enabled_ = true;
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(Tape::current().enabled_) { Tape::current().enabled_ = false; }
  ~NoGradGuard() { Tape::current().enabled_ = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Populates .grad of every requires_grad tensor reachable from `loss`.
void backward(const Tensor& loss);

namespace detail {

bool tracking(std::initializer_list<const Tensor*> inputs);
Tensor make_output(Shape shape, std::vector<float> values, bool track);

// Gradient accumulator for an input node, or nullptr when it needs none.
inline float* grad_sink(const NodePtr& node) {
  return node->requires_grad ? node->grad_buffer() : nullptr;
}

}  // namespace detail

}  // namespace s4mt
