#include "s4mt/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace s4mt {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, float fill) : node_(std::make_shared<detail::TensorNode>()) {
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : node_(std::make_shared<detail::TensorNode>()) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
}

Tensor Tensor::scalar(float value) { return Tensor({1}, std::vector<float>{value}); }

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, float stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> dist(0.0f, stddev);
  for (float& v : t.data()) v = dist(rng);
  return t;
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, float bound) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (float& v : t.data()) v = dist(rng);
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return node_->shape[axis];
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

float Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("index rank mismatch for shape " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= node_->shape[axis]) throw std::out_of_range("tensor index out of range");
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
  return *this;
}

std::span<float> Tensor::mutable_grad() {
  node_->grad_buffer();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

Tensor Tensor::clone() const {
  Tensor copy;
  copy.node_ = std::make_shared<detail::TensorNode>();
  copy.node_->shape = node_->shape;
  copy.node_->data = node_->data;
  return copy;
}

Tensor Tensor::from_node(detail::NodePtr node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::push(const char* op, const Tensor& output, BackwardFn fn) {
  records_.push_back(Record{op, output.node(), std::move(fn)});
}

bool Tape::contains(const detail::TensorNode* node) const {
  return std::any_of(records_.rbegin(), records_.rend(),
                     [node](const Record& r) { return r.output.get() == node; });
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward() called on a loss that does not require grad");
  }
  auto& tape = Tape::current();
  detail::TensorNode* root = loss.node().get();
  if (loss.is_leaf()) {
    root->grad_buffer()[0] += 1.0f;
    return;
  }
  if (!tape.contains(root)) {
    throw ContractError("backward() called on a loss that is not on the tape");
  }
  root->grad_buffer()[0] = 1.0f;
  const auto& records = tape.records();
  for (auto it = records.rbegin(); it != records.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward(it->output->grad);
  }
  tape.clear();
}

namespace detail {

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::current().enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

Tensor make_output(Shape shape, std::vector<float> values, bool track) {
  Tensor out(std::move(shape), std::move(values));
  if (track) {
    out.node()->requires_grad = true;
    out.node()->is_leaf = false;
  }
  return out;
}

}  // namespace detail

}  // namespace s4mt
