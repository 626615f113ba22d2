#include "dod/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

namespace dod {

namespace {
thread_local Tape* g_active_tape = nullptr;
std::atomic<bool> g_finite_check{false};
}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<TensorImpl>()) {
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<TensorImpl>()) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  Tensor t(std::move(shape), std::move(data));
  t.impl_->requires_grad = true;
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape()));
  }
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
  return impl_->data[0];
}

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->data); }

Tensor Tensor::detach() const {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = impl_->shape;
  t.impl_->data = impl_->data;
  return t;
}

bool Tensor::all_finite() const {
  return std::all_of(impl_->data.begin(), impl_->data.end(),
                     [](double v) { return std::isfinite(v); });
}

void set_finite_check(bool enabled) { g_finite_check = enabled; }
bool finite_check_enabled() { return g_finite_check; }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw ValueError("backward: loss is not on the tape (no input requires grad)");
  }
  auto& g = loss.impl()->grad;
  if (g.empty()) g.assign(1, 0.0);
  g[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

}  // namespace dod
