#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dod {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible. The message names the axes involved.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for out-of-domain arguments (bad timestep, even kernel, ...).
class ValueError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass or zero_grad touches it
  bool requires_grad = false;
};

/// Dense row-major array of doubles. Copies are shallow handles onto the same storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor scalar(double value) { return Tensor(Shape{1}, value); }
  /// Leaf that participates in gradient computation.
  static Tensor parameter(Shape shape, std::vector<double> data);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  /// In-place access; reserved for optimizers, initializers and loaders.
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double at(std::size_t flat_index) const { return impl_->data.at(flat_index); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad();
  void zero_grad();

  /// Detached deep copy.
  Tensor clone() const;
  /// Shares storage, drops gradient participation of the result.
  Tensor detach() const;

  bool all_finite() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// When enabled, every op result is checked for NaN/Inf and a ValueError is raised.
void set_finite_check(bool enabled);
bool finite_check_enabled();

/// Ordered record of differentiable operations for reverse-mode differentiation.
///
/// Ops append their backward rule while a TapeScope for this tape is active on the
/// calling thread, so entries are already in topological order. Without an active
/// tape nothing is recorded, which is how inference runs.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(BackwardFn fn) { entries_.push_back(std::move(fn)); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Gradients accumulate.
  void backward(const Tensor& loss);

 private:
  std::vector<BackwardFn> entries_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

}  // namespace dod
