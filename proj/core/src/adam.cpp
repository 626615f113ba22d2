#include "dod/adam.hpp"

#include <cmath>

namespace dod {

void adam_step(std::span<Tensor> params, AdamState& state) {
  if (state.first_moment.empty()) {
    for (const Tensor& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0);
      state.second_moment.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                     " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw ValueError("adam_step: parameter " + std::to_string(i) + " " +
                       shape_str(params[i].shape()) + " has no gradient");
    }
    if (state.first_moment[i].size() != params[i].numel()) {
      throw ShapeError("adam_step: moment size mismatch for parameter " + std::to_string(i));
    }
  }
  ++state.step;
  const AdamConfig& c = state.config;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    auto grad = params[i].grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * grad[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * grad[j] * grad[j];
      data[j] -= c.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.eps);
    }
  }
}

void zero_grad(std::span<Tensor> params) {
  for (Tensor& p : params) p.zero_grad();
}

}  // namespace dod
