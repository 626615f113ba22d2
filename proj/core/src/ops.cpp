#include "dod/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace dod {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using ImplPtr = std::shared_ptr<TensorImpl>;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

std::vector<double>& grad_of(const ImplPtr& p) {
  if (p->grad.empty()) p->grad.assign(p->data.size(), 0.0);
  return p->grad;
}

Tensor finish(Tensor out, bool track, const char* op) {
  if (track) out.set_requires_grad(true);
  if (finite_check_enabled() && !out.all_finite()) {
    throw ValueError(std::string(op) + ": produced non-finite values");
  }
  return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got shape " + shape_str(t.shape()));
  }
}

template <class Fwd, class Dfdx>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Dfdx dfdx) {
  const bool track = tracking({&x});
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
  Tensor y(x.shape(), std::move(out));
  if (track) {
    ImplPtr xi = x.impl(), yi = y.impl();
    active_tape()->record([xi, yi, dfdx] {
      if (yi->grad.empty()) return;
      auto& gx = grad_of(xi);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += yi->grad[i] * dfdx(xi->data[i], yi->data[i]);
    });
  }
  return finish(std::move(y), track, name);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const bool track = tracking({&a, &b});
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  Tensor y(a.shape(), std::move(out));
  if (track) {
    ImplPtr ai = a.impl(), bi = b.impl(), yi = y.impl();
    active_tape()->record([ai, bi, yi] {
      if (yi->grad.empty()) return;
      for (const ImplPtr& p : {ai, bi}) {
        if (!p->requires_grad) continue;
        auto& g = grad_of(p);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i];
      }
    });
  }
  return finish(std::move(y), track, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const bool track = tracking({&a, &b});
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  Tensor y(a.shape(), std::move(out));
  if (track) {
    ImplPtr ai = a.impl(), bi = b.impl(), yi = y.impl();
    active_tape()->record([ai, bi, yi] {
      if (yi->grad.empty()) return;
      if (ai->requires_grad) {
        auto& g = grad_of(ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i];
      }
      if (bi->requires_grad) {
        auto& g = grad_of(bi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= yi->grad[i];
      }
    });
  }
  return finish(std::move(y), track, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const bool track = tracking({&a, &b});
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Tensor y(a.shape(), std::move(out));
  if (track) {
    ImplPtr ai = a.impl(), bi = b.impl(), yi = y.impl();
    active_tape()->record([ai, bi, yi] {
      if (yi->grad.empty()) return;
      if (ai->requires_grad) {
        auto& g = grad_of(ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        auto& g = grad_of(bi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i] * ai->data[i];
      }
    });
  }
  return finish(std::move(y), track, "mul");
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, "scale", [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      a, "add_scalar", [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, "silu", [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor square(const Tensor& x) {
  return unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor add_group_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() < 2 || bias.rank() != 2 || bias.dim(1) != x.dim(1) || bias.dim(0) == 0 ||
      x.dim(0) % bias.dim(0) != 0) {
    throw ShapeError("add_group_bias: x " + shape_str(x.shape()) + " incompatible with bias " +
                     shape_str(bias.shape()) + " (axis 0 must divide, axis 1 must match)");
  }
  const std::size_t n = x.dim(0), c = x.dim(1), g = bias.dim(0), rows_per_group = n / g;
  const std::size_t inner = x.numel() / (n * c);
  const bool track = tracking({&x, &bias});
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double bv = bias.data()[(i / rows_per_group) * c + ch];
      double* row = out.data() + (i * c + ch) * inner;
      for (std::size_t j = 0; j < inner; ++j) row[j] += bv;
    }
  Tensor y(x.shape(), std::move(out));
  if (track) {
    ImplPtr xi = x.impl(), bi = bias.impl(), yi = y.impl();
    active_tape()->record([xi, bi, yi, n, c, rows_per_group, inner] {
      if (yi->grad.empty()) return;
      if (xi->requires_grad) {
        auto& g = grad_of(xi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i];
      }
      if (bi->requires_grad) {
        auto& g = grad_of(bi);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double* row = yi->grad.data() + (i * c + ch) * inner;
            double acc = 0.0;
            for (std::size_t j = 0; j < inner; ++j) acc += row[j];
            g[(i / rows_per_group) * c + ch] += acc;
          }
      }
    });
  }
  return finish(std::move(y), track, "add_group_bias");
}

Tensor sum(const Tensor& x) {
  const bool track = tracking({&x});
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor y = Tensor::scalar(acc);
  if (track) {
    ImplPtr xi = x.impl(), yi = y.impl();
    active_tape()->record([xi, yi] {
      if (yi->grad.empty()) return;
      auto& g = grad_of(xi);
      for (double& v : g) v += yi->grad[0];
    });
  }
  return finish(std::move(y), track, "sum");
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  const bool track = tracking({&a, &b});
  const double n = static_cast<double>(a.numel());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  Tensor y = Tensor::scalar(acc / n);
  if (track) {
    ImplPtr ai = a.impl(), bi = b.impl(), yi = y.impl();
    active_tape()->record([ai, bi, yi, n] {
      if (yi->grad.empty()) return;
      const double k = 2.0 * yi->grad[0] / n;
      if (ai->requires_grad) {
        auto& g = grad_of(ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * (ai->data[i] - bi->data[i]);
      }
      if (bi->requires_grad) {
        auto& g = grad_of(bi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= k * (ai->data[i] - bi->data[i]);
      }
    });
  }
  return finish(std::move(y), track, "mse");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const bool track = tracking({&x});
  Tensor y(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (track) {
    ImplPtr xi = x.impl(), yi = y.impl();
    active_tape()->record([xi, yi] {
      if (yi->grad.empty()) return;
      auto& g = grad_of(xi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i];
    });
  }
  return finish(std::move(y), track, "reshape");
}

namespace {

// Maps each flat output index of the permuted tensor to its flat source index.
std::vector<std::size_t> permutation_index(const Shape& in, const std::vector<std::size_t>& axes) {
  const std::size_t rank = in.size();
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out(rank);
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out[i] = in[axes[i]];
    src_stride[i] = in_stride[axes[i]];
  }
  const std::size_t n = shape_numel(in);
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    index[flat] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++counter[ax];
      src += src_stride[ax];
      if (counter[ax] < out[ax]) break;
      src -= src_stride[ax] * out[ax];
      counter[ax] = 0;
    }
  }
  return index;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.rank();
  std::vector<std::size_t> sorted = axes;
  std::sort(sorted.begin(), sorted.end());
  bool valid = axes.size() == rank;
  for (std::size_t i = 0; valid && i < rank; ++i) valid = sorted[i] == i;
  if (!valid) throw ShapeError("permute: axes are not a permutation of rank " + std::to_string(rank));
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(axes[i]);
  auto index = std::make_shared<std::vector<std::size_t>>(permutation_index(x.shape(), axes));
  const bool track = tracking({&x});
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[(*index)[i]];
  Tensor y(std::move(out_shape), std::move(out));
  if (track) {
    ImplPtr xi = x.impl(), yi = y.impl();
    active_tape()->record([xi, yi, index] {
      if (yi->grad.empty()) return;
      auto& g = grad_of(xi);
      for (std::size_t i = 0; i < index->size(); ++i) g[(*index)[i]] += yi->grad[i];
    });
  }
  return finish(std::move(y), track, "permute");
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    bool ok = p.rank() == ref.size();
    for (std::size_t i = 0; ok && i < ref.size(); ++i) ok = i == axis || p.dim(i) == ref[i];
    if (!ok) {
      throw ShapeError("concat: " + shape_str(p.shape()) + " does not match " + shape_str(ref) +
                       " off axis " + std::to_string(axis));
    }
    total += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  Shape out_shape = ref;
  out_shape[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  bool track = false;
  for (const Tensor& p : parts) {
    offsets.push_back(off);
    const std::size_t span = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().begin() + o * span, span, out.begin() + o * total * inner + off * inner);
    }
    off += p.dim(axis);
    track = track || tracking({&p});
  }
  Tensor y(std::move(out_shape), std::move(out));
  if (track) {
    std::vector<ImplPtr> ins;
    for (const Tensor& p : parts) ins.push_back(p.impl());
    ImplPtr yi = y.impl();
    active_tape()->record([ins, yi, offsets, outer, total, inner, axis] {
      if (yi->grad.empty()) return;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        if (!ins[k]->requires_grad) continue;
        auto& g = grad_of(ins[k]);
        const std::size_t span = ins[k]->shape[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = yi->grad.data() + o * total * inner + offsets[k] * inner;
          double* dst = g.data() + o * span;
          for (std::size_t j = 0; j < span; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return finish(std::move(y), track, "concat");
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank() || start + length > x.dim(axis)) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range on axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t full = x.dim(axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<double> out(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().begin() + (o * full + start) * inner, length * inner,
                out.begin() + o * length * inner);
  }
  const bool track = tracking({&x});
  Tensor y(std::move(out_shape), std::move(out));
  if (track) {
    ImplPtr xi = x.impl(), yi = y.impl();
    active_tape()->record([xi, yi, outer, full, start, length, inner] {
      if (yi->grad.empty()) return;
      auto& g = grad_of(xi);
      for (std::size_t o = 0; o < outer; ++o) {
        const double* src = yi->grad.data() + o * length * inner;
        double* dst = g.data() + (o * full + start) * inner;
        for (std::size_t j = 0; j < length * inner; ++j) dst[j] += src[j];
      }
    });
  }
  return finish(std::move(y), track, "slice");
}

Tensor upsample_nearest2x(const Tensor& x) {
  require_rank(x, 4, "upsample_nearest2x", "input");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<double> out(planes * 4 * h * w);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j)
        out[(p * 2 * h + i) * 2 * w + j] = x.data()[(p * h + i / 2) * w + j / 2];
  const bool track = tracking({&x});
  Tensor y(Shape{x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out));
  if (track) {
    ImplPtr xi = x.impl(), yi = y.impl();
    active_tape()->record([xi, yi, planes, h, w] {
      if (yi->grad.empty()) return;
      auto& g = grad_of(xi);
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < 2 * h; ++i)
          for (std::size_t j = 0; j < 2 * w; ++j)
            g[(p * h + i / 2) * w + j / 2] += yi->grad[(p * 2 * h + i) * 2 * w + j];
    });
  }
  return finish(std::move(y), track, "upsample_nearest2x");
}

Tensor avg_pool2x(const Tensor& x) {
  require_rank(x, 4, "avg_pool2x", "input");
  if (x.dim(2) % 2 || x.dim(3) % 2) {
    throw ShapeError("avg_pool2x: spatial axes 2,3 must be even, got " + shape_str(x.shape()));
  }
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2) / 2, w = x.dim(3) / 2;
  std::vector<double> out(planes * h * w, 0.0);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j)
        out[(p * h + i / 2) * w + j / 2] += 0.25 * x.data()[(p * 2 * h + i) * 2 * w + j];
  const bool track = tracking({&x});
  Tensor y(Shape{x.dim(0), x.dim(1), h, w}, std::move(out));
  if (track) {
    ImplPtr xi = x.impl(), yi = y.impl();
    active_tape()->record([xi, yi, planes, h, w] {
      if (yi->grad.empty()) return;
      auto& g = grad_of(xi);
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < 2 * h; ++i)
          for (std::size_t j = 0; j < 2 * w; ++j)
            g[(p * 2 * h + i) * 2 * w + j] += 0.25 * yi->grad[(p * h + i / 2) * w + j / 2];
    });
  }
  return finish(std::move(y), track, "avg_pool2x");
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(w, 2, "linear", "weight");
  if (x.rank() < 1 || x.dim(x.rank() - 1) != w.dim(0)) {
    throw ShapeError("linear: input last axis of " + shape_str(x.shape()) +
                     " does not match weight axis 0 of " + shape_str(w.shape()));
  }
  const std::size_t in = w.dim(0), outd = w.dim(1), rows = x.numel() / in;
  if (b.defined() && (b.rank() != 1 || b.dim(0) != outd)) {
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " must be (" + std::to_string(outd) + ")");
  }
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  std::vector<double> out(rows * outd);
  MapMat ym(out.data(), rows, outd);
  ym.noalias() = CMapMat(x.data().data(), rows, in) * CMapMat(w.data().data(), in, outd);
  if (b.defined()) ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data().data(), outd);
  const bool track = tracking({&x, &w, &b});
  Tensor y(std::move(out_shape), std::move(out));
  if (track) {
    ImplPtr xi = x.impl(), wi = w.impl(), yi = y.impl();
    ImplPtr bi = b.defined() ? b.impl() : nullptr;
    active_tape()->record([xi, wi, bi, yi, rows, in, outd] {
      if (yi->grad.empty()) return;
      CMapMat gy(yi->grad.data(), rows, outd);
      if (xi->requires_grad) {
        MapMat(grad_of(xi).data(), rows, in).noalias() += gy * CMapMat(wi->data.data(), in, outd).transpose();
      }
      if (wi->requires_grad) {
        MapMat(grad_of(wi).data(), in, outd).noalias() += CMapMat(xi->data.data(), rows, in).transpose() * gy;
      }
      if (bi && bi->requires_grad) {
        // Plain loops: Eigen's vectorized reductions peel by address, so their rounding
        // would depend on where the buffer happens to be allocated.
        auto& gb = grad_of(bi);
        const double* g = yi->grad.data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t o = 0; o < outd; ++o) gb[o] += g[r * outd + o];
      }
    });
  }
  return finish(std::move(y), track, "linear");
}

namespace {

struct Conv2dGeom {
  std::size_t n, cin, h, w, cout, k, stride, pad, ho, wo;
  std::size_t col_rows() const { return cin * k * k; }
  std::size_t col_cols() const { return n * ho * wo; }
};

void im2col2d(const Conv2dGeom& g, const double* x, double* col) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = col + ((ci * g.k + ky) * g.k + kx) * g.col_cols();
        for (std::size_t ni = 0; ni < g.n; ++ni) {
          const double* src = x + (ni * g.cin + ci) * g.h * g.w;
          double* dst = row + ni * plane;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                  ix < static_cast<std::ptrdiff_t>(g.w);
              dst[oy * g.wo + ox] = inside ? src[iy * g.w + ix] : 0.0;
            }
          }
        }
      }
}

void col2im2d(const Conv2dGeom& g, const double* col, double* gx) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((ci * g.k + ky) * g.k + kx) * g.col_cols();
        for (std::size_t ni = 0; ni < g.n; ++ni) {
          double* dst = gx + (ni * g.cin + ci) * g.h * g.w;
          const double* src = row + ni * plane;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
              dst[iy * g.w + ix] += src[oy * g.wo + ox];
            }
          }
        }
      }
}

// out (Cout, N*plane) -> (N, Cout, plane) and back.
void channel_major_to_batch(const double* src, double* dst, std::size_t n, std::size_t c,
                            std::size_t plane) {
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ni = 0; ni < n; ++ni)
      std::copy_n(src + ci * n * plane + ni * plane, plane, dst + (ni * c + ci) * plane);
}

void batch_to_channel_major(const double* src, double* dst, std::size_t n, std::size_t c,
                            std::size_t plane) {
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci)
      std::copy_n(src + (ni * c + ci) * plane, plane, dst + ci * n * plane + ni * plane);
}

// Shared GEMM core for conv1d/conv2d once the input is unfolded into columns.
Tensor conv_from_columns(const Tensor& x, const Tensor& w, const Tensor& b, Shape out_shape,
                         std::shared_ptr<std::vector<double>> col, std::size_t col_rows,
                         std::size_t n, std::size_t plane,
                         std::function<void(const double*, double*)> col2im, const char* name) {
  const std::size_t cout = w.dim(0);
  std::vector<double> om(cout * n * plane);
  MapMat(om.data(), cout, n * plane).noalias() =
      CMapMat(w.data().data(), cout, col_rows) * CMapMat(col->data(), col_rows, n * plane);
  std::vector<double> out(om.size());
  channel_major_to_batch(om.data(), out.data(), n, cout, plane);
  if (b.defined()) {
    for (std::size_t ni = 0; ni < n; ++ni)
      for (std::size_t co = 0; co < cout; ++co) {
        double* p = out.data() + (ni * cout + co) * plane;
        const double bv = b.data()[co];
        for (std::size_t j = 0; j < plane; ++j) p[j] += bv;
      }
  }
  const bool track = tracking({&x, &w, &b});
  Tensor y(std::move(out_shape), std::move(out));
  if (track) {
    ImplPtr xi = x.impl(), wi = w.impl(), yi = y.impl();
    ImplPtr bi = b.defined() ? b.impl() : nullptr;
    active_tape()->record([xi, wi, bi, yi, col, col_rows, n, plane, cout, col2im] {
      if (yi->grad.empty()) return;
      std::vector<double> gm(cout * n * plane);
      batch_to_channel_major(yi->grad.data(), gm.data(), n, cout, plane);
      CMapMat gmm(gm.data(), cout, n * plane);
      if (wi->requires_grad) {
        MapMat(grad_of(wi).data(), cout, col_rows).noalias() +=
            gmm * CMapMat(col->data(), col_rows, n * plane).transpose();
      }
      if (bi && bi->requires_grad) {
        auto& gb = grad_of(bi);
        for (std::size_t co = 0; co < cout; ++co) {
          double acc = 0.0;
          for (std::size_t i = co * n * plane; i < (co + 1) * n * plane; ++i) acc += gm[i];
          gb[co] += acc;
        }
      }
      if (xi->requires_grad) {
        std::vector<double> gcol(col_rows * n * plane);
        MapMat(gcol.data(), col_rows, n * plane).noalias() =
            CMapMat(wi->data.data(), cout, col_rows).transpose() * gmm;
        col2im(gcol.data(), grad_of(xi).data());
      }
    });
  }
  return finish(std::move(y), track, name);
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t padding) {
  require_rank(x, 4, "conv2d", "input");
  require_rank(w, 4, "conv2d", "weight");
  if (w.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: weight axis 1 (c_in=" + std::to_string(w.dim(1)) +
                     ") does not match input axis 1 (" + std::to_string(x.dim(1)) + ")");
  }
  if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d: weight axes 2,3 must be equal (square kernel)");
  if (w.dim(2) % 2 == 0) throw ValueError("conv2d: kernel size must be odd");
  if (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(0))) {
    throw ShapeError("conv2d: bias axis 0 must equal weight axis 0 (c_out)");
  }
  if (stride == 0) throw ValueError("conv2d: stride must be positive");
  Conv2dGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, padding, 0, 0};
  if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) {
    throw ShapeError("conv2d: spatial axes 2,3 of " + shape_str(x.shape()) + " smaller than kernel");
  }
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  auto col = std::make_shared<std::vector<double>>(g.col_rows() * g.col_cols());
  im2col2d(g, x.data().data(), col->data());
  return conv_from_columns(
      x, w, b, Shape{g.n, g.cout, g.ho, g.wo}, col, g.col_rows(), g.n, g.ho * g.wo,
      [g](const double* gcol, double* gx) { col2im2d(g, gcol, gx); }, "conv2d");
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t padding) {
  require_rank(x, 3, "conv1d", "input");
  require_rank(w, 3, "conv1d", "weight");
  if (w.dim(1) != x.dim(1)) {
    throw ShapeError("conv1d: weight axis 1 (c_in=" + std::to_string(w.dim(1)) +
                     ") does not match input axis 1 (" + std::to_string(x.dim(1)) + ")");
  }
  if (w.dim(2) % 2 == 0) throw ValueError("conv1d: kernel size must be odd");
  if (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(0))) {
    throw ShapeError("conv1d: bias axis 0 must equal weight axis 0 (c_out)");
  }
  const std::size_t n = x.dim(0), cin = x.dim(1), len = x.dim(2), k = w.dim(2);
  if (len + 2 * padding < k) throw ShapeError("conv1d: axis 2 shorter than kernel");
  const std::size_t lo = len + 2 * padding - k + 1;
  const std::size_t rows = cin * k;
  auto col = std::make_shared<std::vector<double>>(rows * n * lo);
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t kk = 0; kk < k; ++kk) {
      double* row = col->data() + (ci * k + kk) * n * lo;
      for (std::size_t ni = 0; ni < n; ++ni) {
        const double* src = x.data().data() + (ni * cin + ci) * len;
        for (std::size_t o = 0; o < lo; ++o) {
          const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(o + kk) - static_cast<std::ptrdiff_t>(padding);
          row[ni * lo + o] = (i >= 0 && i < static_cast<std::ptrdiff_t>(len)) ? src[i] : 0.0;
        }
      }
    }
  auto col2im = [n, cin, len, k, lo, padding](const double* gcol, double* gx) {
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double* row = gcol + (ci * k + kk) * n * lo;
        for (std::size_t ni = 0; ni < n; ++ni) {
          double* dst = gx + (ni * cin + ci) * len;
          for (std::size_t o = 0; o < lo; ++o) {
            const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(o + kk) - static_cast<std::ptrdiff_t>(padding);
            if (i >= 0 && i < static_cast<std::ptrdiff_t>(len)) dst[i] += row[ni * lo + o];
          }
        }
      }
  };
  return conv_from_columns(x, w, b, Shape{n, w.dim(0), lo}, col, rows, n, lo, col2im, "conv1d");
}

namespace {

void check_attention_shapes(const Tensor& q, const Tensor& k) {
  require_rank(q, 3, "attention", "query");
  require_rank(k, 3, "attention", "key");
  if (k.dim(1) == 0) throw ShapeError("attention: key axis 1 (n_k) is empty");
  if (q.dim(2) == 0) throw ShapeError("attention: feature axis 2 (d) is empty");
  if (q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
    throw ShapeError("attention: query " + shape_str(q.shape()) + " and key " + shape_str(k.shape()) +
                     " disagree on axes 0/2");
  }
}

std::vector<double> softmax_weights(const Tensor& q, const Tensor& k) {
  const std::size_t n = q.dim(0), nq = q.dim(1), nk = k.dim(1), d = q.dim(2);
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> p(n * nq * nk);
  for (std::size_t b = 0; b < n; ++b) {
    MapMat pm(p.data() + b * nq * nk, nq, nk);
    pm.noalias() = CMapMat(q.data().data() + b * nq * d, nq, d) *
                   CMapMat(k.data().data() + b * nk * d, nk, d).transpose();
    for (std::size_t i = 0; i < nq; ++i) {
      double* row = p.data() + (b * nq + i) * nk;
      double mx = row[0] * inv;
      for (std::size_t j = 0; j < nk; ++j) mx = std::max(mx, row[j] * inv);
      double z = 0.0;
      for (std::size_t j = 0; j < nk; ++j) {
        row[j] = std::exp(row[j] * inv - mx);
        z += row[j];
      }
      for (std::size_t j = 0; j < nk; ++j) row[j] /= z;
    }
  }
  return p;
}

}  // namespace

Tensor attention_weights(const Tensor& q, const Tensor& k) {
  check_attention_shapes(q, k);
  return Tensor(Shape{q.dim(0), q.dim(1), k.dim(1)}, softmax_weights(q, k));
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  check_attention_shapes(q, k);
  require_rank(v, 3, "attention", "value");
  if (v.dim(0) != k.dim(0) || v.dim(1) != k.dim(1)) {
    throw ShapeError("attention: value " + shape_str(v.shape()) + " and key " + shape_str(k.shape()) +
                     " disagree on axes 0/1");
  }
  const std::size_t n = q.dim(0), nq = q.dim(1), nk = k.dim(1), d = q.dim(2), dv = v.dim(2);
  auto p = std::make_shared<std::vector<double>>(softmax_weights(q, k));
  std::vector<double> out(n * nq * dv);
  for (std::size_t b = 0; b < n; ++b) {
    MapMat(out.data() + b * nq * dv, nq, dv).noalias() =
        CMapMat(p->data() + b * nq * nk, nq, nk) * CMapMat(v.data().data() + b * nk * dv, nk, dv);
  }
  const bool track = tracking({&q, &k, &v});
  Tensor y(Shape{n, nq, dv}, std::move(out));
  if (track) {
    ImplPtr qi = q.impl(), ki = k.impl(), vi = v.impl(), yi = y.impl();
    active_tape()->record([qi, ki, vi, yi, p, n, nq, nk, d, dv] {
      if (yi->grad.empty()) return;
      const double inv = 1.0 / std::sqrt(static_cast<double>(d));
      RowMat dp(nq, nk), ds(nq, nk);
      for (std::size_t b = 0; b < n; ++b) {
        CMapMat pm(p->data() + b * nq * nk, nq, nk);
        CMapMat gy(yi->grad.data() + b * nq * dv, nq, dv);
        CMapMat vm(vi->data.data() + b * nk * dv, nk, dv);
        if (vi->requires_grad) {
          MapMat(grad_of(vi).data() + b * nk * dv, nk, dv).noalias() += pm.transpose() * gy;
        }
        if (!qi->requires_grad && !ki->requires_grad) continue;
        dp.noalias() = gy * vm.transpose();
        for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(nq); ++i) {
          double dot = 0.0;
          for (Eigen::Index j = 0; j < pm.cols(); ++j) dot += pm(i, j) * dp(i, j);
          ds.row(i) = pm.row(i).cwiseProduct((dp.row(i).array() - dot).matrix()) * inv;
        }
        if (qi->requires_grad) {
          MapMat(grad_of(qi).data() + b * nq * d, nq, d).noalias() +=
              ds * CMapMat(ki->data.data() + b * nk * d, nk, d);
        }
        if (ki->requires_grad) {
          MapMat(grad_of(ki).data() + b * nk * d, nk, d).noalias() +=
              ds.transpose() * CMapMat(qi->data.data() + b * nq * d, nq, d);
        }
      }
    });
  }
  return finish(std::move(y), track, "attention");
}

Tensor layer_norm(const Tensor& x, std::size_t axis, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (axis >= x.rank()) throw ShapeError("layer_norm: axis out of range for " + shape_str(x.shape()));
  const std::size_t a = x.dim(axis);
  if (a < 2) throw ShapeError("layer_norm: axis " + std::to_string(axis) + " must have size >= 2");
  for (const Tensor* t : {&gamma, &beta}) {
    if (t->defined() && (t->rank() != 1 || t->dim(0) != a)) {
      throw ShapeError("layer_norm: affine parameter " + shape_str(t->shape()) + " must be (" +
                       std::to_string(a) + ")");
    }
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(outer * inner);
  std::vector<double> out(x.numel());
  const double* xd = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * a * inner + in;
      double mu = 0.0;
      for (std::size_t j = 0; j < a; ++j) mu += xd[base + j * inner];
      mu /= static_cast<double>(a);
      double var = 0.0;
      for (std::size_t j = 0; j < a; ++j) {
        const double dlt = xd[base + j * inner] - mu;
        var += dlt * dlt;
      }
      var /= static_cast<double>(a);
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)[o * inner + in] = is;
      for (std::size_t j = 0; j < a; ++j) {
        const std::size_t idx = base + j * inner;
        const double xh = (xd[idx] - mu) * is;
        (*xhat)[idx] = xh;
        out[idx] = xh * (gamma.defined() ? gamma.data()[j] : 1.0) + (beta.defined() ? beta.data()[j] : 0.0);
      }
    }
  const bool track = tracking({&x, &gamma, &beta});
  Tensor y(x.shape(), std::move(out));
  if (track) {
    ImplPtr xi = x.impl(), yi = y.impl();
    ImplPtr gi = gamma.defined() ? gamma.impl() : nullptr;
    ImplPtr bi = beta.defined() ? beta.impl() : nullptr;
    active_tape()->record([xi, gi, bi, yi, xhat, inv_std, outer, inner, a] {
      if (yi->grad.empty()) return;
      const double* gy = yi->grad.data();
      if (gi && gi->requires_grad) {
        auto& gg = grad_of(gi);
        for (std::size_t idx = 0; idx < xhat->size(); ++idx) gg[(idx / inner) % a] += gy[idx] * (*xhat)[idx];
      }
      if (bi && bi->requires_grad) {
        auto& gb = grad_of(bi);
        for (std::size_t idx = 0; idx < xhat->size(); ++idx) gb[(idx / inner) % a] += gy[idx];
      }
      if (!xi->requires_grad) return;
      auto& gx = grad_of(xi);
      const double inv_a = 1.0 / static_cast<double>(a);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * a * inner + in;
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < a; ++j) {
            const std::size_t idx = base + j * inner;
            const double dxh = gy[idx] * (gi ? gi->data[j] : 1.0);
            m1 += dxh;
            m2 += dxh * (*xhat)[idx];
          }
          m1 *= inv_a;
          m2 *= inv_a;
          const double is = (*inv_std)[o * inner + in];
          for (std::size_t j = 0; j < a; ++j) {
            const std::size_t idx = base + j * inner;
            const double dxh = gy[idx] * (gi ? gi->data[j] : 1.0);
            gx[idx] += is * (dxh - m1 - (*xhat)[idx] * m2);
          }
        }
    });
  }
  return finish(std::move(y), track, "layer_norm");
}

}  // namespace dod
