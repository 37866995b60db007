#pragma once

// Differentiable tensor primitives. Every op computes its forward value
// eagerly and, when a tape is active and some input requires a gradient,
// records an adjoint that accumulates into the inputs' grad buffers.
//
// Broadcasting is limited to the second operand of binary ops, which may be
// a scalar (one element) or match the trailing dimensions of the first.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>


#include "styemp/error.hpp"
#include "styemp/tensor.hpp"

namespace styemp {

namespace detail {

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (!active_tape<T>()) return false;
  for (const Tensor<T>* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <typename T>
bool tracking_all(std::span<const Tensor<T>> inputs) {
  if (!active_tape<T>()) return false;
  for (const Tensor<T>& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

template <typename T, typename F>
void record(const Tensor<T>& out, F&& adjoint) {
  active_tape<T>()->record(out.impl(), std::forward<F>(adjoint));
}

// Gradient buffer of an input, or null if it does not want one.
template <typename T>
std::vector<T>* sink(const std::shared_ptr<TensorImpl<T>>& p) {
  return p->requires_grad ? &p->ensure_grad() : nullptr;
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
std::size_t broadcast_extent(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  const std::size_t bn = b.numel();
  if (bn == a.numel() && a.shape() == b.shape()) return bn;
  if (bn == 1) return 1;
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() <= as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin())) return bn;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(bs) + " onto " + shape_string(as));
}

template <typename T, typename F, typename G>
Tensor<T> unary(const Tensor<T>& x, F&& forward, G&& derivative) {
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = forward(xs[i]);
  const bool track = tracking<T>({&x});
  Tensor<T> result(x.shape(), std::move(out), track);
  if (track) {
    record(result, [xi = x.impl(), ri = result.impl(), derivative] {
      auto* gx = sink(xi);
      if (!gx) return;
      for (std::size_t i = 0; i < ri->data.size(); ++i)
        (*gx)[i] += ri->grad[i] * derivative(xi->data[i], ri->data[i]);
    });
  }
  return result;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t bn = detail::broadcast_extent(a, b, "add");
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + bd[i % bn];
  const bool track = detail::tracking<T>({&a, &b});
  Tensor<T> result(a.shape(), std::move(out), track);
  if (track) {
    detail::record(result, [ai = a.impl(), bi = b.impl(), ri = result.impl(), bn] {
      const auto& go = ri->grad;
      if (auto* ga = detail::sink(ai))
        for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
      if (auto* gb = detail::sink(bi))
        for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i % bn] += go[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t bn = detail::broadcast_extent(a, b, "sub");
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] - bd[i % bn];
  const bool track = detail::tracking<T>({&a, &b});
  Tensor<T> result(a.shape(), std::move(out), track);
  if (track) {
    detail::record(result, [ai = a.impl(), bi = b.impl(), ri = result.impl(), bn] {
      const auto& go = ri->grad;
      if (auto* ga = detail::sink(ai))
        for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
      if (auto* gb = detail::sink(bi))
        for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i % bn] -= go[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t bn = detail::broadcast_extent(a, b, "mul");
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * bd[i % bn];
  const bool track = detail::tracking<T>({&a, &b});
  Tensor<T> result(a.shape(), std::move(out), track);
  if (track) {
    detail::record(result, [ai = a.impl(), bi = b.impl(), ri = result.impl(), bn] {
      const auto& go = ri->grad;
      if (auto* ga = detail::sink(ai))
        for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * bi->data[i % bn];
      if (auto* gb = detail::sink(bi))
        for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i % bn] += go[i] * ai->data[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t bn = detail::broadcast_extent(a, b, "div");
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] / bd[i % bn];
  const bool track = detail::tracking<T>({&a, &b});
  Tensor<T> result(a.shape(), std::move(out), track);
  if (track) {
    detail::record(result, [ai = a.impl(), bi = b.impl(), ri = result.impl(), bn] {
      const auto& go = ri->grad;
      if (auto* ga = detail::sink(ai))
        for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] / bi->data[i % bn];
      if (auto* gb = detail::sink(bi))
        for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i % bn] -= go[i] * ri->data[i] / bi->data[i % bn];
    });
  }
  return result;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary(
      x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  return detail::unary(
      x, [offset](T v) { return v + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, T(-1));
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result(Shape{}, std::vector<T>{total}, track);
  if (track) {
    detail::record(result, [xi = x.impl(), ri = result.impl()] {
      if (auto* gx = detail::sink(xi))
        for (auto& g : *gx) g += ri->grad[0];
    });
  }
  return result;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Sum along `axis`, removing it from the shape.
template <typename T>
Tensor<T> sum_over(const Tensor<T>& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> out(s.outer * s.inner, T(0));
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += xd[(o * s.len + l) * s.inner + i];
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result(std::move(shape), std::move(out), track);
  if (track) {
    detail::record(result, [xi = x.impl(), ri = result.impl(), s] {
      auto* gx = detail::sink(xi);
      if (!gx) return;
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t l = 0; l < s.len; ++l)
          for (std::size_t i = 0; i < s.inner; ++i)
            (*gx)[(o * s.len + l) * s.inner + i] += ri->grad[o * s.inner + i];
    });
  }
  return result;
}

/// Maximum along `axis`, removing it. The gradient goes to the first maximal
/// entry of each slice.
template <typename T>
Tensor<T> max_over(const Tensor<T>& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis);
  if (s.len == 0) throw ShapeError("max_over an empty axis");
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> out(s.outer * s.inner);
  std::vector<std::size_t> arg(out.size());
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = o * s.len * s.inner + i;
      for (std::size_t l = 1; l < s.len; ++l) {
        const std::size_t k = (o * s.len + l) * s.inner + i;
        if (xd[k] > xd[best]) best = k;
      }
      out[o * s.inner + i] = xd[best];
      arg[o * s.inner + i] = best;
    }
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result(std::move(shape), std::move(out), track);
  if (track) {
    detail::record(result, [xi = x.impl(), ri = result.impl(), arg = std::move(arg)] {
      if (auto* gx = detail::sink(xi))
        for (std::size_t j = 0; j < arg.size(); ++j) (*gx)[arg[j]] += ri->grad[j];
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Structural ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape " + shape_string(x.shape()) + " -> " + shape_string(shape));
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()), track);
  if (track) {
    detail::record(result, [xi = x.impl(), ri = result.impl()] {
      if (auto* gx = detail::sink(xi))
        for (std::size_t i = 0; i < ri->grad.size(); ++i) (*gx)[i] += ri->grad[i];
    });
  }
  return result;
}

/// Concatenate along `axis`; all other extents must agree.
template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size())
    throw ShapeError("concat axis " + std::to_string(axis) + " out of range for " + shape_string(first));
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& ps = p.shape();
    bool ok = ps.size() == first.size();
    for (std::size_t d = 0; ok && d < ps.size(); ++d)
      if (d != axis && ps[d] != first[d]) ok = false;
    if (!ok) throw ShapeError("concat: " + shape_string(ps) + " incompatible with " + shape_string(first));
    shape[axis] += ps[axis];
  }
  const auto s = detail::split_axis(shape, axis);
  std::vector<T> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t plen = p.shape()[axis];
    const auto pd = p.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * plen * s.inner), plen * s.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * s.len + offset) * s.inner));
    offset += plen;
  }
  const bool track = detail::tracking_all<T>(parts);
  Tensor<T> result(std::move(shape), std::move(out), track);
  if (track) {
    std::vector<std::shared_ptr<TensorImpl<T>>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    detail::record(result, [impls = std::move(impls), offsets = std::move(offsets), ri = result.impl(), s, axis] {
      for (std::size_t k = 0; k < impls.size(); ++k) {
        auto* gp = detail::sink(impls[k]);
        if (!gp) continue;
        const std::size_t plen = impls[k]->shape[axis];
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t j = 0; j < plen * s.inner; ++j)
            (*gp)[o * plen * s.inner + j] += ri->grad[(o * s.len + offsets[k]) * s.inner + j];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, std::size_t axis) {
  std::vector<Tensor<T>> v(parts);
  return concat<T>(std::span<const Tensor<T>>(v), axis);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  return concat<T>(std::span<const Tensor<T>>(parts), axis);
}

/// Half-open slice [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto s = detail::split_axis(x.shape(), axis);
  if (begin > end || end > s.len)
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for axis " +
                     std::to_string(axis) + " of " + shape_string(x.shape()));
  Shape shape = x.shape();
  shape[axis] = end - begin;
  const std::size_t n = end - begin;
  std::vector<T> out(s.outer * n * s.inner);
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((o * s.len + begin) * s.inner), n * s.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * n * s.inner));
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result(std::move(shape), std::move(out), track);
  if (track) {
    detail::record(result, [xi = x.impl(), ri = result.impl(), s, begin, n] {
      auto* gx = detail::sink(xi);
      if (!gx) return;
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < n * s.inner; ++j)
          (*gx)[(o * s.len + begin) * s.inner + j] += ri->grad[o * n * s.inner + j];
    });
  }
  return result;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose expects a matrix, got " + shape_string(x.shape()));
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  std::vector<T> out(r * c);
  const auto xd = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xd[i * c + j];
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result(Shape{c, r}, std::move(out), track);
  if (track) {
    detail::record(result, [xi = x.impl(), ri = result.impl(), r, c] {
      if (auto* gx = detail::sink(xi))
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += ri->grad[j * r + i];
    });
  }
  return result;
}

/// Rows of `table` [n, d] selected by `ids` -> [ids.size(), d].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows expects a matrix table, got " + shape_string(table.shape()));
  const std::size_t rows = table.shape()[0], d = table.shape()[1];
  std::vector<T> out(ids.size() * d);
  const auto td = table.data();
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] < 0 || static_cast<std::size_t>(ids[k]) >= rows)
      throw ContractError("gather_rows: id " + std::to_string(ids[k]) + " outside table of " + std::to_string(rows) +
                          " rows");
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[k] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(k * d));
  }
  const bool track = detail::tracking<T>({&table});
  Tensor<T> result(Shape{ids.size(), d}, std::move(out), track);
  if (track) {
    detail::record(result, [ti = table.impl(), ri = result.impl(), ids = std::vector<int>(ids.begin(), ids.end()), d] {
      if (auto* gt = detail::sink(ti))
        for (std::size_t k = 0; k < ids.size(); ++k)
          for (std::size_t j = 0; j < d; ++j) (*gt)[ids[k] * d + j] += ri->grad[k * d + j];
    });
  }
  return result;
}

/// Element `targets[i]` of row i of `x` [n, c] -> [n].
template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::span<const int> targets) {
  if (x.rank() != 2 || x.shape()[0] != targets.size())
    throw ShapeError("pick: " + shape_string(x.shape()) + " with " + std::to_string(targets.size()) + " targets");
  const std::size_t c = x.shape()[1];
  std::vector<T> out(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c)
      throw ContractError("pick: target " + std::to_string(targets[i]) + " out of range");
    out[i] = x.data()[i * c + targets[i]];
  }
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result(Shape{targets.size()}, std::move(out), track);
  if (track) {
    detail::record(result, [xi = x.impl(), ri = result.impl(), t = std::vector<int>(targets.begin(), targets.end()), c] {
      if (auto* gx = detail::sink(xi))
        for (std::size_t i = 0; i < t.size(); ++i) (*gx)[i * c + t[i]] += ri->grad[i];
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Normalizers

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis);
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, xd[base + l * s.inner]);
      T z = T(0);
      for (std::size_t l = 0; l < s.len; ++l) {
        const T e = std::exp(xd[base + l * s.inner] - mx);
        out[base + l * s.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= z;
    }
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result(x.shape(), std::move(out), track);
  if (track) {
    detail::record(result, [xi = x.impl(), ri = result.impl(), s] {
      auto* gx = detail::sink(xi);
      if (!gx) return;
      const auto& y = ri->data;
      const auto& go = ri->grad;
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.len * s.inner + i;
          T dot = T(0);
          for (std::size_t l = 0; l < s.len; ++l) dot += go[base + l * s.inner] * y[base + l * s.inner];
          for (std::size_t l = 0; l < s.len; ++l) {
            const std::size_t k = base + l * s.inner;
            (*gx)[k] += y[k] * (go[k] - dot);
          }
        }
    });
  }
  return result;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis);
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, xd[base + l * s.inner]);
      T z = T(0);
      for (std::size_t l = 0; l < s.len; ++l) z += std::exp(xd[base + l * s.inner] - mx);
      const T lse = mx + std::log(z);
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] = xd[base + l * s.inner] - lse;
    }
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result(x.shape(), std::move(out), track);
  if (track) {
    detail::record(result, [xi = x.impl(), ri = result.impl(), s] {
      auto* gx = detail::sink(xi);
      if (!gx) return;
      const auto& y = ri->data;
      const auto& go = ri->grad;
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.len * s.inner + i;
          T total = T(0);
          for (std::size_t l = 0; l < s.len; ++l) total += go[base + l * s.inner];
          for (std::size_t l = 0; l < s.len; ++l) {
            const std::size_t k = base + l * s.inner;
            (*gx)[k] += go[k] - std::exp(y[k]) * total;
          }
        }
    });
  }
  return result;
}

/// Normalizes each slice over the last axis, then applies gain and bias [d].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  if (x.rank() == 0) throw ShapeError("layer_norm of a scalar");
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layer_norm: gain/bias " + shape_string(gain.shape()) + " for input " + shape_string(x.shape()));
  const std::size_t rows = d ? x.numel() / d : 0;
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  std::vector<T> out(xd.size());
  std::vector<T> xhat(xd.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += xd[r * d + j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T c = xd[r * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<T>(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xd[r * d + j] - mu) * inv_std[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  const bool track = detail::tracking<T>({&x, &gain, &bias});
  Tensor<T> result(x.shape(), std::move(out), track);
  if (track) {
    detail::record(result, [xi = x.impl(), gi = gain.impl(), bi = bias.impl(), ri = result.impl(),
                            xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d] {
      const auto& go = ri->grad;
      auto* gx = detail::sink(xi);
      auto* gg = detail::sink(gi);
      auto* gb = detail::sink(bi);
      for (std::size_t r = 0; r < rows; ++r) {
        T mean_dh = T(0), mean_dh_h = T(0);
        for (std::size_t j = 0; j < d; ++j) {
          const std::size_t k = r * d + j;
          const T dh = go[k] * gi->data[j];
          mean_dh += dh;
          mean_dh_h += dh * xhat[k];
          if (gg) (*gg)[j] += go[k] * xhat[k];
          if (gb) (*gb)[j] += go[k];
        }
        if (!gx) continue;
        mean_dh /= static_cast<T>(d);
        mean_dh_h /= static_cast<T>(d);
        for (std::size_t j = 0; j < d; ++j) {
          const std::size_t k = r * d + j;
          const T dh = go[k] * gi->data[j];
          (*gx)[k] += inv_std[r] * (dh - mean_dh - xhat[k] * mean_dh_h);
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

// C[m,n] += A[m,k] * B[k,n], row-major. Each output accumulates over k in
// index order, so results do not depend on buffer alignment or vector width.
template <typename T>
void gemm_acc(T* __restrict c, const T* __restrict a, const T* __restrict b, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
std::vector<T> transposed(const std::vector<T>& x, std::size_t rows, std::size_t cols) {
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = x[r * cols + c];
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: inner dimensions of " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                     " do not agree");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<T> out(m * n, T(0));
  detail::gemm_acc(out.data(), a.data().data(), b.data().data(), m, k, n);
  const bool track = detail::tracking<T>({&a, &b});
  Tensor<T> result(Shape{m, n}, std::move(out), track);
  if (track) {
    detail::record(result, [ai = a.impl(), bi = b.impl(), ri = result.impl(), m, k, n] {
      if (auto* ga = detail::sink(ai)) {
        // dA = dC * B^T
        const auto bt = detail::transposed(bi->data, k, n);
        detail::gemm_acc(ga->data(), ri->grad.data(), bt.data(), m, n, k);
      }
      if (auto* gb = detail::sink(bi)) {
        // dB = A^T * dC
        const auto at = detail::transposed(ai->data, m, k);
        detail::gemm_acc(gb->data(), at.data(), ri->grad.data(), k, m, n);
      }
    });
  }
  return result;
}

}  // namespace styemp
