#pragma once

// The closed set of differentiable primitives. Everything else in the model is
// a composition of these; a new primitive needs its own gradient check.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "pclm/tensor.hpp"

namespace pclm {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

struct AxisSplit {
  std::size_t outer;
  std::size_t n;
  std::size_t inner;
};

inline AxisSplit split_axis(const char* name, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(name) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline Graph* recorder(std::span<const Tensor> inputs) {
  Graph* g = active_graph();
  if (!g) return nullptr;
  for (const auto& t : inputs) {
    if (t.requires_grad()) return g;
  }
  return nullptr;
}

template <class Backward>
Tensor finish(const char* name, Shape shape, std::vector<double> data,
              std::vector<Tensor> inputs, Backward make_backward) {
  if (!all_finite(data)) {
    throw NumericError(std::string("primitive ") + name +
                       ": non-finite value in output of shape " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::move(data));
  if (Graph* g = recorder(inputs)) {
    out.set_requires_grad(true);
    auto fn = make_backward(out);
    g->record(GraphNode{name, std::move(inputs), out, std::move(fn)});
  }
  return out;
}

inline void require_same_or_suffix(const char* name, const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!ok) {
    throw ShapeError(std::string(name) + ": shapes " + shape_str(sa) + " and " +
                     shape_str(sb) + " do not conform");
  }
}

}  // namespace detail

// [m,k] x [k,n] -> [m,n], or batched [B,m,k] x [B,k,n] -> [B,m,n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const bool plain = sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0];
  const bool batched =
      sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[2] == sb[1];
  if (!plain && !batched) {
    throw ShapeError("matmul: shapes " + shape_str(sa) + " and " + shape_str(sb) +
                     " do not conform");
  }
  const std::size_t batch = plain ? 1 : sa[0];
  const std::size_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  std::vector<double> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    detail::ConstMap A(a.data().data() + i * m * k, m, k);
    detail::ConstMap B(b.data().data() + i * k * n, k, n);
    detail::MutMap C(out.data() + i * m * n, m, n);
    C.noalias() = A * B;
  }
  Shape shape = plain ? Shape{m, n} : Shape{batch, m, n};
  return detail::finish("matmul", std::move(shape), std::move(out), {a, b},
                        [a, b, batch, m, k, n](const Tensor& o) {
    return [a, b, o, batch, m, k, n]() mutable {
      for (std::size_t i = 0; i < batch; ++i) {
        detail::ConstMap G(o.grad().data() + i * m * n, m, n);
        if (a.requires_grad()) {
          detail::ConstMap B(b.data().data() + i * k * n, k, n);
          detail::MutMap GA(a.mutable_grad().data() + i * m * k, m, k);
          GA.noalias() += G * B.transpose();
        }
        if (b.requires_grad()) {
          detail::ConstMap A(a.data().data() + i * m * k, m, k);
          detail::MutMap GB(b.mutable_grad().data() + i * k * n, k, n);
          GB.noalias() += A.transpose() * G;
        }
      }
    };
  });
}

namespace detail {

// Elementwise binary op where b's shape equals a's or is a trailing suffix of
// it (b repeats over the leading axes).
template <class Fwd, class DA, class DB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DA da,
              DB db) {
  require_same_or_suffix(name, a, b);
  const std::size_t n = a.numel();
  const std::size_t nb = b.numel();
  std::vector<double> out(n);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i % nb]);
  return finish(name, a.shape(), std::move(out), {a, b},
                [a, b, n, nb, da, db](const Tensor& o) {
    return [a, b, o, n, nb, da, db]() mutable {
      auto g = o.grad();
      auto av = a.data();
      auto bv = b.data();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * da(av[i], bv[i % nb]);
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i] * db(av[i], bv[i % nb]);
      }
    };
  });
}

template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& a, Fwd fwd, Deriv deriv) {
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  auto av = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
  return finish(name, a.shape(), std::move(out), {a}, [a, n, deriv](const Tensor& o) {
    return [a, o, n, deriv]() mutable {
      auto g = o.grad();
      auto av = a.data();
      auto ov = o.data();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * deriv(av[i], ov[i]);
    };
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Tensor subtract(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "subtract", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Tensor multiply(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "multiply", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary(
      "scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      "sigmoid", a, [](double x) { return sigmoid_scalar(x); },
      [](double, double y) { return y * (1.0 - y); });
}

// Exact (erf) form.
inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return detail::unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) +
               x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  }
  return detail::finish("reshape", std::move(shape), a.values(), {a}, [a](const Tensor& o) {
    return [a, o]() mutable {
      auto g = o.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    };
  });
}

// Swaps the last two axes of a rank-2 or rank-3 tensor.
inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2 && a.rank() != 3) {
    throw ShapeError("transpose: expects rank 2 or 3, got " + shape_str(a.shape()));
  }
  const std::size_t batch = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t r = a.dim(a.rank() - 2), c = a.dim(a.rank() - 1);
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = av[b * r * c + i * c + j];
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  return detail::finish("transpose", std::move(shape), std::move(out), {a},
                        [a, batch, r, c](const Tensor& o) {
    return [a, o, batch, r, c]() mutable {
      auto g = o.grad();
      auto ga = a.mutable_grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            ga[b * r * c + i * c + j] += g[b * r * c + j * r + i];
    };
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) {
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(first));
  }
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw ShapeError("concat: shapes " + shape_str(first) + " and " + shape_str(s) +
                       " do not conform on axis " + std::to_string(axis));
    }
    shape[axis] += s[axis];
  }
  const auto split = detail::split_axis("concat", shape, axis);
  std::vector<double> out(shape_numel(shape));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis);
    auto pv = p.data();
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(pv.begin() + o * len * split.inner, len * split.inner,
                  out.begin() + (o * split.n + offset) * split.inner);
    offsets.push_back(offset);
    offset += len;
  }
  return detail::finish("concat", std::move(shape), std::move(out), parts,
                        [parts, offsets, split, axis](const Tensor& o) {
    return [parts, offsets, split, axis, o]() mutable {
      auto g = o.grad();
      for (std::size_t k = 0; k < parts.size(); ++k) {
        Tensor p = parts[k];
        if (!p.requires_grad()) continue;
        const std::size_t len = p.dim(axis);
        auto gp = p.mutable_grad();
        for (std::size_t q = 0; q < split.outer; ++q)
          for (std::size_t i = 0; i < len * split.inner; ++i)
            gp[q * len * split.inner + i] += g[(q * split.n + offsets[k]) * split.inner + i];
      }
    };
  });
}

inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const auto split = detail::split_axis("slice", a.shape(), axis);
  if (start + length > split.n) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") exceeds axis " +
                     std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  Shape shape = a.shape();
  shape[axis] = length;
  std::vector<double> out(shape_numel(shape));
  auto av = a.data();
  for (std::size_t o = 0; o < split.outer; ++o)
    std::copy_n(av.begin() + (o * split.n + start) * split.inner, length * split.inner,
                out.begin() + o * length * split.inner);
  return detail::finish("slice", std::move(shape), std::move(out), {a},
                        [a, split, start, length](const Tensor& o) {
    return [a, o, split, start, length]() mutable {
      auto g = o.grad();
      auto ga = a.mutable_grad();
      for (std::size_t q = 0; q < split.outer; ++q)
        for (std::size_t i = 0; i < length * split.inner; ++i)
          ga[(q * split.n + start) * split.inner + i] += g[q * length * split.inner + i];
    };
  });
}

// Gathers rows of a [N,d] table. Also serves as a generic row gather.
inline Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> ids) {
  if (table.rank() != 2) {
    throw ShapeError("embedding-lookup: table must be rank 2, got " + shape_str(table.shape()));
  }
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) {
      throw ContractError("embedding-lookup: id " + std::to_string(ids[i]) +
                          " out of range for table of " + std::to_string(rows) + " rows");
    }
    std::copy_n(tv.begin() + ids[i] * d, d, out.begin() + i * d);
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return detail::finish("embedding-lookup", Shape{ids.size(), d}, std::move(out), {table},
                        [table, idx, d](const Tensor& o) {
    return [table, o, idx, d]() mutable {
      auto g = o.grad();
      auto gt = table.mutable_grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[idx[i] * d + j] += g[i * d + j];
    };
  });
}

inline Tensor softmax(const Tensor& a, std::size_t axis) {
  const auto s = detail::split_axis("softmax", a.shape(), axis);
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.inner; ++j) {
      const std::size_t base = o * s.n * s.inner + j;
      double mx = -INFINITY;
      for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, av[base + i * s.inner]);
      double total = 0.0;
      for (std::size_t i = 0; i < s.n; ++i) {
        const double e = std::exp(av[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] /= total;
    }
  return detail::finish("softmax", a.shape(), std::move(out), {a}, [a, s](const Tensor& o) {
    return [a, o, s]() mutable {
      auto g = o.grad();
      auto y = o.data();
      auto ga = a.mutable_grad();
      for (std::size_t q = 0; q < s.outer; ++q)
        for (std::size_t j = 0; j < s.inner; ++j) {
          const std::size_t base = q * s.n * s.inner + j;
          double dot = 0.0;
          for (std::size_t i = 0; i < s.n; ++i) dot += g[base + i * s.inner] * y[base + i * s.inner];
          for (std::size_t i = 0; i < s.n; ++i) {
            const std::size_t at = base + i * s.inner;
            ga[at] += y[at] * (g[at] - dot);
          }
        }
    };
  });
}

inline Tensor log_softmax(const Tensor& a, std::size_t axis) {
  const auto s = detail::split_axis("log-softmax", a.shape(), axis);
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.inner; ++j) {
      const std::size_t base = o * s.n * s.inner + j;
      double mx = -INFINITY;
      for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, av[base + i * s.inner]);
      double total = 0.0;
      for (std::size_t i = 0; i < s.n; ++i) total += std::exp(av[base + i * s.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] = av[base + i * s.inner] - lse;
    }
  return detail::finish("log-softmax", a.shape(), std::move(out), {a}, [a, s](const Tensor& o) {
    return [a, o, s]() mutable {
      auto g = o.grad();
      auto y = o.data();
      auto ga = a.mutable_grad();
      for (std::size_t q = 0; q < s.outer; ++q)
        for (std::size_t j = 0; j < s.inner; ++j) {
          const std::size_t base = q * s.n * s.inner + j;
          double total = 0.0;
          for (std::size_t i = 0; i < s.n; ++i) total += g[base + i * s.inner];
          for (std::size_t i = 0; i < s.n; ++i) {
            const std::size_t at = base + i * s.inner;
            ga[at] += g[at] - std::exp(y[at]) * total;
          }
        }
    };
  });
}

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes to zero mean / unit variance along `axis`; no affine terms.
inline Tensor layer_norm(const Tensor& a, std::size_t axis, double eps = kLayerNormEps) {
  const auto s = detail::split_axis("layer-norm", a.shape(), axis);
  std::vector<double> out(a.numel());
  std::vector<double> inv_std(s.outer * s.inner);
  auto av = a.data();
  const double n = static_cast<double>(s.n);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.inner; ++j) {
      const std::size_t base = o * s.n * s.inner + j;
      double mean = 0.0;
      for (std::size_t i = 0; i < s.n; ++i) mean += av[base + i * s.inner];
      mean /= n;
      double var = 0.0;
      for (std::size_t i = 0; i < s.n; ++i) {
        const double c = av[base + i * s.inner] - mean;
        var += c * c;
      }
      var /= n;
      const double r = 1.0 / std::sqrt(var + eps);
      inv_std[o * s.inner + j] = r;
      for (std::size_t i = 0; i < s.n; ++i)
        out[base + i * s.inner] = (av[base + i * s.inner] - mean) * r;
    }
  return detail::finish("layer-norm", a.shape(), std::move(out), {a},
                        [a, s, inv_std = std::move(inv_std)](const Tensor& o) {
    return [a, o, s, inv_std]() mutable {
      auto g = o.grad();
      auto y = o.data();
      auto ga = a.mutable_grad();
      const double n = static_cast<double>(s.n);
      for (std::size_t q = 0; q < s.outer; ++q)
        for (std::size_t j = 0; j < s.inner; ++j) {
          const std::size_t base = q * s.n * s.inner + j;
          double mg = 0.0, mgy = 0.0;
          for (std::size_t i = 0; i < s.n; ++i) {
            mg += g[base + i * s.inner];
            mgy += g[base + i * s.inner] * y[base + i * s.inner];
          }
          mg /= n;
          mgy /= n;
          const double r = inv_std[q * s.inner + j];
          for (std::size_t i = 0; i < s.n; ++i) {
            const std::size_t at = base + i * s.inner;
            ga[at] += r * (g[at] - mg - y[at] * mgy);
          }
        }
    };
  });
}

namespace detail {

inline Tensor reduce(const char* name, const Tensor& a, std::size_t axis, double factor) {
  const auto s = split_axis(name, a.shape(), axis);
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(s.outer * s.inner, 0.0);
  auto av = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.n; ++i)
      for (std::size_t j = 0; j < s.inner; ++j)
        out[o * s.inner + j] += av[(o * s.n + i) * s.inner + j];
  for (double& v : out) v *= factor;
  return finish(name, std::move(shape), std::move(out), {a}, [a, s, factor](const Tensor& o) {
    return [a, o, s, factor]() mutable {
      auto g = o.grad();
      auto ga = a.mutable_grad();
      for (std::size_t q = 0; q < s.outer; ++q)
        for (std::size_t i = 0; i < s.n; ++i)
          for (std::size_t j = 0; j < s.inner; ++j)
            ga[(q * s.n + i) * s.inner + j] += factor * g[q * s.inner + j];
    };
  });
}

}  // namespace detail

// Reductions drop the reduced axis.
inline Tensor sum(const Tensor& a, std::size_t axis) {
  return detail::reduce("sum", a, axis, 1.0);
}

inline Tensor mean(const Tensor& a, std::size_t axis) {
  const std::size_t n = axis < a.rank() ? a.dim(axis) : 1;
  if (n == 0) throw ShapeError("mean: empty axis in " + shape_str(a.shape()));
  return detail::reduce("mean", a, axis, 1.0 / static_cast<double>(n));
}

// scores [B,Tq,Tk] + mask [B,Tk], the mask broadcast over query positions.
inline Tensor mask_add(const Tensor& scores, const Tensor& mask) {
  if (scores.rank() != 3 || mask.rank() != 2 || mask.dim(0) != scores.dim(0) ||
      mask.dim(1) != scores.dim(2)) {
    throw ShapeError("mask-add: shapes " + shape_str(scores.shape()) + " and " +
                     shape_str(mask.shape()) + " do not conform");
  }
  const std::size_t B = scores.dim(0), Tq = scores.dim(1), Tk = scores.dim(2);
  std::vector<double> out(scores.numel());
  auto sv = scores.data();
  auto mv = mask.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t q = 0; q < Tq; ++q)
      for (std::size_t k = 0; k < Tk; ++k)
        out[(b * Tq + q) * Tk + k] = sv[(b * Tq + q) * Tk + k] + mv[b * Tk + k];
  return detail::finish("mask-add", scores.shape(), std::move(out), {scores, mask},
                        [scores, mask, B, Tq, Tk](const Tensor& o) {
    return [scores, mask, o, B, Tq, Tk]() mutable {
      auto g = o.grad();
      if (scores.requires_grad()) {
        auto gs = scores.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
      }
      if (mask.requires_grad()) {
        auto gm = mask.mutable_grad();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t q = 0; q < Tq; ++q)
            for (std::size_t k = 0; k < Tk; ++k) gm[b * Tk + k] += g[(b * Tq + q) * Tk + k];
      }
    };
  });
}

// ---- compositions ----------------------------------------------------------

inline Tensor sum_all(const Tensor& a) { return sum(reshape(a, Shape{a.numel()}), 0); }

// x W + b for x [n,in], W [in,out], b [out].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add(matmul(x, weight), bias);
}

inline Tensor one_minus(const Tensor& a) { return subtract(Tensor(a.shape(), 1.0), a); }

}  // namespace pclm
