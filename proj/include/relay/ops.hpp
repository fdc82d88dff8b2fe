#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "relay/tensor.hpp"

namespace relay {

namespace detail {

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using NodePtr = std::shared_ptr<Node<Scalar>>;

template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, std::vector<Scalar> value, const char* op,
                           std::vector<NodePtr<Scalar>> inputs,
                           std::function<void(Node<Scalar>&)> backward) {
  for (const Scalar v : value) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
  }
  auto node = std::make_shared<Node<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs_grad = false;
  if (grad_enabled) {
    for (const auto& in : inputs) needs_grad = needs_grad || in->requires_grad;
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor<Scalar>::from_node(std::move(node));
}

/// Right-aligned numpy broadcasting of two shapes.
inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t n = std::max(a.size(), b.size());
  Shape out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    const std::size_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("broadcast: incompatible shapes " + to_string(a) + " and " + to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// For each flat index of `out`, the flat index into a tensor of shape `src`
/// broadcast to `out`.
inline std::vector<std::size_t> broadcast_index(const Shape& src, const Shape& out) {
  const std::size_t total = numel(out);
  std::vector<std::size_t> index(total);
  const std::size_t n = out.size();
  const std::size_t offset = n - src.size();
  std::vector<std::size_t> src_stride(n, 0);
  std::size_t stride = 1;
  for (std::size_t i = n; i-- > offset;) {
    const std::size_t d = src[i - offset];
    src_stride[i] = d == 1 ? 0 : stride;
    stride *= d;
  }
  std::vector<std::size_t> counter(n, 0);
  std::size_t src_flat = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    index[flat] = src_flat;
    for (std::size_t i = n; i-- > 0;) {
      ++counter[i];
      src_flat += src_stride[i];
      if (counter[i] < out[i]) break;
      src_flat -= src_stride[i] * counter[i];
      counter[i] = 0;
    }
  }
  return index;
}

inline std::size_t normalize_axis(int axis, std::size_t ndim) {
  const int n = static_cast<int>(ndim);
  const int a = axis < 0 ? axis + n : axis;
  if (a < 0 || a >= n) throw ShapeError("axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(a);
}

template <typename Scalar, typename F, typename GA, typename GB>
Tensor<Scalar> broadcast_binary(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op,
                                F f, GA grad_a, GB grad_b) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  const std::size_t total = numel(out_shape);
  std::shared_ptr<const std::vector<std::size_t>> ia, ib;
  if (a.shape() != out_shape) {
    ia = std::make_shared<const std::vector<std::size_t>>(broadcast_index(a.shape(), out_shape));
  }
  if (b.shape() != out_shape) {
    ib = std::make_shared<const std::vector<std::size_t>>(broadcast_index(b.shape(), out_shape));
  }
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<Scalar> out(total);
  for (std::size_t i = 0; i < total; ++i) {
    out[i] = f(av[ia ? (*ia)[i] : i], bv[ib ? (*ib)[i] : i]);
  }
  return make_result<Scalar>(
      out_shape, std::move(out), op, {a.node(), b.node()},
      [ia, ib, grad_a, grad_b](Node<Scalar>& self) {
        auto& na = *self.inputs[0];
        auto& nb = *self.inputs[1];
        const std::size_t total = self.grad.size();
        if (na.requires_grad) {
          auto ga = na.grad_buffer();
          for (std::size_t i = 0; i < total; ++i) {
            const std::size_t ja = ia ? (*ia)[i] : i;
            const std::size_t jb = ib ? (*ib)[i] : i;
            ga[ja] += grad_a(na.value[ja], nb.value[jb], self.grad[i]);
          }
        }
        if (nb.requires_grad) {
          auto gb = nb.grad_buffer();
          for (std::size_t i = 0; i < total; ++i) {
            const std::size_t ja = ia ? (*ia)[i] : i;
            const std::size_t jb = ib ? (*ib)[i] : i;
            gb[jb] += grad_b(na.value[ja], nb.value[jb], self.grad[i]);
          }
        }
      });
}

template <typename Scalar, typename F, typename G>
Tensor<Scalar> unary(const Tensor<Scalar>& x, const char* op, F f, G dfdx) {
  const auto xv = x.data();
  std::vector<Scalar> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result<Scalar>(x.shape(), std::move(out), op, {x.node()},
                             [dfdx](Node<Scalar>& self) {
                               auto& in = *self.inputs[0];
                               auto g = in.grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 g[i] += self.grad[i] * dfdx(in.value[i], self.value[i]);
                               }
                             });
}

/// out[i] = x[source[i]]; backward scatters.
template <typename Scalar>
Tensor<Scalar> gather_flat(const Tensor<Scalar>& x, std::shared_ptr<const std::vector<std::size_t>> source,
                           Shape out_shape, const char* op) {
  const auto xv = x.data();
  std::vector<Scalar> out(source->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[(*source)[i]];
  return make_result<Scalar>(std::move(out_shape), std::move(out), op, {x.node()},
                             [source](Node<Scalar>& self) {
                               auto g = self.inputs[0]->grad_buffer();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 g[(*source)[i]] += self.grad[i];
                               }
                             });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::broadcast_binary(
      a, b, "add", [](Scalar x, Scalar y) { return x + y; },
      [](Scalar, Scalar, Scalar g) { return g; }, [](Scalar, Scalar, Scalar g) { return g; });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::broadcast_binary(
      a, b, "sub", [](Scalar x, Scalar y) { return x - y; },
      [](Scalar, Scalar, Scalar g) { return g; }, [](Scalar, Scalar, Scalar g) { return -g; });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::broadcast_binary(
      a, b, "mul", [](Scalar x, Scalar y) { return x * y; },
      [](Scalar, Scalar y, Scalar g) { return g * y; },
      [](Scalar x, Scalar, Scalar g) { return g * x; });
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return mul(a, b); }

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar s) {
  return detail::unary(
      x, "scale", [s](Scalar v) { return v * s; }, [s](Scalar, Scalar) { return s; });
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& x, Scalar s) {
  return detail::unary(
      x, "add_scalar", [s](Scalar v) { return v + s; }, [](Scalar, Scalar) { return Scalar(1); });
}

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x) {
  return detail::unary(
      x, "exp", [](Scalar v) { return std::exp(v); }, [](Scalar, Scalar y) { return y; });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& x) {
  return detail::unary(
      x, "log", [](Scalar v) { return std::log(v); }, [](Scalar v, Scalar) { return Scalar(1) / v; });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return detail::unary(
      x, "sigmoid",
      [](Scalar v) {
        return v >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-v))
                      : std::exp(v) / (Scalar(1) + std::exp(v));
      },
      [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

/// Exact GELU, x * Phi(x).
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  count_macs(x.size());
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return detail::unary(
      x, "gelu",
      [](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::erf(v * Scalar(inv_sqrt2))); },
      [](Scalar v, Scalar) {
        const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * Scalar(inv_sqrt2)));
        const Scalar pdf = Scalar(inv_sqrt2pi) * std::exp(Scalar(-0.5) * v * v);
        return cdf + v * pdf;
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Scalar total(0);
  for (const Scalar v : x.data()) total += v;
  return detail::make_result<Scalar>(Shape{}, {total}, "sum", {x.node()},
                                     [](detail::Node<Scalar>& self) {
                                       auto g = self.inputs[0]->grad_buffer();
                                       for (auto& v : g) v += self.grad[0];
                                     });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.size()));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  std::vector<Scalar> out(x.data().begin(), x.data().end());
  return detail::make_result<Scalar>(std::move(shape), std::move(out), "reshape", {x.node()},
                                     [](detail::Node<Scalar>& self) {
                                       auto g = self.inputs[0]->grad_buffer();
                                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                     });
}

template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  const std::size_t n = in.size();
  if (perm.size() != n) throw ShapeError("permute: rank mismatch");
  std::vector<std::size_t> in_stride(n, 1);
  for (std::size_t i = n; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out_shape(n);
  std::vector<std::size_t> stride(n);
  std::vector<bool> used(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    if (perm[i] >= n || used[perm[i]]) throw ShapeError("permute: invalid permutation");
    used[perm[i]] = true;
    out_shape[i] = in[perm[i]];
    stride[i] = in_stride[perm[i]];
  }
  auto source = std::make_shared<std::vector<std::size_t>>(x.size());
  std::vector<std::size_t> counter(n, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < source->size(); ++flat) {
    (*source)[flat] = src;
    for (std::size_t i = n; i-- > 0;) {
      ++counter[i];
      src += stride[i];
      if (counter[i] < out_shape[i]) break;
      src -= stride[i] * counter[i];
      counter[i] = 0;
    }
  }
  return detail::gather_flat(x, std::move(source), std::move(out_shape), "permute");
}

/// Swap the last two axes.
template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x) {
  std::vector<std::size_t> perm(x.ndim());
  std::iota(perm.begin(), perm.end(), 0);
  if (perm.size() < 2) throw ShapeError("transpose: need rank >= 2");
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm);
}

/// Broadcast `x` to `shape` (numpy rules); gradient sums over broadcast axes.
template <typename Scalar>
Tensor<Scalar> expand(const Tensor<Scalar>& x, const Shape& shape) {
  if (detail::broadcast_shapes(x.shape(), shape) != shape) {
    throw ShapeError("expand: cannot broadcast " + to_string(x.shape()) + " to " + to_string(shape));
  }
  auto source = std::make_shared<const std::vector<std::size_t>>(detail::broadcast_index(x.shape(), shape));
  return detail::gather_flat(x, std::move(source), shape, "expand");
}

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = detail::normalize_axis(axis, parts[0].ndim());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.ndim() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < out_shape.size(); ++i) {
      if (i != ax && p.shape()[i] != parts[0].shape()[i]) throw ShapeError("concat: extent mismatch");
    }
    out_shape[ax] += p.shape()[ax];
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= out_shape[i];
  std::size_t inner = 1;
  for (std::size_t i = ax + 1; i < out_shape.size(); ++i) inner *= out_shape[i];

  std::vector<std::size_t> widths;
  std::vector<detail::NodePtr<Scalar>> inputs;
  for (const auto& p : parts) {
    widths.push_back(p.shape()[ax] * inner);
    inputs.push_back(p.node());
  }
  const std::size_t row = out_shape[ax] * inner;
  std::vector<Scalar> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + o * widths[k], widths[k], out.begin() + o * row + offset);
    }
    offset += widths[k];
  }
  return detail::make_result<Scalar>(out_shape, std::move(out), "concat", std::move(inputs),
                                     [widths, outer, row](detail::Node<Scalar>& self) {
                                       std::size_t offset = 0;
                                       for (std::size_t k = 0; k < widths.size(); ++k) {
                                         auto& in = *self.inputs[k];
                                         if (in.requires_grad) {
                                           auto g = in.grad_buffer();
                                           for (std::size_t o = 0; o < outer; ++o) {
                                             for (std::size_t j = 0; j < widths[k]; ++j) {
                                               g[o * widths[k] + j] += self.grad[o * row + offset + j];
                                             }
                                           }
                                         }
                                         offset += widths[k];
                                       }
                                     });
}

/// Elements [start, start+length) along `axis`.
template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = detail::normalize_axis(axis, x.ndim());
  if (start + length > x.shape()[ax] || length == 0) throw ShapeError("slice: range out of bounds");
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  std::size_t outer = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= out_shape[i];
  std::size_t inner = 1;
  for (std::size_t i = ax + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  auto source = std::make_shared<std::vector<std::size_t>>();
  source->reserve(numel(out_shape));
  const std::size_t in_row = x.shape()[ax] * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < length * inner; ++j) source->push_back(o * in_row + start * inner + j);
  }
  return detail::gather_flat(x, std::move(source), std::move(out_shape), "slice");
}

/// Rows of `x` (viewed as [*, last_dim]) selected by `rows`, reshaped to `out_shape`.
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& x, const std::vector<std::size_t>& rows, Shape out_shape) {
  const std::size_t width = x.shape().back();
  const std::size_t n_rows = x.size() / width;
  if (numel(out_shape) != rows.size() * width) throw ShapeError("gather_rows: output shape mismatch");
  auto source = std::make_shared<std::vector<std::size_t>>();
  source->reserve(rows.size() * width);
  for (const std::size_t r : rows) {
    if (r >= n_rows) throw ShapeError("gather_rows: row index out of range");
    for (std::size_t j = 0; j < width; ++j) source->push_back(r * width + j);
  }
  return detail::gather_flat(x, std::move(source), std::move(out_shape), "gather_rows");
}

// ---------------------------------------------------------------------------
// Contractions

/// Batched matrix product over the last two axes; batch axes broadcast.
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  using Mat = detail::RowMat<Scalar>;
  if (a.ndim() < 2 || b.ndim() < 2) throw ShapeError("matmul: operands need rank >= 2");
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) {
    throw ShapeError("matmul: inner extents differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  const Shape batch = detail::broadcast_shapes(batch_a, batch_b);
  auto ia = std::make_shared<const std::vector<std::size_t>>(detail::broadcast_index(batch_a, batch));
  auto ib = std::make_shared<const std::vector<std::size_t>>(detail::broadcast_index(batch_b, batch));
  const std::size_t nb = numel(batch);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<Scalar> out(nb * m * n);
  const Scalar* ap = a.data().data();
  const Scalar* bp = b.data().data();
  for (std::size_t i = 0; i < nb; ++i) {
    Eigen::Map<const Mat> A(ap + (*ia)[i] * m * k, m, k);
    Eigen::Map<const Mat> B(bp + (*ib)[i] * k * n, k, n);
    Eigen::Map<Mat> C(out.data() + i * m * n, m, n);
    C.noalias() = A * B;
  }
  count_macs(nb * m * k * n);
  return detail::make_result<Scalar>(
      out_shape, std::move(out), "matmul", {a.node(), b.node()},
      [ia, ib, nb, m, k, n](detail::Node<Scalar>& self) {
        auto& na = *self.inputs[0];
        auto& nbode = *self.inputs[1];
        for (std::size_t i = 0; i < nb; ++i) {
          Eigen::Map<const Mat> G(self.grad.data() + i * m * n, m, n);
          Eigen::Map<const Mat> A(na.value.data() + (*ia)[i] * m * k, m, k);
          Eigen::Map<const Mat> B(nbode.value.data() + (*ib)[i] * k * n, k, n);
          if (na.requires_grad) {
            Eigen::Map<Mat> GA(na.grad_buffer().data() + (*ia)[i] * m * k, m, k);
            GA.noalias() += G * B.transpose();
          }
          if (nbode.requires_grad) {
            Eigen::Map<Mat> GB(nbode.grad_buffer().data() + (*ib)[i] * k * n, k, n);
            GB.noalias() += A.transpose() * G;
          }
        }
      });
}

/// y = x W^T + bias, with W stored [out, in]. `bias` may be undefined.
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias = {}) {
  using Mat = detail::RowMat<Scalar>;
  if (weight.ndim() != 2) throw ShapeError("linear: weight must be rank 2");
  const std::size_t in = weight.dim(1), outf = weight.dim(0);
  if (x.ndim() < 1 || x.dim(-1) != in) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " vs weight " + to_string(weight.shape()));
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != outf)) throw ShapeError("linear: bias shape");
  const std::size_t rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outf;
  std::vector<Scalar> out(rows * outf);
  {
    Eigen::Map<const Mat> X(x.data().data(), rows, in);
    Eigen::Map<const Mat> W(weight.data().data(), outf, in);
    Eigen::Map<Mat> Y(out.data(), rows, outf);
    Y.noalias() = X * W.transpose();
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> b(bias.data().data(), outf);
      Y.rowwise() += b;
    }
  }
  count_macs(rows * in * outf);
  std::vector<detail::NodePtr<Scalar>> inputs{x.node(), weight.node()};
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias.node());
  return detail::make_result<Scalar>(
      out_shape, std::move(out), "linear", std::move(inputs),
      [rows, in, outf, has_bias](detail::Node<Scalar>& self) {
        auto& nx = *self.inputs[0];
        auto& nw = *self.inputs[1];
        Eigen::Map<const Mat> G(self.grad.data(), rows, outf);
        if (nx.requires_grad) {
          Eigen::Map<const Mat> W(nw.value.data(), outf, in);
          Eigen::Map<Mat> GX(nx.grad_buffer().data(), rows, in);
          GX.noalias() += G * W;
        }
        if (nw.requires_grad) {
          Eigen::Map<const Mat> X(nx.value.data(), rows, in);
          Eigen::Map<Mat> GW(nw.grad_buffer().data(), outf, in);
          GW.noalias() += G.transpose() * X;
        }
        if (has_bias && self.inputs[2]->requires_grad) {
          Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> gb(self.inputs[2]->grad_buffer().data(), outf);
          gb += G.colwise().sum();
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax over the last axis with per-row max subtraction.
template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& x) {
  if (x.ndim() < 1 || x.dim(-1) < 1) throw ShapeError("softmax_rows: empty last axis");
  const std::size_t width = x.dim(-1);
  const std::size_t rows = x.size() / width;
  const auto xv = x.data();
  std::vector<Scalar> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* in = xv.data() + r * width;
    Scalar* y = out.data() + r * width;
    const Scalar peak = *std::max_element(in, in + width);
    Scalar total(0);
    for (std::size_t j = 0; j < width; ++j) {
      y[j] = std::exp(in[j] - peak);
      total += y[j];
    }
    for (std::size_t j = 0; j < width; ++j) y[j] /= total;
  }
  count_macs(x.size());
  return detail::make_result<Scalar>(x.shape(), std::move(out), "softmax_rows", {x.node()},
                                     [rows, width](detail::Node<Scalar>& self) {
                                       auto g = self.inputs[0]->grad_buffer();
                                       for (std::size_t r = 0; r < rows; ++r) {
                                         const Scalar* y = self.value.data() + r * width;
                                         const Scalar* gy = self.grad.data() + r * width;
                                         Scalar dot(0);
                                         for (std::size_t j = 0; j < width; ++j) dot += gy[j] * y[j];
                                         for (std::size_t j = 0; j < width; ++j) {
                                           g[r * width + j] += y[j] * (gy[j] - dot);
                                         }
                                       }
                                     });
}

inline constexpr double kLayerNormEps = 1e-5;

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          double eps = kLayerNormEps) {
  const std::size_t d = x.dim(-1);
  if (gamma.size() != d || beta.size() != d) throw ShapeError("layer_norm: affine size mismatch");
  const std::size_t rows = x.size() / d;
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<Scalar> out(x.size());
  auto xhat = std::make_shared<std::vector<Scalar>>(x.size());
  auto inv_std = std::make_shared<std::vector<Scalar>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* in = xv.data() + r * d;
    Scalar mu(0);
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<Scalar>(d);
    Scalar var(0);
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<Scalar>(d);
    const Scalar is = Scalar(1) / std::sqrt(var + Scalar(eps));
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const Scalar h = (in[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  count_macs(x.size());
  return detail::make_result<Scalar>(
      x.shape(), std::move(out), "layer_norm", {x.node(), gamma.node(), beta.node()},
      [xhat, inv_std, rows, d](detail::Node<Scalar>& self) {
        auto& nx = *self.inputs[0];
        auto& ng = *self.inputs[1];
        auto& nbeta = *self.inputs[2];
        for (std::size_t r = 0; r < rows; ++r) {
          const Scalar* gy = self.grad.data() + r * d;
          const Scalar* h = xhat->data() + r * d;
          if (ng.requires_grad) {
            auto gg = ng.grad_buffer();
            for (std::size_t j = 0; j < d; ++j) gg[j] += gy[j] * h[j];
          }
          if (nbeta.requires_grad) {
            auto gb = nbeta.grad_buffer();
            for (std::size_t j = 0; j < d; ++j) gb[j] += gy[j];
          }
          if (nx.requires_grad) {
            Scalar mean_g(0), mean_gh(0);
            for (std::size_t j = 0; j < d; ++j) {
              const Scalar gh = gy[j] * ng.value[j];
              mean_g += gh;
              mean_gh += gh * h[j];
            }
            mean_g /= static_cast<Scalar>(d);
            mean_gh /= static_cast<Scalar>(d);
            auto gx = nx.grad_buffer();
            for (std::size_t j = 0; j < d; ++j) {
              const Scalar gh = gy[j] * ng.value[j];
              gx[r * d + j] += (*inv_std)[r] * (gh - mean_g - h[j] * mean_gh);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Rotary embedding

/// Rotation angles for consecutive channel pairs: angle(b, s, j) rotates pair
/// (2j, 2j+1) of position s. `batch` is 1 (shared) or the leading extent of
/// the rotated tensor.
struct RotaryTable {
  std::size_t batch = 1;
  std::size_t seq = 0;
  std::size_t half = 0;
  std::vector<double> angle;

  double at(std::size_t b, std::size_t s, std::size_t j) const { return angle[(b * seq + s) * half + j]; }
};

/// Rotates pairs of the last axis of x[..., seq, 2*half] by the table angles.
template <typename Scalar>
Tensor<Scalar> rotary(const Tensor<Scalar>& x, const RotaryTable& table) {
  if (x.ndim() < 2 || x.dim(-1) != 2 * table.half || x.dim(-2) != table.seq) {
    throw ShapeError("rotary: tensor " + to_string(x.shape()) + " does not match table");
  }
  const std::size_t width = 2 * table.half;
  const std::size_t lead = x.size() / (table.seq * width);
  std::size_t group = lead;
  if (table.batch != 1) {
    if (x.dim(0) != table.batch) throw ShapeError("rotary: table batch mismatch");
    group = lead / table.batch;
  }
  auto cs = std::make_shared<std::vector<Scalar>>(table.angle.size());
  auto sn = std::make_shared<std::vector<Scalar>>(table.angle.size());
  for (std::size_t i = 0; i < table.angle.size(); ++i) {
    (*cs)[i] = static_cast<Scalar>(std::cos(table.angle[i]));
    (*sn)[i] = static_cast<Scalar>(std::sin(table.angle[i]));
  }
  const std::size_t seq = table.seq, half = table.half, tb = table.batch;
  auto row_of = [seq, half, tb, group](std::size_t l, std::size_t s) {
    const std::size_t b = tb == 1 ? 0 : l / group;
    return (b * seq + s) * half;
  };
  const auto xv = x.data();
  std::vector<Scalar> out(x.size());
  for (std::size_t l = 0; l < lead; ++l) {
    for (std::size_t s = 0; s < seq; ++s) {
      const std::size_t base = (l * seq + s) * width;
      const std::size_t row = row_of(l, s);
      for (std::size_t j = 0; j < half; ++j) {
        const Scalar a = xv[base + 2 * j], b = xv[base + 2 * j + 1];
        const Scalar c = (*cs)[row + j], s_ = (*sn)[row + j];
        out[base + 2 * j] = a * c - b * s_;
        out[base + 2 * j + 1] = a * s_ + b * c;
      }
    }
  }
  return detail::make_result<Scalar>(x.shape(), std::move(out), "rotary", {x.node()},
                                     [cs, sn, lead, seq, half, width, row_of](detail::Node<Scalar>& self) {
                                       auto g = self.inputs[0]->grad_buffer();
                                       for (std::size_t l = 0; l < lead; ++l) {
                                         for (std::size_t s = 0; s < seq; ++s) {
                                           const std::size_t base = (l * seq + s) * width;
                                           const std::size_t row = row_of(l, s);
                                           for (std::size_t j = 0; j < half; ++j) {
                                             const Scalar ga = self.grad[base + 2 * j];
                                             const Scalar gb = self.grad[base + 2 * j + 1];
                                             const Scalar c = (*cs)[row + j], s_ = (*sn)[row + j];
                                             g[base + 2 * j] += ga * c + gb * s_;
                                             g[base + 2 * j + 1] += -ga * s_ + gb * c;
                                           }
                                         }
                                       }
                                     });
}

// ---------------------------------------------------------------------------
// Resampling

/// Bilinear resize of the last two axes with half-pixel centers (edges clamped).
template <typename Scalar>
Tensor<Scalar> upsample_bilinear(const Tensor<Scalar>& x, std::size_t out_h, std::size_t out_w) {
  if (x.ndim() < 2) throw ShapeError("upsample_bilinear: need rank >= 2");
  const std::size_t in_h = x.dim(-2), in_w = x.dim(-1);
  struct Tap {
    std::size_t lo, hi;
    double frac;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
      src = std::max(src, 0.0);
      std::size_t lo = std::min(static_cast<std::size_t>(src), in - 1);
      const std::size_t hi = std::min(lo + 1, in - 1);
      const double frac = std::min(src - static_cast<double>(lo), 1.0);
      t[o] = {lo, hi, hi == lo ? 0.0 : frac};
    }
    return t;
  };
  auto ty = std::make_shared<const std::vector<Tap>>(taps(in_h, out_h));
  auto tx = std::make_shared<const std::vector<Tap>>(taps(in_w, out_w));
  const std::size_t planes = x.size() / (in_h * in_w);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = out_h;
  out_shape.back() = out_w;
  const auto xv = x.data();
  std::vector<Scalar> out(planes * out_h * out_w);
  for (std::size_t p = 0; p < planes; ++p) {
    const Scalar* src = xv.data() + p * in_h * in_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const Tap& a = (*ty)[y];
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const Tap& b = (*tx)[xx];
        const double top = (1 - b.frac) * src[a.lo * in_w + b.lo] + b.frac * src[a.lo * in_w + b.hi];
        const double bot = (1 - b.frac) * src[a.hi * in_w + b.lo] + b.frac * src[a.hi * in_w + b.hi];
        out[(p * out_h + y) * out_w + xx] = static_cast<Scalar>((1 - a.frac) * top + a.frac * bot);
      }
    }
  }
  return detail::make_result<Scalar>(
      out_shape, std::move(out), "upsample_bilinear", {x.node()},
      [ty, tx, planes, in_h, in_w, out_h, out_w](detail::Node<Scalar>& self) {
        auto g = self.inputs[0]->grad_buffer();
        for (std::size_t p = 0; p < planes; ++p) {
          Scalar* dst = g.data() + p * in_h * in_w;
          for (std::size_t y = 0; y < out_h; ++y) {
            const Tap& a = (*ty)[y];
            for (std::size_t xx = 0; xx < out_w; ++xx) {
              const Tap& b = (*tx)[xx];
              const Scalar gv = self.grad[(p * out_h + y) * out_w + xx];
              dst[a.lo * in_w + b.lo] += static_cast<Scalar>(gv * (1 - a.frac) * (1 - b.frac));
              dst[a.lo * in_w + b.hi] += static_cast<Scalar>(gv * (1 - a.frac) * b.frac);
              dst[a.hi * in_w + b.lo] += static_cast<Scalar>(gv * a.frac * (1 - b.frac));
              dst[a.hi * in_w + b.hi] += static_cast<Scalar>(gv * a.frac * b.frac);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Losses

inline constexpr double kProbabilityClamp = 1e-7;

/// Mean binary cross-entropy of probabilities `p` against targets `target`.
/// Probabilities are clamped to [eps, 1-eps]; the backward pass uses the
/// derivative at the clamped value for every element, so saturated
/// predictions still receive a corrective gradient.
template <typename Scalar>
Tensor<Scalar> binary_cross_entropy(const Tensor<Scalar>& p, const Tensor<Scalar>& target,
                                    double eps = kProbabilityClamp) {
  if (p.shape() != target.shape()) {
    throw ShapeError("binary_cross_entropy: " + to_string(p.shape()) + " vs " + to_string(target.shape()));
  }
  const auto pv = p.data();
  const auto mv = target.data();
  const double n = static_cast<double>(p.size());
  double total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double q = std::clamp(static_cast<double>(pv[i]), eps, 1.0 - eps);
    const double m = mv[i];
    total -= m * std::log(q) + (1.0 - m) * std::log(1.0 - q);
  }
  return detail::make_result<Scalar>(
      Shape{}, {static_cast<Scalar>(total / n)}, "binary_cross_entropy", {p.node(), target.node()},
      [eps, n](detail::Node<Scalar>& self) {
        auto& np = *self.inputs[0];
        const auto& m = self.inputs[1]->value;
        if (!np.requires_grad) return;
        auto g = np.grad_buffer();
        const double scale = static_cast<double>(self.grad[0]) / n;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double q = std::clamp(static_cast<double>(np.value[i]), eps, 1.0 - eps);
          g[i] += static_cast<Scalar>(scale * (q - m[i]) / (q * (1.0 - q)));
        }
      });
}

/// Weighted mean BCE of sigmoid(x) against `target`:
/// (1/n) sum_i w_i * bce(clamp(sigmoid(x_i)), target_i), with w = 1 when
/// `weight` is undefined. The value equals binary_cross_entropy(sigmoid(x), t)
/// for unit weights; the gradient w_i (sigmoid(x_i) - t_i) / n ignores the
/// clamp, so it does not vanish when the sigmoid saturates.
template <typename Scalar>
Tensor<Scalar> binary_cross_entropy_logits(const Tensor<Scalar>& x, const Tensor<Scalar>& target,
                                           const Tensor<Scalar>& weight = Tensor<Scalar>{},
                                           double eps = kProbabilityClamp) {
  if (x.shape() != target.shape() || (weight.defined() && weight.shape() != x.shape())) {
    throw ShapeError("binary_cross_entropy_logits: shapes differ");
  }
  const auto sig = [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); };
  const auto xv = x.data();
  const auto mv = target.data();
  const double n = static_cast<double>(x.size());
  double total = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double w = weight.defined() ? static_cast<double>(weight.data()[i]) : 1.0;
    if (w == 0.0) continue;
    const double q = std::clamp(sig(static_cast<double>(xv[i])), eps, 1.0 - eps);
    const double m = mv[i];
    total -= w * (m * std::log(q) + (1.0 - m) * std::log(1.0 - q));
  }
  std::vector<std::shared_ptr<detail::Node<Scalar>>> inputs{x.node(), target.node()};
  if (weight.defined()) inputs.push_back(weight.node());
  return detail::make_result<Scalar>(
      Shape{}, {static_cast<Scalar>(total / n)}, "binary_cross_entropy_logits", std::move(inputs),
      [n, sig](detail::Node<Scalar>& self) {
        auto& nx = *self.inputs[0];
        if (!nx.requires_grad) return;
        const auto& m = self.inputs[1]->value;
        const Scalar* w = self.inputs.size() > 2 ? self.inputs[2]->value.data() : nullptr;
        auto g = nx.grad_buffer();
        const double scale = static_cast<double>(self.grad[0]) / n;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double wi = w ? static_cast<double>(w[i]) : 1.0;
          g[i] += static_cast<Scalar>(scale * wi * (sig(static_cast<double>(nx.value[i])) - m[i]));
        }
      });
}

}  // namespace relay
