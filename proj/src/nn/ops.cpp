// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include "sbr/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace sbr::nn {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using CVecMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

// Grad buffer of parent i, or nullptr when it does not take gradients.
template <typename T>
T* parent_grad(detail::Node<T>& self, std::size_t i) {
  if (i >= self.parents.size() || !self.parents[i]) return nullptr;
  auto& p = *self.parents[i];
  return p.requires_grad ? p.grad_buffer().data() : nullptr;
}

template <typename T>
const T* parent_value(detail::Node<T>& self, std::size_t i) {
  return self.parents[i]->value.data();
}

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_string(a.shape()) + " vs " +
                                      shape_string(b.shape()));
}

template <typename T>
void require_rank(const Tensor<T>& a, int rank, const char* op) {
  require(a.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_string(a.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Buffer<T> out(a.values().begin(), a.values().end());
  VecMap<T>(out.data(), out.size()) += CVecMap<T>(b.data(), b.numel());
  const auto n = a.numel();
  return Tensor<T>::make_result(a.shape(), std::move(out), {&a, &b}, "add",
                                [n](detail::Node<T>& self) {
                                  CVecMap<T> g(self.grad.data(), n);
                                  if (T* ga = parent_grad(self, 0)) VecMap<T>(ga, n) += g;
                                  if (T* gb = parent_grad(self, 1)) VecMap<T>(gb, n) += g;
                                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  Buffer<T> out(a.values().begin(), a.values().end());
  VecMap<T>(out.data(), out.size()) -= CVecMap<T>(b.data(), b.numel());
  const auto n = a.numel();
  return Tensor<T>::make_result(a.shape(), std::move(out), {&a, &b}, "sub",
                                [n](detail::Node<T>& self) {
                                  CVecMap<T> g(self.grad.data(), n);
                                  if (T* ga = parent_grad(self, 0)) VecMap<T>(ga, n) += g;
                                  if (T* gb = parent_grad(self, 1)) VecMap<T>(gb, n) -= g;
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  const auto n = a.numel();
  Buffer<T> out(static_cast<std::size_t>(n));
  VecMap<T>(out.data(), n) = CVecMap<T>(a.data(), n) * CVecMap<T>(b.data(), n);
  return Tensor<T>::make_result(a.shape(), std::move(out), {&a, &b}, "mul",
                                [n](detail::Node<T>& self) {
                                  CVecMap<T> g(self.grad.data(), n);
                                  if (T* ga = parent_grad(self, 0))
                                    VecMap<T>(ga, n) += g * CVecMap<T>(parent_value(self, 1), n);
                                  if (T* gb = parent_grad(self, 1))
                                    VecMap<T>(gb, n) += g * CVecMap<T>(parent_value(self, 0), n);
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  const auto n = a.numel();
  Buffer<T> out(static_cast<std::size_t>(n));
  VecMap<T>(out.data(), n) = CVecMap<T>(a.data(), n) * factor;
  return Tensor<T>::make_result(a.shape(), std::move(out), {&a}, "scale",
                                [n, factor](detail::Node<T>& self) {
                                  if (T* ga = parent_grad(self, 0))
                                    VecMap<T>(ga, n) += CVecMap<T>(self.grad.data(), n) * factor;
                                });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  const auto n = a.numel();
  Buffer<T> out(static_cast<std::size_t>(n));
  VecMap<T>(out.data(), n) = CVecMap<T>(a.data(), n).max(T(0));
  return Tensor<T>::make_result(a.shape(), std::move(out), {&a}, "relu",
                                [n](detail::Node<T>& self) {
                                  T* ga = parent_grad(self, 0);
                                  if (!ga) return;
                                  const T* x = parent_value(self, 0);
                                  for (std::int64_t i = 0; i < n; ++i)
                                    if (x[i] > T(0)) ga[i] += self.grad[i];
                                });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  const auto n = a.numel();
  Buffer<T> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out[i] = T(1) / (T(1) + std::exp(-a.data()[i]));
  return Tensor<T>::make_result(a.shape(), out, {&a}, "sigmoid",
                                [n, y = out](detail::Node<T>& self) {
                                  T* ga = parent_grad(self, 0);
                                  if (!ga) return;
                                  for (std::int64_t i = 0; i < n; ++i)
                                    ga[i] += self.grad[i] * y[i] * (T(1) - y[i]);
                                });
}

template <typename T>
Tensor<T> add_n(const std::vector<Tensor<T>>& terms) {
  require(!terms.empty(), "add_n: no terms");
  const auto n = terms.front().numel();
  Buffer<T> out(static_cast<std::size_t>(n), T(0));
  for (const auto& t : terms) {
    require_same_shape(terms.front(), t, "add_n");
    VecMap<T>(out.data(), n) += CVecMap<T>(t.data(), n);
  }
  const auto count = terms.size();
  return Tensor<T>::make_result(terms.front().shape(), std::move(out), terms, "add_n",
                                [n, count](detail::Node<T>& self) {
                                  CVecMap<T> g(self.grad.data(), n);
                                  for (std::size_t i = 0; i < count; ++i)
                                    if (T* gi = parent_grad(self, i)) VecMap<T>(gi, n) += g;
                                });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  const auto n = a.numel();
  const T s = CVecMap<T>(a.data(), n).sum();
  return Tensor<T>::make_result(Shape{}, {s}, {&a}, "sum", [n](detail::Node<T>& self) {
    if (T* ga = parent_grad(self, 0)) VecMap<T>(ga, n) += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  const auto n = a.numel();
  require(n > 0, "mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(n));
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require(shape_numel(shape) == a.numel(), "reshape: cannot view " + shape_string(a.shape()) +
                                               " as " + shape_string(shape));
  const auto n = a.numel();
  Buffer<T> out(a.values().begin(), a.values().end());
  return Tensor<T>::make_result(std::move(shape), std::move(out), {&a}, "reshape",
                                [n](detail::Node<T>& self) {
                                  if (T* ga = parent_grad(self, 0))
                                    VecMap<T>(ga, n) += CVecMap<T>(self.grad.data(), n);
                                });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& axes) {
  const int r = a.rank();
  require(static_cast<int>(axes.size()) == r, "permute: axes rank mismatch");
  std::vector<int> seen(r, 0);
  for (int ax : axes) {
    require(ax >= 0 && ax < r && !seen[ax], "permute: invalid axes");
    seen[ax] = 1;
  }
  const Shape& in_shape = a.shape();
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];
  std::vector<std::int64_t> in_stride(r, 1);
  for (int i = r - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * in_shape[i + 1];
  // For every output flat index, the source flat index.
  const auto n = a.numel();
  std::vector<std::int64_t> src(static_cast<std::size_t>(n));
  std::vector<std::int64_t> idx(r, 0);
  for (std::int64_t o = 0; o < n; ++o) {
    std::int64_t s = 0;
    for (int i = 0; i < r; ++i) s += idx[i] * in_stride[axes[i]];
    src[o] = s;
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  Buffer<T> out(static_cast<std::size_t>(n));
  for (std::int64_t o = 0; o < n; ++o) out[o] = a.data()[src[o]];
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {&a}, "permute",
                                [src = std::move(src)](detail::Node<T>& self) {
                                  T* ga = parent_grad(self, 0);
                                  if (!ga) return;
                                  for (std::size_t o = 0; o < src.size(); ++o)
                                    ga[src[o]] += self.grad[o];
                                });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts.front().shape();
  const int r = static_cast<int>(first.size());
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, "concat: axis out of range");
  std::int64_t outer = 1;
  std::int64_t inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first[i];
  for (int i = axis + 1; i < r; ++i) inner *= first[i];
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::int64_t> widths;
  for (const auto& p : parts) {
    require(p.rank() == r, "concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      require(i == axis || p.shape()[i] == first[i],
              "concat: shape mismatch " + shape_string(p.shape()) + " vs " +
                  shape_string(first));
    out_shape[axis] += p.shape()[axis];
    widths.push_back(p.shape()[axis] * inner);
  }
  const std::int64_t row = out_shape[axis] * inner;
  Buffer<T> out(static_cast<std::size_t>(outer * row));
  std::int64_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const T* src = parts[k].data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(src + o * widths[k], widths[k], out.data() + o * row + offset);
    offset += widths[k];
  }
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), parts, "concat",
                                [widths, outer, row](detail::Node<T>& self) {
                                  std::int64_t off = 0;
                                  for (std::size_t k = 0; k < widths.size(); ++k) {
                                    if (T* g = parent_grad(self, k)) {
                                      for (std::int64_t o = 0; o < outer; ++o) {
                                        const T* src = self.grad.data() + o * row + off;
                                        T* dst = g + o * widths[k];
                                        for (std::int64_t i = 0; i < widths[k]; ++i)
                                          dst[i] += src[i];
                                      }
                                    }
                                    off += widths[k];
                                  }
                                });
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& a, std::span<const int> rows) {
  require(a.rank() >= 1, "index_select: scalar input");
  const auto n = a.dim(0);
  const auto width = n > 0 ? a.numel() / n : 0;
  Shape out_shape = a.shape();
  out_shape[0] = static_cast<std::int64_t>(rows.size());
  Buffer<T> out(static_cast<std::size_t>(width * rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < n, "index_select: row out of range");
    std::copy_n(a.data() + rows[i] * width, width, out.data() + i * width);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {&a}, "index_select",
                                [idx = std::move(idx), width](detail::Node<T>& self) {
                                  T* ga = parent_grad(self, 0);
                                  if (!ga) return;
                                  for (std::size_t i = 0; i < idx.size(); ++i) {
                                    const T* src = self.grad.data() + i * width;
                                    T* dst = ga + idx[i] * width;
                                    for (std::int64_t k = 0; k < width; ++k) dst[k] += src[k];
                                  }
                                });
}

template <typename T>
Tensor<T> select_channel(const Tensor<T>& a, std::span<const int> channels) {
  require(a.rank() >= 2, "select_channel: need rank >= 2");
  const auto n = a.dim(0);
  const auto k = a.dim(1);
  require(static_cast<std::int64_t>(channels.size()) == n,
          "select_channel: one channel index per row required");
  const auto inner = a.numel() / std::max<std::int64_t>(n * k, 1);
  Shape out_shape{n};
  out_shape.insert(out_shape.end(), a.shape().begin() + 2, a.shape().end());
  Buffer<T> out(static_cast<std::size_t>(n * inner));
  for (std::int64_t i = 0; i < n; ++i) {
    require(channels[i] >= 0 && channels[i] < k, "select_channel: channel out of range");
    std::copy_n(a.data() + (i * k + channels[i]) * inner, inner, out.data() + i * inner);
  }
  std::vector<int> ch(channels.begin(), channels.end());
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {&a}, "select_channel",
                                [ch = std::move(ch), k, inner](detail::Node<T>& self) {
                                  T* ga = parent_grad(self, 0);
                                  if (!ga) return;
                                  for (std::size_t i = 0; i < ch.size(); ++i) {
                                    const T* src = self.grad.data() + i * inner;
                                    T* dst = ga + (i * k + ch[i]) * inner;
                                    for (std::int64_t j = 0; j < inner; ++j) dst[j] += src[j];
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a, bool transpose_b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  require(a.dim(0) == b.dim(0), "bmm: batch mismatch");
  const auto batch = a.dim(0);
  const auto ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  const auto m = transpose_a ? ac : ar;
  const auto k = transpose_a ? ar : ac;
  const auto kb = transpose_b ? bc : br;
  const auto n = transpose_b ? br : bc;
  require(k == kb, "bmm: inner dimension mismatch " + shape_string(a.shape()) + " x " +
                       shape_string(b.shape()));
  Buffer<T> out(static_cast<std::size_t>(batch * m * n));
  for (std::int64_t i = 0; i < batch; ++i) {
    CMapR<T> A(a.data() + i * ar * ac, ar, ac);
    CMapR<T> B(b.data() + i * br * bc, br, bc);
    MapR<T> C(out.data() + i * m * n, m, n);
    if (!transpose_a && !transpose_b) C.noalias() = A * B;
    else if (transpose_a && !transpose_b) C.noalias() = A.transpose() * B;
    else if (!transpose_a && transpose_b) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
  return Tensor<T>::make_result(
      Shape{batch, m, n}, std::move(out), {&a, &b}, "bmm",
      [=](detail::Node<T>& self) {
        T* ga = parent_grad(self, 0);
        T* gb = parent_grad(self, 1);
        for (std::int64_t i = 0; i < batch; ++i) {
          CMapR<T> G(self.grad.data() + i * m * n, m, n);
          CMapR<T> A(parent_value(self, 0) + i * ar * ac, ar, ac);
          CMapR<T> B(parent_value(self, 1) + i * br * bc, br, bc);
          if (ga) {
            MapR<T> GA(ga + i * ar * ac, ar, ac);
            // d op(A) = G op(B)^T
            if (!transpose_a) {
              if (!transpose_b) GA.noalias() += G * B.transpose();
              else GA.noalias() += G * B;
            } else {
              if (!transpose_b) GA.noalias() += B * G.transpose();
              else GA.noalias() += B.transpose() * G.transpose();
            }
          }
          if (gb) {
            MapR<T> GB(gb + i * br * bc, br, bc);
            // d op(B) = op(A)^T G
            if (!transpose_b) {
              if (!transpose_a) GB.noalias() += A.transpose() * G;
              else GB.noalias() += A * G;
            } else {
              if (!transpose_a) GB.noalias() += G.transpose() * A;
              else GB.noalias() += G.transpose() * A.transpose();
            }
          }
        }
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  require(a.rank() >= 1, "softmax: scalar input");
  const auto width = a.dim(-1);
  const auto rows = width > 0 ? a.numel() / width : 0;
  Buffer<T> out(static_cast<std::size_t>(a.numel()));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* x = a.data() + r * width;
    T* y = out.data() + r * width;
    const T mx = *std::max_element(x, x + width);
    T s = 0;
    for (std::int64_t i = 0; i < width; ++i) s += (y[i] = std::exp(x[i] - mx));
    for (std::int64_t i = 0; i < width; ++i) y[i] /= s;
  }
  return Tensor<T>::make_result(a.shape(), out, {&a}, "softmax",
                                [y = out, rows, width](detail::Node<T>& self) {
                                  T* ga = parent_grad(self, 0);
                                  if (!ga) return;
                                  for (std::int64_t r = 0; r < rows; ++r) {
                                    const T* g = self.grad.data() + r * width;
                                    const T* yr = y.data() + r * width;
                                    T dot = 0;
                                    for (std::int64_t i = 0; i < width; ++i) dot += g[i] * yr[i];
                                    for (std::int64_t i = 0; i < width; ++i)
                                      ga[r * width + i] += yr[i] * (g[i] - dot);
                                  }
                                });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const auto n = x.dim(0), in = x.dim(1), o = weight.dim(0);
  require(weight.dim(1) == in, "linear: input width " + std::to_string(in) +
                                   " does not match weight " + shape_string(weight.shape()));
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.numel() == o, "linear: bias size mismatch");
  Buffer<T> out(static_cast<std::size_t>(n * o));
  MapR<T> Y(out.data(), n, o);
  Y.noalias() = CMapR<T>(x.data(), n, in) * CMapR<T>(weight.data(), o, in).transpose();
  if (has_bias)
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data(), o);
  return Tensor<T>::make_result(
      Shape{n, o}, std::move(out), {&x, &weight, &bias}, "linear",
      [n, in, o](detail::Node<T>& self) {
        CMapR<T> G(self.grad.data(), n, o);
        if (T* gx = parent_grad(self, 0))
          MapR<T>(gx, n, in).noalias() += G * CMapR<T>(parent_value(self, 1), o, in);
        if (T* gw = parent_grad(self, 1))
          MapR<T>(gw, o, in).noalias() += G.transpose() * CMapR<T>(parent_value(self, 0), n, in);
        if (T* gb = parent_grad(self, 2))
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb, o) += G.colwise().sum();
      });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  std::int64_t n, c, h, w, o, kh, kw, oh, ow;
  Conv2dSpec spec;
  std::int64_t patch() const { return c * kh * kw; }
  std::int64_t positions() const { return n * oh * ow; }
};

// col[(c*kh + i)*kw + j, (n*oh + y)*ow + x] = input[n, c, y*sh - ph + i, x*sw - pw + j]
template <typename T>
void im2col(const T* input, const ConvGeometry& g, T* col) {
  const auto cols = g.positions();
  for (std::int64_t c = 0; c < g.c; ++c)
    for (std::int64_t i = 0; i < g.kh; ++i)
      for (std::int64_t j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * cols;
        for (std::int64_t n = 0; n < g.n; ++n) {
          const T* plane = input + (n * g.c + c) * g.h * g.w;
          for (std::int64_t y = 0; y < g.oh; ++y) {
            const std::int64_t iy = y * g.spec.stride_h - g.spec.pad_h + i;
            T* dst = row + (n * g.oh + y) * g.ow;
            if (iy < 0 || iy >= g.h) {
              std::fill_n(dst, g.ow, T(0));
              continue;
            }
            const T* src = plane + iy * g.w;
            for (std::int64_t x = 0; x < g.ow; ++x) {
              const std::int64_t ix = x * g.spec.stride_w - g.spec.pad_w + j;
              dst[x] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
            }
          }
        }
      }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* grad_input) {
  const auto cols = g.positions();
  for (std::int64_t c = 0; c < g.c; ++c)
    for (std::int64_t i = 0; i < g.kh; ++i)
      for (std::int64_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((c * g.kh + i) * g.kw + j) * cols;
        for (std::int64_t n = 0; n < g.n; ++n) {
          T* plane = grad_input + (n * g.c + c) * g.h * g.w;
          for (std::int64_t y = 0; y < g.oh; ++y) {
            const std::int64_t iy = y * g.spec.stride_h - g.spec.pad_h + i;
            if (iy < 0 || iy >= g.h) continue;
            const T* src = row + (n * g.oh + y) * g.ow;
            T* dst = plane + iy * g.w;
            for (std::int64_t x = 0; x < g.ow; ++x) {
              const std::int64_t ix = x * g.spec.stride_w - g.spec.pad_w + j;
              if (ix >= 0 && ix < g.w) dst[ix] += src[x];
            }
          }
        }
      }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dSpec spec) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d");
  ConvGeometry g{};
  g.n = x.dim(0);
  g.c = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.o = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.spec = spec;
  require(weight.dim(1) == g.c, "conv2d: input has " + std::to_string(g.c) +
                                    " channels, weight expects " +
                                    std::to_string(weight.dim(1)));
  g.oh = (g.h + 2 * spec.pad_h - g.kh) / spec.stride_h + 1;
  g.ow = (g.w + 2 * spec.pad_w - g.kw) / spec.stride_w + 1;
  require(g.oh > 0 && g.ow > 0, "conv2d: kernel larger than padded input");
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.numel() == g.o, "conv2d: bias size mismatch");

  const auto hw = g.oh * g.ow;
  Buffer<T> col(static_cast<std::size_t>(g.patch() * g.positions()));
  im2col(x.data(), g, col.data());
  MatR<T> y = CMapR<T>(weight.data(), g.o, g.patch()) *
              CMapR<T>(col.data(), g.patch(), g.positions());
  Buffer<T> out(static_cast<std::size_t>(g.n * g.o * hw));
  for (std::int64_t n = 0; n < g.n; ++n)
    for (std::int64_t o = 0; o < g.o; ++o) {
      const T b = has_bias ? bias.data()[o] : T(0);
      const T* src = y.data() + o * g.positions() + n * hw;
      T* dst = out.data() + (n * g.o + o) * hw;
      for (std::int64_t p = 0; p < hw; ++p) dst[p] = src[p] + b;
    }

  return Tensor<T>::make_result(
      Shape{g.n, g.o, g.oh, g.ow}, std::move(out), {&x, &weight, &bias}, "conv2d",
      [g, hw, col = std::move(col)](detail::Node<T>& self) {
        MatR<T> gy(g.o, g.positions());
        for (std::int64_t n = 0; n < g.n; ++n)
          for (std::int64_t o = 0; o < g.o; ++o)
            std::copy_n(self.grad.data() + (n * g.o + o) * hw, hw,
                        gy.data() + o * g.positions() + n * hw);
        if (T* gw = parent_grad(self, 1))
          MapR<T>(gw, g.o, g.patch()).noalias() +=
              gy * CMapR<T>(col.data(), g.patch(), g.positions()).transpose();
        if (T* gb = parent_grad(self, 2))
          Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(gb, g.o) += gy.rowwise().sum();
        if (T* gx = parent_grad(self, 0)) {
          MatR<T> gcol = CMapR<T>(parent_value(self, 1), g.o, g.patch()).transpose() * gy;
          col2im(gcol.data(), g, gx);
        }
      });
}

template <typename T>
Tensor<T> conv_transpose2x2(const Tensor<T>& x, const Tensor<T>& weight,
                            const Tensor<T>& bias) {
  require_rank(x, 4, "conv_transpose2x2");
  require_rank(weight, 4, "conv_transpose2x2");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto o = weight.dim(1);
  require(weight.dim(0) == c && weight.dim(2) == 2 && weight.dim(3) == 2,
          "conv_transpose2x2: weight must be [C, O, 2, 2]");
  const bool has_bias = bias.defined();
  const auto hw = h * w;
  const auto positions = n * hw;
  // xm[c, n*hw + p]
  MatR<T> xm(c, positions);
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch)
      std::copy_n(x.data() + (b * c + ch) * hw, hw, xm.data() + ch * positions + b * hw);
  // z[(o*4 + a*2 + e), n*hw + p]
  MatR<T> z = CMapR<T>(weight.data(), c, o * 4).transpose() * xm;
  const auto oh = 2 * h, ow = 2 * w;
  Buffer<T> out(static_cast<std::size_t>(n * o * oh * ow));
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t oc = 0; oc < o; ++oc) {
      const T bv = has_bias ? bias.data()[oc] : T(0);
      T* plane = out.data() + (b * o + oc) * oh * ow;
      for (int a = 0; a < 2; ++a)
        for (int e = 0; e < 2; ++e) {
          const T* src = z.data() + (oc * 4 + a * 2 + e) * positions + b * hw;
          for (std::int64_t i = 0; i < h; ++i)
            for (std::int64_t j = 0; j < w; ++j)
              plane[(2 * i + a) * ow + 2 * j + e] = src[i * w + j] + bv;
        }
    }
  return Tensor<T>::make_result(
      Shape{n, o, oh, ow}, std::move(out), {&x, &weight, &bias}, "conv_transpose2x2",
      [=, xm = std::move(xm)](detail::Node<T>& self) {
        MatR<T> gz(o * 4, positions);
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t oc = 0; oc < o; ++oc) {
            const T* plane = self.grad.data() + (b * o + oc) * oh * ow;
            for (int a = 0; a < 2; ++a)
              for (int e = 0; e < 2; ++e) {
                T* dst = gz.data() + (oc * 4 + a * 2 + e) * positions + b * hw;
                for (std::int64_t i = 0; i < h; ++i)
                  for (std::int64_t j = 0; j < w; ++j)
                    dst[i * w + j] = plane[(2 * i + a) * ow + 2 * j + e];
              }
          }
        if (T* gw = parent_grad(self, 1))
          MapR<T>(gw, c, o * 4).noalias() += xm * gz.transpose();
        if (T* gb = parent_grad(self, 2)) {
          for (std::int64_t oc = 0; oc < o; ++oc)
            gb[oc] += gz.middleRows(oc * 4, 4).sum();
        }
        if (T* gx = parent_grad(self, 0)) {
          MatR<T> gxm = CMapR<T>(parent_value(self, 1), c, o * 4) * gz;
          for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t ch = 0; ch < c; ++ch) {
              const T* src = gxm.data() + ch * positions + b * hw;
              T* dst = gx + (b * c + ch) * hw;
              for (std::int64_t p = 0; p < hw; ++p) dst[p] += src[p];
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization, resampling

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     int groups, T eps) {
  require_rank(x, 4, "group_norm");
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(groups > 0 && c % groups == 0, "group_norm: channels not divisible by groups");
  require(gamma.numel() == c && beta.numel() == c, "group_norm: affine size mismatch");
  const auto cg = c / groups;
  const auto m = cg * hw;
  Buffer<T> xhat(static_cast<std::size_t>(x.numel()));
  Buffer<T> inv_std(static_cast<std::size_t>(n * groups));
  Buffer<T> out(static_cast<std::size_t>(x.numel()));
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t gi = 0; gi < groups; ++gi) {
      const auto base = (b * c + gi * cg) * hw;
      CVecMap<T> xs(x.data() + base, m);
      const T mu = xs.mean();
      const T var = (xs - mu).square().mean();
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[b * groups + gi] = is;
      VecMap<T>(xhat.data() + base, m) = (xs - mu) * is;
      for (std::int64_t ch = 0; ch < cg; ++ch) {
        const auto cc = gi * cg + ch;
        const T gm = gamma.data()[cc], bt = beta.data()[cc];
        const auto off = base + ch * hw;
        for (std::int64_t p = 0; p < hw; ++p) out[off + p] = xhat[off + p] * gm + bt;
      }
    }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {&x, &gamma, &beta}, "group_norm",
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
        T* gx = parent_grad(self, 0);
        T* gg = parent_grad(self, 1);
        T* gbt = parent_grad(self, 2);
        const T* gm = parent_value(self, 1);
        Buffer<T> dxhat(static_cast<std::size_t>(m));
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t gi = 0; gi < groups; ++gi) {
            const auto base = (b * c + gi * cg) * hw;
            for (std::int64_t ch = 0; ch < cg; ++ch) {
              const auto cc = gi * cg + ch;
              const auto off = base + ch * hw;
              T sg = 0, sgx = 0;
              for (std::int64_t p = 0; p < hw; ++p) {
                const T g = self.grad[off + p];
                sg += g;
                sgx += g * xhat[off + p];
                dxhat[ch * hw + p] = g * gm[cc];
              }
              if (gg) gg[cc] += sgx;
              if (gbt) gbt[cc] += sg;
            }
            if (!gx) continue;
            CVecMap<T> dxh(dxhat.data(), m);
            CVecMap<T> xh(xhat.data() + base, m);
            const T s1 = dxh.sum();
            const T s2 = (dxh * xh).sum();
            const T is = inv_std[b * groups + gi];
            VecMap<T>(gx + base, m) +=
                (dxh * static_cast<T>(m) - s1 - xh * s2) * (is / static_cast<T>(m));
          }
      });
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor) {
  require_rank(x, 4, "upsample_nearest");
  require(factor >= 1, "upsample_nearest: factor must be >= 1");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto oh = h * factor, ow = w * factor;
  Buffer<T> out(static_cast<std::size_t>(n * c * oh * ow));
  for (std::int64_t p = 0; p < n * c; ++p)
    for (std::int64_t i = 0; i < oh; ++i)
      for (std::int64_t j = 0; j < ow; ++j)
        out[(p * oh + i) * ow + j] = x.data()[(p * h + i / factor) * w + j / factor];
  return Tensor<T>::make_result(Shape{n, c, oh, ow}, std::move(out), {&x}, "upsample_nearest",
                                [=](detail::Node<T>& self) {
                                  T* gx = parent_grad(self, 0);
                                  if (!gx) return;
                                  for (std::int64_t p = 0; p < n * c; ++p)
                                    for (std::int64_t i = 0; i < oh; ++i)
                                      for (std::int64_t j = 0; j < ow; ++j)
                                        gx[(p * h + i / factor) * w + j / factor] +=
                                            self.grad[(p * oh + i) * ow + j];
                                });
}

template <typename T>
Tensor<T> max_pool2x2(const Tensor<T>& x) {
  require_rank(x, 4, "max_pool2x2");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto oh = h / 2, ow = w / 2;
  require(oh > 0 && ow > 0, "max_pool2x2: input too small");
  Buffer<T> out(static_cast<std::size_t>(n * c * oh * ow));
  std::vector<std::int64_t> arg(out.size());
  for (std::int64_t p = 0; p < n * c; ++p)
    for (std::int64_t i = 0; i < oh; ++i)
      for (std::int64_t j = 0; j < ow; ++j) {
        std::int64_t best = (p * h + 2 * i) * w + 2 * j;
        for (int a = 0; a < 2; ++a)
          for (int e = 0; e < 2; ++e) {
            const auto idx = (p * h + 2 * i + a) * w + 2 * j + e;
            if (x.data()[idx] > x.data()[best]) best = idx;
          }
        const auto o = (p * oh + i) * ow + j;
        out[o] = x.data()[best];
        arg[o] = best;
      }
  return Tensor<T>::make_result(Shape{n, c, oh, ow}, std::move(out), {&x}, "max_pool2x2",
                                [arg = std::move(arg)](detail::Node<T>& self) {
                                  T* gx = parent_grad(self, 0);
                                  if (!gx) return;
                                  for (std::size_t o = 0; o < arg.size(); ++o)
                                    gx[arg[o]] += self.grad[o];
                                });
}

template <typename T>
Tensor<T> pad_bottom_right(const Tensor<T>& x, int pad_h, int pad_w) {
  require_rank(x, 4, "pad_bottom_right");
  require(pad_h >= 0 && pad_w >= 0, "pad_bottom_right: negative padding");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto oh = h + pad_h, ow = w + pad_w;
  Buffer<T> out(static_cast<std::size_t>(n * c * oh * ow), T(0));
  for (std::int64_t p = 0; p < n * c; ++p)
    for (std::int64_t i = 0; i < h; ++i)
      std::copy_n(x.data() + (p * h + i) * w, w, out.data() + (p * oh + i) * ow);
  return Tensor<T>::make_result(Shape{n, c, oh, ow}, std::move(out), {&x}, "pad",
                                [=](detail::Node<T>& self) {
                                  T* gx = parent_grad(self, 0);
                                  if (!gx) return;
                                  for (std::int64_t p = 0; p < n * c; ++p)
                                    for (std::int64_t i = 0; i < h; ++i)
                                      for (std::int64_t j = 0; j < w; ++j)
                                        gx[(p * h + i) * w + j] +=
                                            self.grad[(p * oh + i) * ow + j];
                                });
}

#define SBR_INSTANTIATE_OPS(T)                                                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale(const Tensor<T>&, T);                                             \
  template Tensor<T> relu(const Tensor<T>&);                                                 \
  template Tensor<T> sigmoid(const Tensor<T>&);                                              \
  template Tensor<T> add_n(const std::vector<Tensor<T>>&);                                   \
  template Tensor<T> sum(const Tensor<T>&);                                                  \
  template Tensor<T> mean(const Tensor<T>&);                                                 \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                       \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                     \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                             \
  template Tensor<T> index_select(const Tensor<T>&, std::span<const int>);                   \
  template Tensor<T> select_channel(const Tensor<T>&, std::span<const int>);                 \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&, bool, bool);                    \
  template Tensor<T> softmax(const Tensor<T>&);                                              \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                            Conv2dSpec);                                                     \
  template Tensor<T> conv_transpose2x2(const Tensor<T>&, const Tensor<T>&,                   \
                                       const Tensor<T>&);                                    \
  template Tensor<T> group_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, T); \
  template Tensor<T> upsample_nearest(const Tensor<T>&, int);                                \
  template Tensor<T> max_pool2x2(const Tensor<T>&);                                          \
  template Tensor<T> pad_bottom_right(const Tensor<T>&, int, int);

SBR_INSTANTIATE_OPS(float)
SBR_INSTANTIATE_OPS(double)

#undef SBR_INSTANTIATE_OPS

}  // namespace sbr::nn
