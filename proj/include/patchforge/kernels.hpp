#pragma once

// Numeric kernels shared by the tape ops and the chain layers. Forward and
// backward are separate pure functions; backward kernels recompute whatever
// they need (e.g. pooling winners) from the layer input so that a layer's
// own output never has to be retained for its gradient.

#include <Eigen/Core>

#include <cmath>
#include <limits>

#include "patchforge/tensor.hpp"

namespace patchforge::kernels {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  std::size_t n, c, h, w;   // input
  std::size_t k, kh, kw;    // kernel
  std::size_t stride, pad;
  std::size_t oh, ow;       // output
};

template <class T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, std::size_t pad) {
  if (input.rank() != 4 || kernel.rank() != 4) {
    throw DimensionError("conv2d expects rank-4 input and kernel, got " + shape_string(input.shape()) + " and " +
                         shape_string(kernel.shape()));
  }
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0), kernel.dim(2), kernel.dim(3),
                 stride, pad, 0, 0};
  if (kernel.dim(1) != g.c) {
    throw DimensionError("conv2d channel mismatch: input " + shape_string(input.shape()) + ", kernel " +
                         shape_string(kernel.shape()));
  }
  if (g.kh % 2 == 0 || g.kw % 2 == 0) throw ConfigError("conv2d kernel extents must be odd");
  if (stride == 0) throw ConfigError("conv2d stride must be positive");
  const std::size_t ph = g.h + 2 * pad, pw = g.w + 2 * pad;
  if (ph < g.kh || pw < g.kw || (ph - g.kh) % stride != 0 || (pw - g.kw) % stride != 0) {
    throw ConfigError("conv2d output extent is not integral for input " + shape_string(input.shape()));
  }
  g.oh = (ph - g.kh) / stride + 1;
  g.ow = (pw - g.kw) / stride + 1;
  return g;
}

// Unfolds one sample into a (c*kh*kw) x (oh*ow) column matrix.
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t cols = g.oh * g.ow;
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((ci * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, T{0});
            continue;
          }
          const T* src = x + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  const std::size_t cols = g.oh * g.ow;
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((ci * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* dst = dx + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

/// Cross-correlation of [N,C,H,W] with [K,C,kh,kw] (no bias).
template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry(input, kernel, stride, pad);
  Tensor<T> out(Shape{g.n, g.k, g.oh, g.ow});
  const std::size_t rows = g.c * g.kh * g.kw, cols = g.oh * g.ow;
  std::vector<T> col(rows * cols);
  ConstMatrixMap<T> w(kernel.data().data(), g.k, rows);
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(input.data().data() + n * g.c * g.h * g.w, g, col.data());
    ConstMatrixMap<T> c(col.data(), rows, cols);
    MatrixMap<T> o(out.data().data() + n * g.k * cols, g.k, cols);
    o.noalias() = w * c;
  }
  return out;
}

/// Accumulates d(kernel) into `grad_kernel` and, when `grad_input` is
/// non-null, d(input) into it.
template <class T>
void conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, std::size_t pad,
                     const Tensor<T>& grad_out, std::span<T> grad_kernel, std::span<T> grad_input) {
  const ConvGeometry g = conv_geometry(input, kernel, stride, pad);
  if (grad_out.shape() != Shape{g.n, g.k, g.oh, g.ow}) throw DimensionError("conv2d backward: upstream shape mismatch");
  const std::size_t rows = g.c * g.kh * g.kw, cols = g.oh * g.ow;
  std::vector<T> col(rows * cols);
  ConstMatrixMap<T> w(kernel.data().data(), g.k, rows);
  for (std::size_t n = 0; n < g.n; ++n) {
    ConstMatrixMap<T> go(grad_out.data().data() + n * g.k * cols, g.k, cols);
    if (!grad_kernel.empty()) {
      im2col(input.data().data() + n * g.c * g.h * g.w, g, col.data());
      ConstMatrixMap<T> c(col.data(), rows, cols);
      MatrixMap<T> gw(grad_kernel.data(), g.k, rows);
      gw.noalias() += go * c.transpose();
    }
    if (!grad_input.empty()) {
      MatrixMap<T> dcol(col.data(), rows, cols);
      dcol.noalias() = w.transpose() * go;
      col2im_add(col.data(), g, grad_input.data() + n * g.c * g.h * g.w);
    }
  }
}

template <class T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  return out;
}

template <class T>
void relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out, std::span<T> grad_input) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > T{0}) grad_input[i] += grad_out[i];
  }
}

// 2x2 max pooling with stride 2 over [N,C,H,W]; H and W must be even.
// Ties go to the first element in row-major window order.
template <class T>
Tensor<T> maxpool2_forward(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("maxpool2 expects rank-4 input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ConfigError("maxpool2 needs even spatial extents, got " + shape_string(x.shape()));
  Tensor<T> out(Shape{n, c, h / 2, w / 2});
  const T* src = x.data().data();
  T* dst = out.data().data();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* plane = src + p * h * w;
    for (std::size_t oy = 0; oy < h / 2; ++oy) {
      for (std::size_t ox = 0; ox < w / 2; ++ox) {
        const T* a = plane + (2 * oy) * w + 2 * ox;
        T m = a[0];
        if (a[1] > m) m = a[1];
        if (a[w] > m) m = a[w];
        if (a[w + 1] > m) m = a[w + 1];
        *dst++ = m;
      }
    }
  }
  return out;
}

template <class T>
void maxpool2_backward(const Tensor<T>& x, const Tensor<T>& grad_out, std::span<T> grad_input) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const T* src = x.data().data();
  const T* go = grad_out.data().data();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* plane = src + p * h * w;
    T* gplane = grad_input.data() + p * h * w;
    for (std::size_t oy = 0; oy < h / 2; ++oy) {
      for (std::size_t ox = 0; ox < w / 2; ++ox) {
        const std::size_t base = (2 * oy) * w + 2 * ox;
        std::size_t best = base;
        for (std::size_t off : {base + 1, base + w, base + w + 1}) {
          if (plane[off] > plane[best]) best = off;
        }
        gplane[best] += *go++;
      }
    }
  }
}

/// [N,C,H,W] -> [N,C] spatial mean.
template <class T>
Tensor<T> global_avg_forward(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("global average pooling expects rank-4 input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{n, c});
  for (std::size_t p = 0; p < n * c; ++p) {
    T s = 0;
    const T* plane = x.data().data() + p * hw;
    for (std::size_t i = 0; i < hw; ++i) s += plane[i];
    out[p] = s / static_cast<T>(hw);
  }
  return out;
}

template <class T>
void global_avg_backward(const Shape& input_shape, const Tensor<T>& grad_out, std::span<T> grad_input) {
  const std::size_t hw = input_shape[2] * input_shape[3];
  for (std::size_t p = 0; p < grad_out.size(); ++p) {
    const T g = grad_out[p] / static_cast<T>(hw);
    T* plane = grad_input.data() + p * hw;
    for (std::size_t i = 0; i < hw; ++i) plane[i] += g;
  }
}

/// input [N,D] x weight [D,M] + bias [M].
template <class T>
Tensor<T> affine_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (input.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 || input.dim(1) != weight.dim(0) ||
      bias.dim(0) != weight.dim(1)) {
    throw DimensionError("affine shape mismatch: " + shape_string(input.shape()) + " x " + shape_string(weight.shape()) +
                         " + " + shape_string(bias.shape()));
  }
  const std::size_t n = input.dim(0), d = input.dim(1), m = weight.dim(1);
  Tensor<T> out(Shape{n, m});
  ConstMatrixMap<T> x(input.data().data(), n, d);
  ConstMatrixMap<T> w(weight.data().data(), d, m);
  MatrixMap<T> o(out.data().data(), n, m);
  o.noalias() = x * w;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < m; ++c) o(r, c) += bias[c];
  }
  return out;
}

template <class T>
void affine_backward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& grad_out, std::span<T> grad_input,
                     std::span<T> grad_weight, std::span<T> grad_bias) {
  const std::size_t n = input.dim(0), d = input.dim(1), m = weight.dim(1);
  ConstMatrixMap<T> x(input.data().data(), n, d);
  ConstMatrixMap<T> w(weight.data().data(), d, m);
  ConstMatrixMap<T> go(grad_out.data().data(), n, m);
  if (!grad_input.empty()) {
    MatrixMap<T> gx(grad_input.data(), n, d);
    gx.noalias() += go * w.transpose();
  }
  if (!grad_weight.empty()) {
    MatrixMap<T> gw(grad_weight.data(), d, m);
    gw.noalias() += x.transpose() * go;
  }
  if (!grad_bias.empty()) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < m; ++c) grad_bias[c] += go(r, c);
    }
  }
}

template <class T>
T sigmoid(T z) {
  if (z >= 0) return T{1} / (T{1} + std::exp(-z));
  const T e = std::exp(z);
  return e / (T{1} + e);
}

template <class T>
void check_binary_labels(const Tensor<T>& logit, const Tensor<T>& label) {
  if (logit.size() != label.size()) throw DimensionError("bce: logit/label size mismatch");
  for (T y : label.data()) {
    if (y != T{0} && y != T{1}) throw InputError("bce labels must be 0 or 1");
  }
}

/// Mean binary cross-entropy on logits, in the max(z,0) - z*y + log1p(exp(-|z|)) form.
template <class T>
T bce_with_logit_forward(const Tensor<T>& logit, const Tensor<T>& label) {
  check_binary_labels(logit, label);
  T s = 0;
  for (std::size_t i = 0; i < logit.size(); ++i) {
    const T z = logit[i];
    s += std::max(z, T{0}) - z * label[i] + std::log1p(std::exp(-std::abs(z)));
  }
  return s / static_cast<T>(logit.size());
}

template <class T>
void bce_with_logit_backward(const Tensor<T>& logit, const Tensor<T>& label, T upstream, std::span<T> grad_logit) {
  const T n = static_cast<T>(logit.size());
  for (std::size_t i = 0; i < logit.size(); ++i) grad_logit[i] += upstream * (sigmoid(logit[i]) - label[i]) / n;
}

}  // namespace patchforge::kernels
