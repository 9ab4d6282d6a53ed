#pragma once

// Raw forward/backward compute kernels for the differentiable operators.
// Convolutions go through im2col + a GEMM (Eigen); everything runs
// single-threaded so repeated runs are bit-identical.

#include <Eigen/Core>
#include <cstring>
#include <optional>
#include <vector>

#include "tsr/tensor.hpp"

namespace tsr {

// Counts multiply-accumulates actually performed by conv/deconv forward
// kernels. Used to cross-check the static complexity analysis.
class MacCounter {
 public:
  static void reset() { count_() = 0; }
  static int64_t value() { return count_(); }
  static void enable(bool on) { enabled_() = on; }
  static bool enabled() { return enabled_(); }
  static void add(int64_t n) {
    if (enabled_()) count_() += n;
  }

 private:
  static int64_t& count_() {
    thread_local int64_t c = 0;
    return c;
  }
  static bool& enabled_() {
    thread_local bool e = false;
    return e;
  }
};

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<MatRM<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const MatRM<T>>;

inline int64_t conv_out_dim(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// col is [C*kH*kW, oH*oW], row-major.
template <typename T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kH, int64_t kW,
            int64_t stride, int64_t pad, int64_t oH, int64_t oW, T* col) {
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ky = 0; ky < kH; ++ky) {
      for (int64_t kx = 0; kx < kW; ++kx) {
        T* row = col + ((c * kH + ky) * kW + kx) * oH * oW;
        for (int64_t oy = 0; oy < oH; ++oy) {
          int64_t iy = oy * stride + ky - pad;
          T* dst = row + oy * oW;
          if (iy < 0 || iy >= H) {
            std::memset(dst, 0, sizeof(T) * oW);
            continue;
          }
          const T* src = x + (c * H + iy) * W;
          for (int64_t ox = 0; ox < oW; ++ox) {
            int64_t ix = ox * stride + kx - pad;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds col back into x.
template <typename T>
void col2im_add(const T* col, int64_t C, int64_t H, int64_t W, int64_t kH, int64_t kW,
                int64_t stride, int64_t pad, int64_t oH, int64_t oW, T* x) {
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ky = 0; ky < kH; ++ky) {
      for (int64_t kx = 0; kx < kW; ++kx) {
        const T* row = col + ((c * kH + ky) * kW + kx) * oH * oW;
        for (int64_t oy = 0; oy < oH; ++oy) {
          int64_t iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          T* dst = x + (c * H + iy) * W;
          const T* src = row + oy * oW;
          for (int64_t ox = 0; ox < oW; ++ox) {
            int64_t ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void require_rank4(const Tensor<T>& t, const char* what) {
  if (t.rank() != 4) {
    throw ShapeError(std::string(what) + " must be rank 4, got shape " + shape_str(t.shape()));
  }
}

}  // namespace detail

// --- conv2d -----------------------------------------------------------------
// x: [B,Cin,H,W], w: [Cout,Cin,kH,kW], bias: [Cout] or null. Zero padding.

template <typename T>
Tensor<T> conv2d_fwd(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                     int64_t stride, int64_t pad) {
  detail::require_rank4(x, "conv2d input");
  detail::require_rank4(w, "conv2d weight");
  if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
  if (pad < 0) throw ShapeError("conv2d padding must be >= 0");
  const int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = w.dim(0), kH = w.dim(2), kW = w.dim(3);
  if (w.dim(1) != Cin) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) +
                     " vs weight " + shape_str(w.shape()));
  }
  if (kH > H + 2 * pad || kW > W + 2 * pad) {
    throw ShapeError("conv2d kernel " + shape_str(w.shape()) +
                     " larger than padded input " + shape_str(x.shape()));
  }
  if (bias && !(bias->rank() == 1 && bias->dim(0) == Cout)) {
    throw ShapeError("conv2d bias must be [Cout], got " + shape_str(bias->shape()));
  }
  const int64_t oH = detail::conv_out_dim(H, kH, stride, pad);
  const int64_t oW = detail::conv_out_dim(W, kW, stride, pad);
  MacCounter::add(B * Cout * oH * oW * Cin * kH * kW);

  Tensor<T> y({B, Cout, oH, oW});
  const int64_t K = Cin * kH * kW;
  std::vector<T> col(K * oH * oW);
  detail::ConstMatMap<T> wm(w.data(), Cout, K);
  for (int64_t b = 0; b < B; ++b) {
    detail::im2col(x.data() + b * Cin * H * W, Cin, H, W, kH, kW, stride, pad, oH, oW, col.data());
    detail::ConstMatMap<T> cm(col.data(), K, oH * oW);
    detail::MatMap<T> ym(y.data() + b * Cout * oH * oW, Cout, oH * oW);
    ym.noalias() = wm * cm;
    if (bias) {
      for (int64_t o = 0; o < Cout; ++o) ym.row(o).array() += (*bias)[o];
    }
  }
  return y;
}

// Accumulates into whichever of gx/gw/gb is non-null (must be pre-sized).
template <typename T>
void conv2d_bwd(const Tensor<T>& x, const Tensor<T>& w, int64_t stride, int64_t pad,
                const Tensor<T>& gy, Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
  const int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = w.dim(0), kH = w.dim(2), kW = w.dim(3);
  const int64_t oH = gy.dim(2), oW = gy.dim(3);
  const int64_t K = Cin * kH * kW;
  std::vector<T> col(K * oH * oW);
  detail::ConstMatMap<T> wm(w.data(), Cout, K);
  for (int64_t b = 0; b < B; ++b) {
    detail::ConstMatMap<T> gym(gy.data() + b * Cout * oH * oW, Cout, oH * oW);
    if (gb) {
      for (int64_t o = 0; o < Cout; ++o) (*gb)[o] += gym.row(o).sum();
    }
    if (gw) {
      detail::im2col(x.data() + b * Cin * H * W, Cin, H, W, kH, kW, stride, pad, oH, oW, col.data());
      detail::ConstMatMap<T> cm(col.data(), K, oH * oW);
      detail::MatMap<T> gwm(gw->data(), Cout, K);
      gwm.noalias() += gym * cm.transpose();
    }
    if (gx) {
      detail::MatMap<T> cm(col.data(), K, oH * oW);
      cm.noalias() = wm.transpose() * gym;
      detail::col2im_add(col.data(), Cin, H, W, kH, kW, stride, pad, oH, oW,
                         gx->data() + b * Cin * H * W);
    }
  }
}

// --- transposed conv ---------------------------------------------------------
// x: [B,Cin,H,W], w: [Cin,Cout,kH,kW]. Exact adjoint of conv2d with the same
// geometry; output is (H-1)*stride - 2*pad + kH.

template <typename T>
Tensor<T> deconv2d_fwd(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                       int64_t stride, int64_t pad) {
  detail::require_rank4(x, "conv2d_transposed input");
  detail::require_rank4(w, "conv2d_transposed weight");
  if (stride < 1) throw ShapeError("conv2d_transposed stride must be >= 1");
  const int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = w.dim(1), kH = w.dim(2), kW = w.dim(3);
  if (w.dim(0) != Cin) {
    throw ShapeError("conv2d_transposed channel mismatch: input " + shape_str(x.shape()) +
                     " vs weight " + shape_str(w.shape()));
  }
  const int64_t oH = (H - 1) * stride - 2 * pad + kH;
  const int64_t oW = (W - 1) * stride - 2 * pad + kW;
  if (oH < 1 || oW < 1) {
    throw ShapeError("conv2d_transposed produces non-positive output dims for input " +
                     shape_str(x.shape()));
  }
  if (bias && !(bias->rank() == 1 && bias->dim(0) == Cout)) {
    throw ShapeError("conv2d_transposed bias must be [Cout], got " + shape_str(bias->shape()));
  }
  MacCounter::add(B * Cin * H * W * Cout * kH * kW);

  Tensor<T> y({B, Cout, oH, oW});
  const int64_t K = Cout * kH * kW;
  std::vector<T> col(K * H * W);
  detail::ConstMatMap<T> wm(w.data(), Cin, K);
  for (int64_t b = 0; b < B; ++b) {
    detail::ConstMatMap<T> xm(x.data() + b * Cin * H * W, Cin, H * W);
    detail::MatMap<T> cm(col.data(), K, H * W);
    cm.noalias() = wm.transpose() * xm;
    // The deconv output plays the role of the conv input in col2im geometry.
    detail::col2im_add(col.data(), Cout, oH, oW, kH, kW, stride, pad, H, W,
                       y.data() + b * Cout * oH * oW);
    if (bias) {
      detail::MatMap<T> ym(y.data() + b * Cout * oH * oW, Cout, oH * oW);
      for (int64_t o = 0; o < Cout; ++o) ym.row(o).array() += (*bias)[o];
    }
  }
  return y;
}

template <typename T>
void deconv2d_bwd(const Tensor<T>& x, const Tensor<T>& w, int64_t stride, int64_t pad,
                  const Tensor<T>& gy, Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
  const int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = w.dim(1), kH = w.dim(2), kW = w.dim(3);
  const int64_t oH = gy.dim(2), oW = gy.dim(3);
  const int64_t K = Cout * kH * kW;
  std::vector<T> col(K * H * W);
  detail::ConstMatMap<T> wm(w.data(), Cin, K);
  for (int64_t b = 0; b < B; ++b) {
    const T* gyb = gy.data() + b * Cout * oH * oW;
    if (gb) {
      detail::ConstMatMap<T> gym(gyb, Cout, oH * oW);
      for (int64_t o = 0; o < Cout; ++o) (*gb)[o] += gym.row(o).sum();
    }
    if (gx || gw) {
      detail::im2col(gyb, Cout, oH, oW, kH, kW, stride, pad, H, W, col.data());
      detail::ConstMatMap<T> cm(col.data(), K, H * W);
      if (gx) {
        detail::MatMap<T> gxm(gx->data() + b * Cin * H * W, Cin, H * W);
        gxm.noalias() += wm * cm;
      }
      if (gw) {
        detail::ConstMatMap<T> xm(x.data() + b * Cin * H * W, Cin, H * W);
        detail::MatMap<T> gwm(gw->data(), Cin, K);
        gwm.noalias() += xm * cm.transpose();
      }
    }
  }
}

// --- space_to_depth / depth_to_space -----------------------------------------
// Output channel c*block^2 + dy*block + dx holds input pixel offset (dy,dx)
// of channel c, so a 2x2 block [[1,2],[3,4]] becomes channels {1,2,3,4}.

template <typename T>
Tensor<T> space_to_depth_fwd(const Tensor<T>& x, int64_t block) {
  detail::require_rank4(x, "space_to_depth input");
  if (block < 1) throw ShapeError("space_to_depth block must be >= 1");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % block != 0 || W % block != 0) {
    throw ShapeError("space_to_depth: spatial dims of " + shape_str(x.shape()) +
                     " not divisible by block " + std::to_string(block));
  }
  const int64_t oH = H / block, oW = W / block;
  Tensor<T> y({B, C * block * block, oH, oW});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t dy = 0; dy < block; ++dy)
        for (int64_t dx = 0; dx < block; ++dx)
          for (int64_t oy = 0; oy < oH; ++oy)
            for (int64_t ox = 0; ox < oW; ++ox)
              y.at(b, (c * block + dy) * block + dx, oy, ox) =
                  x.at(b, c, oy * block + dy, ox * block + dx);
  return y;
}

template <typename T>
Tensor<T> depth_to_space_fwd(const Tensor<T>& x, int64_t block) {
  detail::require_rank4(x, "depth_to_space input");
  if (block < 1) throw ShapeError("depth_to_space block must be >= 1");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C % (block * block) != 0) {
    throw ShapeError("depth_to_space: channels of " + shape_str(x.shape()) +
                     " not divisible by block^2 = " + std::to_string(block * block));
  }
  const int64_t oC = C / (block * block);
  Tensor<T> y({B, oC, H * block, W * block});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < oC; ++c)
      for (int64_t dy = 0; dy < block; ++dy)
        for (int64_t dx = 0; dx < block; ++dx)
          for (int64_t iy = 0; iy < H; ++iy)
            for (int64_t ix = 0; ix < W; ++ix)
              y.at(b, c, iy * block + dy, ix * block + dx) =
                  x.at(b, (c * block + dy) * block + dx, iy, ix);
  return y;
}

// --- elementwise -------------------------------------------------------------

enum class EltwiseOp { Add, Sub, Mul };

template <typename T>
Tensor<T> eltwise_fwd(EltwiseOp op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("elementwise shape mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor<T> y(a.shape());
  const int64_t n = a.size();
  switch (op) {
    case EltwiseOp::Add:
      for (int64_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
      break;
    case EltwiseOp::Sub:
      for (int64_t i = 0; i < n; ++i) y[i] = a[i] - b[i];
      break;
    case EltwiseOp::Mul:
      for (int64_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
      break;
  }
  return y;
}

// --- activations --------------------------------------------------------------
// Gradient at exactly x == 0 is 0 for both relu and prelu.

template <typename T>
Tensor<T> relu_fwd(const Tensor<T>& x) {
  if (!x.all_finite()) throw ShapeError("relu: non-finite input");
  Tensor<T> y(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <typename T>
Tensor<T> prelu_fwd(const Tensor<T>& x, const Tensor<T>& slope) {
  if (slope.size() != 1) {
    throw ShapeError("prelu slope must be a single shared scalar, got " +
                     shape_str(slope.shape()));
  }
  if (!std::isfinite(static_cast<double>(slope[0]))) throw ShapeError("prelu: non-finite slope");
  if (!x.all_finite()) throw ShapeError("prelu: non-finite input");
  const T s = slope[0];
  Tensor<T> y(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) y[i] = x[i] >= T(0) ? x[i] : s * x[i];
  return y;
}

// --- losses -------------------------------------------------------------------

template <typename T>
T mae_fwd(const Tensor<T>& pred, const Tensor<T>& target) {
  if (!pred.same_shape(target)) {
    throw ShapeError("mean_abs_error shape mismatch: " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  }
  // Accumulate in double so float loss values stay stable for large tensors.
  double acc = 0;
  for (int64_t i = 0; i < pred.size(); ++i)
    acc += std::abs(static_cast<double>(pred[i]) - static_cast<double>(target[i]));
  return static_cast<T>(acc / static_cast<double>(pred.size()));
}

}  // namespace tsr
