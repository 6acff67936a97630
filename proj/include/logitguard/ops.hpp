#pragma once

#include <cstddef>
#include <vector>

#include "logitguard/errors.hpp"
#include "logitguard/tensor.hpp"

namespace logitguard {

// Forward/backward kernels for the layer primitives. Backward kernels
// accumulate (+=) into caller-provided gradient tensors shaped like the
// primals, so one buffer can collect contributions from several consumers.

// y = W x + b with W {out,in}, x {in}, b {out}.
inline Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 1)
    throw DimensionError("dense: input must be rank-1 (flatten first), got " +
                         x.shape_string());
  if (w.rank() != 2 || w.shape()[1] != x.size())
    throw DimensionError("dense: weight " + w.shape_string() + " incompatible with input " +
                         x.shape_string());
  const std::size_t out = w.shape()[0], in = w.shape()[1];
  if (b.rank() != 1 || b.size() != out)
    throw DimensionError("dense: bias " + b.shape_string() + " incompatible with weight " +
                         w.shape_string());
  Tensor y({out});
  for (std::size_t o = 0; o < out; ++o) {
    double acc = b[o];
    const std::size_t row = o * in;
    for (std::size_t i = 0; i < in; ++i) acc += w[row + i] * x[i];
    y[o] = acc;
  }
  return y;
}

inline void dense_backward(const Tensor& x, const Tensor& w, const Tensor& gy,
                           Tensor& gx, Tensor& gw, Tensor& gb) {
  const std::size_t out = w.shape()[0], in = w.shape()[1];
  for (std::size_t o = 0; o < out; ++o) {
    const double g = gy[o];
    const std::size_t row = o * in;
    gb[o] += g;
    for (std::size_t i = 0; i < in; ++i) {
      gw[row + i] += g * x[i];
      gx[i] += g * w[row + i];
    }
  }
}

// Stride-1 valid convolution. x {C,H,W}, k {F,C,kh,kw}, b {F} -> y {F,H-kh+1,W-kw+1}.
inline Tensor conv2d_forward(const Tensor& x, const Tensor& k, const Tensor& b) {
  if (x.rank() != 3)
    throw DimensionError("conv2d: input must be {C,H,W}, got " + x.shape_string());
  if (k.rank() != 4 || k.shape()[1] != x.shape()[0])
    throw DimensionError("conv2d: kernel " + k.shape_string() + " incompatible with input " +
                         x.shape_string());
  const std::size_t c_in = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t f = k.shape()[0], kh = k.shape()[2], kw = k.shape()[3];
  if (kh > h || kw > w)
    throw DimensionError("conv2d: kernel larger than input");
  if (b.rank() != 1 || b.size() != f)
    throw DimensionError("conv2d: bias size mismatch");
  const std::size_t oh = h - kh + 1, ow = w - kw + 1;
  Tensor y({f, oh, ow});
  for (std::size_t fo = 0; fo < f; ++fo)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = b[fo];
        for (std::size_t c = 0; c < c_in; ++c)
          for (std::size_t u = 0; u < kh; ++u) {
            const std::size_t xrow = (c * h + i + u) * w + j;
            const std::size_t krow = ((fo * c_in + c) * kh + u) * kw;
            for (std::size_t v = 0; v < kw; ++v) acc += x[xrow + v] * k[krow + v];
          }
        y[(fo * oh + i) * ow + j] = acc;
      }
  return y;
}

inline void conv2d_backward(const Tensor& x, const Tensor& k, const Tensor& gy,
                            Tensor& gx, Tensor& gk, Tensor& gb) {
  const std::size_t c_in = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t f = k.shape()[0], kh = k.shape()[2], kw = k.shape()[3];
  const std::size_t oh = h - kh + 1, ow = w - kw + 1;
  for (std::size_t fo = 0; fo < f; ++fo)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const double g = gy[(fo * oh + i) * ow + j];
        gb[fo] += g;
        for (std::size_t c = 0; c < c_in; ++c)
          for (std::size_t u = 0; u < kh; ++u) {
            const std::size_t xrow = (c * h + i + u) * w + j;
            const std::size_t krow = ((fo * c_in + c) * kh + u) * kw;
            for (std::size_t v = 0; v < kw; ++v) {
              gk[krow + v] += g * x[xrow + v];
              gx[xrow + v] += g * k[krow + v];
            }
          }
      }
}

// 2x2 max pool, stride 2. Requires even H and W. `argmax` records the flat
// input index that won each window; ties go to the lowest flat index so
// replay and backward are deterministic.
inline Tensor maxpool2x2_forward(const Tensor& x, std::vector<std::size_t>& argmax) {
  if (x.rank() != 3)
    throw DimensionError("maxpool2x2: input must be {C,H,W}, got " + x.shape_string());
  const std::size_t c_in = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (h % 2 != 0 || w % 2 != 0)
    throw DimensionError("maxpool2x2: H and W must be even, got " + x.shape_string());
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor y({c_in, oh, ow});
  argmax.assign(c_in * oh * ow, 0);
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = (c * h + 2 * i) * w + 2 * j;
        double bv = x[best];
        const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
        for (std::size_t idx : cand)
          if (x[idx] > bv) {
            bv = x[idx];
            best = idx;
          }
        const std::size_t o = (c * oh + i) * ow + j;
        y[o] = bv;
        argmax[o] = best;
      }
  return y;
}

inline void maxpool2x2_backward(const std::vector<std::size_t>& argmax, const Tensor& gy,
                                Tensor& gx) {
  for (std::size_t o = 0; o < gy.size(); ++o) gx[argmax[o]] += gy[o];
}

inline Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values())
    if (v < 0.0) v = 0.0;
  return y;
}

inline void relu_backward(const Tensor& x, const Tensor& gy, Tensor& gx) {
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] > 0.0) gx[i] += gy[i];
}

inline Tensor flatten_forward(const Tensor& x) {
  return Tensor({x.size()}, x.values());
}

inline void flatten_backward(const Tensor& gy, Tensor& gx) {
  for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
}

}  // namespace logitguard
