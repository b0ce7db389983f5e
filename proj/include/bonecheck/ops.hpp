#pragma once

// Differentiable tensor operations recorded on a Tape.
//
// Convolutions use the cross-correlation convention (no kernel flip) with
// zero padding. ReLU's subgradient at exactly 0 is 0.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "bonecheck/error.hpp"
#include "bonecheck/tape.hpp"
#include "bonecheck/tensor.hpp"

namespace bonecheck {

namespace detail {

inline void require_rank(const char* op, const Shape& shape, std::size_t rank, const char* what = "input") {
  if (shape.size() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must be " + std::to_string(rank) + "-D, got shape " +
                     shape_string(shape));
  }
}

inline void require_axis(const char* op, const char* axis, std::size_t got, std::size_t expected) {
  if (got != expected) {
    throw ShapeError(std::string(op) + ": " + axis + " axis has size " + std::to_string(got) + ", expected " +
                     std::to_string(expected));
  }
}

inline std::size_t conv_out_size(const char* op, const char* axis, std::size_t in, std::size_t k,
                                 std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ShapeError(std::string(op) + ": stride must be positive");
  if (k > in + 2 * pad) {
    throw ShapeError(std::string(op) + ": kernel " + axis + " " + std::to_string(k) +
                     " is larger than the padded input " + axis + " " + std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

// Output positions o with 0 <= o*stride - pad + k < in form [lo, hi).
inline void valid_range(long in, long out, long stride, long pad, long k, long& lo, long& hi) {
  lo = pad - k > 0 ? (pad - k + stride - 1) / stride : 0;
  const long num = in - 1 + pad - k;
  hi = num < 0 ? 0 : std::min(out, num / stride + 1);
  if (hi < lo) hi = lo;
}

struct PlaneGeometry {
  long H, W, KH, KW, stride, pad, OH, OW;
};

// out += correlate(in, kernel)
template <typename T>
void correlate_plane(const T* in, const T* ker, T* out, const PlaneGeometry& g) {
  for (long ki = 0; ki < g.KH; ++ki) {
    long h0, h1;
    valid_range(g.H, g.OH, g.stride, g.pad, ki, h0, h1);
    for (long kj = 0; kj < g.KW; ++kj) {
      long w0, w1;
      valid_range(g.W, g.OW, g.stride, g.pad, kj, w0, w1);
      const T w = ker[ki * g.KW + kj];
      for (long oh = h0; oh < h1; ++oh) {
        const T* row = in + (oh * g.stride - g.pad + ki) * g.W;
        T* orow = out + oh * g.OW;
        if (g.stride == 1) {
          const T* src = row - g.pad + kj;
          for (long ow = w0; ow < w1; ++ow) orow[ow] += w * src[ow];
        } else {
          for (long ow = w0; ow < w1; ++ow) orow[ow] += w * row[ow * g.stride - g.pad + kj];
        }
      }
    }
  }
}

// grad_in += full-correlation of grad_out with kernel
template <typename T>
void correlate_plane_grad_input(const T* gout, const T* ker, T* gin, const PlaneGeometry& g) {
  for (long ki = 0; ki < g.KH; ++ki) {
    long h0, h1;
    valid_range(g.H, g.OH, g.stride, g.pad, ki, h0, h1);
    for (long kj = 0; kj < g.KW; ++kj) {
      long w0, w1;
      valid_range(g.W, g.OW, g.stride, g.pad, kj, w0, w1);
      const T w = ker[ki * g.KW + kj];
      for (long oh = h0; oh < h1; ++oh) {
        T* row = gin + (oh * g.stride - g.pad + ki) * g.W;
        const T* grow = gout + oh * g.OW;
        for (long ow = w0; ow < w1; ++ow) row[ow * g.stride - g.pad + kj] += w * grow[ow];
      }
    }
  }
}

// grad_ker += sum over output positions of grad_out * input
template <typename T>
void correlate_plane_grad_kernel(const T* in, const T* gout, T* gker, const PlaneGeometry& g) {
  for (long ki = 0; ki < g.KH; ++ki) {
    long h0, h1;
    valid_range(g.H, g.OH, g.stride, g.pad, ki, h0, h1);
    for (long kj = 0; kj < g.KW; ++kj) {
      long w0, w1;
      valid_range(g.W, g.OW, g.stride, g.pad, kj, w0, w1);
      T acc = 0;
      for (long oh = h0; oh < h1; ++oh) {
        const T* row = in + (oh * g.stride - g.pad + ki) * g.W;
        const T* grow = gout + oh * g.OW;
        for (long ow = w0; ow < w1; ++ow) acc += grow[ow] * row[ow * g.stride - g.pad + kj];
      }
      gker[ki * g.KW + kj] += acc;
    }
  }
}

template <typename T>
Tape<T>* common_tape(std::initializer_list<const Var<T>*> vars) {
  Tape<T>* tape = nullptr;
  for (const Var<T>* v : vars) {
    if (!v->valid()) throw InvalidArgument("empty tensor handle passed to an operation");
    if (tape && v->tape() != tape) throw InvalidArgument("operation inputs live on different tapes");
    tape = v->tape();
  }
  return tape;
}

}  // namespace detail

/// 2-D convolution: input (N,Cin,H,W), kernel (Cout,Cin,kh,kw), bias (Cout).
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, std::size_t stride,
              std::size_t padding) {
  Tape<T>* tape = detail::common_tape({&input, &kernel, &bias});
  const Shape xs = input.shape();
  const Shape ks = kernel.shape();
  detail::require_rank("conv2d", xs, 4);
  detail::require_rank("conv2d", ks, 4, "kernel");
  detail::require_axis("conv2d", "input channel (axis 1)", xs[1], ks[1]);
  detail::require_rank("conv2d", bias.shape(), 1, "bias");
  detail::require_axis("conv2d", "bias (axis 0)", bias.shape()[0], ks[0]);
  const std::size_t N = xs[0], Cin = xs[1], Cout = ks[0];
  const std::size_t OH = detail::conv_out_size("conv2d", "height", xs[2], ks[2], stride, padding);
  const std::size_t OW = detail::conv_out_size("conv2d", "width", xs[3], ks[3], stride, padding);
  const detail::PlaneGeometry g{static_cast<long>(xs[2]), static_cast<long>(xs[3]), static_cast<long>(ks[2]),
                                static_cast<long>(ks[3]), static_cast<long>(stride), static_cast<long>(padding),
                                static_cast<long>(OH), static_cast<long>(OW)};
  const std::size_t in_plane = xs[2] * xs[3], out_plane = OH * OW, kplane = ks[2] * ks[3];

  Tensor<T> out({N, Cout, OH, OW});
  {
    const T* x = input.value().data();
    const T* k = kernel.value().data();
    const T* b = bias.value().data();
    T* o = out.data();
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t co = 0; co < Cout; ++co) {
        T* op = o + (n * Cout + co) * out_plane;
        std::fill(op, op + out_plane, b[co]);
        for (std::size_t ci = 0; ci < Cin; ++ci) {
          detail::correlate_plane(x + (n * Cin + ci) * in_plane, k + (co * Cin + ci) * kplane, op, g);
        }
      }
    }
  }

  return tape->record(std::move(out), {input, kernel, bias}, [=](const BackwardContext<T>& ctx) {
    const T* x = ctx.inputs[0]->data();
    const T* k = ctx.inputs[1]->data();
    const T* go = ctx.grad_output.data();
    if (Tensor<T>* gx = ctx.grad_inputs[0]) {
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Cout; ++co)
          for (std::size_t ci = 0; ci < Cin; ++ci)
            detail::correlate_plane_grad_input(go + (n * Cout + co) * out_plane, k + (co * Cin + ci) * kplane,
                                               gx->data() + (n * Cin + ci) * in_plane, g);
    }
    if (Tensor<T>* gk = ctx.grad_inputs[1]) {
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Cout; ++co)
          for (std::size_t ci = 0; ci < Cin; ++ci)
            detail::correlate_plane_grad_kernel(x + (n * Cin + ci) * in_plane, go + (n * Cout + co) * out_plane,
                                                gk->data() + (co * Cin + ci) * kplane, g);
    }
    if (Tensor<T>* gb = ctx.grad_inputs[2]) {
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Cout; ++co) {
          const T* p = go + (n * Cout + co) * out_plane;
          T acc = 0;
          for (std::size_t i = 0; i < out_plane; ++i) acc += p[i];
          (*gb)[co] += acc;
        }
    }
  });
}

/// Per-channel convolution: input (N,C,H,W), kernel (C,1,kh,kw), bias (C).
template <typename T>
Var<T> depthwise_conv2d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, std::size_t stride,
                        std::size_t padding) {
  Tape<T>* tape = detail::common_tape({&input, &kernel, &bias});
  const Shape xs = input.shape();
  const Shape ks = kernel.shape();
  detail::require_rank("depthwise_conv2d", xs, 4);
  detail::require_rank("depthwise_conv2d", ks, 4, "kernel");
  detail::require_axis("depthwise_conv2d", "kernel channel (axis 0)", ks[0], xs[1]);
  detail::require_axis("depthwise_conv2d", "kernel multiplier (axis 1)", ks[1], 1);
  detail::require_rank("depthwise_conv2d", bias.shape(), 1, "bias");
  detail::require_axis("depthwise_conv2d", "bias (axis 0)", bias.shape()[0], xs[1]);
  const std::size_t N = xs[0], C = xs[1];
  const std::size_t OH = detail::conv_out_size("depthwise_conv2d", "height", xs[2], ks[2], stride, padding);
  const std::size_t OW = detail::conv_out_size("depthwise_conv2d", "width", xs[3], ks[3], stride, padding);
  const detail::PlaneGeometry g{static_cast<long>(xs[2]), static_cast<long>(xs[3]), static_cast<long>(ks[2]),
                                static_cast<long>(ks[3]), static_cast<long>(stride), static_cast<long>(padding),
                                static_cast<long>(OH), static_cast<long>(OW)};
  const std::size_t in_plane = xs[2] * xs[3], out_plane = OH * OW, kplane = ks[2] * ks[3];

  Tensor<T> out({N, C, OH, OW});
  {
    const T* x = input.value().data();
    const T* k = kernel.value().data();
    const T* b = bias.value().data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        T* op = out.data() + (n * C + c) * out_plane;
        std::fill(op, op + out_plane, b[c]);
        detail::correlate_plane(x + (n * C + c) * in_plane, k + c * kplane, op, g);
      }
  }

  return tape->record(std::move(out), {input, kernel, bias}, [=](const BackwardContext<T>& ctx) {
    const T* x = ctx.inputs[0]->data();
    const T* k = ctx.inputs[1]->data();
    const T* go = ctx.grad_output.data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const T* gplane = go + (n * C + c) * out_plane;
        if (Tensor<T>* gx = ctx.grad_inputs[0])
          detail::correlate_plane_grad_input(gplane, k + c * kplane, gx->data() + (n * C + c) * in_plane, g);
        if (Tensor<T>* gk = ctx.grad_inputs[1])
          detail::correlate_plane_grad_kernel(x + (n * C + c) * in_plane, gplane, gk->data() + c * kplane, g);
        if (Tensor<T>* gb = ctx.grad_inputs[2]) {
          T acc = 0;
          for (std::size_t i = 0; i < out_plane; ++i) acc += gplane[i];
          (*gb)[c] += acc;
        }
      }
  });
}

/// Depthwise convolution followed by a 1x1 pointwise convolution.
template <typename T>
Var<T> depthwise_separable_conv2d(const Var<T>& input, const Var<T>& depthwise_kernel, const Var<T>& depthwise_bias,
                                  const Var<T>& pointwise_kernel, const Var<T>& pointwise_bias, std::size_t stride,
                                  std::size_t padding) {
  const Shape& pk = pointwise_kernel.shape();
  detail::require_rank("depthwise_separable_conv2d", pk, 4, "pointwise kernel");
  if (pk[2] != 1 || pk[3] != 1) {
    throw ShapeError("depthwise_separable_conv2d: pointwise kernel must be 1x1, got shape " + shape_string(pk));
  }
  auto mid = depthwise_conv2d(input, depthwise_kernel, depthwise_bias, stride, padding);
  return conv2d(mid, pointwise_kernel, pointwise_bias, 1, 0);
}

/// (N,C,H,W) -> (N,C): spatial mean per channel.
template <typename T>
Var<T> global_average_pool(const Var<T>& input) {
  Tape<T>* tape = detail::common_tape({&input});
  const Shape xs = input.shape();
  detail::require_rank("global_average_pool", xs, 4);
  const std::size_t N = xs[0], C = xs[1], plane = xs[2] * xs[3];
  const T inv = T{1} / static_cast<T>(plane);
  Tensor<T> out({N, C});
  const T* x = input.value().data();
  for (std::size_t i = 0; i < N * C; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < plane; ++j) acc += x[i * plane + j];
    out[i] = acc * inv;
  }
  return tape->record(std::move(out), {input}, [=](const BackwardContext<T>& ctx) {
    Tensor<T>* gx = ctx.grad_inputs[0];
    for (std::size_t i = 0; i < N * C; ++i) {
      const T g = ctx.grad_output[i] * inv;
      T* p = gx->data() + i * plane;
      for (std::size_t j = 0; j < plane; ++j) p[j] += g;
    }
  });
}

/// (N,C) x (C,M) + (M) -> (N,M).
template <typename T>
Var<T> affine(const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
  Tape<T>* tape = detail::common_tape({&input, &weight, &bias});
  const Shape xs = input.shape();
  const Shape ws = weight.shape();
  detail::require_rank("affine", xs, 2);
  detail::require_rank("affine", ws, 2, "weight");
  detail::require_axis("affine", "weight input (axis 0)", ws[0], xs[1]);
  detail::require_rank("affine", bias.shape(), 1, "bias");
  detail::require_axis("affine", "bias (axis 0)", bias.shape()[0], ws[1]);
  const std::size_t N = xs[0], C = xs[1], M = ws[1];
  Tensor<T> out({N, M});
  const T* x = input.value().data();
  const T* w = weight.value().data();
  const T* b = bias.value().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t m = 0; m < M; ++m) {
      T acc = b[m];
      for (std::size_t c = 0; c < C; ++c) acc += x[n * C + c] * w[c * M + m];
      out[n * M + m] = acc;
    }
  return tape->record(std::move(out), {input, weight, bias}, [=](const BackwardContext<T>& ctx) {
    const T* x = ctx.inputs[0]->data();
    const T* w = ctx.inputs[1]->data();
    const T* go = ctx.grad_output.data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t m = 0; m < M; ++m) {
        const T g = go[n * M + m];
        if (Tensor<T>* gx = ctx.grad_inputs[0])
          for (std::size_t c = 0; c < C; ++c) (*gx)[n * C + c] += g * w[c * M + m];
        if (Tensor<T>* gw = ctx.grad_inputs[1])
          for (std::size_t c = 0; c < C; ++c) (*gw)[c * M + m] += g * x[n * C + c];
        if (Tensor<T>* gb = ctx.grad_inputs[2]) (*gb)[m] += g;
      }
  });
}

/// Logistic function 1/(1+e^-z), evaluated without overflow. Results are kept
/// strictly inside (0,1).
template <typename T>
T logistic(T z) {
  T s;
  if (z >= 0) {
    s = T{1} / (T{1} + std::exp(-z));
  } else {
    const T e = std::exp(z);
    s = e / (T{1} + e);
  }
  constexpr T lo = std::numeric_limits<T>::min();
  constexpr T hi = T{1} - std::numeric_limits<T>::epsilon() / 2;
  return std::clamp(s, lo, hi);
}

template <typename T>
Var<T> sigmoid(const Var<T>& z) {
  Tape<T>* tape = detail::common_tape({&z});
  Tensor<T> out(z.shape());
  const auto in = z.value().values();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = logistic(in[i]);
  return tape->record(std::move(out), {z}, [](const BackwardContext<T>& ctx) {
    Tensor<T>& gz = *ctx.grad_inputs[0];
    for (std::size_t i = 0; i < gz.size(); ++i) {
      const T s = ctx.output[i];
      gz[i] += ctx.grad_output[i] * s * (T{1} - s);
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tape<T>* tape = detail::common_tape({&x});
  Tensor<T> out(x.shape());
  const auto in = x.value().values();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0 ? in[i] : T{0};
  return tape->record(std::move(out), {x}, [](const BackwardContext<T>& ctx) {
    Tensor<T>& gx = *ctx.grad_inputs[0];
    const Tensor<T>& in = *ctx.inputs[0];
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (in[i] > 0) gx[i] += ctx.grad_output[i];
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tape<T>* tape = detail::common_tape({&a, &b});
  if (a.shape() != b.shape()) {
    throw ShapeError("add: operand shapes differ, " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor<T> out = a.value();
  const auto bv = b.value().values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape->record(std::move(out), {a, b}, [](const BackwardContext<T>& ctx) {
    for (Tensor<T>* g : ctx.grad_inputs)
      if (g)
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_output[i];
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tape<T>* tape = detail::common_tape({&a, &b});
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: operand shapes differ, " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor<T> out = a.value();
  const auto bv = b.value().values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tape->record(std::move(out), {a, b}, [](const BackwardContext<T>& ctx) {
    if (Tensor<T>* ga = ctx.grad_inputs[0])
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += ctx.grad_output[i] * (*ctx.inputs[1])[i];
    if (Tensor<T>* gb = ctx.grad_inputs[1])
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += ctx.grad_output[i] * (*ctx.inputs[0])[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tape<T>* tape = detail::common_tape({&x});
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v *= factor;
  return tape->record(std::move(out), {x}, [factor](const BackwardContext<T>& ctx) {
    Tensor<T>& g = *ctx.grad_inputs[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * ctx.grad_output[i];
  });
}

/// Sum of all elements, as a shape-(1) tensor.
template <typename T>
Var<T> sum(const Var<T>& x) {
  Tape<T>* tape = detail::common_tape({&x});
  T acc = 0;
  for (T v : x.value().values()) acc += v;
  return tape->record(Tensor<T>::scalar(acc), {x}, [](const BackwardContext<T>& ctx) {
    Tensor<T>& g = *ctx.grad_inputs[0];
    const T go = ctx.grad_output[0];
    for (auto& v : g.values()) v += go;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

/// Concatenates 4-D tensors along the channel axis.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape<T>* tape = parts.front().tape();
  const Shape first = parts.front().shape();
  detail::require_rank("concat", first, 4);
  std::size_t C = 0;
  std::vector<std::size_t> channels;
  for (const auto& p : parts) {
    if (p.tape() != tape) throw InvalidArgument("concat: inputs live on different tapes");
    const Shape& s = p.shape();
    detail::require_rank("concat", s, 4);
    detail::require_axis("concat", "batch (axis 0)", s[0], first[0]);
    detail::require_axis("concat", "height (axis 2)", s[2], first[2]);
    detail::require_axis("concat", "width (axis 3)", s[3], first[3]);
    channels.push_back(s[1]);
    C += s[1];
  }
  const std::size_t N = first[0], plane = first[2] * first[3];
  Tensor<T> out({N, C, first[2], first[3]});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const T* src = parts[k].value().data();
    for (std::size_t n = 0; n < N; ++n)
      std::copy_n(src + n * channels[k] * plane, channels[k] * plane, out.data() + (n * C + offset) * plane);
    offset += channels[k];
  }
  return tape->record(std::move(out), parts, [=](const BackwardContext<T>& ctx) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < channels.size(); ++k) {
      if (Tensor<T>* g = ctx.grad_inputs[k]) {
        for (std::size_t n = 0; n < N; ++n) {
          const T* src = ctx.grad_output.data() + (n * C + off) * plane;
          T* dst = g->data() + n * channels[k] * plane;
          for (std::size_t i = 0; i < channels[k] * plane; ++i) dst[i] += src[i];
        }
      }
      off += channels[k];
    }
  });
}

/// Average pooling; padded cells count as zeros in the window mean.
template <typename T>
Var<T> avg_pool2d(const Var<T>& input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  Tape<T>* tape = detail::common_tape({&input});
  const Shape xs = input.shape();
  detail::require_rank("avg_pool2d", xs, 4);
  const std::size_t OH = detail::conv_out_size("avg_pool2d", "height", xs[2], kernel, stride, padding);
  const std::size_t OW = detail::conv_out_size("avg_pool2d", "width", xs[3], kernel, stride, padding);
  const detail::PlaneGeometry g{static_cast<long>(xs[2]), static_cast<long>(xs[3]), static_cast<long>(kernel),
                                static_cast<long>(kernel), static_cast<long>(stride), static_cast<long>(padding),
                                static_cast<long>(OH), static_cast<long>(OW)};
  const std::size_t planes = xs[0] * xs[1], in_plane = xs[2] * xs[3], out_plane = OH * OW;
  const std::vector<T> window(kernel * kernel, T{1} / static_cast<T>(kernel * kernel));
  Tensor<T> out({xs[0], xs[1], OH, OW});
  const T* x = input.value().data();
  for (std::size_t p = 0; p < planes; ++p)
    detail::correlate_plane(x + p * in_plane, window.data(), out.data() + p * out_plane, g);
  return tape->record(std::move(out), {input}, [=](const BackwardContext<T>& ctx) {
    Tensor<T>* gx = ctx.grad_inputs[0];
    for (std::size_t p = 0; p < planes; ++p)
      detail::correlate_plane_grad_input(ctx.grad_output.data() + p * out_plane, window.data(),
                                         gx->data() + p * in_plane, g);
  });
}

/// Max pooling; padded cells never win.
template <typename T>
Var<T> max_pool2d(const Var<T>& input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  Tape<T>* tape = detail::common_tape({&input});
  const Shape xs = input.shape();
  detail::require_rank("max_pool2d", xs, 4);
  if (padding >= kernel) throw ShapeError("max_pool2d: padding must be smaller than the kernel");
  const std::size_t OH = detail::conv_out_size("max_pool2d", "height", xs[2], kernel, stride, padding);
  const std::size_t OW = detail::conv_out_size("max_pool2d", "width", xs[3], kernel, stride, padding);
  const long H = static_cast<long>(xs[2]), W = static_cast<long>(xs[3]);
  const std::size_t planes = xs[0] * xs[1], in_plane = xs[2] * xs[3], out_plane = OH * OW;
  Tensor<T> out({xs[0], xs[1], OH, OW});
  std::vector<std::size_t> argmax(planes * out_plane);
  const T* x = input.value().data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = 0;
        bool found = false;
        for (std::size_t ki = 0; ki < kernel; ++ki) {
          const long ih = static_cast<long>(oh * stride + ki) - static_cast<long>(padding);
          if (ih < 0 || ih >= H) continue;
          for (std::size_t kj = 0; kj < kernel; ++kj) {
            const long iw = static_cast<long>(ow * stride + kj) - static_cast<long>(padding);
            if (iw < 0 || iw >= W) continue;
            const std::size_t idx = static_cast<std::size_t>(ih * W + iw);
            const T v = x[p * in_plane + idx];
            if (!found || v > best) {
              best = v;
              best_idx = idx;
              found = true;
            }
          }
        }
        out[p * out_plane + oh * OW + ow] = best;
        argmax[p * out_plane + oh * OW + ow] = best_idx;
      }
  return tape->record(std::move(out), {input}, [=, argmax = std::move(argmax)](const BackwardContext<T>& ctx) {
    Tensor<T>* gx = ctx.grad_inputs[0];
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t o = 0; o < out_plane; ++o)
        (*gx)[p * in_plane + argmax[p * out_plane + o]] += ctx.grad_output[p * out_plane + o];
  });
}

/// Elementwise arithmetic mean of same-shaped tensors.
template <typename T>
Var<T> average(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("average: no inputs");
  Tape<T>* tape = parts.front().tape();
  const Shape s = parts.front().shape();
  Tensor<T> out(s);
  for (const auto& p : parts) {
    if (p.tape() != tape) throw InvalidArgument("average: inputs live on different tapes");
    if (p.shape() != s) {
      throw ShapeError("average: input shapes differ, " + shape_string(s) + " vs " + shape_string(p.shape()));
    }
    const auto v = p.value().values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
  }
  const T inv = T{1} / static_cast<T>(parts.size());
  for (auto& v : out.values()) v *= inv;
  return tape->record(std::move(out), parts, [inv](const BackwardContext<T>& ctx) {
    for (Tensor<T>* g : ctx.grad_inputs)
      if (g)
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += inv * ctx.grad_output[i];
  });
}

/// Weighted binary cross-entropy on probabilities:
///   mean_i w_i * (-y_i log p_i - (1 - y_i) log(1 - p_i)).
/// y = 1 marks the normal class.
template <typename T>
Var<T> weighted_bce(const Var<T>& probabilities, std::span<const T> labels, std::span<const T> weights) {
  Tape<T>* tape = detail::common_tape({&probabilities});
  const auto p = probabilities.value().values();
  if (p.size() != labels.size() || p.size() != weights.size()) {
    throw ShapeError("bce_loss: " + std::to_string(p.size()) + " probabilities, " + std::to_string(labels.size()) +
                     " labels, " + std::to_string(weights.size()) + " weights");
  }
  T acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] > 0 && p[i] < 1)) {
      throw NumericError("bce_loss: probability " + std::to_string(p[i]) + " at index " + std::to_string(i) +
                         " is outside (0,1)");
    }
    acc += weights[i] * (-labels[i] * std::log(p[i]) - (T{1} - labels[i]) * std::log(T{1} - p[i]));
  }
  const T inv = T{1} / static_cast<T>(p.size());
  std::vector<T> y(labels.begin(), labels.end());
  std::vector<T> w(weights.begin(), weights.end());
  return tape->record(Tensor<T>::scalar(acc * inv), {probabilities},
                      [inv, y = std::move(y), w = std::move(w)](const BackwardContext<T>& ctx) {
                        Tensor<T>& g = *ctx.grad_inputs[0];
                        const Tensor<T>& pv = *ctx.inputs[0];
                        const T go = ctx.grad_output[0] * inv;
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          g[i] += go * w[i] * (-y[i] / pv[i] + (T{1} - y[i]) / (T{1} - pv[i]));
                        }
                      });
}

}  // namespace bonecheck
