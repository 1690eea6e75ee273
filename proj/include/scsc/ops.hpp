#pragma once

// Pure numerical primitives on Tensor4 and their hand-written adjoints.
//
// Conventions:
//   * conv weights are (C_out, C_in, v, v); depthwise weights are (C, 1, v, v);
//     pointwise and linear weights are (C_out, C_in, 1, 1).
//   * per-channel vectors (bias, norm affine, norm statistics) are (1, C, 1, 1).
//   * batched matrices are (B, 1, rows, cols).
// Every function returns a new tensor; inputs are never modified.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "scsc/tensor.hpp"

namespace scsc {

// ---------------------------------------------------------------------------
// Multiply-add instrumentation

/// Multiply-adds executed by the primitives while a MaddCounting scope is live.
/// The gated branch fusion is tallied separately so callers can include or
/// exclude it.
struct MaddTally {
  std::uint64_t linear = 0;
  std::uint64_t fusion = 0;
  [[nodiscard]] std::uint64_t total(bool include_fusion = true) const {
    return linear + (include_fusion ? fusion : 0);
  }
};

namespace detail {
inline thread_local MaddTally* active_tally = nullptr;

inline void count_linear(std::uint64_t m) {
  if (active_tally != nullptr) active_tally->linear += m;
}
inline void count_fusion(std::uint64_t m) {
  if (active_tally != nullptr) active_tally->fusion += m;
}
}  // namespace detail

/// RAII scope that routes the current thread's primitive madd counts into a tally.
class MaddCounting {
 public:
  MaddCounting() : previous_(detail::active_tally) { detail::active_tally = &tally_; }
  ~MaddCounting() { detail::active_tally = previous_; }
  MaddCounting(const MaddCounting&) = delete;
  MaddCounting& operator=(const MaddCounting&) = delete;

  [[nodiscard]] const MaddTally& tally() const noexcept { return tally_; }

 private:
  MaddTally tally_;
  MaddTally* previous_;
};

// ---------------------------------------------------------------------------
// Convolution geometry

enum class PadMode { Zero, Circular };

/// "Same" padding of (kernel-1)/2 per side; output extent is ceil(in/stride).
struct ConvSpec {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  PadMode pad = PadMode::Zero;

  void validate() const {
    if (kernel == 0 || kernel % 2 == 0) {
      throw ConfigError("ConvSpec: kernel must be odd and >= 1, got " + std::to_string(kernel));
    }
    if (stride == 0) throw ConfigError("ConvSpec: stride must be >= 1");
  }
  [[nodiscard]] std::size_t padding() const noexcept { return (kernel - 1) / 2; }
  [[nodiscard]] std::size_t out_extent(std::size_t in) const noexcept { return (in + stride - 1) / stride; }
};

namespace detail {

/// Input coordinate read by output coordinate `o` at kernel tap `tap`, or -1
/// when the tap falls in the zero padding.
inline std::ptrdiff_t source_index(std::size_t o, std::size_t tap, const ConvSpec& spec, std::size_t extent) {
  const auto e = static_cast<std::ptrdiff_t>(extent);
  std::ptrdiff_t i = static_cast<std::ptrdiff_t>(o * spec.stride + tap) - static_cast<std::ptrdiff_t>(spec.padding());
  if (i >= 0 && i < e) return i;
  if (spec.pad == PadMode::Zero) return -1;
  i %= e;
  return i < 0 ? i + e : i;
}

/// source_index for every (output, tap) pair along one axis, row-major.
inline std::vector<std::ptrdiff_t> tap_table(std::size_t out_extent, const ConvSpec& spec, std::size_t extent) {
  std::vector<std::ptrdiff_t> t(out_extent * spec.kernel);
  for (std::size_t o = 0; o < out_extent; ++o) {
    for (std::size_t k = 0; k < spec.kernel; ++k) t[o * spec.kernel + k] = source_index(o, k, spec, extent);
  }
  return t;
}

inline void require_channel_vector(const Tensor4& v, std::size_t channels, const char* what) {
  const Shape want{1, channels, 1, 1};
  if (v.shape() != want) {
    throw DimensionError(std::string(what) + ": expected " + want.str() + ", got " + v.shape().str());
  }
}

inline void require_channels(const Tensor4& x, std::size_t channels, const char* what) {
  if (x.shape().c != channels) {
    throw DimensionError(std::string(what) + ": input has " + std::to_string(x.shape().c) +
                         " channels, weights expect " + std::to_string(channels));
  }
}

}  // namespace detail

struct ConvGrads {
  Tensor4 dx;
  Tensor4 dw;
  Tensor4 db;
};

// ---------------------------------------------------------------------------
// Dense convolution (reference)

inline Tensor4 conv2d_dense(const Tensor4& x, const Tensor4& w, const Tensor4& b, const ConvSpec& spec) {
  spec.validate();
  const Shape ws = w.shape();
  if (ws.h != spec.kernel || ws.w != spec.kernel) {
    throw DimensionError("conv2d_dense: weight spatial extent " + ws.str() + " does not match kernel " +
                         std::to_string(spec.kernel));
  }
  detail::require_channels(x, ws.c, "conv2d_dense");
  detail::require_channel_vector(b, ws.n, "conv2d_dense bias");

  const Shape xs = x.shape();
  const Shape os{xs.n, ws.n, spec.out_extent(xs.h), spec.out_extent(xs.w)};
  Tensor4 out(os);
  const std::size_t K = spec.kernel;
  const auto ty = detail::tap_table(os.h, spec, xs.h);
  const auto tx = detail::tap_table(os.w, spec, xs.w);
  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t co = 0; co < os.c; ++co) {
      for (std::size_t oh = 0; oh < os.h; ++oh) {
        for (std::size_t ow = 0; ow < os.w; ++ow) {
          double acc = b[co];
          for (std::size_t ci = 0; ci < ws.c; ++ci) {
            const double* xp = x.raw() + x.index(n, ci, 0, 0);
            const double* wp = w.raw() + w.index(co, ci, 0, 0);
            for (std::size_t ky = 0; ky < K; ++ky) {
              const auto iy = ty[oh * K + ky];
              if (iy < 0) continue;
              for (std::size_t kx = 0; kx < K; ++kx) {
                const auto ix = tx[ow * K + kx];
                if (ix < 0) continue;
                acc += wp[ky * K + kx] * xp[static_cast<std::size_t>(iy) * xs.w + static_cast<std::size_t>(ix)];
              }
            }
          }
          out(n, co, oh, ow) = acc;
        }
      }
    }
  }
  detail::count_linear(static_cast<std::uint64_t>(os.n) * os.plane() * os.c * ws.c * spec.kernel * spec.kernel);
  return out;
}

inline ConvGrads conv2d_dense_backward(const Tensor4& x, const Tensor4& w, const Tensor4& gout,
                                       const ConvSpec& spec) {
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  const Shape os = gout.shape();
  ConvGrads g{Tensor4(xs), Tensor4(ws), Tensor4(Shape{1, ws.n, 1, 1})};
  const std::size_t K = spec.kernel;
  const auto ty = detail::tap_table(os.h, spec, xs.h);
  const auto tx = detail::tap_table(os.w, spec, xs.w);
  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t co = 0; co < os.c; ++co) {
      for (std::size_t oh = 0; oh < os.h; ++oh) {
        for (std::size_t ow = 0; ow < os.w; ++ow) {
          const double go = gout(n, co, oh, ow);
          g.db[co] += go;
          for (std::size_t ci = 0; ci < ws.c; ++ci) {
            const double* xp = x.raw() + x.index(n, ci, 0, 0);
            double* dxp = g.dx.raw() + g.dx.index(n, ci, 0, 0);
            const double* wp = w.raw() + w.index(co, ci, 0, 0);
            double* dwp = g.dw.raw() + g.dw.index(co, ci, 0, 0);
            for (std::size_t ky = 0; ky < K; ++ky) {
              const auto iy = ty[oh * K + ky];
              if (iy < 0) continue;
              for (std::size_t kx = 0; kx < K; ++kx) {
                const auto ix = tx[ow * K + kx];
                if (ix < 0) continue;
                const std::size_t at = static_cast<std::size_t>(iy) * xs.w + static_cast<std::size_t>(ix);
                dwp[ky * K + kx] += go * xp[at];
                dxp[at] += go * wp[ky * K + kx];
              }
            }
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pointwise (1x1) convolution

inline Tensor4 conv2d_pointwise(const Tensor4& x, const Tensor4& w, const Tensor4& b, std::size_t stride = 1) {
  const Shape ws = w.shape();
  if (ws.h != 1 || ws.w != 1) {
    throw DimensionError("conv2d_pointwise: weights must be (C_out, C_in, 1, 1), got " + ws.str());
  }
  if (stride == 0) throw ConfigError("conv2d_pointwise: stride must be >= 1");
  detail::require_channels(x, ws.c, "conv2d_pointwise");
  detail::require_channel_vector(b, ws.n, "conv2d_pointwise bias");

  const Shape xs = x.shape();
  const Shape os{xs.n, ws.n, (xs.h + stride - 1) / stride, (xs.w + stride - 1) / stride};
  Tensor4 out(os);
  std::vector<double> sampled(os.plane());
  for (std::size_t n = 0; n < os.n; ++n) {
    double* obase = out.raw() + out.index(n, 0, 0, 0);
    for (std::size_t co = 0; co < os.c; ++co) {
      std::fill(obase + co * os.plane(), obase + (co + 1) * os.plane(), b[co]);
    }
    for (std::size_t ci = 0; ci < ws.c; ++ci) {
      const double* src = x.raw() + x.index(n, ci, 0, 0);
      if (stride != 1) {
        for (std::size_t oh = 0; oh < os.h; ++oh) {
          for (std::size_t ow = 0; ow < os.w; ++ow) sampled[oh * os.w + ow] = src[oh * stride * xs.w + ow * stride];
        }
        src = sampled.data();
      }
      for (std::size_t co = 0; co < os.c; ++co) {
        const double wv = w(co, ci, 0, 0);
        double* dst = obase + co * os.plane();
        for (std::size_t p = 0; p < os.plane(); ++p) dst[p] += wv * src[p];
      }
    }
  }
  detail::count_linear(static_cast<std::uint64_t>(os.n) * os.plane() * os.c * ws.c);
  return out;
}

inline ConvGrads conv2d_pointwise_backward(const Tensor4& x, const Tensor4& w, const Tensor4& gout,
                                           std::size_t stride = 1) {
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  const Shape os = gout.shape();
  ConvGrads g{Tensor4(xs), Tensor4(ws), Tensor4(Shape{1, ws.n, 1, 1})};
  std::vector<double> sampled(os.plane());
  std::vector<double> dsampled(os.plane());
  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t co = 0; co < os.c; ++co) {
      const double* go = gout.raw() + gout.index(n, co, 0, 0);
      double s = 0.0;
      for (std::size_t p = 0; p < os.plane(); ++p) s += go[p];
      g.db[co] += s;
    }
    for (std::size_t ci = 0; ci < ws.c; ++ci) {
      const double* src = x.raw() + x.index(n, ci, 0, 0);
      if (stride != 1) {
        for (std::size_t oh = 0; oh < os.h; ++oh) {
          for (std::size_t ow = 0; ow < os.w; ++ow) sampled[oh * os.w + ow] = src[oh * stride * xs.w + ow * stride];
        }
        src = sampled.data();
      }
      std::fill(dsampled.begin(), dsampled.end(), 0.0);
      for (std::size_t co = 0; co < os.c; ++co) {
        const double* go = gout.raw() + gout.index(n, co, 0, 0);
        const double wv = w(co, ci, 0, 0);
        double dw = 0.0;
        for (std::size_t p = 0; p < os.plane(); ++p) {
          dw += go[p] * src[p];
          dsampled[p] += go[p] * wv;
        }
        g.dw(co, ci, 0, 0) += dw;
      }
      for (std::size_t oh = 0; oh < os.h; ++oh) {
        for (std::size_t ow = 0; ow < os.w; ++ow) {
          g.dx(n, ci, oh * stride, ow * stride) += dsampled[oh * os.w + ow];
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Depthwise convolution

inline Tensor4 conv2d_depthwise(const Tensor4& x, const Tensor4& w, const Tensor4& b, const ConvSpec& spec) {
  spec.validate();
  const Shape ws = w.shape();
  if (ws.c != 1 || ws.h != spec.kernel || ws.w != spec.kernel) {
    throw DimensionError("conv2d_depthwise: weights must be (C, 1, " + std::to_string(spec.kernel) + ", " +
                         std::to_string(spec.kernel) + "), got " + ws.str());
  }
  detail::require_channels(x, ws.n, "conv2d_depthwise");
  detail::require_channel_vector(b, ws.n, "conv2d_depthwise bias");

  const Shape xs = x.shape();
  const Shape os{xs.n, xs.c, spec.out_extent(xs.h), spec.out_extent(xs.w)};
  Tensor4 out(os);
  const std::size_t K = spec.kernel;
  const auto ty = detail::tap_table(os.h, spec, xs.h);
  const auto tx = detail::tap_table(os.w, spec, xs.w);
  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t c = 0; c < os.c; ++c) {
      const double* xp = x.raw() + x.index(n, c, 0, 0);
      const double* wp = w.raw() + w.index(c, 0, 0, 0);
      for (std::size_t oh = 0; oh < os.h; ++oh) {
        for (std::size_t ow = 0; ow < os.w; ++ow) {
          double acc = b[c];
          for (std::size_t ky = 0; ky < K; ++ky) {
            const auto iy = ty[oh * K + ky];
            if (iy < 0) continue;
            for (std::size_t kx = 0; kx < K; ++kx) {
              const auto ix = tx[ow * K + kx];
              if (ix < 0) continue;
              acc += wp[ky * K + kx] * xp[static_cast<std::size_t>(iy) * xs.w + static_cast<std::size_t>(ix)];
            }
          }
          out(n, c, oh, ow) = acc;
        }
      }
    }
  }
  detail::count_linear(static_cast<std::uint64_t>(os.n) * os.plane() * os.c * spec.kernel * spec.kernel);
  return out;
}

inline ConvGrads conv2d_depthwise_backward(const Tensor4& x, const Tensor4& w, const Tensor4& gout,
                                           const ConvSpec& spec) {
  const Shape xs = x.shape();
  const Shape os = gout.shape();
  ConvGrads g{Tensor4(xs), Tensor4(w.shape()), Tensor4(Shape{1, xs.c, 1, 1})};
  const std::size_t K = spec.kernel;
  const auto ty = detail::tap_table(os.h, spec, xs.h);
  const auto tx = detail::tap_table(os.w, spec, xs.w);
  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t c = 0; c < os.c; ++c) {
      const double* xp = x.raw() + x.index(n, c, 0, 0);
      double* dxp = g.dx.raw() + g.dx.index(n, c, 0, 0);
      const double* wp = w.raw() + w.index(c, 0, 0, 0);
      double* dwp = g.dw.raw() + g.dw.index(c, 0, 0, 0);
      for (std::size_t oh = 0; oh < os.h; ++oh) {
        for (std::size_t ow = 0; ow < os.w; ++ow) {
          const double go = gout(n, c, oh, ow);
          g.db[c] += go;
          for (std::size_t ky = 0; ky < K; ++ky) {
            const auto iy = ty[oh * K + ky];
            if (iy < 0) continue;
            for (std::size_t kx = 0; kx < K; ++kx) {
              const auto ix = tx[ow * K + kx];
              if (ix < 0) continue;
              const std::size_t at = static_cast<std::size_t>(iy) * xs.w + static_cast<std::size_t>(ix);
              dwp[ky * K + kx] += go * xp[at];
              dxp[at] += go * wp[ky * K + kx];
            }
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor4 add(const Tensor4& a, const Tensor4& b) {
  Tensor4 out = a;
  out += b;
  return out;
}

inline Tensor4 scale(const Tensor4& a, double s) {
  Tensor4 out = a;
  out *= s;
  return out;
}

inline Tensor4 hadamard(const Tensor4& a, const Tensor4& b) {
  a.require_same(b, "hadamard");
  Tensor4 out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

inline double sigmoid_scalar(double v) {
  // Split by sign so exp never overflows.
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor4 sigmoid(const Tensor4& x) {
  Tensor4 out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid_scalar(x[i]);
  return out;
}

/// Adjoint of sigmoid given its output y.
inline Tensor4 sigmoid_backward(const Tensor4& y, const Tensor4& gout) {
  Tensor4 dx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = gout[i] * y[i] * (1.0 - y[i]);
  return dx;
}

inline Tensor4 relu(const Tensor4& x) {
  Tensor4 out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return out;
}

/// Subgradient at 0 is 0.
inline Tensor4 relu_backward(const Tensor4& x, const Tensor4& gout) {
  Tensor4 dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? gout[i] : 0.0;
  return dx;
}

// ---------------------------------------------------------------------------
// Batched matrix multiply: (B,1,P,Q) x (B,1,Q,R) -> (B,1,P,R)

inline Tensor4 batched_matmul(const Tensor4& a, const Tensor4& b) {
  const Shape as = a.shape();
  const Shape bs = b.shape();
  if (as.c != 1 || bs.c != 1 || as.n != bs.n || as.w != bs.h) {
    throw DimensionError("batched_matmul: cannot multiply " + as.str() + " by " + bs.str());
  }
  const std::size_t B = as.n, P = as.h, Q = as.w, R = bs.w;
  Tensor4 out(Shape{B, 1, P, R});
  for (std::size_t s = 0; s < B; ++s) {
    for (std::size_t i = 0; i < P; ++i) {
      for (std::size_t j = 0; j < R; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < Q; ++k) acc += a(s, 0, i, k) * b(s, 0, k, j);
        out(s, 0, i, j) = acc;
      }
    }
  }
  detail::count_linear(static_cast<std::uint64_t>(B) * P * Q * R);
  return out;
}

struct MatmulGrads {
  Tensor4 da;
  Tensor4 db;
};

inline MatmulGrads batched_matmul_backward(const Tensor4& a, const Tensor4& b, const Tensor4& gout) {
  const std::size_t B = a.shape().n, P = a.shape().h, Q = a.shape().w, R = b.shape().w;
  MatmulGrads g{Tensor4(a.shape()), Tensor4(b.shape())};
  for (std::size_t s = 0; s < B; ++s) {
    for (std::size_t i = 0; i < P; ++i) {
      for (std::size_t j = 0; j < R; ++j) {
        const double go = gout(s, 0, i, j);
        for (std::size_t k = 0; k < Q; ++k) {
          g.da(s, 0, i, k) += go * b(s, 0, k, j);
          g.db(s, 0, k, j) += a(s, 0, i, k) * go;
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pooling and linear

inline Tensor4 global_avg_pool(const Tensor4& x) {
  const Shape xs = x.shape();
  Tensor4 out(Shape{xs.n, xs.c, 1, 1});
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const double* p = x.raw() + x.index(n, c, 0, 0);
      double s = 0.0;
      for (std::size_t i = 0; i < xs.plane(); ++i) s += p[i];
      out(n, c, 0, 0) = s / static_cast<double>(xs.plane());
    }
  }
  return out;
}

inline Tensor4 global_avg_pool_backward(const Shape& xs, const Tensor4& gout) {
  Tensor4 dx(xs);
  const double inv = 1.0 / static_cast<double>(xs.plane());
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const double v = gout(n, c, 0, 0) * inv;
      double* p = dx.raw() + dx.index(n, c, 0, 0);
      for (std::size_t i = 0; i < xs.plane(); ++i) p[i] = v;
    }
  }
  return dx;
}

/// x is (n, d, 1, 1); w is (d_out, d, 1, 1).
inline Tensor4 linear(const Tensor4& x, const Tensor4& w, const Tensor4& b) {
  if (x.shape().h != 1 || x.shape().w != 1) {
    throw DimensionError("linear: input must be (n, d, 1, 1), got " + x.shape().str());
  }
  return conv2d_pointwise(x, w, b);
}

// ---------------------------------------------------------------------------
// Normalization

namespace detail {
inline void require_positive_eps(double eps, const char* what) {
  if (!(eps > 0.0)) throw ConfigError(std::string(what) + ": epsilon must be > 0");
}
}  // namespace detail

struct BatchNormResult {
  Tensor4 y;
  Tensor4 mean;  // (1,C,1,1), biased statistics of this batch
  Tensor4 var;
};

struct NormGrads {
  Tensor4 dx;
  Tensor4 dgamma;
  Tensor4 dbeta;
};

/// Normalizes each channel over (n, h, w) with the batch's own statistics.
inline BatchNormResult batchnorm_train(const Tensor4& x, const Tensor4& gamma, const Tensor4& beta, double eps) {
  detail::require_positive_eps(eps, "batchnorm_train");
  const Shape xs = x.shape();
  detail::require_channel_vector(gamma, xs.c, "batchnorm gamma");
  detail::require_channel_vector(beta, xs.c, "batchnorm beta");
  BatchNormResult r{Tensor4(xs), Tensor4(Shape{1, xs.c, 1, 1}), Tensor4(Shape{1, xs.c, 1, 1})};
  const double count = static_cast<double>(xs.n * xs.plane());
  for (std::size_t c = 0; c < xs.c; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < xs.n; ++n) {
      const double* p = x.raw() + x.index(n, c, 0, 0);
      for (std::size_t i = 0; i < xs.plane(); ++i) s += p[i];
    }
    const double mean = s / count;
    double v = 0.0;
    for (std::size_t n = 0; n < xs.n; ++n) {
      const double* p = x.raw() + x.index(n, c, 0, 0);
      for (std::size_t i = 0; i < xs.plane(); ++i) v += (p[i] - mean) * (p[i] - mean);
    }
    const double var = v / count;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t n = 0; n < xs.n; ++n) {
      const double* p = x.raw() + x.index(n, c, 0, 0);
      double* q = r.y.raw() + r.y.index(n, c, 0, 0);
      for (std::size_t i = 0; i < xs.plane(); ++i) q[i] = gamma[c] * (p[i] - mean) * inv + beta[c];
    }
    r.mean[c] = mean;
    r.var[c] = var;
  }
  return r;
}

inline NormGrads batchnorm_train_backward(const Tensor4& x, const Tensor4& gamma, const Tensor4& mean,
                                          const Tensor4& var, double eps, const Tensor4& gout) {
  const Shape xs = x.shape();
  NormGrads g{Tensor4(xs), Tensor4(gamma.shape()), Tensor4(gamma.shape())};
  const double count = static_cast<double>(xs.n * xs.plane());
  for (std::size_t c = 0; c < xs.c; ++c) {
    const double inv = 1.0 / std::sqrt(var[c] + eps);
    double sum_g = 0.0;
    double sum_gx = 0.0;
    for (std::size_t n = 0; n < xs.n; ++n) {
      for (std::size_t i = 0; i < xs.plane(); ++i) {
        const double go = gout[gout.index(n, c, 0, 0) + i];
        const double xhat = (x[x.index(n, c, 0, 0) + i] - mean[c]) * inv;
        sum_g += go;
        sum_gx += go * xhat;
      }
    }
    g.dbeta[c] = sum_g;
    g.dgamma[c] = sum_gx;
    const double k = gamma[c] * inv / count;
    for (std::size_t n = 0; n < xs.n; ++n) {
      for (std::size_t i = 0; i < xs.plane(); ++i) {
        const std::size_t at = x.index(n, c, 0, 0) + i;
        const double xhat = (x[at] - mean[c]) * inv;
        g.dx[at] = k * (count * gout[at] - sum_g - xhat * sum_gx);
      }
    }
  }
  return g;
}

/// Normalizes with fixed (running) statistics.
inline Tensor4 batchnorm_infer(const Tensor4& x, const Tensor4& gamma, const Tensor4& beta, const Tensor4& mean,
                               const Tensor4& var, double eps) {
  detail::require_positive_eps(eps, "batchnorm_infer");
  const Shape xs = x.shape();
  detail::require_channel_vector(gamma, xs.c, "batchnorm gamma");
  detail::require_channel_vector(beta, xs.c, "batchnorm beta");
  detail::require_channel_vector(mean, xs.c, "batchnorm running mean");
  detail::require_channel_vector(var, xs.c, "batchnorm running var");
  Tensor4 y(xs);
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const double inv = 1.0 / std::sqrt(var[c] + eps);
      const double* p = x.raw() + x.index(n, c, 0, 0);
      double* q = y.raw() + y.index(n, c, 0, 0);
      for (std::size_t i = 0; i < xs.plane(); ++i) q[i] = gamma[c] * (p[i] - mean[c]) * inv + beta[c];
    }
  }
  return y;
}

inline NormGrads batchnorm_infer_backward(const Tensor4& x, const Tensor4& gamma, const Tensor4& mean,
                                          const Tensor4& var, double eps, const Tensor4& gout) {
  const Shape xs = x.shape();
  NormGrads g{Tensor4(xs), Tensor4(gamma.shape()), Tensor4(gamma.shape())};
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const double inv = 1.0 / std::sqrt(var[c] + eps);
      for (std::size_t i = 0; i < xs.plane(); ++i) {
        const std::size_t at = x.index(n, c, 0, 0) + i;
        g.dx[at] = gout[at] * gamma[c] * inv;
        g.dgamma[c] += gout[at] * (x[at] - mean[c]) * inv;
        g.dbeta[c] += gout[at];
      }
    }
  }
  return g;
}

/// Normalizes the channel vector at every (n, h, w) position.
inline Tensor4 layernorm_channels(const Tensor4& x, const Tensor4& gamma, const Tensor4& beta, double eps) {
  detail::require_positive_eps(eps, "layernorm_channels");
  const Shape xs = x.shape();
  detail::require_channel_vector(gamma, xs.c, "layernorm gamma");
  detail::require_channel_vector(beta, xs.c, "layernorm beta");
  Tensor4 y(xs);
  const double cc = static_cast<double>(xs.c);
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t p = 0; p < xs.plane(); ++p) {
      double s = 0.0;
      for (std::size_t c = 0; c < xs.c; ++c) s += x[x.index(n, c, 0, 0) + p];
      const double mean = s / cc;
      double v = 0.0;
      for (std::size_t c = 0; c < xs.c; ++c) {
        const double d = x[x.index(n, c, 0, 0) + p] - mean;
        v += d * d;
      }
      const double inv = 1.0 / std::sqrt(v / cc + eps);
      for (std::size_t c = 0; c < xs.c; ++c) {
        const std::size_t at = x.index(n, c, 0, 0) + p;
        y[at] = gamma[c] * (x[at] - mean) * inv + beta[c];
      }
    }
  }
  return y;
}

inline NormGrads layernorm_channels_backward(const Tensor4& x, const Tensor4& gamma, double eps,
                                             const Tensor4& gout) {
  const Shape xs = x.shape();
  NormGrads g{Tensor4(xs), Tensor4(gamma.shape()), Tensor4(gamma.shape())};
  const double cc = static_cast<double>(xs.c);
  std::vector<double> xhat(xs.c);
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t p = 0; p < xs.plane(); ++p) {
      double s = 0.0;
      for (std::size_t c = 0; c < xs.c; ++c) s += x[x.index(n, c, 0, 0) + p];
      const double mean = s / cc;
      double v = 0.0;
      for (std::size_t c = 0; c < xs.c; ++c) {
        const double d = x[x.index(n, c, 0, 0) + p] - mean;
        v += d * d;
      }
      const double inv = 1.0 / std::sqrt(v / cc + eps);
      double sum_gy = 0.0;
      double sum_gyx = 0.0;
      for (std::size_t c = 0; c < xs.c; ++c) {
        const std::size_t at = x.index(n, c, 0, 0) + p;
        xhat[c] = (x[at] - mean) * inv;
        const double gy = gout[at] * gamma[c];
        sum_gy += gy;
        sum_gyx += gy * xhat[c];
        g.dgamma[c] += gout[at] * xhat[c];
        g.dbeta[c] += gout[at];
      }
      for (std::size_t c = 0; c < xs.c; ++c) {
        const std::size_t at = x.index(n, c, 0, 0) + p;
        const double gy = gout[at] * gamma[c];
        g.dx[at] = inv / cc * (cc * gy - sum_gy - xhat[c] * sum_gyx);
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Space-to-depth: output channel (dy*r + dx)*C + c holds phase (dy, dx) of channel c.

inline Tensor4 space_to_depth(const Tensor4& x, std::size_t r) {
  const Shape xs = x.shape();
  if (r == 0 || xs.h % r != 0 || xs.w % r != 0) {
    throw DimensionError("space_to_depth: spatial size " + std::to_string(xs.h) + "x" + std::to_string(xs.w) +
                         " not divisible by " + std::to_string(r));
  }
  const Shape os{xs.n, xs.c * r * r, xs.h / r, xs.w / r};
  Tensor4 out(os);
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t dy = 0; dy < r; ++dy)
      for (std::size_t dx = 0; dx < r; ++dx)
        for (std::size_t c = 0; c < xs.c; ++c)
          for (std::size_t i = 0; i < os.h; ++i)
            for (std::size_t j = 0; j < os.w; ++j)
              out(n, (dy * r + dx) * xs.c + c, i, j) = x(n, c, i * r + dy, j * r + dx);
  return out;
}

inline Tensor4 depth_to_space(const Tensor4& x, std::size_t r) {
  const Shape xs = x.shape();
  if (r == 0 || xs.c % (r * r) != 0) {
    throw DimensionError("depth_to_space: channel count " + std::to_string(xs.c) + " not divisible by " +
                         std::to_string(r * r));
  }
  const std::size_t c_out = xs.c / (r * r);
  Tensor4 out(Shape{xs.n, c_out, xs.h * r, xs.w * r});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t dy = 0; dy < r; ++dy)
      for (std::size_t dx = 0; dx < r; ++dx)
        for (std::size_t c = 0; c < c_out; ++c)
          for (std::size_t i = 0; i < xs.h; ++i)
            for (std::size_t j = 0; j < xs.w; ++j)
              out(n, c, i * r + dy, j * r + dx) = x(n, (dy * r + dx) * c_out + c, i, j);
  return out;
}

// ---------------------------------------------------------------------------
// Gated branch fusion
//
// Hidden channels form g contiguous groups of size C_h/g. For branch i and
// group j the gate map is gate channel i*g + j, so
//   out[n, c, h, w] = sum_i branch_i[n, c, h, w] * gates[n, i*g + c/(C_h/g), h, w].

namespace detail {
inline void check_fuse_shapes(std::span<const Tensor4> branches, const Tensor4& gates, std::size_t g) {
  if (branches.empty()) throw DimensionError("spatial_fuse: need at least one branch");
  if (g == 0) throw ConfigError("spatial_fuse: gate groups must be >= 1");
  const Shape bs = branches.front().shape();
  for (const Tensor4& b : branches) {
    if (b.shape() != bs) {
      throw DimensionError("spatial_fuse: branch shapes disagree: " + bs.str() + " vs " + b.shape().str());
    }
  }
  if (bs.c % g != 0) {
    throw DimensionError("spatial_fuse: " + std::to_string(bs.c) + " hidden channels not divisible by g=" +
                         std::to_string(g));
  }
  const Shape want{bs.n, branches.size() * g, bs.h, bs.w};
  if (gates.shape() != want) {
    throw DimensionError("spatial_fuse: gates must be " + want.str() + ", got " + gates.shape().str());
  }
}
}  // namespace detail

inline Tensor4 spatial_fuse(std::span<const Tensor4> branches, const Tensor4& gates, std::size_t g) {
  detail::check_fuse_shapes(branches, gates, g);
  const Shape bs = branches.front().shape();
  const std::size_t m = branches.size();
  const std::size_t group = bs.c / g;
  Tensor4 out(bs);
  for (std::size_t n = 0; n < bs.n; ++n) {
    for (std::size_t c = 0; c < bs.c; ++c) {
      const std::size_t j = c / group;
      double* dst = out.raw() + out.index(n, c, 0, 0);
      for (std::size_t i = 0; i < m; ++i) {
        const double* src = branches[i].raw() + branches[i].index(n, c, 0, 0);
        const double* gate = gates.raw() + gates.index(n, i * g + j, 0, 0);
        for (std::size_t p = 0; p < bs.plane(); ++p) dst[p] += src[p] * gate[p];
      }
    }
  }
  detail::count_fusion(static_cast<std::uint64_t>(bs.n) * bs.plane() * bs.c * m);
  return out;
}

struct FuseGrads {
  std::vector<Tensor4> dbranches;
  Tensor4 dgates;
};

inline FuseGrads spatial_fuse_backward(std::span<const Tensor4> branches, const Tensor4& gates, std::size_t g,
                                       const Tensor4& gout) {
  const Shape bs = branches.front().shape();
  const std::size_t m = branches.size();
  const std::size_t group = bs.c / g;
  FuseGrads r{std::vector<Tensor4>(m, Tensor4(bs)), Tensor4(gates.shape())};
  for (std::size_t n = 0; n < bs.n; ++n) {
    for (std::size_t c = 0; c < bs.c; ++c) {
      const std::size_t j = c / group;
      const double* go = gout.raw() + gout.index(n, c, 0, 0);
      for (std::size_t i = 0; i < m; ++i) {
        const double* src = branches[i].raw() + branches[i].index(n, c, 0, 0);
        const double* gate = gates.raw() + gates.index(n, i * g + j, 0, 0);
        double* db = r.dbranches[i].raw() + r.dbranches[i].index(n, c, 0, 0);
        double* dg = r.dgates.raw() + r.dgates.index(n, i * g + j, 0, 0);
        for (std::size_t p = 0; p < bs.plane(); ++p) {
          db[p] = go[p] * gate[p];
          dg[p] += go[p] * src[p];
        }
      }
    }
  }
  return r;
}

/// The same fusion written as an explicit reshape followed by one batched
/// matmul: branches become (N*g*H'*W') x (C_h/g) x m, gates (N*g*H'*W') x m x 1.
inline Tensor4 spatial_fuse_matmul(std::span<const Tensor4> branches, const Tensor4& gates, std::size_t g) {
  detail::check_fuse_shapes(branches, gates, g);
  const Shape bs = branches.front().shape();
  const std::size_t m = branches.size();
  const std::size_t group = bs.c / g;
  const std::size_t slots = bs.n * g * bs.plane();
  Tensor4 a(Shape{slots, 1, group, m});
  Tensor4 b(Shape{slots, 1, m, 1});
  for (std::size_t n = 0; n < bs.n; ++n) {
    for (std::size_t j = 0; j < g; ++j) {
      for (std::size_t p = 0; p < bs.plane(); ++p) {
        const std::size_t slot = (n * g + j) * bs.plane() + p;
        for (std::size_t i = 0; i < m; ++i) {
          b(slot, 0, i, 0) = gates[gates.index(n, i * g + j, 0, 0) + p];
          for (std::size_t k = 0; k < group; ++k) {
            a(slot, 0, k, i) = branches[i][branches[i].index(n, j * group + k, 0, 0) + p];
          }
        }
      }
    }
  }
  const Tensor4 prod = batched_matmul(a, b);
  Tensor4 out(bs);
  for (std::size_t n = 0; n < bs.n; ++n)
    for (std::size_t j = 0; j < g; ++j)
      for (std::size_t p = 0; p < bs.plane(); ++p)
        for (std::size_t k = 0; k < group; ++k)
          out[out.index(n, j * group + k, 0, 0) + p] = prod(((n * g + j) * bs.plane()) + p, 0, k, 0);
  return out;
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy over logits (n, k, 1, 1)

inline void check_labels(const Tensor4& logits, std::span<const int> labels) {
  const Shape s = logits.shape();
  if (s.h != 1 || s.w != 1) throw DimensionError("cross_entropy: logits must be (n, k, 1, 1), got " + s.str());
  if (labels.size() != s.n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(s.n));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= s.c) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(s.c) +
                              ")");
    }
  }
}

/// Row-wise softmax with max subtraction.
inline Tensor4 softmax_rows(const Tensor4& logits) {
  const Shape s = logits.shape();
  Tensor4 p(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    double mx = logits(n, 0, 0, 0);
    for (std::size_t k = 1; k < s.c; ++k) mx = std::max(mx, logits(n, k, 0, 0));
    double z = 0.0;
    for (std::size_t k = 0; k < s.c; ++k) z += std::exp(logits(n, k, 0, 0) - mx);
    for (std::size_t k = 0; k < s.c; ++k) p(n, k, 0, 0) = std::exp(logits(n, k, 0, 0) - mx) / z;
  }
  return p;
}

/// Mean negative log-softmax of the true classes.
inline double cross_entropy(const Tensor4& logits, std::span<const int> labels) {
  check_labels(logits, labels);
  const Shape s = logits.shape();
  double total = 0.0;
  for (std::size_t n = 0; n < s.n; ++n) {
    double mx = logits(n, 0, 0, 0);
    for (std::size_t k = 1; k < s.c; ++k) mx = std::max(mx, logits(n, k, 0, 0));
    double z = 0.0;
    for (std::size_t k = 0; k < s.c; ++k) z += std::exp(logits(n, k, 0, 0) - mx);
    total += std::log(z) + mx - logits(n, static_cast<std::size_t>(labels[n]), 0, 0);
  }
  return total / static_cast<double>(s.n);
}

inline Tensor4 cross_entropy_backward(const Tensor4& logits, std::span<const int> labels, double gout) {
  Tensor4 d = softmax_rows(logits);
  const double inv = gout / static_cast<double>(logits.shape().n);
  for (std::size_t n = 0; n < logits.shape().n; ++n) {
    d(n, static_cast<std::size_t>(labels[n]), 0, 0) -= 1.0;
    for (std::size_t k = 0; k < logits.shape().c; ++k) d(n, k, 0, 0) *= inv;
  }
  return d;
}

}  // namespace scsc
