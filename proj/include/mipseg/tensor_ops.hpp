#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "mipseg/tensor.hpp"

namespace mipseg {

template <typename T>
using MatCM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using EIdx = Eigen::Index;

namespace detail {

// Gradient accumulation helper: += rhs into t's grad grid.
template <typename T>
inline void accumulate_grad(Tensor<T> t, std::span<const T> delta) {
  auto g = t.grad_mut();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

inline std::size_t spatial_size(const Shape& s, std::size_t from) {
  std::size_t n = 1;
  for (std::size_t i = from; i < s.size(); ++i) n *= s[i];
  return n;
}

// im2col over a row block of output pixels, 2d case.
// Row layout per pixel: (c, dy, dx), matching the kernel's flat order.
template <typename T>
void im2col2d(const T* in, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
              std::size_t kw, std::ptrdiff_t ph, std::ptrdiff_t pw, std::size_t outW,
              std::size_t r0, std::size_t r1, T* col) {
  const std::size_t ckk = C * kh * kw;
  for (std::size_t p = r0; p < r1; ++p) {
    T* row = col + (p - r0) * ckk;
    const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(p / outW);
    const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(p % outW);
    std::size_t idx = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const T* plane = in + c * H * W;
      for (std::size_t dy = 0; dy < kh; ++dy) {
        const std::ptrdiff_t iy = y + static_cast<std::ptrdiff_t>(dy) - ph;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
          for (std::size_t dx = 0; dx < kw; ++dx) row[idx++] = T(0);
          continue;
        }
        const T* line = plane + static_cast<std::size_t>(iy) * W;
        for (std::size_t dx = 0; dx < kw; ++dx) {
          const std::ptrdiff_t ix = x + static_cast<std::ptrdiff_t>(dx) - pw;
          row[idx++] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) ? T(0) : line[ix];
        }
      }
    }
  }
}

template <typename T>
void col2im2d(T* gin, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
              std::ptrdiff_t ph, std::ptrdiff_t pw, std::size_t outW, std::size_t r0,
              std::size_t r1, const T* col) {
  const std::size_t ckk = C * kh * kw;
  for (std::size_t p = r0; p < r1; ++p) {
    const T* row = col + (p - r0) * ckk;
    const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(p / outW);
    const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(p % outW);
    std::size_t idx = 0;
    for (std::size_t c = 0; c < C; ++c) {
      T* plane = gin + c * H * W;
      for (std::size_t dy = 0; dy < kh; ++dy) {
        const std::ptrdiff_t iy = y + static_cast<std::ptrdiff_t>(dy) - ph;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
          idx += kw;
          continue;
        }
        T* line = plane + static_cast<std::size_t>(iy) * W;
        for (std::size_t dx = 0; dx < kw; ++dx) {
          const std::ptrdiff_t ix = x + static_cast<std::ptrdiff_t>(dx) - pw;
          if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) line[ix] += row[idx];
          ++idx;
        }
      }
    }
  }
}

// 3d variants; output pixel order is (z, y, x).
template <typename T>
void im2col3d(const T* in, std::size_t C, std::size_t D, std::size_t H, std::size_t W,
              std::size_t kd, std::size_t kh, std::size_t kw, std::ptrdiff_t pd, std::ptrdiff_t ph,
              std::ptrdiff_t pw, std::size_t outH, std::size_t outW, std::size_t r0, std::size_t r1,
              T* col) {
  const std::size_t ckk = C * kd * kh * kw;
  for (std::size_t p = r0; p < r1; ++p) {
    T* row = col + (p - r0) * ckk;
    const std::ptrdiff_t z = static_cast<std::ptrdiff_t>(p / (outH * outW));
    const std::ptrdiff_t y = static_cast<std::ptrdiff_t>((p / outW) % outH);
    const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(p % outW);
    std::size_t idx = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const T* cube = in + c * D * H * W;
      for (std::size_t dz = 0; dz < kd; ++dz) {
        const std::ptrdiff_t iz = z + static_cast<std::ptrdiff_t>(dz) - pd;
        if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(D)) {
          for (std::size_t r = 0; r < kh * kw; ++r) row[idx++] = T(0);
          continue;
        }
        const T* plane = cube + static_cast<std::size_t>(iz) * H * W;
        for (std::size_t dy = 0; dy < kh; ++dy) {
          const std::ptrdiff_t iy = y + static_cast<std::ptrdiff_t>(dy) - ph;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
            for (std::size_t dx = 0; dx < kw; ++dx) row[idx++] = T(0);
            continue;
          }
          const T* line = plane + static_cast<std::size_t>(iy) * W;
          for (std::size_t dx = 0; dx < kw; ++dx) {
            const std::ptrdiff_t ix = x + static_cast<std::ptrdiff_t>(dx) - pw;
            row[idx++] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) ? T(0) : line[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im3d(T* gin, std::size_t C, std::size_t D, std::size_t H, std::size_t W, std::size_t kd,
              std::size_t kh, std::size_t kw, std::ptrdiff_t pd, std::ptrdiff_t ph,
              std::ptrdiff_t pw, std::size_t outH, std::size_t outW, std::size_t r0, std::size_t r1,
              const T* col) {
  const std::size_t ckk = C * kd * kh * kw;
  for (std::size_t p = r0; p < r1; ++p) {
    const T* row = col + (p - r0) * ckk;
    const std::ptrdiff_t z = static_cast<std::ptrdiff_t>(p / (outH * outW));
    const std::ptrdiff_t y = static_cast<std::ptrdiff_t>((p / outW) % outH);
    const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(p % outW);
    std::size_t idx = 0;
    for (std::size_t c = 0; c < C; ++c) {
      T* cube = gin + c * D * H * W;
      for (std::size_t dz = 0; dz < kd; ++dz) {
        const std::ptrdiff_t iz = z + static_cast<std::ptrdiff_t>(dz) - pd;
        if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(D)) {
          idx += kh * kw;
          continue;
        }
        T* plane = cube + static_cast<std::size_t>(iz) * H * W;
        for (std::size_t dy = 0; dy < kh; ++dy) {
          const std::ptrdiff_t iy = y + static_cast<std::ptrdiff_t>(dy) - ph;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
            idx += kw;
            continue;
          }
          T* line = plane + static_cast<std::size_t>(iy) * W;
          for (std::size_t dx = 0; dx < kw; ++dx) {
            const std::ptrdiff_t ix = x + static_cast<std::ptrdiff_t>(dx) - pw;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) line[ix] += row[idx];
            ++idx;
          }
        }
      }
    }
  }
}

inline std::size_t conv_block_rows(std::size_t pixels, std::size_t ckk) {
  const std::size_t budget = std::size_t(1) << 21;  // ~2M scratch elements
  return std::clamp<std::size_t>(budget / std::max<std::size_t>(ckk, 1), 64, std::max<std::size_t>(pixels, 1));
}

// Shared conv forward/backward over the flattened spatial view. kd/ D are 1
// in the 2d case. GEMM shapes: col [pixels, C*k] x kernel^T [C*k, F].
template <typename T>
Tensor<T> conv_nd(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                  bool zero_pad, bool is3d) {
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  const std::size_t want_rank = is3d ? 5u : 4u;
  if (is.size() != want_rank || ks.size() != want_rank)
    throw ShapeError("conv: expected rank " + std::to_string(want_rank) + " input and kernel, got " +
                     shape_str(is) + " and " + shape_str(ks));
  const std::size_t N = is[0], C = is[1];
  const std::size_t D = is3d ? is[2] : 1, H = is[is.size() - 2], W = is[is.size() - 1];
  const std::size_t F = ks[0];
  if (ks[1] != C)
    throw ShapeError("conv: kernel channels " + std::to_string(ks[1]) + " do not match input channels " +
                     std::to_string(C));
  const std::size_t kd = is3d ? ks[2] : 1, kh = ks[ks.size() - 2], kw = ks[ks.size() - 1];
  if (kh % 2 == 0 || kw % 2 == 0 || kd % 2 == 0)
    throw ShapeError("conv: kernel extents must be odd");
  if (bias.defined() && bias.size() != F) throw ShapeError("conv: bias size must equal filter count");

  const std::ptrdiff_t pd = zero_pad ? static_cast<std::ptrdiff_t>(kd / 2) : 0;
  const std::ptrdiff_t ph = zero_pad ? static_cast<std::ptrdiff_t>(kh / 2) : 0;
  const std::ptrdiff_t pw = zero_pad ? static_cast<std::ptrdiff_t>(kw / 2) : 0;
  const std::size_t outD = zero_pad ? D : D - kd + 1;
  const std::size_t outH = zero_pad ? H : H - kh + 1;
  const std::size_t outW = zero_pad ? W : W - kw + 1;
  if (!zero_pad && (D < kd || H < kh || W < kw)) throw ShapeError("conv: input smaller than kernel");

  Shape out_shape = is3d ? Shape{N, F, outD, outH, outW} : Shape{N, F, outH, outW};
  Tensor<T> out = Tensor<T>::zeros(out_shape);

  const std::size_t pixels = outD * outH * outW;
  const std::size_t ckk = C * kd * kh * kw;
  const std::size_t in_sample = C * D * H * W;
  const std::size_t out_sample = F * pixels;
  const std::size_t rblk = conv_block_rows(pixels, ckk);

  Eigen::Map<const MatRM<T>> K(kernel.values().data(), static_cast<EIdx>(F), static_cast<EIdx>(ckk));
  std::vector<T> col(rblk * ckk);

  for (std::size_t n = 0; n < N; ++n) {
    const T* in = input.values().data() + n * in_sample;
    Eigen::Map<MatCM<T>> O(out.values_mut().data() + n * out_sample, static_cast<EIdx>(pixels),
                           static_cast<EIdx>(F));
    for (std::size_t r0 = 0; r0 < pixels; r0 += rblk) {
      const std::size_t r1 = std::min(pixels, r0 + rblk);
      if (is3d)
        im2col3d(in, C, D, H, W, kd, kh, kw, pd, ph, pw, outH, outW, r0, r1, col.data());
      else
        im2col2d(in, C, H, W, kh, kw, ph, pw, outW, r0, r1, col.data());
      Eigen::Map<const MatRM<T>> Cb(col.data(), static_cast<EIdx>(r1 - r0), static_cast<EIdx>(ckk));
      O.middleRows(static_cast<EIdx>(r0), static_cast<EIdx>(r1 - r0)).noalias() = Cb * K.transpose();
    }
    if (bias.defined()) {
      for (std::size_t f = 0; f < F; ++f) O.col(static_cast<EIdx>(f)).array() += bias.values()[f];
    }
  }

  if (tracks_grad(input, kernel, bias.defined() ? bias : input)) {
    out.set_requires_grad(true);
    Tensor<T> in_t = input, k_t = kernel, b_t = bias, out_t = out;
    Tape<T>::active()->record([in_t, k_t, b_t, out_t, zero_pad, is3d, N, C, D, H, W, F, kd, kh, kw,
                               pd, ph, pw, outH, outW, pixels, ckk, in_sample, out_sample,
                               rblk]() mutable {
      Eigen::Map<const MatRM<T>> K(k_t.values().data(), static_cast<EIdx>(F), static_cast<EIdx>(ckk));
      const bool need_in = in_t.requires_grad();
      const bool need_k = k_t.requires_grad();
      const bool need_b = b_t.defined() && b_t.requires_grad();
      std::vector<T> col((need_k || need_in) ? rblk * ckk : 0);
      std::vector<T> dcol(need_in ? rblk * ckk : 0);
      for (std::size_t n = 0; n < N; ++n) {
        Eigen::Map<const MatCM<T>> dO(out_t.grad().data() + n * out_sample, static_cast<EIdx>(pixels),
                                      static_cast<EIdx>(F));
        if (need_b) {
          auto gb = b_t.grad_mut();
          for (std::size_t f = 0; f < F; ++f) gb[f] += dO.col(static_cast<EIdx>(f)).sum();
        }
        if (!need_k && !need_in) continue;
        const T* in = in_t.values().data() + n * in_sample;
        T* gin = need_in ? in_t.grad_mut().data() + n * in_sample : nullptr;
        Eigen::Map<MatRM<T>> dK(need_k ? k_t.grad_mut().data() : nullptr, static_cast<EIdx>(F),
                                static_cast<EIdx>(need_k ? ckk : 0));
        for (std::size_t r0 = 0; r0 < pixels; r0 += rblk) {
          const std::size_t r1 = std::min(pixels, r0 + rblk);
          if (is3d)
            im2col3d(in, C, D, H, W, kd, kh, kw, pd, ph, pw, outH, outW, r0, r1, col.data());
          else
            im2col2d(in, C, H, W, kh, kw, ph, pw, outW, r0, r1, col.data());
          Eigen::Map<const MatRM<T>> Cb(col.data(), static_cast<EIdx>(r1 - r0),
                                        static_cast<EIdx>(ckk));
          auto dOb = dO.middleRows(static_cast<EIdx>(r0), static_cast<EIdx>(r1 - r0));
          if (need_k) dK.noalias() += dOb.transpose() * Cb;
          if (need_in) {
            Eigen::Map<MatRM<T>> dCb(dcol.data(), static_cast<EIdx>(r1 - r0), static_cast<EIdx>(ckk));
            dCb.noalias() = dOb * K;
            if (is3d)
              col2im3d(gin, C, D, H, W, kd, kh, kw, pd, ph, pw, outH, outW, r0, r1, dcol.data());
            else
              col2im2d(gin, C, H, W, kh, kw, ph, pw, outW, r0, r1, dcol.data());
          }
        }
      }
    });
  }
  return out;
}

}  // namespace detail

// Cross-correlation with [F,C,kh,kw] kernels; zero_pad keeps spatial extents.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias = {},
                 bool zero_pad = true) {
  return detail::conv_nd(input, kernel, bias, zero_pad, false);
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias = {},
                 bool zero_pad = true) {
  return detail::conv_nd(input, kernel, bias, zero_pad, true);
}

namespace detail {

// Stride-2 transposed conv, kernel [C,F,2,2] (or [C,F,2,2,2]); exact doubling.
template <typename T>
Tensor<T> tconv_nd(const Tensor<T>& input, const Tensor<T>& kernel, bool is3d) {
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  const std::size_t want_rank = is3d ? 5u : 4u;
  if (is.size() != want_rank || ks.size() != want_rank)
    throw ShapeError("transposed conv: bad ranks " + shape_str(is) + " / " + shape_str(ks));
  const std::size_t N = is[0], C = is[1];
  if (ks[0] != C) throw ShapeError("transposed conv: kernel in-channels mismatch");
  const std::size_t F = ks[1];
  for (std::size_t i = 2; i < ks.size(); ++i)
    if (ks[i] != 2) throw ShapeError("transposed conv: kernel must be 2 along spatial axes");
  const std::size_t D = is3d ? is[2] : 1, H = is[is.size() - 2], W = is[is.size() - 1];
  const std::size_t pixels = D * H * W;
  const std::size_t off = is3d ? 8 : 4;  // stride-2 offsets per output cell group

  Shape out_shape = is3d ? Shape{N, F, 2 * D, 2 * H, 2 * W} : Shape{N, F, 2 * H, 2 * W};
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const std::size_t in_sample = C * pixels;
  const std::size_t out_sample = F * off * pixels;

  // One GEMM per sample: [pixels, C] x [C, F*off]; then a reorder pass.
  Eigen::Map<const MatRM<T>> K(kernel.values().data(), static_cast<EIdx>(C),
                               static_cast<EIdx>(F * off));
  std::vector<T> scratch(pixels * F * off);

  auto scatter = [&](const T* s, T* o) {
    // s: [pixels, F*off] row-major; o: [F, 2D, 2H, 2W] (or 2d equivalent)
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const T* row = s + ((z * H + y) * W + x) * F * off;
          for (std::size_t f = 0; f < F; ++f)
            for (std::size_t d = 0; d < off; ++d) {
              const std::size_t dz = is3d ? (d >> 2) & 1 : 0;
              const std::size_t dy = (d >> 1) & 1, dx = d & 1;
              const std::size_t oz = 2 * z + dz, oy = 2 * y + dy, ox = 2 * x + dx;
              o[((f * (is3d ? 2 * D : 1) + oz) * 2 * H + oy) * 2 * W + ox] = row[f * off + d];
            }
        }
  };

  for (std::size_t n = 0; n < N; ++n) {
    Eigen::Map<const MatCM<T>> I(input.values().data() + n * in_sample, static_cast<EIdx>(pixels),
                                 static_cast<EIdx>(C));
    Eigen::Map<MatRM<T>> S(scratch.data(), static_cast<EIdx>(pixels), static_cast<EIdx>(F * off));
    S.noalias() = I * K;
    scatter(scratch.data(), out.values_mut().data() + n * out_sample);
  }

  if (tracks_grad(input, kernel)) {
    out.set_requires_grad(true);
    Tensor<T> in_t = input, k_t = kernel, out_t = out;
    Tape<T>::active()->record([in_t, k_t, out_t, is3d, N, C, F, D, H, W, pixels, off, in_sample,
                               out_sample]() mutable {
      Eigen::Map<const MatRM<T>> K(k_t.values().data(), static_cast<EIdx>(C),
                                   static_cast<EIdx>(F * off));
      std::vector<T> dscratch(pixels * F * off);
      auto gather = [&](const T* o, T* s) {
        for (std::size_t z = 0; z < D; ++z)
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
              T* row = s + ((z * H + y) * W + x) * F * off;
              for (std::size_t f = 0; f < F; ++f)
                for (std::size_t d = 0; d < off; ++d) {
                  const std::size_t dz = is3d ? (d >> 2) & 1 : 0;
                  const std::size_t dy = (d >> 1) & 1, dx = d & 1;
                  const std::size_t oz = 2 * z + dz, oy = 2 * y + dy, ox = 2 * x + dx;
                  row[f * off + d] =
                      o[((f * (is3d ? 2 * D : 1) + oz) * 2 * H + oy) * 2 * W + ox];
                }
            }
      };
      for (std::size_t n = 0; n < N; ++n) {
        gather(out_t.grad().data() + n * out_sample, dscratch.data());
        Eigen::Map<const MatRM<T>> dS(dscratch.data(), static_cast<EIdx>(pixels),
                                      static_cast<EIdx>(F * off));
        if (in_t.requires_grad()) {
          Eigen::Map<MatCM<T>> dI(in_t.grad_mut().data() + n * in_sample,
                                  static_cast<EIdx>(pixels), static_cast<EIdx>(C));
          dI.noalias() += dS * K.transpose();
        }
        if (k_t.requires_grad()) {
          Eigen::Map<const MatCM<T>> I(in_t.values().data() + n * in_sample,
                                       static_cast<EIdx>(pixels), static_cast<EIdx>(C));
          Eigen::Map<MatRM<T>> dK(k_t.grad_mut().data(), static_cast<EIdx>(C),
                                  static_cast<EIdx>(F * off));
          dK.noalias() += I.transpose() * dS;
        }
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& input, const Tensor<T>& kernel) {
  return detail::tconv_nd(input, kernel, false);
}

template <typename T>
Tensor<T> transposed_conv3d(const Tensor<T>& input, const Tensor<T>& kernel) {
  return detail::tconv_nd(input, kernel, true);
}

namespace detail {

template <typename T>
Tensor<T> maxpool_nd(const Tensor<T>& input, bool is3d) {
  const Shape& is = input.shape();
  if (is.size() != (is3d ? 5u : 4u)) throw ShapeError("maxpool: bad rank " + shape_str(is));
  const std::size_t N = is[0], C = is[1];
  const std::size_t D = is3d ? is[2] : 1, H = is[is.size() - 2], W = is[is.size() - 1];
  if ((is3d && D % 2) || H % 2 || W % 2)
    throw ShapeError("maxpool: spatial extents must be even; crop the input first (" +
                     shape_str(is) + ")");
  const std::size_t oD = is3d ? D / 2 : 1, oH = H / 2, oW = W / 2;

  Shape out_shape = is3d ? Shape{N, C, oD, oH, oW} : Shape{N, C, oH, oW};
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const std::size_t out_count = out.size();
  std::vector<std::uint32_t> argmax(out_count);

  const T* in = input.values().data();
  T* o = out.values_mut().data();
  std::size_t oi = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* cube = in + nc * D * H * W;
    for (std::size_t z = 0; z < oD; ++z)
      for (std::size_t y = 0; y < oH; ++y)
        for (std::size_t x = 0; x < oW; ++x) {
          T best{};
          std::size_t best_at = 0;
          bool first = true;
          const std::size_t zmax = is3d ? 2 : 1;
          for (std::size_t dz = 0; dz < zmax; ++dz)
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t at = ((is3d ? 2 * z + dz : 0) * H + (2 * y + dy)) * W + (2 * x + dx);
                const T v = cube[at];
                if (first || v > best) {  // strict >: ties go to the first scan position
                  best = v;
                  best_at = at;
                  first = false;
                }
              }
          o[oi] = best;
          argmax[oi] = static_cast<std::uint32_t>(best_at);
          ++oi;
        }
  }

  if (tracks_grad(input)) {
    out.set_requires_grad(true);
    Tensor<T> in_t = input, out_t = out;
    const std::size_t per_sample = D * H * W;
    const std::size_t per_out = (is3d ? oD : 1) * oH * oW;
    Tape<T>::active()->record([in_t, out_t, argmax = std::move(argmax), N, C, per_sample,
                               per_out]() mutable {
      auto gin = in_t.grad_mut();
      auto gout = out_t.grad();
      for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t i = 0; i < per_out; ++i)
          gin[nc * per_sample + argmax[nc * per_out + i]] += gout[nc * per_out + i];
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input) {
  return detail::maxpool_nd(input, false);
}

template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& input) {
  return detail::maxpool_nd(input, true);
}

// Shape-preserving 2x2x2 mean smoothing, stride 1. The window at (z,y,x)
// covers offsets {0,1}^3 clipped to the grid and is normalized by the
// in-bounds count, so constants are preserved at the far faces.
template <typename T>
Tensor<T> avgpool3d_same(const Tensor<T>& input) {
  const Shape& is = input.shape();
  if (is.size() != 5) throw ShapeError("avgpool3d_same: bad rank " + shape_str(is));
  const std::size_t N = is[0], C = is[1], D = is[2], H = is[3], W = is[4];
  Tensor<T> out = Tensor<T>::zeros(is);
  const T* in = input.values().data();
  T* o = out.values_mut().data();

  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* cube = in + nc * D * H * W;
    T* ocube = o + nc * D * H * W;
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          T acc = 0;
          int count = 0;
          for (std::size_t dz = 0; dz < 2; ++dz) {
            if (z + dz >= D) continue;
            for (std::size_t dy = 0; dy < 2; ++dy) {
              if (y + dy >= H) continue;
              for (std::size_t dx = 0; dx < 2; ++dx) {
                if (x + dx >= W) continue;
                acc += cube[((z + dz) * H + (y + dy)) * W + (x + dx)];
                ++count;
              }
            }
          }
          ocube[(z * H + y) * W + x] = acc / static_cast<T>(count);
        }
  }

  if (tracks_grad(input)) {
    out.set_requires_grad(true);
    Tensor<T> in_t = input, out_t = out;
    Tape<T>::active()->record([in_t, out_t, N, C, D, H, W]() mutable {
      auto gin = in_t.grad_mut();
      auto gout = out_t.grad();
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        const std::size_t base = nc * D * H * W;
        for (std::size_t z = 0; z < D; ++z)
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
              int count = (z + 1 < D ? 2 : 1) * (y + 1 < H ? 2 : 1) * (x + 1 < W ? 2 : 1);
              const T g = gout[base + (z * H + y) * W + x] / static_cast<T>(count);
              for (std::size_t dz = 0; dz < 2; ++dz) {
                if (z + dz >= D) continue;
                for (std::size_t dy = 0; dy < 2; ++dy) {
                  if (y + dy >= H) continue;
                  for (std::size_t dx = 0; dx < 2; ++dx) {
                    if (x + dx >= W) continue;
                    gin[base + ((z + dz) * H + (y + dy)) * W + (x + dx)] += g;
                  }
                }
              }
            }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  auto in = input.values();
  auto o = out.values_mut();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] > T(0) ? in[i] : T(0);
  if (tracks_grad(input)) {
    out.set_requires_grad(true);
    Tensor<T> in_t = input, out_t = out;
    Tape<T>::active()->record([in_t, out_t]() mutable {
      auto gin = in_t.grad_mut();
      auto gout = out_t.grad();
      auto v = in_t.values();
      for (std::size_t i = 0; i < gin.size(); ++i)
        if (v[i] > T(0)) gin[i] += gout[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  auto in = input.values();
  auto o = out.values_mut();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = T(1) / (T(1) + std::exp(-in[i]));
  if (tracks_grad(input)) {
    out.set_requires_grad(true);
    Tensor<T> in_t = input, out_t = out;
    Tape<T>::active()->record([in_t, out_t]() mutable {
      auto gin = in_t.grad_mut();
      auto gout = out_t.grad();
      auto y = out_t.values();
      for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += gout[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: shape mismatch");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto o = out.values_mut();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  if (tracks_grad(a, b)) {
    out.set_requires_grad(true);
    Tensor<T> a_t = a, b_t = b, out_t = out;
    Tape<T>::active()->record([a_t, b_t, out_t]() mutable {
      if (a_t.requires_grad()) detail::accumulate_grad(a_t, out_t.grad());
      if (b_t.requires_grad()) detail::accumulate_grad(b_t, out_t.grad());
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul: shape mismatch");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto o = out.values_mut();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  if (tracks_grad(a, b)) {
    out.set_requires_grad(true);
    Tensor<T> a_t = a, b_t = b, out_t = out;
    Tape<T>::active()->record([a_t, b_t, out_t]() mutable {
      auto gout = out_t.grad();
      if (a_t.requires_grad()) {
        auto g = a_t.grad_mut();
        auto bv = b_t.values();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] * bv[i];
      }
      if (b_t.requires_grad()) {
        auto g = b_t.grad_mut();
        auto av = a_t.values();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] * av[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0;
  for (T v : a.values()) acc += static_cast<double>(v);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  if (tracks_grad(a)) {
    out.set_requires_grad(true);
    Tensor<T> a_t = a, out_t = out;
    Tape<T>::active()->record([a_t, out_t]() mutable {
      const T g = out_t.grad()[0];
      auto gin = a_t.grad_mut();
      for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += g;
    });
  }
  return out;
}

// y = x + beta with a single learnable scalar.
template <typename T>
Tensor<T> add_scalar_shift(const Tensor<T>& input, const Tensor<T>& beta) {
  if (beta.size() != 1) throw ShapeError("add_scalar_shift: beta must be a scalar tensor");
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  const T b = beta.values()[0];
  auto in = input.values();
  auto o = out.values_mut();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] + b;
  if (tracks_grad(input, beta)) {
    out.set_requires_grad(true);
    Tensor<T> in_t = input, b_t = beta, out_t = out;
    Tape<T>::active()->record([in_t, b_t, out_t]() mutable {
      auto gout = out_t.grad();
      if (in_t.requires_grad()) detail::accumulate_grad(in_t, gout);
      if (b_t.requires_grad()) {
        double acc = 0;
        for (T g : gout) acc += static_cast<double>(g);
        b_t.grad_mut()[0] += static_cast<T>(acc);
      }
    });
  }
  return out;
}

// Stack along the channel axis; all other extents must agree.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != bs.size() || as.size() < 3) throw ShapeError("concat_channels: bad ranks");
  for (std::size_t i = 0; i < as.size(); ++i)
    if (i != 1 && as[i] != bs[i]) throw ShapeError("concat_channels: extent mismatch");
  const std::size_t N = as[0], Ca = as[1], Cb = bs[1];
  const std::size_t sp = detail::spatial_size(as, 2);
  Shape out_shape = as;
  out_shape[1] = Ca + Cb;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  auto o = out.values_mut();
  auto av = a.values(), bv = b.values();
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(av.data() + n * Ca * sp, Ca * sp, o.data() + n * (Ca + Cb) * sp);
    std::copy_n(bv.data() + n * Cb * sp, Cb * sp, o.data() + n * (Ca + Cb) * sp + Ca * sp);
  }
  if (tracks_grad(a, b)) {
    out.set_requires_grad(true);
    Tensor<T> a_t = a, b_t = b, out_t = out;
    Tape<T>::active()->record([a_t, b_t, out_t, N, Ca, Cb, sp]() mutable {
      auto gout = out_t.grad();
      for (std::size_t n = 0; n < N; ++n) {
        if (a_t.requires_grad()) {
          auto g = a_t.grad_mut();
          const T* src = gout.data() + n * (Ca + Cb) * sp;
          for (std::size_t i = 0; i < Ca * sp; ++i) g[n * Ca * sp + i] += src[i];
        }
        if (b_t.requires_grad()) {
          auto g = b_t.grad_mut();
          const T* src = gout.data() + n * (Ca + Cb) * sp + Ca * sp;
          for (std::size_t i = 0; i < Cb * sp; ++i) g[n * Cb * sp + i] += src[i];
        }
      }
    });
  }
  return out;
}

// Select one sample from the batch axis.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& input, std::size_t index) {
  const Shape& is = input.shape();
  if (is.empty() || index >= is[0]) throw ShapeError("slice_batch: index out of range");
  const std::size_t sp = detail::spatial_size(is, 1);
  Shape out_shape = is;
  out_shape[0] = 1;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  std::copy_n(input.values().data() + index * sp, sp, out.values_mut().data());
  if (tracks_grad(input)) {
    out.set_requires_grad(true);
    Tensor<T> in_t = input, out_t = out;
    Tape<T>::active()->record([in_t, out_t, index, sp]() mutable {
      auto gin = in_t.grad_mut();
      auto gout = out_t.grad();
      for (std::size_t i = 0; i < sp; ++i) gin[index * sp + i] += gout[i];
    });
  }
  return out;
}

// Channel-wise batch statistics (EMA on running stats for inference).
template <typename T>
struct BatchNormStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormStats<T>& stats, bool training, T momentum = T(0.99),
                    T eps = T(1e-5)) {
  const Shape& is = input.shape();
  if (is.size() < 3) throw ShapeError("batchnorm: bad rank " + shape_str(is));
  const std::size_t N = is[0], C = is[1];
  const std::size_t sp = detail::spatial_size(is, 2);
  if (gamma.size() != C || beta.size() != C || stats.running_mean.size() != C)
    throw ShapeError("batchnorm: parameter size mismatch");

  std::vector<T> mean(C), inv_std(C);
  if (training) {
    const double m = static_cast<double>(N * sp);
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = input.values().data() + (n * C + c) * sp;
        for (std::size_t i = 0; i < sp; ++i) acc += static_cast<double>(p[i]);
      }
      const double mu = acc / m;
      double vacc = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = input.values().data() + (n * C + c) * sp;
        for (std::size_t i = 0; i < sp; ++i) {
          const double d = static_cast<double>(p[i]) - mu;
          vacc += d * d;
        }
      }
      const double var = vacc / m;
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      stats.running_mean[c] = momentum * stats.running_mean[c] + (T(1) - momentum) * static_cast<T>(mu);
      stats.running_var[c] = momentum * stats.running_var[c] + (T(1) - momentum) * static_cast<T>(var);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = stats.running_mean[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(stats.running_var[c]) +
                                                  static_cast<double>(eps)));
    }
  }

  Tensor<T> out = Tensor<T>::zeros(is);
  auto o = out.values_mut();
  auto in = input.values();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T g = gamma.values()[c], b = beta.values()[c], mu = mean[c], s = inv_std[c];
      const std::size_t base = (n * C + c) * sp;
      for (std::size_t i = 0; i < sp; ++i) o[base + i] = g * (in[base + i] - mu) * s + b;
    }

  if (tracks_grad(input, gamma, beta)) {
    out.set_requires_grad(true);
    Tensor<T> in_t = input, g_t = gamma, b_t = beta, out_t = out;
    Tape<T>::active()->record([in_t, g_t, b_t, out_t, mean = std::move(mean),
                               inv_std = std::move(inv_std), N, C, sp, training]() mutable {
      auto gout = out_t.grad();
      auto in = in_t.values();
      const double m = static_cast<double>(N * sp);
      for (std::size_t c = 0; c < C; ++c) {
        const T mu = mean[c], s = inv_std[c], g = g_t.values()[c];
        double sum_dy = 0, sum_dy_xhat = 0;
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t base = (n * C + c) * sp;
          for (std::size_t i = 0; i < sp; ++i) {
            const double dy = static_cast<double>(gout[base + i]);
            const double xh = static_cast<double>((in[base + i] - mu) * s);
            sum_dy += dy;
            sum_dy_xhat += dy * xh;
          }
        }
        if (g_t.requires_grad()) g_t.grad_mut()[c] += static_cast<T>(sum_dy_xhat);
        if (b_t.requires_grad()) b_t.grad_mut()[c] += static_cast<T>(sum_dy);
        if (in_t.requires_grad()) {
          auto gin = in_t.grad_mut();
          if (training) {
            const double mean_dy = sum_dy / m, mean_dy_xhat = sum_dy_xhat / m;
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t base = (n * C + c) * sp;
              for (std::size_t i = 0; i < sp; ++i) {
                const double dy = static_cast<double>(gout[base + i]);
                const double xh = static_cast<double>((in[base + i] - mu) * s);
                gin[base + i] += static_cast<T>(static_cast<double>(g) * static_cast<double>(s) *
                                                (dy - mean_dy - xh * mean_dy_xhat));
              }
            }
          } else {
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t base = (n * C + c) * sp;
              for (std::size_t i = 0; i < sp; ++i) gin[base + i] += gout[base + i] * g * s;
            }
          }
        }
      }
    });
  }
  return out;
}

// Inverted dropout; identity when not training or rate == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double rate, bool training, std::uint64_t rng_seed) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must lie in [0,1)");
  if (!training || rate == 0.0) return input;

  Tensor<T> out = Tensor<T>::zeros(input.shape());
  std::vector<std::uint8_t> keep(input.size());
  std::mt19937_64 rng(rng_seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  auto in = input.values();
  auto o = out.values_mut();
  for (std::size_t i = 0; i < o.size(); ++i) {
    keep[i] = uni(rng) >= rate ? 1 : 0;
    o[i] = keep[i] ? in[i] * scale : T(0);
  }
  if (tracks_grad(input)) {
    out.set_requires_grad(true);
    Tensor<T> in_t = input, out_t = out;
    Tape<T>::active()->record([in_t, out_t, keep = std::move(keep), scale]() mutable {
      auto gin = in_t.grad_mut();
      auto gout = out_t.grad();
      for (std::size_t i = 0; i < gin.size(); ++i)
        if (keep[i]) gin[i] += gout[i] * scale;
    });
  }
  return out;
}

// 1 - 2*sum(y.yhat)/(sum(yhat)+sum(y)); the denominator is replaced by 1e-6
// only when both sums vanish.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& truth) {
  if (pred.shape() != truth.shape())
    throw ShapeError("dice_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(truth.shape()));
  double inter = 0, sum_p = 0, sum_t = 0;
  auto pv = pred.values();
  auto tv = truth.values();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    inter += static_cast<double>(pv[i]) * static_cast<double>(tv[i]);
    sum_p += static_cast<double>(pv[i]);
    sum_t += static_cast<double>(tv[i]);
  }
  double denom = sum_p + sum_t;
  if (denom == 0.0) denom = 1e-6;
  const double loss = 1.0 - 2.0 * inter / denom;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss));
  if (tracks_grad(pred)) {
    out.set_requires_grad(true);
    Tensor<T> p_t = pred, t_t = truth, out_t = out;
    Tape<T>::active()->record([p_t, t_t, out_t, inter, denom]() mutable {
      const double g = static_cast<double>(out_t.grad()[0]);
      auto gp = p_t.grad_mut();
      auto tv = t_t.values();
      const double d2 = denom * denom;
      for (std::size_t i = 0; i < gp.size(); ++i)
        gp[i] += static_cast<T>(g * (-2.0) * (static_cast<double>(tv[i]) * denom - inter) / d2);
    });
  }
  return out;
}

// Per-sample 1x3 convolution along the width axis (zero padded): each of the
// P images gets its own 3-tap kernel and bias.
template <typename T>
Tensor<T> per_sample_conv1x3(const Tensor<T>& stack, const Tensor<T>& kernels,
                             const Tensor<T>& bias) {
  const Shape& ss = stack.shape();
  if (ss.size() != 4 || ss[1] != 1) throw ShapeError("per_sample_conv1x3: want [P,1,H,W]");
  const std::size_t P = ss[0], H = ss[2], W = ss[3];
  if (kernels.shape() != Shape{P, 3} || bias.shape() != Shape{P})
    throw ShapeError("per_sample_conv1x3: kernels must be [P,3], bias [P]");

  Tensor<T> out = Tensor<T>::zeros(ss);
  auto in = stack.values();
  auto o = out.values_mut();
  for (std::size_t p = 0; p < P; ++p) {
    const T k0 = kernels.values()[3 * p], k1 = kernels.values()[3 * p + 1],
            k2 = kernels.values()[3 * p + 2];
    const T b = bias.values()[p];
    for (std::size_t y = 0; y < H; ++y) {
      const T* row = in.data() + (p * H + y) * W;
      T* orow = o.data() + (p * H + y) * W;
      for (std::size_t x = 0; x < W; ++x) {
        T acc = b + k1 * row[x];
        if (x > 0) acc += k0 * row[x - 1];
        if (x + 1 < W) acc += k2 * row[x + 1];
        orow[x] = acc;
      }
    }
  }

  if (tracks_grad(stack, kernels, bias)) {
    out.set_requires_grad(true);
    Tensor<T> s_t = stack, k_t = kernels, b_t = bias, out_t = out;
    Tape<T>::active()->record([s_t, k_t, b_t, out_t, P, H, W]() mutable {
      auto gout = out_t.grad();
      auto in = s_t.values();
      for (std::size_t p = 0; p < P; ++p) {
        const T k0 = k_t.values()[3 * p], k1 = k_t.values()[3 * p + 1], k2 = k_t.values()[3 * p + 2];
        double dk0 = 0, dk1 = 0, dk2 = 0, db = 0;
        for (std::size_t y = 0; y < H; ++y) {
          const std::size_t base = (p * H + y) * W;
          for (std::size_t x = 0; x < W; ++x) {
            const T g = gout[base + x];
            db += static_cast<double>(g);
            dk1 += static_cast<double>(g) * static_cast<double>(in[base + x]);
            if (x > 0) dk0 += static_cast<double>(g) * static_cast<double>(in[base + x - 1]);
            if (x + 1 < W) dk2 += static_cast<double>(g) * static_cast<double>(in[base + x + 1]);
            if (s_t.requires_grad()) {
              auto gin = s_t.grad_mut();
              gin[base + x] += g * k1;
              if (x > 0) gin[base + x - 1] += g * k0;
              if (x + 1 < W) gin[base + x + 1] += g * k2;
            }
          }
        }
        if (k_t.requires_grad()) {
          auto gk = k_t.grad_mut();
          gk[3 * p] += static_cast<T>(dk0);
          gk[3 * p + 1] += static_cast<T>(dk1);
          gk[3 * p + 2] += static_cast<T>(dk2);
        }
        if (b_t.requires_grad()) b_t.grad_mut()[p] += static_cast<T>(db);
      }
    });
  }
  return out;
}

}  // namespace mipseg
