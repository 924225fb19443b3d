#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <vector>

#include "mipseg/tensor.hpp"
#include "mipseg/volume.hpp"

namespace mipseg {

enum class Span { Half, Full };

struct AngleSet {
  int p = 0;
  Span span = Span::Half;
  std::vector<double> degrees;
};

// Equidistant directions: k*180/p over a half turn, k*360/p over a full one.
inline AngleSet make_angles(int p, Span span) {
  if (p < 1) throw ConfigError("make_angles: p must be >= 1");
  AngleSet set;
  set.p = p;
  set.span = span;
  const double step = (span == Span::Half ? 180.0 : 360.0) / static_cast<double>(p);
  for (int k = 0; k < p; ++k) set.degrees.push_back(step * k);
  return set;
}

template <typename T>
struct ProjectionStack {
  std::vector<double> angles;
  std::vector<Image<T>> images;
};

namespace detail {

// cos/sin of a degree angle, with right angles snapped exact so that
// axis-aligned rotations are index permutations.
inline std::pair<double, double> cos_sin_deg(double degrees) {
  double d = std::fmod(degrees, 360.0);
  if (d < 0) d += 360.0;
  if (d == 0.0) return {1.0, 0.0};
  if (d == 90.0) return {0.0, 1.0};
  if (d == 180.0) return {-1.0, 0.0};
  if (d == 270.0) return {0.0, -1.0};
  const double r = d * std::numbers::pi / 180.0;
  return {std::cos(r), std::sin(r)};
}

// Bilinear gather from a contiguous (a,c) slice; out-of-grid samples read 0.
template <typename T>
inline T sample_bilinear(const T* slice, std::size_t a, std::size_t c, double pi, double pk) {
  const double fi = std::floor(pi), fk = std::floor(pk);
  const std::ptrdiff_t i0 = static_cast<std::ptrdiff_t>(fi);
  const std::ptrdiff_t k0 = static_cast<std::ptrdiff_t>(fk);
  const double wi = pi - fi, wk = pk - fk;
  double acc = 0;
  for (int di = 0; di < 2; ++di) {
    const std::ptrdiff_t ii = i0 + di;
    if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(a)) continue;
    const double wri = di ? wi : 1.0 - wi;
    if (wri == 0.0) continue;
    for (int dk = 0; dk < 2; ++dk) {
      const std::ptrdiff_t kk = k0 + dk;
      if (kk < 0 || kk >= static_cast<std::ptrdiff_t>(c)) continue;
      const double wrk = dk ? wk : 1.0 - wk;
      if (wrk == 0.0) continue;
      acc += wri * wrk * static_cast<double>(slice[ii * static_cast<std::ptrdiff_t>(c) + kk]);
    }
  }
  return static_cast<T>(acc);
}

// Source position for output cell (i,k) when rotating slice content by
// +degrees about the slice center.
struct SliceRotation {
  double cos_a, sin_a, ci, ck;

  SliceRotation(double degrees, std::size_t a, std::size_t c) {
    auto [cs, sn] = cos_sin_deg(degrees);
    cos_a = cs;
    sin_a = sn;
    ci = (static_cast<double>(a) - 1.0) / 2.0;
    ck = (static_cast<double>(c) - 1.0) / 2.0;
  }

  // Inverse-rotates (i,k) into the source frame.
  inline void source(double i, double k, double& pi, double& pk) const {
    const double di = i - ci, dk = k - ck;
    pi = cos_a * di + sin_a * dk + ci;
    pk = -sin_a * di + cos_a * dk + ck;
  }
};

}  // namespace detail

// Rotates every a-by-c plane (fixed vertical index) by alpha degrees about
// the plane center, bilinear interpolation, zero outside the source grid.
template <typename T>
Volume<T> rotate_slicewise(const Volume<T>& v, double alpha_deg, bool inverse = false) {
  const double deg = inverse ? -alpha_deg : alpha_deg;
  Volume<T> out(v.a, v.b, v.c);
  const detail::SliceRotation rot(deg, v.a, v.c);
  std::vector<T> slice(v.a * v.c);
  std::vector<T> rotated(v.a * v.c);
  for (std::size_t j = 0; j < v.b; ++j) {
    for (std::size_t i = 0; i < v.a; ++i)
      for (std::size_t k = 0; k < v.c; ++k) slice[i * v.c + k] = v.at(i, j, k);
    for (std::size_t i = 0; i < v.a; ++i)
      for (std::size_t k = 0; k < v.c; ++k) {
        double pi, pk;
        rot.source(static_cast<double>(i), static_cast<double>(k), pi, pk);
        rotated[i * v.c + k] = detail::sample_bilinear(slice.data(), v.a, v.c, pi, pk);
      }
    for (std::size_t i = 0; i < v.a; ++i)
      for (std::size_t k = 0; k < v.c; ++k) out.at(i, j, k) = rotated[i * v.c + k];
  }
  return out;
}

// Maximum intensity projection along axis a of the rotated volume.
template <typename T>
Image<T> mip(const Volume<T>& v, double alpha_deg) {
  Volume<T> r = rotate_slicewise(v, alpha_deg);
  Image<T> img(v.b, v.c, std::numeric_limits<T>::lowest());
  for (std::size_t i = 0; i < v.a; ++i)
    for (std::size_t j = 0; j < v.b; ++j) {
      const T* line = r.data.data() + r.index(i, j, 0);
      T* orow = img.data.data() + j * v.c;
      for (std::size_t k = 0; k < v.c; ++k) orow[k] = std::max(orow[k], line[k]);
    }
  return img;
}

// Projected 2d ground truth: MIP of the {0,1} mask, thresholded at 0.5.
template <typename T = float>
inline MaskImage mip_mask(const MaskVolume& mask, double alpha_deg) {
  Volume<T> as_float(mask.a, mask.b, mask.c);
  for (std::size_t i = 0; i < mask.size(); ++i) as_float.data[i] = static_cast<T>(mask.data[i]);
  Image<T> proj = mip(as_float, alpha_deg);
  MaskImage out(proj.rows, proj.cols);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = proj.data[i] >= T(0.5) ? 1 : 0;
  return out;
}

// Linear counterpart of mip: sum along axis a of the rotated volume.
template <typename T>
Image<T> sum_project(const Volume<T>& v, double alpha_deg) {
  Volume<T> r = rotate_slicewise(v, alpha_deg);
  Image<T> img(v.b, v.c, T(0));
  for (std::size_t i = 0; i < v.a; ++i)
    for (std::size_t j = 0; j < v.b; ++j) {
      const T* line = r.data.data() + r.index(i, j, 0);
      T* orow = img.data.data() + j * v.c;
      for (std::size_t k = 0; k < v.c; ++k) orow[k] += line[k];
    }
  return img;
}

// Exact transpose of sum_project: broadcast the image along axis a in the
// rotated frame and splat each cell's bilinear footprint back into the
// canonical frame (a rotation by -alpha realized as a scatter).
template <typename T>
Volume<T> backproject_one(const Image<T>& g, double alpha_deg, std::size_t a_extent) {
  Volume<T> out(a_extent, g.rows, g.cols);
  const std::size_t c = g.cols;
  const detail::SliceRotation rot(alpha_deg, a_extent, c);
  std::vector<double> slice(a_extent * c);
  for (std::size_t j = 0; j < g.rows; ++j) {
    std::fill(slice.begin(), slice.end(), 0.0);
    const T* grow = g.data.data() + j * c;
    for (std::size_t i = 0; i < a_extent; ++i)
      for (std::size_t k = 0; k < c; ++k) {
        double pi, pk;
        rot.source(static_cast<double>(i), static_cast<double>(k), pi, pk);
        const double fi = std::floor(pi), fk = std::floor(pk);
        const std::ptrdiff_t i0 = static_cast<std::ptrdiff_t>(fi);
        const std::ptrdiff_t k0 = static_cast<std::ptrdiff_t>(fk);
        const double wi = pi - fi, wk = pk - fk;
        const double val = static_cast<double>(grow[k]);
        for (int di = 0; di < 2; ++di) {
          const std::ptrdiff_t ii = i0 + di;
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(a_extent)) continue;
          const double wri = di ? wi : 1.0 - wi;
          if (wri == 0.0) continue;
          for (int dk = 0; dk < 2; ++dk) {
            const std::ptrdiff_t kk = k0 + dk;
            if (kk < 0 || kk >= static_cast<std::ptrdiff_t>(c)) continue;
            const double wrk = dk ? wk : 1.0 - wk;
            if (wrk == 0.0) continue;
            slice[ii * static_cast<std::ptrdiff_t>(c) + kk] += wri * wrk * val;
          }
        }
      }
    for (std::size_t i = 0; i < a_extent; ++i)
      for (std::size_t k = 0; k < c; ++k) out.at(i, j, k) = static_cast<T>(slice[i * c + k]);
  }
  return out;
}

// Reconstruction operator: sum of single-direction backprojections, summed
// in ascending angle order so the result is independent of stack order.
template <typename T>
Volume<T> backproject(const ProjectionStack<T>& stack, std::size_t a_extent) {
  if (stack.angles.empty() || stack.angles.size() != stack.images.size())
    throw ShapeError("backproject: stack angle/image count mismatch");
  std::vector<std::size_t> order(stack.angles.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return stack.angles[x] < stack.angles[y]; });
  Volume<T> acc(a_extent, stack.images[0].rows, stack.images[0].cols);
  for (std::size_t idx : order) {
    const Image<T>& img = stack.images[idx];
    if (img.rows != acc.b || img.cols != acc.c)
      throw ShapeError("backproject: images in a stack must share extents");
    Volume<T> one = backproject_one(img, stack.angles[idx], a_extent);
    for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += one.data[i];
  }
  return acc;
}

// Differentiable backprojection over a [P,1,H,W] image stack, producing a
// [1,1,A,H,W] tensor. Forward scatters per direction in ascending angle
// order; the adjoint gathers with the same weights (a rotated column sum).
template <typename T>
Tensor<T> backproject_op(const Tensor<T>& stack, const std::vector<double>& angles,
                         std::size_t a_extent) {
  const Shape& ss = stack.shape();
  if (ss.size() != 4 || ss[1] != 1) throw ShapeError("backproject_op: want [P,1,H,W]");
  const std::size_t P = ss[0], H = ss[2], W = ss[3];
  if (angles.size() != P) throw ShapeError("backproject_op: angle count mismatch");

  std::vector<std::size_t> order(P);
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return angles[x] < angles[y]; });

  Tensor<T> out = Tensor<T>::zeros({1, 1, a_extent, H, W});
  auto o = out.values_mut();
  for (std::size_t idx : order) {
    Image<T> img(H, W);
    std::copy_n(stack.values().data() + idx * H * W, H * W, img.data.data());
    Volume<T> one = backproject_one(img, angles[idx], a_extent);
    for (std::size_t i = 0; i < one.data.size(); ++i) o[i] += one.data[i];
  }

  if (tracks_grad(stack)) {
    out.set_requires_grad(true);
    Tensor<T> s_t = stack, out_t = out;
    Tape<T>::active()->record([s_t, out_t, angles, a_extent, P, H, W]() mutable {
      Volume<T> gvol(a_extent, H, W);
      std::copy_n(out_t.grad().data(), gvol.data.size(), gvol.data.begin());
      auto gin = s_t.grad_mut();
      for (std::size_t p = 0; p < P; ++p) {
        Image<T> gimg = sum_project(gvol, angles[p]);
        for (std::size_t i = 0; i < H * W; ++i) gin[p * H * W + i] += gimg.data[i];
      }
    });
  }
  return out;
}

}  // namespace mipseg
