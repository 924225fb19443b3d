#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mipseg/common.hpp"

namespace mipseg {

// Dense 3d scalar grid. Axis order in memory is a-major, then b, then c
// (c contiguous). Axis b is the vertical rotation axis; slice rotations mix
// axes a and c; projections reduce axis a.
template <typename T>
struct Volume {
  std::size_t a = 0, b = 0, c = 0;
  std::vector<T> data;

  Volume() = default;
  Volume(std::size_t a_, std::size_t b_, std::size_t c_, T fill = T(0))
      : a(a_), b(b_), c(c_), data(a_ * b_ * c_, fill) {}

  std::size_t size() const { return a * b * c; }
  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const { return (i * b + j) * c + k; }
  T& at(std::size_t i, std::size_t j, std::size_t k) { return data[index(i, j, k)]; }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const { return data[index(i, j, k)]; }
};

using VolumeF = Volume<float>;

struct MaskVolume {
  std::size_t a = 0, b = 0, c = 0;
  std::vector<std::uint8_t> data;

  MaskVolume() = default;
  MaskVolume(std::size_t a_, std::size_t b_, std::size_t c_)
      : a(a_), b(b_), c(c_), data(a_ * b_ * c_, 0) {}

  std::size_t size() const { return a * b * c; }
  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const { return (i * b + j) * c + k; }
  std::uint8_t& at(std::size_t i, std::size_t j, std::size_t k) { return data[index(i, j, k)]; }
  std::uint8_t at(std::size_t i, std::size_t j, std::size_t k) const { return data[index(i, j, k)]; }
};

// 2d grid, rows x cols row-major; rows index axis b, cols axis c.
template <typename T>
struct Image {
  std::size_t rows = 0, cols = 0;
  std::vector<T> data;

  Image() = default;
  Image(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}

  T& at(std::size_t r, std::size_t c_) { return data[r * cols + c_]; }
  const T& at(std::size_t r, std::size_t c_) const { return data[r * cols + c_]; }
};

using ImageF = Image<float>;

struct MaskImage {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> data;

  MaskImage() = default;
  MaskImage(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0) {}

  std::uint8_t& at(std::size_t r, std::size_t c_) { return data[r * cols + c_]; }
  std::uint8_t at(std::size_t r, std::size_t c_) const { return data[r * cols + c_]; }
};

// "MVOL" container: magic, version u32, extents a,b,c as u64 LE, dtype tag
// u32 (0 = f32, 1 = u8 mask), then raw data in a-major order.
inline constexpr std::uint32_t kMvolVersion = 1;

void write_volume(const std::string& path, const VolumeF& volume);
void write_mask(const std::string& path, const MaskVolume& mask);
VolumeF read_volume(const std::string& path);
MaskVolume read_mask(const std::string& path);

// 16-bit binary PGM (P5). Values are scaled from [min,max] to [0,65535];
// constant images come out all zero.
void write_pgm(const std::string& path, const ImageF& image);
void write_pgm(const std::string& path, const MaskImage& image);

}  // namespace mipseg
