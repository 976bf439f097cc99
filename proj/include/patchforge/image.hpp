#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "patchforge/params.hpp"

namespace patchforge {

/// Planar image ([channel][row][col]) of reals. Color images hold values in
/// [0,1]; derived residual channels may leave that range.
struct ImageBuffer {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<double> values;

  ImageBuffer() = default;
  ImageBuffer(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), values(h * w * c, fill) {}

  double& at(std::size_t c, std::size_t y, std::size_t x) { return values[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return values[(c * height + y) * width + x]; }
  std::size_t plane() const { return height * width; }

  bool operator==(const ImageBuffer&) const = default;
};

/// Single-channel boolean raster (e.g. manipulated-pixel masks).
struct Mask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}
  std::uint8_t& at(std::size_t y, std::size_t x) { return bits[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return bits[y * width + x]; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
  bool operator==(const Mask&) const = default;
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Rounds every sample to the 8-bit grid, as writing and re-reading would.
inline void quantize_8bit(ImageBuffer& img) {
  for (double& v : img.values) v = to_byte(v) / 255.0;
}

// Binary PPM (P6) for 3 channels, PGM (P5) for 1 channel; 8-bit only.
inline std::string encode_pnm(const ImageBuffer& img) {
  if (img.channels != 1 && img.channels != 3) throw InputError("PNM encoding needs 1 or 3 channels");
  std::ostringstream os;
  os << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  std::string out = os.str();
  out.reserve(out.size() + img.values.size());
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) out.push_back(static_cast<char>(to_byte(img.at(c, y, x))));
    }
  }
  return out;
}

inline ImageBuffer decode_pnm(const std::string& bytes, const std::string& origin = "<memory>") {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> long {
    skip_space();
    long v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
      if (v > (1L << 30)) break;
    }
    if (!any) throw IoError(origin + ": malformed PNM header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5')) {
    throw IoError(origin + ": not a binary PPM/PGM image");
  }
  const std::size_t channels = bytes[1] == '6' ? 3 : 1;
  pos = 2;
  const long w = read_int(), h = read_int(), maxval = read_int();
  if (w <= 0 || h <= 0 || maxval != 255) throw IoError(origin + ": only 8-bit PPM/PGM with positive size is supported");
  ++pos;  // single whitespace before the raster
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * channels;
  if (bytes.size() < pos + n) throw IoError(origin + ": truncated raster");
  ImageBuffer img(static_cast<std::size_t>(h), static_cast<std::size_t>(w), channels);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        img.at(c, y, x) = static_cast<unsigned char>(bytes[pos++]) / 255.0;
      }
    }
  }
  return img;
}

inline ImageBuffer read_pnm(const std::string& path) { return decode_pnm(read_file(path), path); }
inline void write_pnm(const std::string& path, const ImageBuffer& img) { write_file(path, encode_pnm(img)); }

inline ImageBuffer mask_to_image(const Mask& m) {
  ImageBuffer img(m.height, m.width, 1);
  for (std::size_t i = 0; i < m.bits.size(); ++i) img.values[i] = m.bits[i] ? 1.0 : 0.0;
  return img;
}

inline Mask image_to_mask(const ImageBuffer& img) {
  Mask m(img.height, img.width);
  for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = img.values[i] >= 0.5 ? 1 : 0;
  return m;
}

/// Bilinear sample with clamped borders.
inline double sample_bilinear(const ImageBuffer& img, std::size_t c, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y)), x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  if (fy == 0.0 && fx == 0.0) return img.at(c, y0, x0);
  const double top = img.at(c, y0, x0) * (1 - fx) + img.at(c, y0, x1) * fx;
  const double bot = img.at(c, y1, x0) * (1 - fx) + img.at(c, y1, x1) * fx;
  return top * (1 - fy) + bot * fy;
}

/// Bilinear resampling to (h, w) with pixel-center alignment; an equal-size
/// request returns an exact copy.
inline ImageBuffer resize_bilinear(const ImageBuffer& img, std::size_t h, std::size_t w) {
  if (h == img.height && w == img.width) return img;
  ImageBuffer out(h, w, img.channels);
  const double sy = static_cast<double>(img.height) / static_cast<double>(h);
  const double sx = static_cast<double>(img.width) / static_cast<double>(w);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        out.at(c, y, x) = sample_bilinear(img, c, (static_cast<double>(y) + 0.5) * sy - 0.5, (static_cast<double>(x) + 0.5) * sx - 0.5);
      }
    }
  }
  return out;
}

/// One of the 8 flips/rotations of the square's symmetry group.
/// Bit 0: horizontal flip, bit 1: vertical flip, bit 2: transpose.
template <class Raster, class Get, class Make>
Raster dihedral_apply(const Raster& in, std::size_t h, std::size_t w, int op, Get get, Make make) {
  const bool transpose = op & 4;
  const std::size_t oh = transpose ? w : h, ow = transpose ? h : w;
  Raster out = make(oh, ow);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      std::size_t sy = transpose ? x : y, sx = transpose ? y : x;
      if (op & 1) sx = w - 1 - sx;
      if (op & 2) sy = h - 1 - sy;
      get(out, in, y, x, sy, sx);
    }
  }
  return out;
}

inline ImageBuffer dihedral(const ImageBuffer& img, int op) {
  return dihedral_apply(
      img, img.height, img.width, op,
      [&](ImageBuffer& o, const ImageBuffer& i, std::size_t y, std::size_t x, std::size_t sy, std::size_t sx) {
        for (std::size_t c = 0; c < i.channels; ++c) o.at(c, y, x) = i.at(c, sy, sx);
      },
      [&](std::size_t h, std::size_t w) { return ImageBuffer(h, w, img.channels); });
}

inline Mask dihedral(const Mask& m, int op) {
  return dihedral_apply(
      m, m.height, m.width, op,
      [](Mask& o, const Mask& i, std::size_t y, std::size_t x, std::size_t sy, std::size_t sx) { o.at(y, x) = i.at(sy, sx); },
      [](std::size_t h, std::size_t w) { return Mask(h, w); });
}

}  // namespace patchforge
