#pragma once

// Synthetic forgery corpus: procedural backgrounds carrying a per-family
// periodic micro-texture, three manipulation types, shared flips/rotations
// per pristine/forged pair, and block-DCT quantization.

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "patchforge/digest.hpp"
#include "patchforge/image.hpp"

namespace patchforge {

using Rng = std::mt19937_64;

inline Rng make_rng(std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words;
  for (std::uint64_t p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

/// Fixed high-frequency pattern shared by every image of a family.
struct FamilySignature {
  std::size_t period_y = 4, period_x = 4;
  double amplitude = 0.05;
  std::vector<double> tile;  // [channel][period_y][period_x], zero-mean per channel

  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return tile[(c * period_y + y % period_y) * period_x + x % period_x];
  }
};

inline constexpr double kDitherAmplitude = 40.0 / 255.0;

inline FamilySignature family_signature(std::uint64_t family, std::size_t channels = 3,
                                        double amplitude = kDitherAmplitude) {
  Rng rng = make_rng({0xfa111e5ULL, family});
  FamilySignature s;
  s.period_y = 2 + uniform_index(rng, 4);
  s.period_x = 2 + uniform_index(rng, 4);
  s.amplitude = amplitude * uniform(rng, 0.8, 1.2);
  const std::size_t n = s.period_y * s.period_x;
  s.tile.resize(channels * n);
  for (std::size_t c = 0; c < channels; ++c) {
    double mean = 0, peak = 0;
    for (std::size_t i = 0; i < n; ++i) mean += s.tile[c * n + i] = uniform(rng, -1.0, 1.0);
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) peak = std::max(peak, std::abs(s.tile[c * n + i] -= mean));
    for (std::size_t i = 0; i < n; ++i) s.tile[c * n + i] *= s.amplitude / std::max(peak, 1e-9);
  }
  return s;
}

/// Smooth random field: bilinear upsampling of a coarse grid of uniforms.
inline void add_value_noise(ImageBuffer& img, std::size_t c, std::size_t cell, double amplitude, Rng& rng) {
  const std::size_t gh = img.height / cell + 2, gw = img.width / cell + 2;
  ImageBuffer grid(gh, gw, 1);
  for (double& v : grid.values) v = uniform(rng, -amplitude, amplitude);
  const double oy = uniform(rng, 0, 1), ox = uniform(rng, 0, 1);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      img.at(c, y, x) += sample_bilinear(grid, 0, static_cast<double>(y) / static_cast<double>(cell) + oy,
                                         static_cast<double>(x) / static_cast<double>(cell) + ox);
    }
  }
}

/// Procedural background of `family`, 8-bit quantized.
inline ImageBuffer gen_background(std::uint64_t seed, std::uint64_t family, std::size_t height, std::size_t width,
                                  std::size_t channels = 3, double dither = kDitherAmplitude) {
  Rng rng = make_rng({0xb6ULL, seed, family});
  const FamilySignature sig = family_signature(family, channels, dither);
  ImageBuffer img(height, width, channels);
  const double gy = uniform(rng, -0.3, 0.3), gx = uniform(rng, -0.3, 0.3);
  for (std::size_t c = 0; c < channels; ++c) {
    const double base = uniform(rng, 0.3, 0.7);
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        img.at(c, y, x) = base + gy * (static_cast<double>(y) / height - 0.5) + gx * (static_cast<double>(x) / width - 0.5);
      }
    }
  }
  for (std::size_t c = 0; c < channels; ++c) {
    add_value_noise(img, c, 16, 0.12, rng);
    add_value_noise(img, c, 6, 0.05, rng);
  }
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        img.at(c, y, x) = std::clamp(img.at(c, y, x), 0.1, 0.9) + sig.at(c, y, x);
      }
    }
  }
  quantize_8bit(img);
  return img;
}

inline ImageBuffer gen_background(std::uint64_t seed, std::size_t height, std::size_t width) {
  return gen_background(seed, seed, height, width);
}

/// Shifts each channel of `donor` to the mean of the same channel of `host`.
inline void match_channel_means(ImageBuffer& donor, const ImageBuffer& host) {
  const std::size_t n = donor.height * donor.width, m = host.height * host.width;
  for (std::size_t c = 0; c < donor.channels; ++c) {
    double dm = 0, hm = 0;
    for (std::size_t i = 0; i < n; ++i) dm += donor.values[c * n + i];
    for (std::size_t i = 0; i < m; ++i) hm += host.values[c * m + i];
    const double shift = hm / static_cast<double>(m) - dm / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) donor.values[c * n + i] = std::clamp(donor.values[c * n + i] + shift, 0.0, 1.0);
  }
  quantize_8bit(donor);
}

struct Box {
  long top = 0, left = 0, height = 0, width = 0;
  bool operator==(const Box&) const = default;
  long bottom() const { return top + height; }
  long right() const { return left + width; }
  bool inside(std::size_t h, std::size_t w) const {
    return top >= 0 && left >= 0 && height > 0 && width > 0 && bottom() <= static_cast<long>(h) &&
           right() <= static_cast<long>(w);
  }
};

inline constexpr double kMinAreaFraction = 0.01;
inline constexpr double kMaxAreaFraction = 0.10;

enum class ObjectShape { rectangle, ellipse };

struct SpliceSpec {
  std::uint64_t object_id = 0;
  ObjectShape shape = ObjectShape::rectangle;
  double donor_row = 0, donor_col = 0;        // object center in the donor
  double half_height = 0, half_width = 0;     // object extent in donor pixels
  double target_row = 0, target_col = 0;      // object center in the host
  double scale = 1.0;
  double rotation_deg = 0.0;
  Box bbox;                                   // filled by splice()
  double area_fraction = 0.0;                 // filled by splice()
};

struct Manipulated {
  ImageBuffer image;
  Mask mask;
  Box bbox;
  double area_fraction = 0.0;
};

inline void check_area(double f) {
  if (f < kMinAreaFraction || f > kMaxAreaFraction) {
    throw InputError("manipulated area fraction " + std::to_string(f) + " outside [0.01, 0.10]");
  }
}

/// Pastes a scaled/rotated donor object into the host. Host pixel p takes the
/// donor value at R(-theta) (p - target) / scale + donor_center whenever that
/// point lies inside the object shape.
inline Manipulated splice(const ImageBuffer& host, const ImageBuffer& donor, SpliceSpec& spec) {
  if (donor.channels != host.channels) throw InputError("donor and host channel counts differ");
  if (spec.scale <= 0 || spec.half_height <= 0 || spec.half_width <= 0) throw InputError("degenerate splice object");
  const double th = spec.rotation_deg * std::numbers::pi / 180.0;
  const double ct = std::cos(th), st = std::sin(th);
  // bounding box of the transformed object
  const double ey = spec.scale * (std::abs(ct) * spec.half_height + std::abs(st) * spec.half_width);
  const double ex = spec.scale * (std::abs(st) * spec.half_height + std::abs(ct) * spec.half_width);
  spec.bbox = Box{static_cast<long>(std::floor(spec.target_row - ey)), static_cast<long>(std::floor(spec.target_col - ex)), 0, 0};
  spec.bbox.height = static_cast<long>(std::ceil(spec.target_row + ey)) - spec.bbox.top + 1;
  spec.bbox.width = static_cast<long>(std::ceil(spec.target_col + ex)) - spec.bbox.left + 1;
  if (!spec.bbox.inside(host.height, host.width)) throw InputError("splice bounding box outside the host image");
  const double dh = spec.half_height, dw = spec.half_width;
  if (spec.donor_row < 0 || spec.donor_col < 0 || spec.donor_row > static_cast<double>(donor.height - 1) ||
      spec.donor_col > static_cast<double>(donor.width - 1)) {
    throw InputError("donor center outside the donor image");
  }
  Manipulated out{host, Mask(host.height, host.width), spec.bbox, 0.0};
  for (long y = spec.bbox.top; y < spec.bbox.bottom(); ++y) {
    for (long x = spec.bbox.left; x < spec.bbox.right(); ++x) {
      const double py = (static_cast<double>(y) - spec.target_row) / spec.scale;
      const double px = (static_cast<double>(x) - spec.target_col) / spec.scale;
      const double u = ct * py + st * px;   // rotate by -theta
      const double v = -st * py + ct * px;
      const double ny = u / dh, nx = v / dw;
      const bool in = spec.shape == ObjectShape::rectangle ? (std::abs(ny) <= 1.0 && std::abs(nx) <= 1.0)
                                                           : (ny * ny + nx * nx <= 1.0);
      if (!in) continue;
      const auto uy = static_cast<std::size_t>(y), ux = static_cast<std::size_t>(x);
      out.mask.at(uy, ux) = 1;
      for (std::size_t c = 0; c < host.channels; ++c) {
        out.image.at(c, uy, ux) = sample_bilinear(donor, c, spec.donor_row + u, spec.donor_col + v);
      }
    }
  }
  out.area_fraction = static_cast<double>(out.mask.count()) / static_cast<double>(host.height * host.width);
  check_area(out.area_fraction);
  spec.area_fraction = out.area_fraction;
  return out;
}

/// Copies the `src` box of the host onto the same-size box at `dst`.
inline Manipulated copy_move(const ImageBuffer& host, const Box& src, long dst_top, long dst_left) {
  const Box dst{dst_top, dst_left, src.height, src.width};
  if (!src.inside(host.height, host.width) || !dst.inside(host.height, host.width)) {
    throw InputError("copy-move box outside the image");
  }
  Manipulated out{host, Mask(host.height, host.width), dst, 0.0};
  for (long y = 0; y < src.height; ++y) {
    for (long x = 0; x < src.width; ++x) {
      const auto sy = static_cast<std::size_t>(src.top + y), sx = static_cast<std::size_t>(src.left + x);
      const auto ty = static_cast<std::size_t>(dst.top + y), tx = static_cast<std::size_t>(dst.left + x);
      for (std::size_t c = 0; c < host.channels; ++c) out.image.at(c, ty, tx) = host.at(c, sy, sx);
      out.mask.at(ty, tx) = 1;
    }
  }
  out.area_fraction = static_cast<double>(out.mask.count()) / static_cast<double>(host.height * host.width);
  return out;
}

inline constexpr int kInpaintIterations = 200;

/// Erases a box and fills it by repeated 4-neighbour averaging, starting from
/// the mean of the pixels bordering the box.
inline Manipulated inpaint_erase(const ImageBuffer& host, const Box& box) {
  if (!box.inside(host.height, host.width)) throw InputError("inpaint box outside the image");
  Manipulated out{host, Mask(host.height, host.width), box, 0.0};
  const long H = static_cast<long>(host.height), W = static_cast<long>(host.width);
  auto inside_box = [&](long y, long x) { return y >= box.top && y < box.bottom() && x >= box.left && x < box.right(); };
  for (std::size_t c = 0; c < host.channels; ++c) {
    double sum = 0;
    long n = 0;
    for (long y = box.top - 1; y <= box.bottom(); ++y) {
      for (long x = box.left - 1; x <= box.right(); ++x) {
        if (y < 0 || x < 0 || y >= H || x >= W || inside_box(y, x)) continue;
        sum += host.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
        ++n;
      }
    }
    const double init = n ? sum / static_cast<double>(n) : 0.5;
    ImageBuffer& img = out.image;
    for (long y = box.top; y < box.bottom(); ++y) {
      for (long x = box.left; x < box.right(); ++x) img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = init;
    }
    std::vector<double> next(static_cast<std::size_t>(box.height * box.width));
    for (int it = 0; it < kInpaintIterations; ++it) {
      for (long y = box.top; y < box.bottom(); ++y) {
        for (long x = box.left; x < box.right(); ++x) {
          double s = 0;
          int k = 0;
          const long ny[4] = {y - 1, y + 1, y, y}, nx[4] = {x, x, x - 1, x + 1};
          for (int j = 0; j < 4; ++j) {
            if (ny[j] < 0 || nx[j] < 0 || ny[j] >= H || nx[j] >= W) continue;
            s += img.at(c, static_cast<std::size_t>(ny[j]), static_cast<std::size_t>(nx[j]));
            ++k;
          }
          next[static_cast<std::size_t>((y - box.top) * box.width + (x - box.left))] = s / k;
        }
      }
      for (long y = box.top; y < box.bottom(); ++y) {
        for (long x = box.left; x < box.right(); ++x) {
          img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
              next[static_cast<std::size_t>((y - box.top) * box.width + (x - box.left))];
        }
      }
    }
  }
  for (long y = box.top; y < box.bottom(); ++y) {
    for (long x = box.left; x < box.right(); ++x) out.mask.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1;
  }
  out.area_fraction = static_cast<double>(out.mask.count()) / static_cast<double>(host.height * host.width);
  return out;
}

// Standard luminance quantization table (row-major 8x8).
inline constexpr std::array<int, 64> kLuminanceTable = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,  14, 13, 16, 24, 40,  57,  69,  56,
    14, 17, 22, 29, 51,  87,  80,  62,  18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

inline void check_quality(int quality) {
  if (quality < 75 || quality > 100) throw InputError("JPEG quality " + std::to_string(quality) + " outside [75, 100]");
}

/// Quality-scaled table: scale = 200 - 2q for q >= 50, entries clamped to [1, 255].
inline std::array<int, 64> quantization_table(int quality) {
  check_quality(quality);
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::array<int, 64> t{};
  for (std::size_t i = 0; i < 64; ++i) t[i] = std::clamp((kLuminanceTable[i] * scale + 50) / 100, 1, 255);
  return t;
}

namespace detail {

inline const std::array<double, 64>& dct_basis() {
  static const std::array<double, 64> b = [] {
    std::array<double, 64> m{};
    for (int u = 0; u < 8; ++u) {
      const double a = u == 0 ? std::sqrt(1.0 / 8) : std::sqrt(2.0 / 8);
      for (int x = 0; x < 8; ++x) m[u * 8 + x] = a * std::cos((2 * x + 1) * u * std::numbers::pi / 16);
    }
    return m;
  }();
  return b;
}

inline void dct8x8(const double* in, double* out) {
  const auto& B = dct_basis();
  double tmp[64];
  for (int y = 0; y < 8; ++y) {
    for (int u = 0; u < 8; ++u) {
      double s = 0;
      for (int x = 0; x < 8; ++x) s += B[u * 8 + x] * in[y * 8 + x];
      tmp[y * 8 + u] = s;
    }
  }
  for (int v = 0; v < 8; ++v) {
    for (int u = 0; u < 8; ++u) {
      double s = 0;
      for (int y = 0; y < 8; ++y) s += B[v * 8 + y] * tmp[y * 8 + u];
      out[v * 8 + u] = s;
    }
  }
}

inline void idct8x8(const double* in, double* out) {
  const auto& B = dct_basis();
  double tmp[64];
  for (int v = 0; v < 8; ++v) {
    for (int x = 0; x < 8; ++x) {
      double s = 0;
      for (int u = 0; u < 8; ++u) s += B[u * 8 + x] * in[v * 8 + u];
      tmp[v * 8 + x] = s;
    }
  }
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      double s = 0;
      for (int v = 0; v < 8; ++v) s += B[v * 8 + y] * tmp[v * 8 + x];
      out[y * 8 + x] = s;
    }
  }
}

}  // namespace detail

/// Zero counts of the quantized AC coefficients (edge blocks replicate the
/// last row/column).
struct DctCensus {
  std::size_t ac_total = 0, ac_zero = 0;
};

/// Block-DCT quantization round trip on the 0..255 scale, per channel; the
/// decoded samples are rounded to integers like a real decoder's output.
inline ImageBuffer jpeg_like(const ImageBuffer& img, int quality, DctCensus* census = nullptr) {
  const auto table = quantization_table(quality);
  ImageBuffer out = img;
  double block[64], coef[64];
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t by = 0; by < img.height; by += 8) {
      for (std::size_t bx = 0; bx < img.width; bx += 8) {
        for (std::size_t y = 0; y < 8; ++y) {
          for (std::size_t x = 0; x < 8; ++x) {
            const std::size_t sy = std::min(by + y, img.height - 1), sx = std::min(bx + x, img.width - 1);
            block[y * 8 + x] = img.at(c, sy, sx) * 255.0 - 128.0;
          }
        }
        detail::dct8x8(block, coef);
        for (std::size_t i = 0; i < 64; ++i) {
          const double q = std::round(coef[i] / table[i]);
          if (census && i > 0) {
            ++census->ac_total;
            census->ac_zero += q == 0.0;
          }
          coef[i] = q * table[i];
        }
        detail::idct8x8(coef, block);
        for (std::size_t y = 0; y < 8 && by + y < img.height; ++y) {
          for (std::size_t x = 0; x < 8 && bx + x < img.width; ++x) {
            out.at(c, by + y, bx + x) = std::clamp(std::round(block[y * 8 + x] + 128.0), 0.0, 255.0) / 255.0;
          }
        }
      }
    }
  }
  return out;
}

enum class Manipulation { splicing, copy_move, inpainting };

inline const char* manipulation_name(Manipulation m) {
  switch (m) {
    case Manipulation::splicing: return "splicing";
    case Manipulation::copy_move: return "copy-move";
    case Manipulation::inpainting: return "inpainting";
  }
  return "?";
}

inline Manipulation parse_manipulation(const std::string& s) {
  if (s == "splicing") return Manipulation::splicing;
  if (s == "copy-move") return Manipulation::copy_move;
  if (s == "inpainting") return Manipulation::inpainting;
  throw ConfigError("unknown manipulation '" + s + "'");
}

struct DatasetConfig {
  std::size_t height = 64, width = 64;
  std::size_t train_pairs = 200, val_pairs = 40, test_pairs = 50;
  std::size_t train_families = 16, val_families = 4, test_families = 6;
  double weight_splicing = 0.7, weight_copy_move = 0.15, weight_inpainting = 0.15;
  double jpeg_probability = 0.9;
  int quality_min = 75, quality_max = 100;
  double area_min = 0.012, area_max = 0.095;
  double dither_amplitude = kDitherAmplitude;

  void validate() const {
    if (height < 8 || width < 8) throw ConfigError("images must be at least 8x8");
    if (train_families < 2 || val_families < 2 || test_families < 2) {
      throw ConfigError("each split needs at least two families (splice donors come from another family)");
    }
    if (weight_splicing < 0 || weight_copy_move < 0 || weight_inpainting < 0 ||
        weight_splicing + weight_copy_move + weight_inpainting <= 0) {
      throw ConfigError("manipulation weights must be non-negative with a positive sum");
    }
    check_quality(quality_min);
    check_quality(quality_max);
    if (quality_min > quality_max) throw ConfigError("quality_min exceeds quality_max");
    if (area_min < kMinAreaFraction || area_max > kMaxAreaFraction || area_min > area_max) {
      throw ConfigError("area range must lie inside [0.01, 0.10]");
    }
    if (jpeg_probability < 0 || jpeg_probability > 1) throw ConfigError("jpeg_probability must lie in [0, 1]");
  }

  nlohmann::json to_json() const {
    return {{"height", height},
            {"width", width},
            {"train_pairs", train_pairs},
            {"val_pairs", val_pairs},
            {"test_pairs", test_pairs},
            {"train_families", train_families},
            {"val_families", val_families},
            {"test_families", test_families},
            {"weight_splicing", weight_splicing},
            {"weight_copy_move", weight_copy_move},
            {"weight_inpainting", weight_inpainting},
            {"jpeg_probability", jpeg_probability},
            {"quality_min", quality_min},
            {"quality_max", quality_max},
            {"area_min", area_min},
            {"area_max", area_max},
            {"dither_amplitude", dither_amplitude}};
  }
};

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "'");
}

struct ManifestRecord {
  std::string id;
  std::string path;  // relative to the corpus root
  int label = 0;     // 0 pristine, 1 forged
  std::optional<Manipulation> manipulation;
  std::size_t pair = 0;
  std::uint64_t family = 0;
  std::optional<int> jpeg_quality;
  double area_fraction = 0.0;
  std::optional<std::string> mask;  // diagnostics only
  Split split = Split::train;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"id", id},
                        {"path", path},
                        {"label", label ? "forged" : "pristine"},
                        {"manipulation", nullptr},
                        {"pair", pair},
                        {"family", family},
                        {"jpeg_quality", nullptr},
                        {"area_fraction", area_fraction},
                        {"mask", nullptr},
                        {"split", split_name(split)}};
    if (manipulation) j["manipulation"] = manipulation_name(*manipulation);
    if (jpeg_quality) j["jpeg_quality"] = *jpeg_quality;
    if (mask) j["mask"] = *mask;
    return j;
  }

  static ManifestRecord from_json(const nlohmann::json& j) {
    ManifestRecord r;
    r.id = j.at("id");
    r.path = j.at("path");
    const std::string label = j.at("label");
    if (label != "pristine" && label != "forged") throw InputError("manifest label must be pristine or forged");
    r.label = label == "forged";
    if (!j.at("manipulation").is_null()) r.manipulation = parse_manipulation(j.at("manipulation"));
    r.pair = j.at("pair");
    r.family = j.at("family");
    if (!j.at("jpeg_quality").is_null()) r.jpeg_quality = j.at("jpeg_quality").get<int>();
    r.area_fraction = j.at("area_fraction");
    if (!j.at("mask").is_null()) r.mask = j.at("mask").get<std::string>();
    r.split = parse_split(j.at("split"));
    return r;
  }
};

struct Manifest {
  std::string root;
  std::vector<ManifestRecord> records;

  std::vector<ManifestRecord> split(Split s) const {
    std::vector<ManifestRecord> out;
    for (const auto& r : records) {
      if (r.split == s) out.push_back(r);
    }
    return out;
  }
  std::string image_path(const ManifestRecord& r) const { return (std::filesystem::path(root) / r.path).string(); }
};

inline Manifest read_manifest(const std::string& corpus_dir) {
  Manifest m;
  m.root = corpus_dir;
  const std::string path = (std::filesystem::path(corpus_dir) / "manifest.jsonl").string();
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      m.records.push_back(ManifestRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return m;
}

/// Family ids of a split; splits never share a family.
inline std::vector<std::uint64_t> split_families(const DatasetConfig& cfg, Split s) {
  std::uint64_t first = 0, count = cfg.train_families;
  if (s == Split::val) first = cfg.train_families, count = cfg.val_families;
  if (s == Split::test) first = cfg.train_families + cfg.val_families, count = cfg.test_families;
  std::vector<std::uint64_t> f(count);
  for (std::uint64_t i = 0; i < count; ++i) f[i] = first + i;
  return f;
}

/// Random splice of a donor background from `donor_family` into `host`,
/// sized to `area` of the host.
inline SpliceSpec sample_splice(Rng& rng, std::size_t height, std::size_t width, std::uint64_t object_id, double area) {
  SpliceSpec s;
  s.object_id = object_id;
  s.shape = uniform(rng, 0, 1) < 0.5 ? ObjectShape::rectangle : ObjectShape::ellipse;
  s.scale = uniform(rng, 0.6, 1.6);
  s.rotation_deg = uniform(rng, 5.0, 355.0);
  const double aspect = uniform(rng, 0.6, 1.6);
  const double target = area * static_cast<double>(height * width);
  const double ab = target / (s.scale * s.scale * (s.shape == ObjectShape::rectangle ? 4.0 : std::numbers::pi));
  s.half_height = std::sqrt(ab * aspect);
  s.half_width = std::sqrt(ab / aspect);
  const double th = s.rotation_deg * std::numbers::pi / 180.0;
  const double ey = s.scale * (std::abs(std::cos(th)) * s.half_height + std::abs(std::sin(th)) * s.half_width);
  const double ex = s.scale * (std::abs(std::sin(th)) * s.half_height + std::abs(std::cos(th)) * s.half_width);
  const double H = static_cast<double>(height), W = static_cast<double>(width);
  s.target_row = uniform(rng, std::ceil(ey) + 1, std::max(std::ceil(ey) + 1, H - std::ceil(ey) - 2));
  s.target_col = uniform(rng, std::ceil(ex) + 1, std::max(std::ceil(ex) + 1, W - std::ceil(ex) - 2));
  const double dr = std::max(s.half_height, s.half_width) * 1.5;
  s.donor_row = uniform(rng, std::min(dr, H / 2), std::max(H / 2, H - 1 - dr));
  s.donor_col = uniform(rng, std::min(dr, W / 2), std::max(W / 2, W - 1 - dr));
  return s;
}

struct GeneratedPair {
  ImageBuffer pristine, forged;
  Mask mask;
  Manipulation manipulation = Manipulation::splicing;
  double area_fraction = 0.0;
  std::optional<int> quality;
  int dihedral_op = 0;
  std::uint64_t family = 0;
};

/// One pristine/forged pair; a pure function of its arguments.
inline GeneratedPair generate_pair(const DatasetConfig& cfg, std::uint64_t seed, Split split, std::size_t index) {
  const auto families = split_families(cfg, split);
  Rng rng = make_rng({seed, static_cast<std::uint64_t>(split), index});
  GeneratedPair g;
  g.family = families[uniform_index(rng, families.size())];
  const std::uint64_t image_seed = rng();
  const ImageBuffer host = gen_background(image_seed, g.family, cfg.height, cfg.width, 3, cfg.dither_amplitude);

  const double wsum = cfg.weight_splicing + cfg.weight_copy_move + cfg.weight_inpainting;
  const double pick = uniform(rng, 0, wsum);
  g.manipulation = pick < cfg.weight_splicing                          ? Manipulation::splicing
                   : pick < cfg.weight_splicing + cfg.weight_copy_move ? Manipulation::copy_move
                                                                       : Manipulation::inpainting;
  Manipulated m;
  for (int attempt = 0;; ++attempt) {
    if (attempt > 100) throw InternalError("could not place a manipulation inside the image");
    const double area = uniform(rng, cfg.area_min, cfg.area_max);
    try {
      if (g.manipulation == Manipulation::splicing) {
        std::uint64_t donor_family = g.family;
        while (donor_family == g.family) donor_family = families[uniform_index(rng, families.size())];
        const std::uint64_t donor_seed = rng();
        ImageBuffer donor = gen_background(donor_seed, donor_family, cfg.height, cfg.width, 3, cfg.dither_amplitude);
        match_channel_means(donor, host);
        SpliceSpec spec = sample_splice(rng, cfg.height, cfg.width, donor_seed, area);
        m = splice(host, donor, spec);
      } else {
        const double aspect = uniform(rng, 0.6, 1.6);
        const double a = area * static_cast<double>(cfg.height * cfg.width);
        const long bh = std::max(2L, std::lround(std::sqrt(a * aspect)));
        const long bw = std::max(2L, std::lround(a / static_cast<double>(bh)));
        const long H = static_cast<long>(cfg.height), W = static_cast<long>(cfg.width);
        if (bh >= H || bw >= W) continue;
        const Box src{static_cast<long>(uniform_index(rng, static_cast<std::size_t>(H - bh + 1))),
                      static_cast<long>(uniform_index(rng, static_cast<std::size_t>(W - bw + 1))), bh, bw};
        if (g.manipulation == Manipulation::copy_move) {
          const long dt = static_cast<long>(uniform_index(rng, static_cast<std::size_t>(H - bh + 1)));
          const long dl = static_cast<long>(uniform_index(rng, static_cast<std::size_t>(W - bw + 1)));
          if (std::abs(dt - src.top) < bh && std::abs(dl - src.left) < bw) continue;  // keep source and target apart
          m = copy_move(host, src, dt, dl);
        } else {
          m = inpaint_erase(host, src);
        }
        check_area(m.area_fraction);
      }
      break;
    } catch (const InputError&) {
      continue;
    }
  }
  ImageBuffer forged = m.image;
  quantize_8bit(forged);
  // a manipulation that changed no 8-bit value would yield a false label
  if (forged == host) forged.at(0, static_cast<std::size_t>(m.bbox.top), static_cast<std::size_t>(m.bbox.left)) =
      host.at(0, static_cast<std::size_t>(m.bbox.top), static_cast<std::size_t>(m.bbox.left)) > 0.5 ? 0.0 : 1.0;

  g.dihedral_op = static_cast<int>(uniform_index(rng, 8));
  g.pristine = dihedral(host, g.dihedral_op);
  g.forged = dihedral(forged, g.dihedral_op);
  g.mask = dihedral(m.mask, g.dihedral_op);
  g.area_fraction = m.area_fraction;
  if (uniform(rng, 0, 1) < cfg.jpeg_probability) {
    g.quality = cfg.quality_min + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(cfg.quality_max - cfg.quality_min + 1)));
    g.pristine = jpeg_like(g.pristine, *g.quality);
    g.forged = jpeg_like(g.forged, *g.quality);
  }
  quantize_8bit(g.pristine);
  quantize_8bit(g.forged);
  return g;
}

/// Writes images/, masks/ and manifest.jsonl under `out_dir`.
inline Manifest build_dataset(const DatasetConfig& cfg, std::uint64_t seed, const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  fs::create_directories(fs::path(out_dir) / "masks", ec);
  if (ec) throw IoError("cannot create corpus directories under " + out_dir + ": " + ec.message());
  Manifest manifest;
  manifest.root = out_dir;
  std::size_t pair_id = 0;
  for (Split split : {Split::train, Split::val, Split::test}) {
    const std::size_t n = split == Split::train ? cfg.train_pairs : split == Split::val ? cfg.val_pairs : cfg.test_pairs;
    for (std::size_t i = 0; i < n; ++i, ++pair_id) {
      const GeneratedPair g = generate_pair(cfg, seed, split, i);
      char stem[64];
      std::snprintf(stem, sizeof stem, "%s_%05zu", split_name(split), i);
      ManifestRecord base;
      base.pair = pair_id;
      base.family = g.family;
      base.jpeg_quality = g.quality;
      base.split = split;

      ManifestRecord p = base;
      p.id = std::string(stem) + "_p";
      p.path = "images/" + p.id + ".ppm";
      write_pnm((fs::path(out_dir) / p.path).string(), g.pristine);

      ManifestRecord f = base;
      f.id = std::string(stem) + "_f";
      f.path = "images/" + f.id + ".ppm";
      f.label = 1;
      f.manipulation = g.manipulation;
      f.area_fraction = g.area_fraction;
      f.mask = "masks/" + f.id + ".pgm";
      write_pnm((fs::path(out_dir) / f.path).string(), g.forged);
      write_pnm((fs::path(out_dir) / *f.mask).string(), mask_to_image(g.mask));

      manifest.records.push_back(std::move(p));
      manifest.records.push_back(std::move(f));
    }
  }
  std::string lines;
  for (const auto& r : manifest.records) lines += r.to_json().dump() + "\n";
  write_file((fs::path(out_dir) / "manifest.jsonl").string(), lines);
  write_file((fs::path(out_dir) / "dataset.json").string(),
             nlohmann::json{{"config", cfg.to_json()}, {"seed", seed}}.dump(2) + "\n");
  return manifest;
}

/// Digest over the manifest and every file it references, in manifest order.
inline std::string corpus_checksum(const Manifest& m) {
  std::string acc = sha256_hex(read_file((std::filesystem::path(m.root) / "manifest.jsonl").string()));
  for (const auto& r : m.records) {
    acc += sha256_hex(read_file(m.image_path(r)));
    if (r.mask) acc += sha256_hex(read_file((std::filesystem::path(m.root) / *r.mask).string()));
  }
  return sha256_hex(acc);
}

/// Ground-truth mask of a forged record (diagnostics and strong-supervision
/// baseline only).
inline Mask read_mask(const Manifest& m, const ManifestRecord& r) {
  if (!r.mask) {
    const ImageBuffer img = read_pnm(m.image_path(r));
    return Mask(img.height, img.width);
  }
  return image_to_mask(read_pnm((std::filesystem::path(m.root) / *r.mask).string()));
}

}  // namespace patchforge
