#pragma once

// Patch-level feature extraction: tiling of a full-resolution image,
// high-pass residual channels, and the shared convolutional backbone.
// Nothing here interpolates pixels; patches are plain crops.

#include <cctype>
#include <random>
#include <string>
#include <vector>

#include "patchforge/checkpoint.hpp"
#include "patchforge/image.hpp"

namespace patchforge {

struct PatchCoord {
  std::size_t row = 0, col = 0;
  bool operator==(const PatchCoord&) const = default;
};

struct PatchGrid {
  std::size_t patch_size = 0;
  std::size_t stride = 0;
  std::size_t image_height = 0, image_width = 0;
  std::size_t rows = 0, cols = 0;  // grid extents
  std::vector<PatchCoord> coords;  // row-major

  std::size_t count() const noexcept { return coords.size(); }
};

/// Start offsets along one axis: 0, S, 2S, ... plus a final border-aligned
/// offset when the regular ones leave the tail uncovered.
inline std::vector<std::size_t> axis_offsets(std::size_t extent, std::size_t patch, std::size_t stride) {
  std::vector<std::size_t> pos;
  for (std::size_t p = 0; p + patch <= extent; p += stride) pos.push_back(p);
  if (pos.back() + patch < extent) pos.push_back(extent - patch);
  return pos;
}

inline PatchGrid tile(std::size_t height, std::size_t width, std::size_t patch, std::size_t stride) {
  if (patch == 0 || stride == 0 || stride > patch) throw ConfigError("patch tiling needs 0 < stride <= patch size");
  if (height < patch || width < patch) {
    throw InputError("image " + std::to_string(height) + "x" + std::to_string(width) + " is smaller than the " +
                     std::to_string(patch) + "px patch");
  }
  PatchGrid g;
  g.patch_size = patch;
  g.stride = stride;
  g.image_height = height;
  g.image_width = width;
  const auto ys = axis_offsets(height, patch, stride), xs = axis_offsets(width, patch, stride);
  g.rows = ys.size();
  g.cols = xs.size();
  for (std::size_t y : ys) {
    for (std::size_t x : xs) g.coords.push_back({y, x});
  }
  return g;
}

inline PatchGrid tile(const ImageBuffer& img, std::size_t patch, std::size_t stride) {
  return tile(img.height, img.width, patch, stride);
}

enum class InputMode { rgb, np, rgb_np };

inline const char* input_mode_name(InputMode m) {
  switch (m) {
    case InputMode::rgb: return "RGB";
    case InputMode::np: return "NP";
    case InputMode::rgb_np: return "RGB+NP";
  }
  return "?";
}

inline InputMode parse_input_mode(std::string s) {
  if (s.rfind("E2E-", 0) == 0) s = s.substr(4);
  for (char& ch : s) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  if (s == "RGB") return InputMode::rgb;
  if (s == "NP") return InputMode::np;
  if (s == "RGB+NP" || s == "RGB_NP" || s == "RGBNP") return InputMode::rgb_np;
  throw ConfigError("unknown input mode '" + s + "'");
}

inline std::size_t input_channels(InputMode m, std::size_t image_channels) {
  return m == InputMode::rgb_np ? 2 * image_channels : image_channels;
}

// Third-order horizontal high-pass taps at offsets -1, 0, +1, +2.
inline constexpr double kResidualTaps[4] = {1.0, -3.0, 3.0, -1.0};

/// Out-of-range columns use point reflection about the border sample,
/// v(-k) = 2 v(0) - v(k), which keeps straight ramps straight.
inline double reflected(const ImageBuffer& img, std::size_t c, std::size_t y, long x) {
  const long w = static_cast<long>(img.width);
  if (x < 0) return 2.0 * img.at(c, y, 0) - img.at(c, y, static_cast<std::size_t>(std::min(-x, w - 1)));
  if (x >= w) return 2.0 * img.at(c, y, w - 1) - img.at(c, y, static_cast<std::size_t>(std::max(2 * (w - 1) - x, 0L)));
  return img.at(c, y, static_cast<std::size_t>(x));
}

/// High-pass residual of every channel (same size, same channel count).
inline ImageBuffer residual(const ImageBuffer& img) {
  ImageBuffer out(img.height, img.width, img.channels);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 0; y < img.height; ++y) {
      for (std::size_t x = 0; x < img.width; ++x) {
        double s = 0;
        for (int t = 0; t < 4; ++t) s += kResidualTaps[t] * reflected(img, c, y, static_cast<long>(x) + t - 1);
        out.at(c, y, x) = s;
      }
    }
  }
  return out;
}

/// Image channels followed by one residual channel per image channel.
inline ImageBuffer residual_channels(const ImageBuffer& img) {
  const ImageBuffer r = residual(img);
  ImageBuffer out(img.height, img.width, 2 * img.channels);
  std::copy(img.values.begin(), img.values.end(), out.values.begin());
  std::copy(r.values.begin(), r.values.end(), out.values.begin() + static_cast<long>(img.values.size()));
  return out;
}

// Image samples are mapped from [0,1] to [-1,1] before entering the backbone.
inline constexpr double kInputScale = 2.0;

/// Backbone input for a mode: RGB, residual only, or both stacked.
inline ImageBuffer prepare_input(const ImageBuffer& img, InputMode mode) {
  ImageBuffer centered = img;
  for (double& v : centered.values) v = kInputScale * v - 1.0;
  switch (mode) {
    case InputMode::rgb: return centered;
    case InputMode::np: return residual(centered);
    case InputMode::rgb_np: return residual_channels(centered);
  }
  return centered;
}

/// Adjoint of prepare_input: folds a gradient on the prepared channels back
/// onto the image channels.
inline ImageBuffer prepare_input_adjoint(const ImageBuffer& grad_prepared, InputMode mode, std::size_t image_channels) {
  ImageBuffer grad = grad_prepared;
  for (double& v : grad.values) v *= kInputScale;
  if (mode == InputMode::rgb) return grad;
  const std::size_t h = grad.height, w = grad.width;
  const std::size_t offset = mode == InputMode::rgb_np ? image_channels : 0;
  ImageBuffer out(h, w, image_channels);
  if (mode == InputMode::rgb_np) {
    std::copy(grad.values.begin(), grad.values.begin() + static_cast<long>(out.values.size()), out.values.begin());
  }
  const long wl = static_cast<long>(w);
  for (std::size_t c = 0; c < image_channels; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double g = grad.at(c + offset, y, x);
        if (g == 0.0) continue;
        for (int t = 0; t < 4; ++t) {
          const long xs = static_cast<long>(x) + t - 1;
          const double a = kResidualTaps[t] * g;
          if (xs < 0) {
            out.at(c, y, 0) += 2.0 * a;
            out.at(c, y, static_cast<std::size_t>(std::min(-xs, wl - 1))) -= a;
          } else if (xs >= wl) {
            out.at(c, y, w - 1) += 2.0 * a;
            out.at(c, y, static_cast<std::size_t>(std::max(2 * (wl - 1) - xs, 0L))) -= a;
          } else {
            out.at(c, y, static_cast<std::size_t>(xs)) += a;
          }
        }
      }
    }
  }
  return out;
}

/// Copies one patch of a prepared image into a [1, C, P, P] tensor.
template <class T>
Tensor<T> crop_patch(const ImageBuffer& img, const PatchCoord& at, std::size_t patch) {
  if (at.row + patch > img.height || at.col + patch > img.width) throw InputError("patch exceeds image bounds");
  Tensor<T> t(Shape{1, img.channels, patch, patch});
  T* dst = t.data().data();
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 0; y < patch; ++y) {
      for (std::size_t x = 0; x < patch; ++x) *dst++ = static_cast<T>(img.at(c, at.row + y, at.col + x));
    }
  }
  return t;
}

struct BackboneConfig {
  std::vector<std::size_t> stage_widths{16, 32, 64};
  std::size_t convs_per_stage = 2;

  std::size_t feature_width() const { return stage_widths.back(); }
  /// conv+relu per conv, one pool per stage, then global average.
  std::size_t layer_count() const { return stage_widths.size() * (2 * convs_per_stage + 1) + 1; }
  /// Spatial reduction factor the patch size must be divisible by.
  std::size_t downsampling() const { return std::size_t{1} << stage_widths.size(); }
  bool operator==(const BackboneConfig&) const = default;
};

/// Appends backbone parameters (He-normal) to `params` and returns the chain.
template <class T>
std::vector<LayerPtr<T>> build_backbone(const BackboneConfig& cfg, std::size_t in_channels, ParamSet<T>& params,
                                        std::mt19937_64& rng) {
  if (cfg.stage_widths.empty() || cfg.convs_per_stage == 0) throw ConfigError("backbone needs at least one conv stage");
  std::vector<LayerPtr<T>> layers;
  std::size_t c = in_channels;
  for (std::size_t s = 0; s < cfg.stage_widths.size(); ++s) {
    for (std::size_t k = 0; k < cfg.convs_per_stage; ++k) {
      const std::size_t out = cfg.stage_widths[s];
      const std::string name = "backbone.conv" + std::to_string(s) + "_" + std::to_string(k);
      const std::size_t idx = params.add(name, he_normal<T>(Shape{out, c, 3, 3}, c * 9, rng));
      layers.push_back(std::make_shared<Conv2dLayer<T>>(idx, 1, 1));
      layers.push_back(std::make_shared<ReluLayer<T>>());
      c = out;
    }
    layers.push_back(std::make_shared<MaxPool2Layer<T>>());
  }
  layers.push_back(std::make_shared<GlobalAvgLayer<T>>());
  return layers;
}

/// Runs the chain on an input without keeping any state (inference).
template <class T>
Tensor<T> run_chain(const std::vector<LayerPtr<T>>& layers, const ParamSet<T>& params, const Tensor<T>& input) {
  Tensor<T> x = layers.front()->forward(params, input);
  for (std::size_t l = 1; l < layers.size(); ++l) x = layers[l]->forward(params, x);
  return x;
}

/// Feature matrix [N_p, C]: backbone output of every patch, one at a time.
template <class T>
Tensor<T> extract_features(const ImageBuffer& prepared, const PatchGrid& grid, const std::vector<LayerPtr<T>>& backbone,
                           const ParamSet<T>& params, std::size_t expected_channels) {
  if (prepared.channels != expected_channels) {
    throw ConfigError("backbone expects " + std::to_string(expected_channels) + " input channels, image has " +
                      std::to_string(prepared.channels));
  }
  std::vector<T> rows;
  std::size_t width = 0;
  for (const PatchCoord& at : grid.coords) {
    Tensor<T> f = run_chain(backbone, params, crop_patch<T>(prepared, at, grid.patch_size));
    width = f.size();
    rows.insert(rows.end(), f.data().begin(), f.data().end());
  }
  return Tensor<T>(Shape{grid.count(), width}, std::move(rows));
}

/// Same features from a single batched pass over all patches.
template <class T>
Tensor<T> extract_features_batched(const ImageBuffer& prepared, const PatchGrid& grid,
                                   const std::vector<LayerPtr<T>>& backbone, const ParamSet<T>& params) {
  const std::size_t p = grid.patch_size, n = grid.count(), c = prepared.channels;
  Tensor<T> batch(Shape{n, c, p, p});
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<T> one = crop_patch<T>(prepared, grid.coords[i], p);
    std::copy(one.data().begin(), one.data().end(), batch.data().begin() + static_cast<long>(i * one.size()));
  }
  return run_chain(backbone, params, batch);
}

}  // namespace patchforge
