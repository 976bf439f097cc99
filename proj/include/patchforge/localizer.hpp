#pragma once

// Localization helpers built on cached patch features: max-pooling
// activation counts, input-gradient saliency, ROI scoring and box scan.

#include <nlohmann/json.hpp>

#include "patchforge/model.hpp"

namespace patchforge {

/// Features of every patch of one image, tagged with the parameters that
/// produced them.
template <class T>
struct FeatureCache {
  PatchGrid grid;
  Tensor<T> features;
  std::string params_digest;
  Score global;
};

template <class T>
FeatureCache<T> build_cache(const Model<T>& model, const ImageBuffer& img) {
  if (model.config().method != Method::e2e) throw ConfigError("feature caches need an end-to-end model");
  FeatureCache<T> c;
  const ImageBuffer prepared = model.prepare(img);
  c.grid = model.grid_for(prepared);
  c.features = model.features(prepared, c.grid);
  c.params_digest = model.params_digest();
  c.global = model.classify_features(c.features);
  return c;
}

/// Per-patch count of channels whose maximum the patch holds.
template <class T>
std::vector<std::size_t> activation_counts(const Tensor<T>& features) {
  const auto agg = aggregate(features, PoolingConfig{Pooling::max});
  std::vector<std::size_t> counts(agg.patches, 0);
  for (std::size_t c = 0; c < agg.channels; ++c) ++counts[agg.argmax[c]];
  return counts;
}

struct ActivationMap {
  std::size_t rows = 0, cols = 0;
  std::vector<std::size_t> counts;  // grid order
  std::size_t channels = 0;
  ImageBuffer heat;  // 1 channel, image size, values in [0,1]
};

/// Splats per-patch values over patch footprints, averaging overlaps.
inline ImageBuffer rasterize(const PatchGrid& grid, const std::vector<double>& values) {
  ImageBuffer sum(grid.image_height, grid.image_width, 1), hits(grid.image_height, grid.image_width, 1);
  for (std::size_t i = 0; i < grid.count(); ++i) {
    const PatchCoord& at = grid.coords[i];
    for (std::size_t y = 0; y < grid.patch_size; ++y) {
      for (std::size_t x = 0; x < grid.patch_size; ++x) {
        sum.at(0, at.row + y, at.col + x) += values[i];
        hits.at(0, at.row + y, at.col + x) += 1;
      }
    }
  }
  for (std::size_t i = 0; i < sum.values.size(); ++i) sum.values[i] /= hits.values[i];
  return sum;
}

template <class T>
ActivationMap activation_map(const FeatureCache<T>& cache, const PoolingConfig& pooling) {
  if (!pooling.has(Pooling::max)) throw ConfigError("activation maps need max pooling enabled");
  ActivationMap m;
  m.rows = cache.grid.rows;
  m.cols = cache.grid.cols;
  m.channels = cache.features.dim(1);
  m.counts = activation_counts(cache.features);
  std::vector<double> v(m.counts.begin(), m.counts.end());
  m.heat = rasterize(cache.grid, v);
  const double peak = *std::max_element(m.heat.values.begin(), m.heat.values.end());
  if (peak > 0) {
    for (double& h : m.heat.values) h /= peak;
  }
  return m;
}

template <class T>
ActivationMap activation_map(const Model<T>& model, const ImageBuffer& img) {
  if (!model.config().pooling.has(Pooling::max)) throw ConfigError("activation maps need max pooling enabled");
  return activation_map(build_cache(model, img), model.config().pooling);
}

inline void min_max_normalize(ImageBuffer& img) {
  const auto [lo, hi] = std::minmax_element(img.values.begin(), img.values.end());
  const double a = *lo, range = *hi - *lo;
  for (double& v : img.values) v = range > 0 ? (v - a) / range : 0.0;
}

/// |d logit / d pixel|, maximum over color channels, min-max normalized.
template <class T>
ImageBuffer saliency(const Model<T>& model, const ImageBuffer& img) {
  if (model.config().method != Method::e2e) throw ConfigError("saliency needs an end-to-end model");
  Model<T> work = model;
  const ImageBuffer prepared = work.prepare(img);
  auto fw = work.forward_prepared(prepared, work.grid_for(prepared), true);
  ImageBuffer g_prepared;
  work.backward(fw, std::nullopt, T{1}, nullptr, &g_prepared);
  const ImageBuffer g = prepare_input_adjoint(g_prepared, work.config().mode, img.channels);
  ImageBuffer heat(img.height, img.width, 1);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t y = 0; y < img.height; ++y) {
      for (std::size_t x = 0; x < img.width; ++x) heat.at(0, y, x) = std::max(heat.at(0, y, x), std::abs(g.at(c, y, x)));
    }
  }
  min_max_normalize(heat);
  return heat;
}

enum class BoxOrigin { manual, automatic };

struct RoiBox {
  long top = 0, left = 0, height = 0, width = 0;
  double score = 0.0;
  BoxOrigin origin = BoxOrigin::manual;

  bool overlaps(const RoiBox& o) const {
    return top < o.top + o.height && o.top < top + height && left < o.left + o.width && o.left < left + width;
  }
  nlohmann::json to_json() const {
    return {{"top", top},     {"left", left},   {"height", height},
            {"width", width}, {"score", score}, {"origin", origin == BoxOrigin::manual ? "manual" : "automatic"}};
  }
};

/// Rows of the patches lying entirely inside `box`.
inline std::vector<std::size_t> patches_in_box(const PatchGrid& grid, const RoiBox& box) {
  const long P = static_cast<long>(grid.patch_size);
  if (box.top < 0 || box.left < 0 || box.top + box.height > static_cast<long>(grid.image_height) ||
      box.left + box.width > static_cast<long>(grid.image_width)) {
    throw InputError("ROI box outside the image");
  }
  if (box.height < P || box.width < P) {
    throw InputError("ROI box must be at least " + std::to_string(P) + "x" + std::to_string(P));
  }
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < grid.count(); ++i) {
    const long r = static_cast<long>(grid.coords[i].row), c = static_cast<long>(grid.coords[i].col);
    if (r >= box.top && c >= box.left && r + P <= box.top + box.height && c + P <= box.left + box.width) idx.push_back(i);
  }
  if (idx.empty()) throw InputError("ROI box contains no complete patch");
  return idx;
}

template <class T>
Tensor<T> select_rows(const Tensor<T>& f, const std::vector<std::size_t>& rows) {
  const std::size_t c = f.dim(1);
  std::vector<T> out;
  out.reserve(rows.size() * c);
  for (std::size_t r : rows) out.insert(out.end(), f.data().begin() + static_cast<long>(r * c), f.data().begin() + static_cast<long>((r + 1) * c));
  return Tensor<T>(Shape{rows.size(), c}, std::move(out));
}

struct RoiResult {
  Score score;
  std::size_t backbone_patch_evaluations = 0;
};

/// Aggregates and classifies the patches inside `box`. With a cache built
/// by the same parameters no backbone work is done.
template <class T>
RoiResult score_roi(const Model<T>& model, const ImageBuffer& img, const RoiBox& box, const FeatureCache<T>* cache = nullptr) {
  if (model.config().method != Method::e2e) throw ConfigError("ROI scoring needs an end-to-end model");
  if (cache) {
    if (cache->grid.image_height != img.height || cache->grid.image_width != img.width) {
      throw InputError("feature cache belongs to a different image");
    }
    const auto rows = patches_in_box(cache->grid, box);
    return {model.classify_features(select_rows(cache->features, rows)), 0};
  }
  const ImageBuffer prepared = model.prepare(img);
  PatchGrid grid = model.grid_for(prepared);
  const auto rows = patches_in_box(grid, box);
  PatchGrid sub = grid;
  sub.coords.clear();
  for (std::size_t r : rows) sub.coords.push_back(grid.coords[r]);
  return {model.classify_features(model.features(prepared, sub)), rows.size()};
}

/// Candidate boxes of side 1x, 2x and 4x the patch size placed at the patch
/// stride, in scan order (row, col, size).
inline std::vector<RoiBox> scan_boxes(const PatchGrid& grid) {
  std::vector<RoiBox> boxes;
  const std::size_t P = grid.patch_size;
  for (std::size_t size : {P, 2 * P, 4 * P}) {
    if (size > grid.image_height || size > grid.image_width) continue;
    for (std::size_t r : axis_offsets(grid.image_height, size, grid.stride)) {
      for (std::size_t c : axis_offsets(grid.image_width, size, grid.stride)) {
        boxes.push_back({static_cast<long>(r), static_cast<long>(c), static_cast<long>(size), static_cast<long>(size), 0.0,
                         BoxOrigin::automatic});
      }
    }
  }
  std::stable_sort(boxes.begin(), boxes.end(), [](const RoiBox& a, const RoiBox& b) {
    return std::tie(a.top, a.left, a.height) < std::tie(b.top, b.left, b.height);
  });
  return boxes;
}

/// Greedy selection of the `k` best mutually non-overlapping boxes; ties go
/// to the earlier box in scan order.
inline std::vector<RoiBox> select_boxes(std::vector<RoiBox> scored, std::size_t k) {
  std::stable_sort(scored.begin(), scored.end(), [](const RoiBox& a, const RoiBox& b) { return a.score > b.score; });
  std::vector<RoiBox> out;
  for (const RoiBox& b : scored) {
    if (out.size() == k) break;
    if (std::none_of(out.begin(), out.end(), [&](const RoiBox& o) { return o.overlaps(b); })) out.push_back(b);
  }
  return out;
}

template <class T>
std::vector<RoiBox> auto_box_scan(const Model<T>& model, const FeatureCache<T>& cache, std::size_t top_k) {
  if (top_k < 1) throw InputError("top_k must be at least 1");
  std::vector<RoiBox> boxes = scan_boxes(cache.grid);
  for (RoiBox& b : boxes) b.score = model.classify_features(select_rows(cache.features, patches_in_box(cache.grid, b))).score;
  return select_boxes(std::move(boxes), top_k);
}

template <class T>
std::vector<RoiBox> auto_box_scan(const Model<T>& model, const ImageBuffer& img, std::size_t top_k) {
  return auto_box_scan(model, build_cache(model, img), top_k);
}

/// Heat raster as an 8-bit PGM.
inline std::string heat_to_pgm(const ImageBuffer& heat) { return encode_pnm(heat); }

}  // namespace patchforge
