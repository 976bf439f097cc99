#pragma once

// Training loop. An E2E step runs, for every image of a balanced batch, the
// checkpointed per-patch forward, aggregation, head and loss, then the
// backward of that image; gradients are summed over the batch (scaled by
// 1/B) and a single Adam update follows. The two baselines reuse the same
// step on resized images or on individual patches.

#include <nlohmann/json.hpp>

#include <chrono>
#include <functional>

#include "patchforge/datagen.hpp"
#include "patchforge/evaluator.hpp"
#include "patchforge/model.hpp"

namespace patchforge {

/// Training example for weakly supervised methods: an image and its
/// image-level label, nothing else.
struct LabeledImage {
  ImageBuffer image;
  int label = 0;
  std::size_t pair = 0;
};

/// Training example of the strongly supervised patchwise baseline.
struct MaskedImage {
  ImageBuffer image;
  Mask mask;
  int label = 0;
  std::size_t pair = 0;
};

inline std::vector<LabeledImage> load_labeled(const Manifest& m, Split split) {
  std::vector<LabeledImage> out;
  for (const auto& r : m.split(split)) out.push_back({read_pnm(m.image_path(r)), r.label, r.pair});
  return out;
}

inline std::vector<MaskedImage> load_masked(const Manifest& m, Split split) {
  std::vector<MaskedImage> out;
  for (const auto& r : m.split(split)) out.push_back({read_pnm(m.image_path(r)), read_mask(m, r), r.label, r.pair});
  return out;
}

inline constexpr double kBoundaryMin = 0.05;
inline constexpr double kBoundaryMax = 0.95;

/// A patch is a positive example iff it holds both manipulated and original
/// pixels in significant amounts.
inline int boundary_label(const Mask& mask, const PatchCoord& at, std::size_t patch) {
  std::size_t n = 0;
  for (std::size_t y = 0; y < patch; ++y) {
    for (std::size_t x = 0; x < patch; ++x) n += mask.at(at.row + y, at.col + x);
  }
  const double f = static_cast<double>(n) / static_cast<double>(patch * patch);
  return f >= kBoundaryMin && f <= kBoundaryMax ? 1 : 0;
}

struct TrainConfig {
  ModelConfig model;
  std::size_t pairs_per_batch = 10;
  double learning_rate = 1e-3;
  std::size_t epochs = 5;
  std::uint64_t seed = 1;

  void validate() const {
    model.validate();
    if (pairs_per_batch == 0) throw ConfigError("pairs_per_batch must be positive");
    if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be finite and >= 0");
  }

  nlohmann::json to_json() const {
    return {{"model", model.to_json()},
            {"pairs_per_batch", pairs_per_batch},
            {"learning_rate", learning_rate},
            {"epochs", epochs},
            {"seed", seed}};
  }
};

struct StepLog {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;  // mean over the batch
  double grad_norm = 0.0;
  std::vector<std::size_t> active_patches;  // per image
  long peak_activations = 0;
  double seconds = 0.0;

  nlohmann::json to_json() const {
    return {{"type", "step"},     {"step", step},           {"epoch", epoch}, {"loss", loss},
            {"grad_norm", grad_norm}, {"peak_activations", peak_activations}, {"seconds", seconds}};
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double mean_loss = 0.0;
  double train_auc = 0.5;  // from the scores seen during the epoch
  double val_auc = 0.5;
  bool best = false;
  double seconds = 0.0;

  nlohmann::json to_json() const {
    return {{"type", "epoch"}, {"epoch", epoch},    {"steps", steps}, {"mean_loss", mean_loss},
            {"train_auc", train_auc}, {"val_auc", val_auc}, {"best", best}, {"seconds", seconds}};
  }
};

/// A single backbone input: a prepared image and the patches it contributes.
struct Sample {
  ImageBuffer prepared;
  PatchGrid grid;
  int label = 0;
};

/// Inputs of one weakly labeled image for `model`'s method.
template <class T>
Sample make_sample(const Model<T>& model, const ImageBuffer& image, int label) {
  if (model.config().method == Method::resize) {
    const std::size_t p = model.config().patch;
    Sample s{model.prepare(resize_bilinear(image, p, p)), {}, label};
    s.grid = model.grid_for(s.prepared);
    return s;
  }
  Sample s{model.prepare(image), {}, label};
  s.grid = model.grid_for(s.prepared);
  return s;
}

/// Per-patch samples of the patchwise baseline: each patch is cut from the
/// image prepared at full resolution and labeled from the mask.
template <class T>
std::vector<Sample> patch_samples(const Model<T>& model, const MaskedImage& img) {
  const ImageBuffer prepared = model.prepare(img.image);
  const PatchGrid grid = model.grid_for(prepared);
  std::vector<Sample> out;
  for (const PatchCoord& at : grid.coords) {
    Sample s;
    s.prepared = ImageBuffer(grid.patch_size, grid.patch_size, prepared.channels);
    for (std::size_t c = 0; c < prepared.channels; ++c) {
      for (std::size_t y = 0; y < grid.patch_size; ++y) {
        for (std::size_t x = 0; x < grid.patch_size; ++x) s.prepared.at(c, y, x) = prepared.at(c, at.row + y, at.col + x);
      }
    }
    s.grid = tile(s.prepared, grid.patch_size, grid.stride);
    s.label = img.label ? boundary_label(img.mask, at, grid.patch_size) : 0;
    out.push_back(std::move(s));
  }
  return out;
}

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
  std::vector<std::size_t> active_patches;
  std::vector<double> scores;
  MemoryMeter meter;
};

/// One optimizer step over `batch`: per-sample forward and backward with
/// gradients summed and scaled by 1/B, then one Adam update.
template <class T>
StepResult train_step(Model<T>& model, const std::vector<Sample>& batch, double lr) {
  if (batch.empty()) throw InputError("empty batch");
  StepResult r;
  model.params().zero_grad();
  const T scale = T{1} / static_cast<T>(batch.size());
  for (const Sample& s : batch) {
    auto fw = model.forward_prepared(s.prepared, s.grid, true, &r.meter);
    r.scores.push_back(fw.score);
    const BackwardStats st = model.backward(fw, s.label, scale, &r.meter);
    r.loss += st.loss / static_cast<double>(batch.size());
    r.active_patches.push_back(st.active_patches);
  }
  r.grad_norm = static_cast<double>(model.params().grad_norm());
  if (!std::isfinite(r.grad_norm)) throw NumericError("non-finite gradient; lower the learning rate");
  model.params().adam_step(lr);
  return r;
}

template <class T>
std::vector<Sample> weak_samples(const Model<T>& model, std::span<const LabeledImage* const> images) {
  std::vector<Sample> out;
  for (const LabeledImage* img : images) out.push_back(make_sample(model, img->image, img->label));
  return out;
}

/// Groups images into (pristine, forged) pairs by pair id.
template <class Img>
std::vector<std::pair<const Img*, const Img*>> make_pairs(const std::vector<Img>& images) {
  std::map<std::size_t, std::pair<const Img*, const Img*>> by_pair;
  for (const Img& img : images) {
    auto& slot = by_pair[img.pair];
    (img.label ? slot.second : slot.first) = &img;
  }
  std::vector<std::pair<const Img*, const Img*>> out;
  for (const auto& [id, p] : by_pair) {
    if (!p.first || !p.second) throw ConfigError("pair " + std::to_string(id) + " lacks a pristine or forged image");
    out.push_back(p);
  }
  return out;
}

template <class T>
struct TrainResult {
  Model<T> model;  // best validation AUC
  std::vector<EpochLog> epochs;
  std::vector<StepLog> steps;
  double best_val_auc = 0.0;
};

using LogSink = std::function<void(const nlohmann::json&)>;

template <class T>
double validation_auc(const Model<T>& model, const std::vector<LabeledImage>& val) {
  std::vector<double> s;
  std::vector<int> l;
  for (const auto& v : val) {
    s.push_back(model.score(v.image).score);
    l.push_back(v.label);
  }
  return auc(s, l);
}

namespace detail {

template <class T, class Img, class MakeBatch>
TrainResult<T> run_training(const TrainConfig& cfg, const std::vector<Img>& train_set,
                            const std::vector<LabeledImage>& val_set, MakeBatch make_batch, const LogSink& log) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("training split is empty");
  if (val_set.empty()) throw ConfigError("validation split is empty");
  const auto pairs = make_pairs(train_set);
  Model<T> model(cfg.model);
  TrainResult<T> result{model, {}, {}, -1.0};
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng = make_rng({cfg.seed, 0xe90cULL, epoch});
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog el;
    el.epoch = epoch;
    std::vector<double> seen_scores;
    std::vector<int> seen_labels;
    for (std::size_t b = 0; b < order.size(); b += cfg.pairs_per_batch) {
      const auto s0 = std::chrono::steady_clock::now();
      std::vector<const Img*> images;
      for (std::size_t i = b; i < std::min(b + cfg.pairs_per_batch, order.size()); ++i) {
        images.push_back(pairs[order[i]].first);
        images.push_back(pairs[order[i]].second);
      }
      const std::vector<Sample> batch = make_batch(model, images);
      StepResult r = train_step(model, batch, cfg.learning_rate);
      for (std::size_t i = 0; i < batch.size(); ++i) {
        seen_scores.push_back(r.scores[i]);
        seen_labels.push_back(batch[i].label);
      }
      StepLog sl;
      sl.step = ++step;
      sl.epoch = epoch;
      sl.loss = r.loss;
      sl.grad_norm = r.grad_norm;
      sl.active_patches = std::move(r.active_patches);
      sl.peak_activations = r.meter.peak_activation_count;
      sl.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - s0).count();
      if (log) log(sl.to_json());
      el.mean_loss += sl.loss;
      ++el.steps;
      result.steps.push_back(std::move(sl));
    }
    el.mean_loss /= static_cast<double>(std::max<std::size_t>(el.steps, 1));
    const auto pos = std::count(seen_labels.begin(), seen_labels.end(), 1);
    if (pos > 0 && pos < static_cast<long>(seen_labels.size())) el.train_auc = auc(seen_scores, seen_labels);
    el.val_auc = validation_auc(model, val_set);
    if (el.val_auc > result.best_val_auc) {
      result.best_val_auc = el.val_auc;
      result.model = model;
      el.best = true;
    }
    el.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log) log(el.to_json());
    result.epochs.push_back(el);
  }
  if (cfg.epochs == 0) result.best_val_auc = validation_auc(model, val_set);
  return result;
}

}  // namespace detail

/// Weakly supervised training (E2E variants and the resize baseline).
template <class T>
TrainResult<T> train(const TrainConfig& cfg, const std::vector<LabeledImage>& train_set,
                     const std::vector<LabeledImage>& val_set, const LogSink& log = {}) {
  if (cfg.model.method == Method::patchwise) throw ConfigError("the patchwise baseline trains from masks; use train_patchwise");
  return detail::run_training<T>(cfg, train_set, val_set,
                                 [](const Model<T>& m, const std::vector<const LabeledImage*>& imgs) {
                                   return weak_samples(m, std::span<const LabeledImage* const>(imgs));
                                 },
                                 log);
}

/// Strongly supervised patchwise baseline: every batch holds all patches of
/// its images, labeled by boundary coverage.
template <class T>
TrainResult<T> train_patchwise(const TrainConfig& cfg, const std::vector<MaskedImage>& train_set,
                               const std::vector<LabeledImage>& val_set, const LogSink& log = {}) {
  if (cfg.model.method != Method::patchwise) throw ConfigError("train_patchwise needs method = patchwise");
  return detail::run_training<T>(cfg, train_set, val_set,
                                 [](const Model<T>& m, const std::vector<const MaskedImage*>& imgs) {
                                   std::vector<Sample> out;
                                   for (const MaskedImage* img : imgs) {
                                     auto s = patch_samples(m, *img);
                                     std::move(s.begin(), s.end(), std::back_inserter(out));
                                   }
                                   return out;
                                 },
                                 log);
}

}  // namespace patchforge
