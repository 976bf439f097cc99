#pragma once

// Full-image detector: tiling -> per-patch backbone (checkpointed) ->
// pooling aggregation -> fully-connected head -> logit. The same class backs
// the two baselines, which differ only in how an image is turned into patches
// and how patch scores are combined.

#include <nlohmann/json.hpp>

#include <limits>
#include <memory>
#include <optional>
#include <random>

#include "patchforge/aggregation.hpp"
#include "patchforge/digest.hpp"
#include "patchforge/head.hpp"
#include "patchforge/patches.hpp"

namespace patchforge {

enum class Method { e2e, resize, patchwise };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::e2e: return "e2e";
    case Method::resize: return "resize";
    case Method::patchwise: return "patchwise";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "e2e") return Method::e2e;
  if (s == "resize") return Method::resize;
  if (s == "patchwise") return Method::patchwise;
  throw ConfigError("unknown method '" + s + "'");
}

struct ModelConfig {
  Method method = Method::e2e;
  InputMode mode = InputMode::rgb;
  std::size_t image_channels = 3;
  std::size_t patch = 32;
  std::size_t stride = 16;
  BackboneConfig backbone;
  PoolingConfig pooling;
  HeadConfig head;
  bool checkpointing = true;
  std::size_t checkpoint_spacing = 0;  // 0: ceil(sqrt(L))
  std::uint64_t seed = 1;

  void validate() const {
    if (patch % backbone.downsampling() != 0) {
      throw ConfigError("patch size " + std::to_string(patch) + " must be divisible by " +
                        std::to_string(backbone.downsampling()));
    }
    if (stride == 0 || stride > patch) throw ConfigError("stride must lie in [1, patch]");
    head.validate();
  }

  /// Display name, e.g. "E2E-RGB", "Resize-RGB".
  std::string variant_name() const {
    const std::string m = input_mode_name(mode);
    switch (method) {
      case Method::e2e: return "E2E-" + m;
      case Method::resize: return "Resize-" + m;
      case Method::patchwise: return "Patchwise-" + m;
    }
    return m;
  }

  nlohmann::json to_json() const {
    return {{"method", method_name(method)},
            {"mode", input_mode_name(mode)},
            {"image_channels", image_channels},
            {"patch", patch},
            {"stride", stride},
            {"stage_widths", backbone.stage_widths},
            {"convs_per_stage", backbone.convs_per_stage},
            {"pooling", pooling.names()},
            {"fc1", head.fc1},
            {"fc2", head.fc2},
            {"checkpointing", checkpointing},
            {"checkpoint_spacing", checkpoint_spacing},
            {"seed", seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.method = parse_method(j.at("method").get<std::string>());
    c.mode = parse_input_mode(j.at("mode").get<std::string>());
    c.image_channels = j.at("image_channels");
    c.patch = j.at("patch");
    c.stride = j.at("stride");
    c.backbone.stage_widths = j.at("stage_widths").get<std::vector<std::size_t>>();
    c.backbone.convs_per_stage = j.at("convs_per_stage");
    c.pooling = PoolingConfig::from_names(j.at("pooling").get<std::vector<std::string>>());
    c.head.fc1 = j.at("fc1");
    c.head.fc2 = j.at("fc2");
    c.checkpointing = j.at("checkpointing");
    c.checkpoint_spacing = j.at("checkpoint_spacing");
    c.seed = j.at("seed");
    return c;
  }
};

/// Sets method and input mode from a variant name such as "E2E-NP",
/// "Resize-RGB" or "patchwise" (RGB when no mode is given).
inline void apply_variant(ModelConfig& cfg, const std::string& variant) {
  std::string lower;
  for (char ch : variant) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  const auto dash = lower.find('-');
  const std::string head = lower.substr(0, dash);
  const std::string mode = dash == std::string::npos ? "RGB" : variant.substr(dash + 1);
  if (head == "e2e") {
    cfg.method = Method::e2e;
  } else if (head == "resize") {
    cfg.method = Method::resize;
  } else if (head == "patchwise") {
    cfg.method = Method::patchwise;
  } else {
    throw ConfigError("unknown variant '" + variant + "'");
  }
  cfg.mode = parse_input_mode(mode);
}

struct Score {
  double score = 0.5;
  double logit = 0.0;
};

/// State kept between forward and backward for one image.
template <class T>
struct ImageForward {
  PatchGrid grid;
  Tensor<T> features;
  std::vector<ChainState<T>> chains;  // empty for stateless evaluation
  Tape<T> tape;
  typename Tape<T>::Var feature_var{0}, logit_var{0};
  std::shared_ptr<AggregatedFeature<T>> aggregated;
  double logit = 0.0;
  double score = 0.5;
  std::size_t input_channels = 0;
  MemoryMeter meter;  // used when the caller supplies none
};

struct BackwardStats {
  double loss = 0.0;
  std::size_t active_patches = 0;  // patches that received a nonzero feature gradient
};

template <class T>
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    backbone_ = build_backbone(cfg_.backbone, in_channels(), params_, rng);
    head_ = add_head_params(cfg_.head, cfg_.pooling.output_width(cfg_.backbone.feature_width()), params_, rng);
  }

  /// Rebuilds the architecture and adopts `params` (names and shapes must match).
  Model(ModelConfig cfg, ParamSet<T> params) : Model(std::move(cfg)) {
    if (params.names() != params_.names()) throw ConfigError("parameter names do not match the architecture");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].shape() != params_[i].shape()) throw ConfigError("parameter shape mismatch for " + params.name(i));
    }
    params_ = std::move(params);
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamSet<T>& params() noexcept { return params_; }
  const ParamSet<T>& params() const noexcept { return params_; }
  const std::vector<LayerPtr<T>>& backbone() const noexcept { return backbone_; }
  const HeadParams& head() const noexcept { return head_; }
  std::size_t in_channels() const { return input_channels(cfg_.mode, cfg_.image_channels); }
  std::size_t feature_width() const { return cfg_.backbone.feature_width(); }

  CheckpointPlan plan() const {
    const std::size_t L = backbone_.size();
    return cfg_.checkpointing ? plan_checkpoints(L, std::min(cfg_.checkpoint_spacing, L))
                              : CheckpointPlan::every_layer(L);
  }

  ImageBuffer prepare(const ImageBuffer& img) const {
    if (img.channels != cfg_.image_channels) {
      throw ConfigError("model expects " + std::to_string(cfg_.image_channels) + "-channel images, got " +
                        std::to_string(img.channels));
    }
    return prepare_input(img, cfg_.mode);
  }

  PatchGrid grid_for(const ImageBuffer& img) const { return tile(img, cfg_.patch, cfg_.stride); }

  /// Feature matrix of a prepared image (no state retained).
  Tensor<T> features(const ImageBuffer& prepared, const PatchGrid& grid) const {
    return extract_features(prepared, grid, backbone_, params_, in_channels());
  }

  /// Aggregation + head on a feature matrix; the single code path every score
  /// goes through.
  Score classify_features(const Tensor<T>& features,
                          std::shared_ptr<AggregatedFeature<T>> record = nullptr) const {
    Tape<T> tape;
    auto f = tape.bind(features);
    auto agg = ops::aggregate(tape, f, cfg_.pooling, std::move(record));
    auto logit = head_logit<T>(tape, agg, params_, head_);
    const double z = static_cast<double>(tape.value(logit).item());
    return {kernels::sigmoid(z), z};
  }

  /// Training forward over a prepared image. With `keep_state`, each patch
  /// chain retains its checkpoint activations for a later backward.
  ImageForward<T> forward_prepared(const ImageBuffer& prepared, PatchGrid grid, bool keep_state,
                                   MemoryMeter* meter = nullptr) {
    if (prepared.channels != in_channels()) throw ConfigError("prepared image has the wrong channel count");
    ImageForward<T> fw;
    fw.grid = std::move(grid);
    fw.input_channels = prepared.channels;
    if (keep_state) {
      MemoryMeter& m = meter ? *meter : fw.meter;
      const CheckpointPlan p = plan();
      std::vector<T> rows;
      fw.chains.resize(fw.grid.count());
      for (std::size_t i = 0; i < fw.grid.count(); ++i) {
        Tensor<T> out = checkpointed_forward(backbone_, params_, crop_patch<T>(prepared, fw.grid.coords[i], cfg_.patch),
                                             p, m, fw.chains[i]);
        rows.insert(rows.end(), out.data().begin(), out.data().end());
      }
      fw.features = Tensor<T>(Shape{fw.grid.count(), feature_width()}, std::move(rows));
    } else {
      fw.features = features(prepared, fw.grid);
    }
    fw.aggregated = std::make_shared<AggregatedFeature<T>>();
    fw.feature_var = fw.tape.leaf(fw.features, keep_state);
    auto agg = ops::aggregate(fw.tape, fw.feature_var, cfg_.pooling, fw.aggregated);
    fw.logit_var = head_logit<T>(fw.tape, agg, params_, head_);
    fw.logit = static_cast<double>(fw.tape.value(fw.logit_var).item());
    if (!std::isfinite(fw.logit)) throw NumericError("non-finite logit");
    fw.score = kernels::sigmoid(fw.logit);
    return fw;
  }

  ImageForward<T> forward_image(const ImageBuffer& img, bool keep_state = true, MemoryMeter* meter = nullptr) {
    ImageBuffer prepared = prepare(img);
    PatchGrid grid = grid_for(prepared);
    return forward_prepared(prepared, std::move(grid), keep_state, meter);
  }

  /// Backpropagates `scale` * BCE(logit, label) (or `scale` * logit when
  /// `label` is empty) into the parameter gradients. Patches whose feature
  /// row gets no gradient skip the backbone backward. When `input_grad` is
  /// given it receives d/d(prepared input).
  BackwardStats backward(ImageForward<T>& fw, std::optional<int> label, T scale = T{1}, MemoryMeter* meter = nullptr,
                         ImageBuffer* input_grad = nullptr) {
    if (fw.chains.size() != fw.grid.count()) throw InternalError("backward needs a forward run with retained state");
    BackwardStats stats;
    typename Tape<T>::Var root = fw.logit_var;
    if (label) {
      if (*label != 0 && *label != 1) throw InputError("labels must be 0 or 1");
      root = ops::bce_with_logit(fw.tape, fw.logit_var, Tensor<T>(Shape{1, 1}, static_cast<T>(*label)));
      stats.loss = static_cast<double>(fw.tape.value(root).item());
      if (!std::isfinite(stats.loss)) throw NumericError("non-finite loss; lower the learning rate");
    }
    fw.tape.backward(root, scale);
    const Tensor<T> dF = fw.tape.grad(fw.feature_var);
    MemoryMeter& m = meter ? *meter : fw.meter;
    const CheckpointPlan p = plan();
    const std::size_t c = feature_width();
    if (input_grad) *input_grad = ImageBuffer(fw.grid.image_height, fw.grid.image_width, fw.input_channels);
    for (std::size_t i = 0; i < fw.grid.count(); ++i) {
      Tensor<T> row(Shape{1, c});
      bool any = false;
      for (std::size_t j = 0; j < c; ++j) {
        row[j] = dF.at(i, j);
        any = any || row[j] != T{0};
      }
      if (!any && !input_grad) {
        discard(fw.chains[i], m);
        continue;
      }
      stats.active_patches += any;
      Tensor<T> gin = checkpointed_backward(backbone_, params_, fw.chains[i], row, p, m, input_grad != nullptr);
      if (input_grad) scatter_patch(gin, fw.grid.coords[i], *input_grad);
    }
    fw.chains.clear();
    return stats;
  }

  /// Image-level score for this model's method.
  Score score(const ImageBuffer& img) const {
    switch (cfg_.method) {
      case Method::e2e: {
        const ImageBuffer prepared = prepare(img);
        return classify_features(features(prepared, grid_for(prepared)));
      }
      case Method::resize: {
        const ImageBuffer small = resize_bilinear(img, cfg_.patch, cfg_.patch);
        const ImageBuffer prepared = prepare(small);
        return classify_features(features(prepared, grid_for(prepared)));
      }
      case Method::patchwise: {
        const auto scores = patch_scores(img);
        Score best{0.0, -std::numeric_limits<double>::infinity()};
        for (const Score& s : scores) {
          if (s.score > best.score || best.logit == -std::numeric_limits<double>::infinity()) best = s;
        }
        return best;
      }
    }
    return {};
  }

  /// Per-patch scores (patchwise classifier view) in grid order.
  std::vector<Score> patch_scores(const ImageBuffer& img) const {
    const ImageBuffer prepared = prepare(img);
    const PatchGrid grid = grid_for(prepared);
    const Tensor<T> f = features(prepared, grid);
    std::vector<Score> out;
    for (std::size_t i = 0; i < grid.count(); ++i) {
      Tensor<T> row(Shape{1, f.dim(1)});
      std::copy_n(f.data().begin() + static_cast<long>(i * f.dim(1)), f.dim(1), row.data().begin());
      out.push_back(classify_features(row));
    }
    return out;
  }

  std::string save_bytes(nlohmann::json extra = {}) const {
    nlohmann::json meta = extra.is_null() ? nlohmann::json::object() : extra;
    meta["architecture"] = cfg_.to_json();
    meta["seed"] = cfg_.seed;
    return encode_params(params_, meta);
  }

  void save(const std::string& path, nlohmann::json extra = {}) const { write_file(path, save_bytes(std::move(extra))); }

  static Model from_bytes(const std::string& bytes) {
    auto loaded = decode_params<T>(bytes);
    return Model(ModelConfig::from_json(loaded.metadata.at("architecture")), std::move(loaded.params));
  }

  static Model load(const std::string& path) {
    try {
      return from_bytes(read_file(path));
    } catch (const IoError& e) {
      throw IoError(path + ": " + e.what());
    }
  }

  /// Checksum of the current parameter values.
  std::string params_digest() const { return sha256_hex(save_bytes()); }

 private:
  static void discard(ChainState<T>& st, MemoryMeter& m) {
    for (auto& a : st.activations) {
      if (a) {
        a.reset();
        m.release();
      }
    }
    st.backward_done = true;
  }

  void scatter_patch(const Tensor<T>& g, const PatchCoord& at, ImageBuffer& out) const {
    const std::size_t p = cfg_.patch;
    const T* src = g.data().data();
    for (std::size_t c = 0; c < out.channels; ++c) {
      for (std::size_t y = 0; y < p; ++y) {
        for (std::size_t x = 0; x < p; ++x) out.at(c, at.row + y, at.col + x) += static_cast<double>(*src++);
      }
    }
  }

  ModelConfig cfg_;
  ParamSet<T> params_;
  std::vector<LayerPtr<T>> backbone_;
  HeadParams head_;
};

}  // namespace patchforge
