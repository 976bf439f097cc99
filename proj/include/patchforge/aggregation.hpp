#pragma once

// Image-wise pooling of per-patch feature vectors. A feature matrix has one
// row per patch and one column per feature channel; every pooling is
// component-wise, so the aggregated descriptor carries no spatial layout.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "patchforge/tensor.hpp"

namespace patchforge {

enum class Pooling { max = 0, min = 1, mean = 2, msq = 3 };

inline constexpr std::array<Pooling, 4> kPoolingOrder{Pooling::max, Pooling::min, Pooling::mean, Pooling::msq};

inline const char* pooling_name(Pooling p) {
  switch (p) {
    case Pooling::max: return "max";
    case Pooling::min: return "min";
    case Pooling::mean: return "mean";
    case Pooling::msq: return "msq";
  }
  return "?";
}

inline Pooling parse_pooling(const std::string& s) {
  for (Pooling p : kPoolingOrder) {
    if (s == pooling_name(p)) return p;
  }
  throw ConfigError("unknown pooling '" + s + "'");
}

/// Enabled subset of {max, min, mean, msq}; output blocks are always laid
/// out in that order regardless of how the set was specified.
class PoolingConfig {
 public:
  PoolingConfig() : enabled_{true, true, true, true} {}

  explicit PoolingConfig(std::initializer_list<Pooling> poolings) : enabled_{} {
    for (Pooling p : poolings) enabled_[static_cast<int>(p)] = true;
    validate();
  }

  static PoolingConfig all() { return PoolingConfig(); }

  static PoolingConfig from_names(const std::vector<std::string>& names) {
    PoolingConfig cfg;
    cfg.enabled_ = {};
    for (const auto& n : names) cfg.enabled_[static_cast<int>(parse_pooling(n))] = true;
    cfg.validate();
    return cfg;
  }

  bool has(Pooling p) const { return enabled_[static_cast<int>(p)]; }

  std::size_t count() const {
    std::size_t n = 0;
    for (bool b : enabled_) n += b;
    return n;
  }

  std::size_t output_width(std::size_t channels) const { return count() * channels; }

  std::vector<Pooling> enabled() const {
    std::vector<Pooling> out;
    for (Pooling p : kPoolingOrder) {
      if (has(p)) out.push_back(p);
    }
    return out;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (Pooling p : enabled()) out.emplace_back(pooling_name(p));
    return out;
  }

  bool operator==(const PoolingConfig&) const = default;

 private:
  void validate() const {
    if (count() == 0) throw ConfigError("at least one pooling must be enabled");
  }

  std::array<bool, 4> enabled_;
};

/// Concatenated poolings plus the winning patch of each channel for the
/// max/min routes (empty when that pooling is disabled).
template <class T>
struct AggregatedFeature {
  std::vector<T> values;
  std::vector<std::size_t> argmax;
  std::vector<std::size_t> argmin;
  std::size_t channels = 0;
  std::size_t patches = 0;
};

template <class T>
void check_feature_matrix(const Tensor<T>& features) {
  if (features.rank() != 2) throw InputError("feature matrix must be [patches, channels], got " + shape_string(features.shape()));
}

/// Component-wise max/min/mean/mean-of-squares over patches. Ties in max and
/// min resolve to the lowest patch index.
template <class T>
AggregatedFeature<T> aggregate(const Tensor<T>& features, const PoolingConfig& cfg) {
  if (features.empty()) throw InputError("cannot aggregate an empty feature matrix");
  check_feature_matrix(features);
  const std::size_t np = features.dim(0), c = features.dim(1);
  AggregatedFeature<T> agg;
  agg.channels = c;
  agg.patches = np;
  agg.values.reserve(cfg.output_width(c));
  const T n = static_cast<T>(np);
  for (Pooling p : cfg.enabled()) {
    switch (p) {
      case Pooling::max:
      case Pooling::min: {
        auto& idx = p == Pooling::max ? agg.argmax : agg.argmin;
        idx.assign(c, 0);
        for (std::size_t j = 0; j < c; ++j) {
          std::size_t best = 0;
          for (std::size_t i = 1; i < np; ++i) {
            const T v = features.at(i, j), b = features.at(best, j);
            if (p == Pooling::max ? v > b : v < b) best = i;
          }
          idx[j] = best;
          agg.values.push_back(features.at(best, j));
        }
        break;
      }
      case Pooling::mean:
        for (std::size_t j = 0; j < c; ++j) {
          T s = 0;
          for (std::size_t i = 0; i < np; ++i) s += features.at(i, j);
          agg.values.push_back(s / n);
        }
        break;
      case Pooling::msq:
        for (std::size_t j = 0; j < c; ++j) {
          T s = 0;
          for (std::size_t i = 0; i < np; ++i) s += features.at(i, j) * features.at(i, j);
          agg.values.push_back(s / n);
        }
        break;
    }
  }
  return agg;
}

/// Gradient on the feature matrix given the gradient on the concatenated
/// descriptor. Max/min credit only the recorded winner row, mean spreads
/// evenly, msq weights by 2*F; enabled routes add with unit weight.
template <class T>
Tensor<T> aggregate_backward(std::span<const T> upstream, const Tensor<T>& features, const AggregatedFeature<T>& agg,
                             const PoolingConfig& cfg) {
  check_feature_matrix(features);
  const std::size_t np = features.dim(0), c = features.dim(1);
  if (upstream.size() != cfg.output_width(c) || agg.channels != c || agg.patches != np) {
    throw InternalError("aggregate_backward: upstream/feature shape mismatch");
  }
  Tensor<T> grad(features.shape());
  const T n = static_cast<T>(np);
  std::size_t block = 0;
  for (Pooling p : cfg.enabled()) {
    const T* up = upstream.data() + block * c;
    switch (p) {
      case Pooling::max:
        for (std::size_t j = 0; j < c; ++j) grad.at(agg.argmax[j], j) += up[j];
        break;
      case Pooling::min:
        for (std::size_t j = 0; j < c; ++j) grad.at(agg.argmin[j], j) += up[j];
        break;
      case Pooling::mean:
        for (std::size_t i = 0; i < np; ++i) {
          for (std::size_t j = 0; j < c; ++j) grad.at(i, j) += up[j] / n;
        }
        break;
      case Pooling::msq:
        for (std::size_t i = 0; i < np; ++i) {
          for (std::size_t j = 0; j < c; ++j) grad.at(i, j) += T{2} * features.at(i, j) * up[j] / n;
        }
        break;
    }
    ++block;
  }
  return grad;
}

/// Image-level false-alarm rate of OR-fusing N independent patch decisions
/// that each false-alarm with probability p_fa.
inline double fuse_patch_scores(double p_fa, long n) {
  if (!(p_fa >= 0.0 && p_fa <= 1.0)) throw InputError("patch false-alarm probability must lie in [0,1]");
  if (n < 1) throw InputError("patch count must be at least 1");
  return 1.0 - std::pow(1.0 - p_fa, static_cast<double>(n));
}

}  // namespace patchforge
