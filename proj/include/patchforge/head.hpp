#pragma once

#include <random>

#include "patchforge/tape.hpp"
#include "patchforge/params.hpp"

namespace patchforge {

/// Fully-connected decision layers: fc1 -> relu -> fc2 -> relu -> scalar logit.
struct HeadConfig {
  std::size_t fc1 = 64;
  std::size_t fc2 = 32;

  void validate() const {
    if (fc2 < 1 || fc1 < fc2) throw ConfigError("head sizes must satisfy fc1 >= fc2 >= 1");
  }
  /// Number of scalars in a head fed by `input_width` features.
  std::size_t parameter_count(std::size_t input_width) const {
    return input_width * fc1 + fc1 + fc1 * fc2 + fc2 + fc2 + 1;
  }
  bool operator==(const HeadConfig&) const = default;
};

struct HeadParams {
  std::size_t input_width = 0;
  std::size_t w1, b1, w2, b2, w3, b3;
};

template <class T>
HeadParams add_head_params(const HeadConfig& cfg, std::size_t input_width, ParamSet<T>& params, std::mt19937_64& rng) {
  cfg.validate();
  if (input_width == 0) throw ConfigError("head input width must be positive");
  HeadParams h;
  h.input_width = input_width;
  h.w1 = params.add("head.fc1.weight", he_normal<T>(Shape{input_width, cfg.fc1}, input_width, rng));
  h.b1 = params.add("head.fc1.bias", Tensor<T>(Shape{cfg.fc1}));
  h.w2 = params.add("head.fc2.weight", he_normal<T>(Shape{cfg.fc1, cfg.fc2}, cfg.fc1, rng));
  h.b2 = params.add("head.fc2.bias", Tensor<T>(Shape{cfg.fc2}));
  h.w3 = params.add("head.out.weight", he_normal<T>(Shape{cfg.fc2, 1}, cfg.fc2, rng));
  h.b3 = params.add("head.out.bias", Tensor<T>(Shape{1}));
  return h;
}

template <class T>
HeadParams find_head_params(const ParamSet<T>& params) {
  HeadParams h;
  h.w1 = params.index("head.fc1.weight");
  h.b1 = params.index("head.fc1.bias");
  h.w2 = params.index("head.fc2.weight");
  h.b2 = params.index("head.fc2.bias");
  h.w3 = params.index("head.out.weight");
  h.b3 = params.index("head.out.bias");
  h.input_width = params[h.w1].dim(0);
  return h;
}

/// Records the head on `tape`. With a non-const ParamSet the weights take
/// part in backward; with a const one they are bound read-only.
template <class T, class Params>
typename Tape<T>::Var head_logit(Tape<T>& tape, typename Tape<T>::Var input, Params& params, const HeadParams& h) {
  if (tape.value(input).rank() != 2 || tape.value(input).dim(1) != h.input_width) {
    throw ConfigError("head expects " + std::to_string(h.input_width) + " input features, got " +
                      shape_string(tape.value(input).shape()));
  }
  auto p = [&](std::size_t i) {
    if constexpr (std::is_const_v<Params>) {
      return tape.bind(params[i]);
    } else {
      return tape.parameter(params[i]);
    }
  };
  auto x = ops::relu(tape, ops::affine(tape, input, p(h.w1), p(h.b1)));
  x = ops::relu(tape, ops::affine(tape, x, p(h.w2), p(h.b2)));
  return ops::affine(tape, x, p(h.w3), p(h.b3));
}

}  // namespace patchforge
