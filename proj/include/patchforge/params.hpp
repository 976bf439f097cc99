#pragma once

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "patchforge/digest.hpp"
#include "patchforge/tensor.hpp"

namespace patchforge {

/// Named parameters in a fixed order, plus the Adam moments for each.
template <class T>
class ParamSet {
 public:
  std::size_t add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    value.requires_grad = true;
    index_.emplace(name, tensors_.size());
    names_.push_back(std::move(name));
    m_.emplace_back(value.size(), T{0});
    v_.emplace_back(value.size(), T{0});
    tensors_.push_back(std::move(value));
    return tensors_.size() - 1;
  }

  std::size_t size() const noexcept { return tensors_.size(); }
  Tensor<T>& operator[](std::size_t i) { return tensors_.at(i); }
  const Tensor<T>& operator[](std::size_t i) const { return tensors_.at(i); }
  Tensor<T>& operator[](const std::string& name) { return tensors_.at(index(name)); }
  const Tensor<T>& operator[](const std::string& name) const { return tensors_.at(index(name)); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const std::vector<std::string>& names() const noexcept { return names_; }

  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  std::uint64_t step() const noexcept { return step_; }
  const std::vector<T>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<T>& second_moment(std::size_t i) const { return v_.at(i); }

  void zero_grad() {
    for (auto& t : tensors_) {
      if (!t.grad) t.grad.emplace(t.size(), T{0});
      t.zero_grad();
    }
  }

  void scale_grads(T s) {
    for (auto& t : tensors_) {
      if (t.grad) {
        for (T& g : *t.grad) g *= s;
      }
    }
  }

  /// Adds the gradients held by `other` (same layout) into this set.
  void add_grads(const ParamSet& other) {
    if (other.size() != size()) throw InternalError("add_grads: parameter layout mismatch");
    for (std::size_t i = 0; i < size(); ++i) {
      if (other.tensors_[i].grad) tensors_[i].accumulate_grad(*other.tensors_[i].grad);
    }
  }

  T grad_norm() const {
    T s = 0;
    for (const auto& t : tensors_) {
      if (t.grad) {
        for (T g : *t.grad) s += g * g;
      }
    }
    return std::sqrt(s);
  }

  /// One bias-corrected Adam update of every parameter; gradients are zeroed.
  void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    for (std::size_t i = 0; i < size(); ++i) {
      if (!tensors_[i].grad) throw InternalError("adam_step: parameter '" + names_[i] + "' has no gradient");
    }
    ++step_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < size(); ++i) {
      auto& t = tensors_[i];
      auto& g = *t.grad;
      for (std::size_t j = 0; j < t.size(); ++j) {
        const T gj = g[j];
        m_[i][j] = static_cast<T>(beta1 * m_[i][j] + (1.0 - beta1) * gj);
        v_[i][j] = static_cast<T>(beta2 * v_[i][j] + (1.0 - beta2) * gj * gj);
        const double mhat = m_[i][j] / c1;
        const double vhat = v_[i][j] / c2;
        t[j] = static_cast<T>(t[j] - lr * mhat / (std::sqrt(vhat) + eps));
      }
      std::fill(g.begin(), g.end(), T{0});
    }
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], tensors_[i].template cast<U>());
    return out;
  }

  bool same_values(const ParamSet& other) const {
    if (names_ != other.names_) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (!(tensors_[i] == other.tensors_[i])) return false;
    }
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<Tensor<T>> tensors_;
  std::vector<std::vector<T>> m_, v_;
  std::uint64_t step_ = 0;
};

/// He-normal initialization: N(0, 2/fan_in).
template <class T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

// Parameter container file:
//   "E2EFWD1\n" | u64 LE metadata length | metadata JSON | raw LE values | SHA-256 of all preceding bytes
inline constexpr std::string_view kParamsMagic = "E2EFWD1\n";

namespace detail {

template <class U>
void append_le(std::string& out, U value) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  char buf[sizeof(U)];
  std::memcpy(buf, &value, sizeof(U));
  out.append(buf, sizeof(U));
}

template <class U>
U read_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw IoError("parameter file truncated");
  U value;
  std::memcpy(&value, in.data() + pos, sizeof(U));
  pos += sizeof(U);
  return value;
}

}  // namespace detail

/// Serializes parameters; `metadata` carries architecture config and seed.
template <class T>
std::string encode_params(const ParamSet<T>& params, nlohmann::json metadata) {
  const bool f64 = std::is_same_v<T, double>;
  metadata["dtype"] = f64 ? "f64" : "f32";
  auto& entries = metadata["params"] = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    entries.push_back({{"name", params.name(i)}, {"shape", params[i].shape()}});
  }
  const std::string meta = metadata.dump();
  std::string out(kParamsMagic);
  detail::append_le<std::uint64_t>(out, meta.size());
  out += meta;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (T v : params[i].data()) detail::append_le<T>(out, v);
  }
  const Sha256 digest = sha256(out);
  out.append(reinterpret_cast<const char*>(digest.data()), digest.size());
  return out;
}

template <class T>
struct LoadedParams {
  ParamSet<T> params;
  nlohmann::json metadata;
};

template <class T>
LoadedParams<T> decode_params(const std::string& bytes) {
  if (bytes.size() < kParamsMagic.size() + 8 + 32 || bytes.compare(0, kParamsMagic.size(), kParamsMagic) != 0) {
    throw IoError("not a parameter container (bad magic)");
  }
  const std::size_t body = bytes.size() - 32;
  const Sha256 digest = sha256(std::string_view(bytes.data(), body));
  if (std::memcmp(digest.data(), bytes.data() + body, 32) != 0) throw IoError("parameter container checksum mismatch");
  std::size_t pos = kParamsMagic.size();
  const auto meta_len = detail::read_le<std::uint64_t>(bytes, pos);
  if (pos + meta_len > body) throw IoError("parameter metadata length out of range");
  LoadedParams<T> out;
  out.metadata = nlohmann::json::parse(bytes.substr(pos, meta_len));
  pos += meta_len;
  const bool f64 = out.metadata.at("dtype") == "f64";
  for (const auto& e : out.metadata.at("params")) {
    Tensor<T> t(e.at("shape").template get<Shape>());
    for (T& v : t.data()) {
      if (pos >= body) throw IoError("parameter values truncated");
      v = f64 ? static_cast<T>(detail::read_le<double>(bytes, pos)) : static_cast<T>(detail::read_le<float>(bytes, pos));
    }
    out.params.add(e.at("name").template get<std::string>(), std::move(t));
  }
  if (pos != body) throw IoError("trailing bytes in parameter container");
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace patchforge
