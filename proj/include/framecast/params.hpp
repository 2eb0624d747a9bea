#pragma once

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "framecast/rng.hpp"
#include "framecast/tensor.hpp"

namespace framecast {

/// Flat named-tensor tree holding every trainable array of a model.
/// Optimizer state, EMA shadows and gradient accumulators are structural
/// clones of the same tree, so index i always refers to the same logical
/// parameter across all of them.
template <typename S>
class Parameters {
 public:
  int add(std::string name, Tensor<S> value) {
    if (by_name_.count(name))
      throw std::invalid_argument("duplicate parameter: " + name);
    int idx = static_cast<int>(values_.size());
    by_name_.emplace(name, idx);
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return idx;
  }

  int find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? -1 : it->second;
  }
  int require(const std::string& name) const {
    int idx = find(name);
    if (idx < 0) throw std::out_of_range("no such parameter: " + name);
    return idx;
  }

  int count() const { return static_cast<int>(values_.size()); }
  const std::string& name(int i) const { return names_[static_cast<size_t>(i)]; }
  Tensor<S>& operator[](int i) { return values_[static_cast<size_t>(i)]; }
  const Tensor<S>& operator[](int i) const { return values_[static_cast<size_t>(i)]; }
  Tensor<S>& at(const std::string& name) { return values_[static_cast<size_t>(require(name))]; }
  const Tensor<S>& at(const std::string& name) const {
    return values_[static_cast<size_t>(require(name))];
  }

  Index total_size() const {
    Index n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  Parameters zeros_like() const {
    Parameters out;
    for (int i = 0; i < count(); ++i) out.add(names_[static_cast<size_t>(i)], Tensor<S>(values_[static_cast<size_t>(i)].shape()));
    return out;
  }

  Parameters clone() const {
    Parameters out = *this;
    return out;
  }

  bool same_structure(const Parameters& other) const {
    if (count() != other.count()) return false;
    for (int i = 0; i < count(); ++i) {
      if (names_[static_cast<size_t>(i)] != other.names_[static_cast<size_t>(i)]) return false;
      if (values_[static_cast<size_t>(i)].shape() != other.values_[static_cast<size_t>(i)].shape())
        return false;
    }
    return true;
  }

  template <typename T>
  Parameters<T> cast() const {
    Parameters<T> out;
    for (int i = 0; i < count(); ++i)
      out.add(names_[static_cast<size_t>(i)], values_[static_cast<size_t>(i)].template cast<T>());
    return out;
  }

  void set_zero() {
    for (auto& v : values_) v.set_zero();
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<S>> values_;
  std::unordered_map<std::string, int> by_name_;
};

/// Registers parameters under a name prefix with seed-keyed deterministic
/// initialization. Init streams are keyed by the parameter's full name, so
/// registration order never changes initial values.
template <typename S>
class ParamBuilder {
 public:
  ParamBuilder(Parameters<S>& params, std::string prefix, std::uint64_t seed)
      : params_(params), prefix_(std::move(prefix)), seed_(seed) {}

  ParamBuilder scoped(const std::string& sub) const {
    return ParamBuilder(params_, prefix_ + sub + ".", seed_);
  }

  /// Weight with normal(0, 1/sqrt(fan_in)) entries.
  int weight(const std::string& name, Index fan_in, Index fan_out) {
    return normal(name, {fan_in, fan_out}, S(1) / std::sqrt(static_cast<S>(fan_in)));
  }

  int normal(const std::string& name, Shape shape, S stddev) {
    std::string full = prefix_ + name;
    Tensor<S> t(std::move(shape));
    RandomStream stream(name_key(full));
    stream.fill_normal(t);
    t.array() *= stddev;
    return params_.add(std::move(full), std::move(t));
  }

  int zeros(const std::string& name, Shape shape) {
    return params_.add(prefix_ + name, Tensor<S>(std::move(shape)));
  }

 private:
  std::uint64_t name_key(const std::string& full) const {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : full) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    return derive_key(seed_, h);
  }

  Parameters<S>& params_;
  std::string prefix_;
  std::uint64_t seed_;
};

}  // namespace framecast
