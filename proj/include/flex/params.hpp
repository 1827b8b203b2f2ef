#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "flex/tape.hpp"
#include "flex/tensor.hpp"

namespace flex {

/// Ordered collection of named parameter tensors.
template <class T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
  };

  /// Registers a parameter; returns its index.
  std::size_t add(std::string name, Tensor<T> value) {
    require(!index_.contains(name), ErrorKind::Configuration, "duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.push_back({std::move(name), std::move(value)});
    return entries_.size() - 1;
  }

  std::size_t size() const { return entries_.size(); }
  Entry& operator[](std::size_t i) { return entries_[i]; }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  bool contains(const std::string& name) const { return index_.contains(name); }
  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorKind::Configuration, "unknown parameter " + name);
    return it->second;
  }
  Tensor<T>& at(const std::string& name) { return entries_[index(name)].value; }
  const Tensor<T>& at(const std::string& name) const { return entries_[index(name)].value; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Parameter leaves of one ParamSet on one tape, index-aligned with the set.
template <class T>
std::vector<Var> bind_params(Tape<T>& tape, const ParamSet<T>& params, bool requires_grad) {
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& e : params) vars.push_back(tape.leaf(e.value, requires_grad));
  return vars;
}

/// Uniform in [-b, b], b = sqrt(6 / (fan_in + fan_out)).
template <class T>
Tensor<T> xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double b = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-b, b);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <class T>
Tensor<T> conv_kernel_init(std::size_t cout, std::size_t cin, std::size_t k, std::mt19937_64& rng) {
  return xavier_uniform<T>({cout, cin, k, k}, cin * k * k, cout * k * k, rng);
}

template <class T>
Tensor<T> linear_init(std::size_t dout, std::size_t din, std::mt19937_64& rng) {
  return xavier_uniform<T>({dout, din}, din, dout, rng);
}

}  // namespace flex
