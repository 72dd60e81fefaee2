#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dseg/errors.hpp"
#include "dseg/rng.hpp"
#include "dseg/tensor.hpp"

namespace dseg {

// Named tensor registry backing a model: trainable parameters plus
// non-trainable state (batch-norm running statistics, checkpoint metadata).
// Insertion order is preserved; it defines both the serialization order and
// the order optimizer buffers line up in.
template <class T>
class ParamStoreT {
 public:
  struct Entry {
    std::string name;
    TensorT<T> tensor;
    bool trainable;
  };

  TensorT<T>& add(const std::string& name, TensorT<T> t, bool trainable = true) {
    check_config(!index_.count(name), "duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, std::move(t), trainable});
    return entries_.back().tensor;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  TensorT<T>& at(const std::string& name) {
    auto it = index_.find(name);
    check_config(it != index_.end(), "unknown parameter name: " + name);
    return entries_[it->second].tensor;
  }
  const TensorT<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    check_config(it != index_.end(), "unknown parameter name: " + name);
    return entries_[it->second].tensor;
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  size_t trainable_scalars() const {
    size_t n = 0;
    for (const Entry& e : entries_)
      if (e.trainable) n += e.tensor.data.size();
    return n;
  }

  void zero_grads() {
    for (Entry& e : entries_)
      if (e.trainable) {
        e.tensor.ensure_grad();
        e.tensor.zero_grad();
      }
  }

  template <class U>
  ParamStoreT<U> cast() const {
    ParamStoreT<U> out;
    for (const Entry& e : entries_) out.add(e.name, cast_tensor<U>(e.tensor), e.trainable);
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

using ParamStore = ParamStoreT<float>;

// Kaiming-uniform fan-in initialization: U(-b, b) with b = sqrt(6 / fan_in).
template <class T>
TensorT<T> kaiming_uniform(const Shape& shape, int fan_in, Rng& rng) {
  check_config(fan_in > 0, "kaiming init needs positive fan-in");
  double bound = std::sqrt(6.0 / double(fan_in));
  TensorT<T> t(shape);
  for (auto& v : t.data) v = T(rng.uniform(-bound, bound));
  return t;
}

}  // namespace dseg
