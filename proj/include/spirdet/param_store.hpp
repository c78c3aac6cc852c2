#pragma once

// Flat registry of named model parameters. Entries view the tensors owned by
// the model structs; each carries its own gradient buffer. Iteration order is
// registration order, which is fixed by the model builder, so optimizer
// updates and serialization are deterministic.

#include <string>
#include <unordered_map>
#include <vector>

#include "spirdet/tensor.hpp"

namespace spirdet {

enum class ParamKind { kernel, bias, bn_gamma, bn_beta, bn_running_mean, bn_running_var };

inline bool param_trainable(ParamKind k) {
  return k != ParamKind::bn_running_mean && k != ParamKind::bn_running_var;
}

// Weight decay applies to conv kernels only.
inline bool param_decayed(ParamKind k) { return k == ParamKind::kernel; }

template <std::floating_point S>
struct ParamEntry {
  std::string name;
  std::vector<int> dims;
  S* data = nullptr;
  Eigen::Index size = 0;
  ParamKind kind = ParamKind::kernel;
  VecX<S> grad;

  MapVec<S> view() { return MapVec<S>(data, size); }
  CMapVec<S> view() const { return CMapVec<S>(data, size); }
};

template <std::floating_point S>
class ParameterStore {
 public:
  void add(std::string name, std::vector<int> dims, S* data, Eigen::Index size, ParamKind kind) {
    if (by_key_.count(data) || by_name_.count(name))
      throw InvalidStructure("parameter registered twice: " + name);
    ParamEntry<S> e;
    e.name = std::move(name);
    e.dims = std::move(dims);
    e.data = data;
    e.size = size;
    e.kind = kind;
    e.grad = VecX<S>::Zero(size);
    by_key_[data] = entries_.size();
    by_name_[e.name] = entries_.size();
    entries_.push_back(std::move(e));
  }

  void add(std::string name, Tensor<S>& t, ParamKind kind) {
    add(std::move(name), {t.shape[0], t.shape[1], t.shape[2], t.shape[3]}, t.data.data(), t.size(),
        kind);
  }

  void add(std::string name, VecX<S>& v, ParamKind kind) {
    add(std::move(name), {static_cast<int>(v.size())}, v.data(), v.size(), kind);
  }

  ParamEntry<S>* find(const void* data_ptr) {
    auto it = by_key_.find(data_ptr);
    return it == by_key_.end() ? nullptr : &entries_[it->second];
  }

  ParamEntry<S>* find_name(const std::string& name) {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : &entries_[it->second];
  }

  void zero_grad() {
    for (auto& e : entries_) e.grad.setZero();
  }

  long long trainable_count() const {
    long long n = 0;
    for (const auto& e : entries_)
      if (param_trainable(e.kind)) n += e.size;
    return n;
  }

  std::vector<ParamEntry<S>>& entries() { return entries_; }
  const std::vector<ParamEntry<S>>& entries() const { return entries_; }

 private:
  std::vector<ParamEntry<S>> entries_;
  std::unordered_map<const void*, size_t> by_key_;
  std::unordered_map<std::string, size_t> by_name_;
};

}  // namespace spirdet
