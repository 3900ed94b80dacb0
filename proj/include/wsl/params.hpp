#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "wsl/tape.hpp"

namespace wsl {

// Insertion-ordered name -> tensor map. Order matters: parameter layouts
// walk it in definition order.
template <typename T>
class NamedTensors {
public:
  void add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw Error("duplicate tensor name: " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<T>& operator[](const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown tensor: " + name);
    return items_[it->second].second;
  }

  const Tensor<T>& operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown tensor: " + name);
    return items_[it->second].second;
  }

  size_t size() const { return items_.size(); }
  const std::pair<std::string, Tensor<T>>& item(size_t i) const { return items_[i]; }
  std::pair<std::string, Tensor<T>>& item(size_t i) { return items_[i]; }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& [k, v] : items_) n += v.numel();
    return n;
  }

  template <typename U>
  NamedTensors<U> cast() const {
    NamedTensors<U> out;
    for (const auto& [k, v] : items_) out.add(k, v.template cast<U>());
    return out;
  }

private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::unordered_map<std::string, size_t> index_;
};

template <typename T>
uint64_t named_tensors_hash(const NamedTensors<T>& ts) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [k, v] : ts) {
    h = fnv1a(k, h);
    h = tensor_hash(v, h);
  }
  return h;
}

// Binds a parameter store to a tape for one step: every tensor becomes a
// leaf (or constant when frozen); gradients are read back by name.
template <typename T>
class TapeBinding {
public:
  TapeBinding(Tape<T>& tape, NamedTensors<T>& store, bool trainable)
      : tape_(tape), store_(store) {
    for (auto& [name, t] : store) vars_[name] = tape.leaf(t, trainable);
  }

  Var var(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw Error("tape binding: unknown tensor " + name);
    return it->second;
  }

  const Tensor<T>& grad(const std::string& name) { return tape_.grad(var(name)); }

  NamedTensors<T>& store() { return store_; }

private:
  Tape<T>& tape_;
  NamedTensors<T>& store_;
  std::unordered_map<std::string, Var> vars_;
};

// Adam with optional cosine learning-rate decay handled by the caller.
template <typename T>
class Adam {
public:
  Adam(T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(NamedTensors<T>& params, const std::vector<std::string>& names,
            const std::function<const Tensor<T>&(const std::string&)>& grad_of, T lr) {
    ++t_;
    T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (const auto& name : names) {
      Tensor<T>& p = params[name];
      const Tensor<T>& g = grad_of(name);
      auto& st = state_[name];
      if (st.m.numel() == 0) {
        st.m = Tensor<T>::zeros(p.shape());
        st.v = Tensor<T>::zeros(p.shape());
      }
      for (int64_t i = 0; i < p.numel(); ++i) {
        st.m[i] = beta1_ * st.m[i] + (T(1) - beta1_) * g[i];
        st.v[i] = beta2_ * st.v[i] + (T(1) - beta2_) * g[i] * g[i];
        T mhat = st.m[i] / bc1;
        T vhat = st.v[i] / bc2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

private:
  struct State {
    Tensor<T> m, v;
  };
  std::unordered_map<std::string, State> state_;
  T beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

// SGD with momentum and decoupled weight decay on weights only
// (decay_filter decides; normalization/bias tensors are usually excluded).
template <typename T>
class SgdMomentum {
public:
  SgdMomentum(T momentum, T weight_decay) : momentum_(momentum), wd_(weight_decay) {}

  void step(NamedTensors<T>& params, const std::vector<std::string>& names,
            const std::function<const Tensor<T>&(const std::string&)>& grad_of, T lr,
            const std::function<bool(const std::string&)>& decay_filter) {
    for (const auto& name : names) {
      Tensor<T>& p = params[name];
      const Tensor<T>& g = grad_of(name);
      auto& v = velocity_[name];
      if (v.numel() == 0) v = Tensor<T>::zeros(p.shape());
      T wd = decay_filter(name) ? wd_ : T(0);
      for (int64_t i = 0; i < p.numel(); ++i) {
        T gi = g[i] + wd * p[i];
        v[i] = momentum_ * v[i] + gi;
        p[i] -= lr * v[i];
      }
    }
  }

private:
  std::unordered_map<std::string, Tensor<T>> velocity_;
  T momentum_, wd_;
};

}  // namespace wsl
