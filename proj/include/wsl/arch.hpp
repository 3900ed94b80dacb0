#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "wsl/nn.hpp"
#include "wsl/params.hpp"

namespace wsl {

// Role of a tensor within its owning layer. Statistics are carried in the
// parameter representation but excluded from gradient updates.
enum class TensorKind { Weight, Bias, BnWeight, BnBias, BnRunningMean, BnRunningVar };

struct TensorDef {
  std::string name;
  std::vector<int64_t> shape;
  TensorKind kind;

  int64_t numel() const {
    int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

struct ArchSpec {
  std::string name;
  int class_id = 0;
  std::vector<int64_t> input_shape;  // without batch dimension
  int64_t output_dim = 0;
  int64_t param_count = 0;  // total elements across tensor_defs, stats included
};

inline bool is_trainable(TensorKind k) {
  return k != TensorKind::BnRunningMean && k != TensorKind::BnRunningVar;
}

namespace archdef {

// Residual stage widths for the CIFAR-style 6n+2 ResNets used here.
struct ResNetCfg {
  int n_blocks_per_stage;
  int64_t w1, w2, w3;
};

inline ResNetCfg resnet_cfg(const std::string& name) {
  if (name == "ResNet8") return {1, 20, 40, 80};
  if (name == "ResNet32") return {5, 12, 24, 48};
  if (name == "ResNet56-teacher") return {9, 16, 32, 64};
  throw Error("not a resnet arch: " + name);
}

inline void add_conv(std::vector<TensorDef>& out, const std::string& p, int64_t co, int64_t ci,
                     int64_t k, bool bias) {
  out.push_back({p + ".weight", {co, ci, k, k}, TensorKind::Weight});
  if (bias) out.push_back({p + ".bias", {co}, TensorKind::Bias});
}

inline void add_bn(std::vector<TensorDef>& out, const std::string& p, int64_t c) {
  out.push_back({p + ".weight", {c}, TensorKind::BnWeight});
  out.push_back({p + ".bias", {c}, TensorKind::BnBias});
  out.push_back({p + ".running_mean", {c}, TensorKind::BnRunningMean});
  out.push_back({p + ".running_var", {c}, TensorKind::BnRunningVar});
}

inline void add_fc(std::vector<TensorDef>& out, const std::string& p, int64_t o, int64_t i) {
  out.push_back({p + ".weight", {o, i}, TensorKind::Weight});
  out.push_back({p + ".bias", {o}, TensorKind::Bias});
}

}  // namespace archdef

// Every tensor of an architecture in definition order, weight before bias,
// normalization statistics included so a loaded instance runs in eval mode
// as stored.
inline std::vector<TensorDef> tensor_defs(const std::string& arch_name) {
  using namespace archdef;
  std::vector<TensorDef> out;
  if (arch_name == "LeNetLike") {
    add_conv(out, "conv1", 6, 3, 5, true);
    add_conv(out, "conv2", 16, 6, 5, true);
    add_fc(out, "fc1", 48, 16 * 5 * 5);
    add_fc(out, "fc2", 10, 48);
  } else if (arch_name == "VanillaCNN") {
    add_conv(out, "conv1", 16, 3, 3, true);
    add_conv(out, "conv2", 32, 16, 3, true);
    add_conv(out, "conv3", 32, 32, 3, true);
    add_conv(out, "conv4", 48, 32, 3, true);
    add_fc(out, "fc", 10, 48 * 2 * 2);
  } else if (arch_name == "ResNet8" || arch_name == "ResNet32" ||
             arch_name == "ResNet56-teacher") {
    auto cfg = resnet_cfg(arch_name);
    add_conv(out, "conv1", cfg.w1, 3, 3, false);
    add_bn(out, "bn1", cfg.w1);
    int64_t widths[3] = {cfg.w1, cfg.w2, cfg.w3};
    int64_t in_c = cfg.w1;
    for (int stage = 0; stage < 3; ++stage) {
      int64_t w = widths[stage];
      for (int b = 0; b < cfg.n_blocks_per_stage; ++b) {
        std::string p = "layer" + std::to_string(stage + 1) + "." + std::to_string(b);
        bool down = (b == 0 && in_c != w);
        add_conv(out, p + ".conv1", w, in_c, 3, false);
        add_bn(out, p + ".bn1", w);
        add_conv(out, p + ".conv2", w, w, 3, false);
        add_bn(out, p + ".bn2", w);
        if (down) {
          out.push_back({p + ".downsample.weight", {w, in_c, 1, 1}, TensorKind::Weight});
          add_bn(out, p + ".downsample.bn", w);
        }
        in_c = w;
      }
    }
    add_fc(out, "fc", 10, cfg.w3);
  } else if (arch_name == "SirenMLP") {
    add_fc(out, "linear1", 256, 3);
    add_fc(out, "linear2", 1, 256);
  } else {
    throw Error("unknown architecture: " + arch_name);
  }
  return out;
}

inline int64_t arch_param_count(const std::string& name) {
  int64_t n = 0;
  for (const auto& d : tensor_defs(name)) n += d.numel();
  return n;
}

inline ArchSpec make_arch_spec(const std::string& name, int class_id) {
  ArchSpec s;
  s.name = name;
  s.class_id = class_id;
  if (name == "SirenMLP") {
    s.input_shape = {3};
    s.output_dim = 1;
  } else {
    s.input_shape = {3, 32, 32};
    s.output_dim = 10;
  }
  s.param_count = arch_param_count(name);
  return s;
}

// Catalog of architectures for one experiment family. ClassIds are assigned
// in increasing parameter count, asserted at construction.
class ArchRegistry {
public:
  static ArchRegistry classification() {
    ArchRegistry r;
    r.specs_ = {make_arch_spec("LeNetLike", 0), make_arch_spec("VanillaCNN", 1),
                make_arch_spec("ResNet8", 2), make_arch_spec("ResNet32", 3)};
    for (size_t i = 1; i < r.specs_.size(); ++i)
      if (r.specs_[i].param_count <= r.specs_[i - 1].param_count)
        throw Error("registry: ClassId order must be increasing in param_count (" +
                    r.specs_[i - 1].name + " vs " + r.specs_[i].name + ")");
    return r;
  }

  static ArchRegistry sdf() {
    ArchRegistry r;
    r.specs_ = {make_arch_spec("SirenMLP", 0)};
    return r;
  }

  static ArchSpec teacher_spec() { return make_arch_spec("ResNet56-teacher", 100); }

  const std::vector<ArchSpec>& list() const { return specs_; }
  size_t size() const { return specs_.size(); }

  const ArchSpec& by_class_id(int id) const {
    for (const auto& s : specs_)
      if (s.class_id == id) return s;
    throw Error("registry: no architecture with ClassId " + std::to_string(id));
  }

  const ArchSpec& by_name(const std::string& n) const {
    for (const auto& s : specs_)
      if (s.name == n) return s;
    throw Error("registry: unknown architecture " + n);
  }

  bool has(const std::string& n) const {
    for (const auto& s : specs_)
      if (s.name == n) return true;
    return false;
  }

  int min_class_id() const { return specs_.front().class_id; }
  int max_class_id() const { return specs_.back().class_id; }

  uint64_t hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& s : specs_) {
      h = fnv1a(s.name, h);
      h = fnv1a(&s.class_id, sizeof(s.class_id), h);
      h = fnv1a(&s.param_count, sizeof(s.param_count), h);
    }
    return h;
  }

private:
  std::vector<ArchSpec> specs_;
};

// An architecture with concrete parameter values.
template <typename T>
struct NetworkInstance {
  ArchSpec arch;
  NamedTensors<T> params;
};

// Seeded random initialization following standard recipes per layer kind.
template <typename T>
NamedTensors<T> init_params(const std::string& arch_name, uint64_t seed) {
  Rng rng = make_rng(seed, 0x1717);
  NamedTensors<T> out;
  bool siren = (arch_name == "SirenMLP");
  for (const auto& d : tensor_defs(arch_name)) {
    Tensor<T> t(d.shape);
    switch (d.kind) {
      case TensorKind::Weight: {
        int64_t fan_in = 1;
        for (size_t i = 1; i < d.shape.size(); ++i) fan_in *= d.shape[i];
        if (siren) {
          // first layer U(-1/in, 1/in); later layers U(+-sqrt(6/in)/omega0)
          bool first = d.name.rfind("linear1", 0) == 0;
          double bound = first ? 1.0 / static_cast<double>(fan_in)
                               : std::sqrt(6.0 / static_cast<double>(fan_in)) / 30.0;
          std::uniform_real_distribution<double> u(-bound, bound);
          for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(u(rng));
        } else {
          std::normal_distribution<double> g(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
          for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(g(rng));
        }
        break;
      }
      case TensorKind::Bias: {
        t.fill(T(0));
        break;
      }
      case TensorKind::BnWeight:
      case TensorKind::BnRunningVar: {
        t.fill(T(1));
        break;
      }
      case TensorKind::BnBias:
      case TensorKind::BnRunningMean: {
        t.fill(T(0));
        break;
      }
    }
    out.add(d.name, std::move(t));
  }
  return out;
}

template <typename T>
void validate_params(const ArchSpec& spec, const NamedTensors<T>& params) {
  auto defs = tensor_defs(spec.name);
  if (params.size() != defs.size())
    throw Error(spec.name + ": expected " + std::to_string(defs.size()) + " tensors, got " +
                std::to_string(params.size()));
  for (const auto& d : defs) {
    if (!params.has(d.name)) throw Error(spec.name + ": missing tensor " + d.name);
    if (params[d.name].shape() != d.shape)
      throw Error(spec.name + ": shape mismatch for " + d.name);
  }
}

template <typename T>
NetworkInstance<T> instantiate(const ArchSpec& spec, std::optional<NamedTensors<T>> params,
                               uint64_t seed = 0) {
  NetworkInstance<T> inst;
  inst.arch = spec;
  if (params) {
    validate_params(spec, *params);
    inst.params = std::move(*params);
  } else {
    inst.params = init_params<T>(spec.name, seed);
  }
  return inst;
}

// How a forward pass reaches its parameters: either a bound store (zoo
// training, plain inference) or slices of a decoded flat PRep (gradients
// then flow into the decoder).
template <typename T>
class ParamAccess {
public:
  virtual ~ParamAccess() = default;
  virtual Var fetch(Tape<T>& tp, const std::string& name, const std::vector<int64_t>& shape) = 0;
  // Non-null only when running statistics may be updated in place (BN train mode).
  virtual Tensor<T>* mutable_stat(const std::string& name) { return nullptr; }
};

template <typename T>
class StoreParamAccess : public ParamAccess<T> {
public:
  StoreParamAccess(TapeBinding<T>& binding, bool allow_stat_updates)
      : binding_(binding), allow_stats_(allow_stat_updates) {}

  Var fetch(Tape<T>&, const std::string& name, const std::vector<int64_t>& shape) override {
    Var v = binding_.var(name);
    return v;
  }

  Tensor<T>* mutable_stat(const std::string& name) override {
    return allow_stats_ ? &binding_.store()[name] : nullptr;
  }

private:
  TapeBinding<T>& binding_;
  bool allow_stats_;
};

// Parameters drawn from a flat vector (decoded PRep prefix) by offset.
template <typename T>
class FlatParamAccess : public ParamAccess<T> {
public:
  FlatParamAccess(Var flat, const std::vector<TensorDef>& defs) : flat_(flat) {
    int64_t off = 0;
    for (const auto& d : defs) {
      offsets_[d.name] = {off, d.numel()};
      off += d.numel();
    }
  }

  Var fetch(Tape<T>& tp, const std::string& name, const std::vector<int64_t>& shape) override {
    auto it = offsets_.find(name);
    if (it == offsets_.end()) throw Error("flat params: unknown tensor " + name);
    Var s = tp.slice_flat(flat_, it->second.first, it->second.second);
    return tp.reshape(s, shape);
  }

private:
  Var flat_;
  std::unordered_map<std::string, std::pair<int64_t, int64_t>> offsets_;
};

namespace detail {

template <typename T>
Var conv_of(Tape<T>& tp, ParamAccess<T>& pa, const std::string& p, Var x, int64_t co, int64_t ci,
            int64_t k, bool bias, int64_t stride, int64_t pad) {
  Var w = pa.fetch(tp, p + ".weight", {co, ci, k, k});
  Var b{};
  if (bias) b = pa.fetch(tp, p + ".bias", {co});
  return conv2d(tp, x, w, b, stride, stride, pad, pad);
}

template <typename T>
Var bn_of(Tape<T>& tp, ParamAccess<T>& pa, const std::string& p, Var x, int64_t c, bool training) {
  Var gamma = pa.fetch(tp, p + ".weight", {c});
  Var beta = pa.fetch(tp, p + ".bias", {c});
  if (training) {
    Tensor<T>* rm = pa.mutable_stat(p + ".running_mean");
    Tensor<T>* rv = pa.mutable_stat(p + ".running_var");
    return batchnorm_train(tp, x, gamma, beta, rm, rv);
  }
  Var mean = pa.fetch(tp, p + ".running_mean", {c});
  Var var = pa.fetch(tp, p + ".running_var", {c});
  return batchnorm_eval(tp, x, gamma, beta, mean, var);
}

template <typename T>
Var fc_of(Tape<T>& tp, ParamAccess<T>& pa, const std::string& p, Var x, int64_t o, int64_t i) {
  Var w = pa.fetch(tp, p + ".weight", {o, i});
  Var b = pa.fetch(tp, p + ".bias", {o});
  return linear(tp, x, w, b);
}

template <typename T>
Var resnet_forward(Tape<T>& tp, const std::string& arch_name, Var x, ParamAccess<T>& pa,
                   bool training) {
  auto cfg = archdef::resnet_cfg(arch_name);
  Var h = detail::conv_of(tp, pa, "conv1", x, cfg.w1, 3, 3, false, 1, 1);
  h = detail::bn_of(tp, pa, "bn1", h, cfg.w1, training);
  h = relu(tp, h);
  int64_t widths[3] = {cfg.w1, cfg.w2, cfg.w3};
  int64_t in_c = cfg.w1;
  for (int stage = 0; stage < 3; ++stage) {
    int64_t w = widths[stage];
    for (int b = 0; b < cfg.n_blocks_per_stage; ++b) {
      std::string p = "layer" + std::to_string(stage + 1) + "." + std::to_string(b);
      bool down = (b == 0 && in_c != w);
      int64_t stride = down ? 2 : 1;
      Var identity = h;
      Var out = detail::conv_of(tp, pa, p + ".conv1", h, w, in_c, 3, false, stride, 1);
      out = detail::bn_of(tp, pa, p + ".bn1", out, w, training);
      out = relu(tp, out);
      out = detail::conv_of(tp, pa, p + ".conv2", out, w, w, 3, false, 1, 1);
      out = detail::bn_of(tp, pa, p + ".bn2", out, w, training);
      if (down) {
        Var dw = pa.fetch(tp, p + ".downsample.weight", {w, in_c, 1, 1});
        identity = conv2d(tp, h, dw, Var{}, stride, stride, 0, 0);
        identity = detail::bn_of(tp, pa, p + ".downsample.bn", identity, w, training);
      }
      h = relu(tp, tp.add(out, identity));
      in_c = w;
    }
  }
  // global average pool then classifier
  h = adaptive_avg_pool2d(tp, h, 1, 1);
  h = tp.reshape(h, {tp.val(h).dim(0), cfg.w3});
  return detail::fc_of(tp, pa, "fc", h, 10, cfg.w3);
}

}  // namespace detail

// Differentiable forward pass. Classification archs take [N,3,32,32] and
// return [N,10]; SirenMLP takes query points [N,3] and returns [N,1].
template <typename T>
Var arch_forward(Tape<T>& tp, const std::string& arch_name, Var x, ParamAccess<T>& pa,
                 bool training = false) {
  if (arch_name == "LeNetLike") {
    Var h = detail::conv_of(tp, pa, "conv1", x, 6, 3, 5, true, 1, 0);
    h = relu(tp, h);
    h = maxpool2d(tp, h, 2, 2);
    h = detail::conv_of(tp, pa, "conv2", h, 16, 6, 5, true, 1, 0);
    h = relu(tp, h);
    h = maxpool2d(tp, h, 2, 2);
    h = tp.reshape(h, {tp.val(h).dim(0), 16 * 5 * 5});
    h = detail::fc_of(tp, pa, "fc1", h, 48, 16 * 5 * 5);
    h = relu(tp, h);
    return detail::fc_of(tp, pa, "fc2", h, 10, 48);
  }
  if (arch_name == "VanillaCNN") {
    Var h = detail::conv_of(tp, pa, "conv1", x, 16, 3, 3, true, 1, 1);
    h = relu(tp, h);
    h = maxpool2d(tp, h, 2, 2);
    h = detail::conv_of(tp, pa, "conv2", h, 32, 16, 3, true, 1, 1);
    h = relu(tp, h);
    h = maxpool2d(tp, h, 2, 2);
    h = detail::conv_of(tp, pa, "conv3", h, 32, 32, 3, true, 1, 1);
    h = relu(tp, h);
    h = maxpool2d(tp, h, 2, 2);
    h = detail::conv_of(tp, pa, "conv4", h, 48, 32, 3, true, 1, 1);
    h = relu(tp, h);
    h = maxpool2d(tp, h, 2, 2);
    h = tp.reshape(h, {tp.val(h).dim(0), 48 * 2 * 2});
    return detail::fc_of(tp, pa, "fc", h, 10, 48 * 2 * 2);
  }
  if (arch_name == "ResNet8" || arch_name == "ResNet32" || arch_name == "ResNet56-teacher")
    return detail::resnet_forward(tp, arch_name, x, pa, training);
  if (arch_name == "SirenMLP") {
    Var h = detail::fc_of(tp, pa, "linear1", x, 256, 3);
    h = sin_act(tp, h, T(30));
    return detail::fc_of(tp, pa, "linear2", h, 1, 256);
  }
  throw Error("unknown architecture: " + arch_name);
}

// Inference-mode logits; repeated calls on the same batch are identical.
template <typename T>
Tensor<T> forward_logits(const NetworkInstance<T>& inst, const Tensor<T>& batch) {
  std::vector<int64_t> expect = inst.arch.input_shape;
  if (batch.rank() != expect.size() + 1)
    throw Error("forward_logits: batch rank mismatch for " + inst.arch.name);
  for (size_t i = 0; i < expect.size(); ++i)
    if (batch.dim(i + 1) != expect[i])
      throw Error("forward_logits: batch shape mismatch for " + inst.arch.name + ", got " +
                  batch.shape_str());
  Tape<T> tp;
  // Constants only: no backward graph is recorded.
  auto& params = const_cast<NamedTensors<T>&>(inst.params);
  TapeBinding<T> binding(tp, params, /*trainable=*/false);
  StoreParamAccess<T> pa(binding, /*allow_stat_updates=*/false);
  Var x = tp.constant(batch);
  Var logits = arch_forward(tp, inst.arch.name, x, pa, /*training=*/false);
  return tp.val(logits);
}

// Top-1 accuracy of an instance over a labelled batch set.
template <typename T>
double evaluate_accuracy(const NetworkInstance<T>& inst, const Tensor<T>& images,
                         const std::vector<int>& labels, int64_t batch_size = 256) {
  int64_t n = images.dim(0);
  if (n == 0) throw Error("evaluate_accuracy: empty evaluation set");
  int64_t correct = 0;
  std::vector<int64_t> sub_shape(images.shape().begin() + 1, images.shape().end());
  int64_t stride = 1;
  for (auto d : sub_shape) stride *= d;
  for (int64_t start = 0; start < n; start += batch_size) {
    int64_t m = std::min(batch_size, n - start);
    std::vector<int64_t> bshape = {m};
    bshape.insert(bshape.end(), sub_shape.begin(), sub_shape.end());
    Tensor<T> batch(bshape);
    std::copy(images.data() + start * stride, images.data() + (start + m) * stride, batch.data());
    Tensor<T> logits = forward_logits(inst, batch);
    for (int64_t i = 0; i < m; ++i) {
      int64_t best = 0;
      for (int64_t c = 1; c < logits.dim(1); ++c)
        if (logits.at2(i, c) > logits.at2(i, best)) best = c;
      if (best == labels[static_cast<size_t>(start + i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace wsl
