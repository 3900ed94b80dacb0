#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "wsl/arch.hpp"

namespace wsl {

struct LayoutEntry {
  std::string tensor_name;
  std::vector<int64_t> tensor_shape;
  int64_t flat_offset = 0;
  int64_t flat_length = 0;
};

// Deterministic mapping from an architecture's tensors to positions in the
// 2-D parameter matrix. Row width is the smallest power of two not below
// sqrt(total), which keeps the matrix near square.
struct ParamLayout {
  std::string arch_name;
  std::vector<LayoutEntry> entries;
  int64_t total_params = 0;
  int64_t row_width = 0;   // W
  int64_t row_count = 0;   // H

  int64_t cells() const { return row_width * row_count; }

  uint64_t hash() const {
    uint64_t h = fnv1a(arch_name);
    for (const auto& e : entries) {
      h = fnv1a(e.tensor_name, h);
      h = fnv1a(e.tensor_shape.data(), e.tensor_shape.size() * sizeof(int64_t), h);
      h = fnv1a(&e.flat_offset, sizeof(e.flat_offset), h);
      h = fnv1a(&e.flat_length, sizeof(e.flat_length), h);
    }
    h = fnv1a(&row_width, sizeof(row_width), h);
    h = fnv1a(&row_count, sizeof(row_count), h);
    return h;
  }
};

// 2-D matrix of unrolled parameters, zero padded. Always 32-bit storage.
struct PRep {
  Tensor<float> values;  // [H, W]
  std::string arch_name;
  uint64_t layout_hash = 0;
};

inline int64_t smallest_pow2_at_least(double x) {
  int64_t w = 1;
  while (static_cast<double>(w) < x) w <<= 1;
  return w;
}

inline ParamLayout build_layout(const std::string& arch_name, const std::vector<TensorDef>& defs) {
  ParamLayout l;
  l.arch_name = arch_name;
  int64_t off = 0;
  for (const auto& d : defs) {
    LayoutEntry e;
    e.tensor_name = d.name;
    e.tensor_shape = d.shape;
    e.flat_offset = off;
    e.flat_length = d.numel();
    off += e.flat_length;
    l.entries.push_back(std::move(e));
  }
  l.total_params = off;
  if (off <= 0) throw Error("build_layout: architecture has no parameters");
  l.row_width = smallest_pow2_at_least(std::sqrt(static_cast<double>(off)));
  l.row_count = (off + l.row_width - 1) / l.row_width;
  return l;
}

inline ParamLayout build_layout(const ArchSpec& spec) {
  return build_layout(spec.name, tensor_defs(spec.name));
}

// Unrolls named tensors into the 2-D matrix; trailing cells are zero.
// Values beyond 32-bit precision are truncated here.
template <typename T>
PRep flatten(const NamedTensors<T>& params, const ParamLayout& layout) {
  if (params.size() != layout.entries.size()) {
    // find the offender for the error message
    for (const auto& e : layout.entries)
      if (!params.has(e.tensor_name))
        throw Error("flatten: missing tensor " + e.tensor_name);
    for (const auto& [name, t] : params) {
      bool known = false;
      for (const auto& e : layout.entries)
        if (e.tensor_name == name) known = true;
      if (!known) throw Error("flatten: extra tensor " + name);
    }
    throw Error("flatten: tensor count mismatch");
  }
  PRep p;
  p.arch_name = layout.arch_name;
  p.layout_hash = layout.hash();
  p.values = Tensor<float>({layout.row_count, layout.row_width});
  for (const auto& e : layout.entries) {
    if (!params.has(e.tensor_name)) throw Error("flatten: missing tensor " + e.tensor_name);
    const Tensor<T>& t = params[e.tensor_name];
    if (t.shape() != e.tensor_shape)
      throw Error("flatten: shape mismatch for " + e.tensor_name + ", got " + t.shape_str());
    float* dst = p.values.data() + e.flat_offset;
    for (int64_t i = 0; i < e.flat_length; ++i) dst[i] = static_cast<float>(t[i]);
  }
  return p;
}

// Rebuilds tensors from the row-major prefix. Accepts the exact layout
// shape or any larger matrix (multi-architecture decoding); padding and
// surplus cells are ignored.
template <typename T = float>
NamedTensors<T> load(const Tensor<float>& prep_values, const ParamLayout& layout) {
  if (prep_values.numel() < layout.total_params)
    throw Error("load: prep has " + std::to_string(prep_values.numel()) + " cells, layout needs " +
                std::to_string(layout.total_params));
  NamedTensors<T> out;
  for (const auto& e : layout.entries) {
    Tensor<T> t(e.tensor_shape);
    const float* src = prep_values.data() + e.flat_offset;
    for (int64_t i = 0; i < e.flat_length; ++i) t[i] = static_cast<T>(src[i]);
    out.add(e.tensor_name, std::move(t));
  }
  return out;
}

inline NamedTensors<float> load(const PRep& prep, const ParamLayout& layout) {
  if (prep.arch_name != layout.arch_name)
    throw Error("load: prep belongs to " + prep.arch_name + ", layout is " + layout.arch_name);
  return load<float>(prep.values, layout);
}

// ---- binary instance file format ----
// magic "WSLPREP1" | u32 LE header length | JSON header | H*W f32 LE row-major

constexpr char kPrepMagic[9] = "WSLPREP1";

inline void save_prep(const std::filesystem::path& path, const PRep& prep) {
  std::ostringstream body;
  body.write(kPrepMagic, 8);
  nlohmann::json hdr = {{"arch_name", prep.arch_name},
                        {"layout_hash", hash_hex(prep.layout_hash)},
                        {"H", prep.values.dim(0)},
                        {"W", prep.values.dim(1)},
                        {"dtype", "f32"}};
  std::string hs = hdr.dump();
  write_u32_le(body, static_cast<uint32_t>(hs.size()));
  body.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  write_f32_le(body, prep.values.data(), static_cast<size_t>(prep.values.numel()));
  write_file_atomic(path, body.str());
}

inline PRep load_prep(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open prep file: " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kPrepMagic, 8) != 0)
    throw Error("bad magic in prep file: " + path.string());
  uint32_t hlen = read_u32_le(f);
  std::string hs(hlen, '\0');
  f.read(hs.data(), hlen);
  if (!f) throw Error("truncated header in " + path.string());
  nlohmann::json hdr = nlohmann::json::parse(hs);
  if (hdr.at("dtype").get<std::string>() != "f32")
    throw Error("unsupported dtype in " + path.string());
  PRep p;
  p.arch_name = hdr.at("arch_name").get<std::string>();
  p.layout_hash = std::stoull(hdr.at("layout_hash").get<std::string>(), nullptr, 16);
  int64_t H = hdr.at("H").get<int64_t>();
  int64_t W = hdr.at("W").get<int64_t>();
  p.values = Tensor<float>({H, W});
  read_f32_le(f, p.values.data(), static_cast<size_t>(H * W));
  return p;
}

inline void save_instance(const std::filesystem::path& path, const NetworkInstance<float>& inst) {
  save_prep(path, flatten(inst.params, build_layout(inst.arch)));
}

inline NetworkInstance<float> load_instance(const std::filesystem::path& path,
                                            const ArchSpec& spec) {
  PRep p = load_prep(path);
  if (p.arch_name != spec.name)
    throw Error("instance file " + path.string() + " holds " + p.arch_name + ", expected " +
                spec.name);
  ParamLayout layout = build_layout(spec);
  if (p.layout_hash != layout.hash())
    throw Error("layout hash mismatch for " + path.string() +
                " (file written with a different layout)");
  NetworkInstance<float> inst;
  inst.arch = spec;
  inst.params = load(p, layout);
  return inst;
}

}  // namespace wsl
