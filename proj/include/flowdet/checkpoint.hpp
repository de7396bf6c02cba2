#pragma once

#include <map>

#include "flowdet/config.hpp"
#include "flowdet/optim.hpp"

namespace flowdet {

// Checkpoint layout: 7-byte magic "FDCKPT1", u32 config-text length, the
// structured-text ModelConfig, u32 tensor count, then named tensors
// (u32 name length, name bytes, flat tensor dump). The training step and
// AdamW moments ride along as extra named tensors under train.* / opt.*.

inline constexpr char kCheckpointMagic[7] = {'F', 'D', 'C', 'K', 'P', 'T', '1'};

template <typename T>
inline void save_checkpoint(const std::string& path, Model<T>& model, const AdamWState<T>& state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_checkpoint: cannot open " + path);
  os.write(kCheckpointMagic, 7);
  const std::string cfg_text = config_to_text(model.cfg);
  const uint32_t cfg_len = uint32_t(cfg_text.size());
  os.write(reinterpret_cast<const char*>(&cfg_len), 4);
  os.write(cfg_text.data(), std::streamsize(cfg_text.size()));

  auto params = model.named_params();
  std::vector<std::pair<std::string, Tensor<T>>> entries;
  for (auto& [name, t] : params) entries.emplace_back(name, *t);
  entries.emplace_back("train.step", Tensor<T>::scalar(T(state.step)));
  if (!state.m.empty()) {
    for (size_t k = 0; k < params.size(); ++k) {
      entries.emplace_back("opt.m." + params[k].first,
                           Tensor<T>::from(state.m[k], params[k].second->shape()));
      entries.emplace_back("opt.v." + params[k].first,
                           Tensor<T>::from(state.v[k], params[k].second->shape()));
    }
  }
  const uint32_t count = uint32_t(entries.size());
  os.write(reinterpret_cast<const char*>(&count), 4);
  for (auto& [name, tensor] : entries) {
    const uint32_t len = uint32_t(name.size());
    os.write(reinterpret_cast<const char*>(&len), 4);
    os.write(name.data(), std::streamsize(name.size()));
    save_tensor(os, tensor);
  }
  if (!os) throw IoError("save_checkpoint: write failed for " + path);
}

template <typename T>
struct Checkpoint {
  ModelConfig cfg;
  std::map<std::string, Tensor<T>> tensors;
  int64_t step = 0;
};

template <typename T>
inline Checkpoint<T> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("read_checkpoint: cannot open " + path);
  char magic[7];
  if (!is.read(magic, 7) || std::memcmp(magic, kCheckpointMagic, 7) != 0)
    throw IoError("read_checkpoint: bad magic in " + path);
  uint32_t cfg_len = 0;
  is.read(reinterpret_cast<char*>(&cfg_len), 4);
  std::string cfg_text(cfg_len, '\0');
  is.read(cfg_text.data(), cfg_len);
  if (!is) throw IoError("read_checkpoint: truncated header in " + path);
  Checkpoint<T> ck;
  ck.cfg = config_from_text(cfg_text);
  uint32_t count = 0;
  is.read(reinterpret_cast<char*>(&count), 4);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t len = 0;
    is.read(reinterpret_cast<char*>(&len), 4);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw IoError("read_checkpoint: truncated tensor table in " + path);
    ck.tensors.emplace(name, load_tensor<T>(is));
  }
  auto it = ck.tensors.find("train.step");
  if (it != ck.tensors.end()) ck.step = int64_t(it->second.item());
  return ck;
}

// Restore weights (and optimizer state when present) into a freshly built
// model. The checkpoint's config must match the requested one exactly.
template <typename T>
inline int64_t load_checkpoint(const std::string& path, Model<T>& model, AdamWState<T>& state) {
  Checkpoint<T> ck = read_checkpoint<T>(path);
  if (config_arch_text(ck.cfg) != config_arch_text(model.cfg))
    throw ConfigError("load_checkpoint: checkpoint config does not match the active config");
  auto params = model.named_params();
  for (auto& [name, t] : params) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end())
      throw IoError("load_checkpoint: parameter '" + name + "' missing from " + path);
    if (it->second.shape() != t->shape())
      throw IoError("load_checkpoint: parameter '" + name + "' has shape " +
                    shape_str(it->second.shape()) + ", expected " + shape_str(t->shape()));
    std::copy(it->second.data().begin(), it->second.data().end(), t->mutable_data().begin());
  }
  if (ck.tensors.count("opt.m." + params[0].first)) {
    state.m.clear();
    state.v.clear();
    for (auto& [name, t] : params) {
      const auto& m = ck.tensors.at("opt.m." + name);
      const auto& v = ck.tensors.at("opt.v." + name);
      state.m.emplace_back(m.data().begin(), m.data().end());
      state.v.emplace_back(v.data().begin(), v.data().end());
    }
  }
  state.step = ck.step;
  return ck.step;
}

}  // namespace flowdet
