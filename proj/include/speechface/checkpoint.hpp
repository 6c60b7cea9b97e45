// SPDX-License-Identifier: Apache-2.0
/**
 * @file   checkpoint.hpp
 * @brief  Model persistence.
 *
 * Layout (little-endian):
 *   "SFCK" | version u32 | variant u8 | 128 f32 band means | 128 f32 band stds
 *   | tensor count u32 | per tensor: name length u16, UTF-8 name, rank u8,
 *   rank x u32 dims, f32 values
 *
 * Tensors include the batch norm running statistics. Layer widths are
 * recovered from the stored dims.
 */
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "speechface/audio.hpp"
#include "speechface/binary_io.hpp"
#include "speechface/errors.hpp"
#include "speechface/net.hpp"

namespace speechface::net {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(Model<T>& model) {
  io::Writer w;
  w.bytes("SFCK");
  w.u32(kCheckpointVersion);
  w.u8(static_cast<std::uint8_t>(model.variant));
  for (float v : model.norm_stats.mean) w.f32(v);
  for (float v : model.norm_stats.std) w.f32(v);
  const auto slots = model.tensors();
  w.u32(static_cast<std::uint32_t>(slots.size()));
  for (const auto& s : slots) {
    w.u16(static_cast<std::uint16_t>(s.name.size()));
    w.bytes(s.name);
    w.u8(static_cast<std::uint8_t>(s.dims.size()));
    for (auto d : s.dims) w.u32(static_cast<std::uint32_t>(d));
    for (T v : s.data) w.f32(static_cast<float>(v));
  }
  return w.buffer();
}

template <typename T>
void save_checkpoint(Model<T>& model, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(model));
}

namespace detail {

struct StoredTensor {
  Dims dims;
  std::vector<float> values;
};

inline std::size_t stored_dim(const std::map<std::string, StoredTensor>& t, const std::string& name,
                              std::size_t axis) {
  auto it = t.find(name);
  if (it == t.end()) throw LoadError(name, "missing tensor");
  if (axis >= it->second.dims.size()) throw LoadError(name, "unexpected rank");
  return it->second.dims[axis];
}

}  // namespace detail

template <typename T = float>
std::unique_ptr<Model<T>> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes);
  if (r.bytes(4, "magic") != "SFCK") throw LoadError("magic", "not a checkpoint file");
  if (const auto v = r.u32("version"); v != kCheckpointVersion) {
    throw LoadError("version", "unsupported checkpoint version " + std::to_string(v));
  }
  const auto tag = r.u8("variant");
  if (tag > static_cast<std::uint8_t>(Variant::cnn_gru)) {
    throw LoadError("variant", "unknown variant tag " + std::to_string(tag));
  }
  const auto variant = static_cast<Variant>(tag);
  audio::NormStats stats;
  r.f32_array(stats.mean, "norm_stats.mean");
  r.f32_array(stats.std, "norm_stats.std");
  if (!stats.valid()) throw LoadError("norm_stats.std", "non-positive standard deviation");

  const std::uint32_t count = r.u32("tensor_count");
  std::map<std::string, detail::StoredTensor> stored;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16("tensor_name_length");
    const std::string name = r.bytes(len, "tensor_name");
    detail::StoredTensor t;
    const std::uint8_t rank = r.u8(name + ".rank");
    for (std::uint8_t k = 0; k < rank; ++k) t.dims.push_back(r.u32(name + ".dims"));
    t.values.resize(dims_product(t.dims));
    r.f32_array(t.values, name);
    if (!stored.emplace(name, std::move(t)).second) throw LoadError(name, "duplicate tensor");
  }
  if (!r.at_end()) throw LoadError("tensor_count", "trailing bytes after last tensor");

  Architecture arch;
  for (std::size_t i = 0; i < kConvCount; ++i)
    arch.conv_channels[i] = detail::stored_dim(stored, std::string(kConvStages[i].name) + ".weight", 0);
  arch.dense1 = detail::stored_dim(stored, "dense1.weight", 0);
  if (is_recurrent(variant)) arch.recurrent = detail::stored_dim(stored, "rnn.weight_hh", 1);
  arch.dense2 = detail::stored_dim(stored, "dense2.weight", 0);

  auto model = std::make_unique<Model<T>>(variant, arch);
  model->norm_stats = stats;
  const auto slots = model->tensors();
  for (const auto& s : slots) {
    auto it = stored.find(s.name);
    if (it == stored.end()) throw LoadError(s.name, "missing tensor");
    if (it->second.dims != s.dims) {
      throw LoadError(s.name, "dims " + dims_string(it->second.dims) + " do not match expected " +
                                  dims_string(s.dims));
    }
    std::copy(it->second.values.begin(), it->second.values.end(), s.data.begin());
    stored.erase(it);
  }
  if (!stored.empty()) throw LoadError(stored.begin()->first, "unexpected tensor for this variant");
  return model;
}

template <typename T = float>
std::unique_ptr<Model<T>> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(io::read_file(path));
}

}  // namespace speechface::net
