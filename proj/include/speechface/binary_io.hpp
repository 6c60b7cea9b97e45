// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "speechface/errors.hpp"

namespace speechface::io {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write to '" + path.string() + "' failed");
}

/// Little-endian serializer.
class Writer {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v), 4); }

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  void save(const std::filesystem::path& path) const { write_file(path, buf_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

/// Little-endian deserializer; every read names the field it is decoding so
/// truncation errors point at the right place.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }

  std::string bytes(std::size_t n, const std::string& field) {
    need(n, field);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const std::string& field) { return static_cast<std::uint8_t>(get(1, field)); }
  std::uint16_t u16(const std::string& field) { return static_cast<std::uint16_t>(get(2, field)); }
  std::uint32_t u32(const std::string& field) { return static_cast<std::uint32_t>(get(4, field)); }
  float f32(const std::string& field) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(get(4, field)));
  }

  void f32_array(std::span<float> out, const std::string& field) {
    need(out.size() * 4, field);
    for (auto& v : out) v = std::bit_cast<float>(static_cast<std::uint32_t>(get(4, field)));
  }

 private:
  void need(std::size_t n, const std::string& field) const {
    if (remaining() < n) {
      throw LoadError(field, "truncated at byte offset " + std::to_string(pos_) + " (need " +
                                 std::to_string(n) + " bytes, " + std::to_string(remaining()) +
                                 " left)");
    }
  }
  std::uint64_t get(int n, const std::string& field) {
    need(static_cast<std::size_t>(n), field);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace speechface::io
