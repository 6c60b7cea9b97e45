// SPDX-License-Identifier: Apache-2.0
/**
 * @file   param_csv.hpp
 * @brief  Per-frame face parameter CSV: "frame,r1,r2,r3,e01,...,e46",
 *         six decimal places, strictly increasing frame indices.
 */
#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "speechface/errors.hpp"
#include "speechface/face3d.hpp"

namespace speechface::csv {

inline std::string header() {
  std::string h = "frame,r1,r2,r3";
  char buf[8];
  for (std::size_t i = 1; i <= face3d::kExpressionCount; ++i) {
    std::snprintf(buf, sizeof buf, ",e%02zu", i);
    h += buf;
  }
  return h;
}

inline std::string format_params(std::span<const face3d::FaceFrame> frames) {
  std::string out = header() + "\n";
  char buf[32];
  for (const auto& f : frames) {
    out += std::to_string(f.frame_index);
    for (std::size_t k = 0; k < face3d::kParamCount; ++k) {
      std::snprintf(buf, sizeof buf, ",%.6f", f.param(k));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

namespace detail {

inline double parse_real(std::string_view cell, std::size_t line) {
  while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
  while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r')) cell.remove_suffix(1);
  double v = 0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty() || !std::isfinite(v)) {
    throw ParseError("line " + std::to_string(line) + ": '" + std::string(cell) + "' is not a number", line);
  }
  return v;
}

}  // namespace detail

/// Parses ParamCSV text. Errors name the 1-based line.
inline std::vector<face3d::FaceFrame> parse_params(std::string_view text) {
  std::vector<face3d::FaceFrame> frames;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool saw_header = false;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    if (!saw_header) {
      if (line != header()) throw ParseError("line 1: unexpected header", line_no);
      saw_header = true;
      continue;
    }
    std::vector<std::string_view> cells;
    std::size_t c = 0;
    while (true) {
      const std::size_t comma = line.find(',', c);
      cells.push_back(line.substr(c, comma == std::string_view::npos ? std::string_view::npos : comma - c));
      if (comma == std::string_view::npos) break;
      c = comma + 1;
    }
    if (cells.size() != face3d::kParamCount + 1) {
      throw ParseError("line " + std::to_string(line_no) + ": expected 50 columns, got " +
                           std::to_string(cells.size()),
                       line_no);
    }
    face3d::FaceFrame f;
    const double idx = detail::parse_real(cells[0], line_no);
    if (idx < 0 || idx != std::floor(idx)) {
      throw ParseError("line " + std::to_string(line_no) + ": frame index must be a non-negative integer", line_no);
    }
    f.frame_index = static_cast<std::int64_t>(idx);
    if (!frames.empty() && f.frame_index <= frames.back().frame_index) {
      throw ParseError("line " + std::to_string(line_no) + ": frame indices must be strictly increasing", line_no);
    }
    for (std::size_t k = 0; k < face3d::kParamCount; ++k) f.set_param(k, detail::parse_real(cells[k + 1], line_no));
    frames.push_back(f);
  }
  if (!saw_header) throw ParseError("empty parameter file", 0);
  return frames;
}

/// Range check with the 1-based data row in the message: rotation in
/// [-1,1], expression weights in [0,1].
inline void check_ranges(std::span<const face3d::FaceFrame> frames) {
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto& f = frames[i];
    for (std::size_t k = 0; k < face3d::kRotationParams; ++k) {
      if (f.r[k] < -1.0 || f.r[k] > 1.0) {
        throw InvalidInput("row " + std::to_string(i + 1) + ": r" + std::to_string(k + 1) + " = " +
                           std::to_string(f.r[k]) + " outside [-1,1]");
      }
    }
    for (std::size_t k = 0; k < face3d::kExpressionCount; ++k) {
      if (f.e[k] < 0.0 || f.e[k] > 1.0) {
        char name[8];
        std::snprintf(name, sizeof name, "e%02zu", k + 1);
        throw InvalidInput("row " + std::to_string(i + 1) + ": " + name + " = " + std::to_string(f.e[k]) +
                           " outside [0,1]");
      }
    }
  }
}

inline std::vector<face3d::FaceFrame> load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_params(ss.str());
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

inline void save_params(const std::filesystem::path& path, std::span<const face3d::FaceFrame> frames) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << format_params(frames);
}

}  // namespace speechface::csv
