// SPDX-License-Identifier: Apache-2.0
/**
 * @file   face3d.hpp
 * @brief  Blendshape face model: S = R(B0 + sum_i (Bi - B0) e_i).
 *
 * Rotation is carried as the vector part of a unit quaternion (three free
 * parameters). Rig coordinates are millimetres, so landmark errors come out
 * in millimetres.
 */
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "speechface/binary_io.hpp"
#include "speechface/errors.hpp"
#include "speechface/random.hpp"

namespace speechface::face3d {

inline constexpr std::size_t kRotationParams = 3;
inline constexpr std::size_t kExpressionCount = 46;
inline constexpr std::size_t kParamCount = kRotationParams + kExpressionCount;  // 49

/// One video frame of face parameters, ordered (r1, r2, r3, e1..e46).
struct FaceFrame {
  std::int64_t frame_index = 0;
  std::array<double, kRotationParams> r{};
  std::array<double, kExpressionCount> e{};

  double param(std::size_t i) const { return i < kRotationParams ? r[i] : e[i - kRotationParams]; }
  void set_param(std::size_t i, double v) {
    if (i < kRotationParams) r[i] = v; else e[i - kRotationParams] = v;
  }
};

using Vec3 = std::array<double, 3>;

struct Quaternion {
  double w = 1, x = 0, y = 0, z = 0;

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

  Vec3 rotate(const Vec3& v) const {
    // v' = v + 2w (u x v) + 2 u x (u x v)
    const Vec3 u{x, y, z};
    const Vec3 uv{u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]};
    const Vec3 uuv{u[1] * uv[2] - u[2] * uv[1], u[2] * uv[0] - u[0] * uv[2], u[0] * uv[1] - u[1] * uv[0]};
    return {v[0] + 2 * (w * uv[0] + uuv[0]), v[1] + 2 * (w * uv[1] + uuv[1]),
            v[2] + 2 * (w * uv[2] + uuv[2])};
  }
};

/// r is the vector part; vectors longer than 1 are clamped radially and the
/// scalar part is recovered non-negative.
inline Quaternion quaternion_from_free_params(const std::array<double, 3>& r) {
  double x = r[0], y = r[1], z = r[2];
  const double n2 = x * x + y * y + z * z;
  if (n2 > 1.0) {
    const double n = std::sqrt(n2);
    x /= n;
    y /= n;
    z /= n;
  }
  const double w = std::sqrt(std::max(0.0, 1.0 - (x * x + y * y + z * z)));
  return {w, x, y, z};
}

// ---------------------------------------------------------------------------
// rig

struct BlendshapeRig {
  std::uint32_t vertex_count = 0;
  /// B0..B46, each vertex_count * 3 floats (x, y, z interleaved).
  std::vector<std::vector<float>> shapes;
  std::vector<std::uint32_t> landmarks;
  /// Optional triangle list (0-based vertex indices) used for OBJ export.
  std::vector<std::array<std::uint32_t, 3>> faces;

  Vec3 vertex(std::size_t shape, std::size_t v) const {
    const auto& s = shapes[shape];
    return {s[3 * v], s[3 * v + 1], s[3 * v + 2]};
  }

  void validate() const {
    if (shapes.size() != kExpressionCount + 1) {
      throw InvalidInput("rig must hold 47 shapes, got " + std::to_string(shapes.size()));
    }
    for (const auto& s : shapes) {
      if (s.size() != static_cast<std::size_t>(vertex_count) * 3) {
        throw InvalidInput("rig shapes have inconsistent vertex counts");
      }
    }
    std::set<std::uint32_t> seen;
    for (auto l : landmarks) {
      if (l >= vertex_count) throw InvalidInput("landmark index " + std::to_string(l) + " out of range");
      if (!seen.insert(l).second) throw InvalidInput("duplicate landmark index " + std::to_string(l));
    }
    for (const auto& f : faces)
      for (auto v : f)
        if (v >= vertex_count) throw InvalidInput("face references vertex " + std::to_string(v));
  }
};

namespace detail {
inline void check_frame(const BlendshapeRig& rig, const FaceFrame& frame) {
  if (rig.shapes.size() != kExpressionCount + 1) {
    throw ShapeError("rig has " + std::to_string(rig.shapes.size()) + " shapes, frame expects 47");
  }
  for (double e : frame.e) {
    if (!(e >= 0.0 && e <= 1.0)) {
      throw InvalidInput("expression weight " + std::to_string(e) + " outside [0,1] in frame " +
                         std::to_string(frame.frame_index));
    }
  }
}

inline Vec3 compose_vertex(const BlendshapeRig& rig, const FaceFrame& frame, const Quaternion& q,
                           std::size_t v) {
  const Vec3 b0 = rig.vertex(0, v);
  Vec3 p = b0;
  for (std::size_t i = 0; i < kExpressionCount; ++i) {
    const double w = frame.e[i];
    if (w == 0.0) continue;
    const Vec3 bi = rig.vertex(i + 1, v);
    for (int k = 0; k < 3; ++k) p[k] += (bi[k] - b0[k]) * w;
  }
  return q.rotate(p);
}
}  // namespace detail

/// Fully transformed shape: vertex_count entries of (x, y, z).
inline std::vector<Vec3> compose_shape(const BlendshapeRig& rig, const FaceFrame& frame) {
  detail::check_frame(rig, frame);
  const auto q = quaternion_from_free_params(frame.r);
  std::vector<Vec3> out(rig.vertex_count);
  for (std::size_t v = 0; v < rig.vertex_count; ++v) out[v] = detail::compose_vertex(rig, frame, q, v);
  return out;
}

inline std::vector<Vec3> compose_landmarks(const BlendshapeRig& rig, const FaceFrame& frame) {
  detail::check_frame(rig, frame);
  const auto q = quaternion_from_free_params(frame.r);
  std::vector<Vec3> out;
  out.reserve(rig.landmarks.size());
  for (auto l : rig.landmarks) out.push_back(detail::compose_vertex(rig, frame, q, l));
  return out;
}

// ---------------------------------------------------------------------------
// metrics

/// Sum of squared landmark distances and the number of (frame, landmark)
/// terms, so callers can pool over arbitrary groupings.
struct SquaredErrorSum {
  double sum = 0;
  std::size_t count = 0;

  SquaredErrorSum& operator+=(const SquaredErrorSum& o) {
    sum += o.sum;
    count += o.count;
    return *this;
  }
};

inline SquaredErrorSum landmark_squared_error(const BlendshapeRig& rig, const FaceFrame& pred,
                                              const FaceFrame& truth) {
  const auto a = compose_landmarks(rig, pred);
  const auto b = compose_landmarks(rig, truth);
  SquaredErrorSum s;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double dx = a[i][0] - b[i][0], dy = a[i][1] - b[i][1], dz = a[i][2] - b[i][2];
    s.sum += dx * dx + dy * dy + dz * dz;
  }
  s.count = a.size();
  return s;
}

inline SquaredErrorSum weights_squared_error(const FaceFrame& pred, const FaceFrame& truth) {
  SquaredErrorSum s;
  for (std::size_t i = 0; i < kExpressionCount; ++i) {
    const double d = pred.e[i] - truth.e[i];
    s.sum += d * d;
  }
  s.count = kExpressionCount;
  return s;
}

namespace detail {
inline void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw InvalidInput(std::string(what) + ": sequence lengths differ (" + std::to_string(a) +
                       " predicted vs " + std::to_string(b) + " ground truth)");
  }
  if (a == 0) throw InvalidInput(std::string(what) + ": empty sequence");
}
}  // namespace detail

/// Root mean square of Euclidean landmark distances over all frames and
/// landmarks, in rig units (mm).
inline double landmark_rmse(std::span<const FaceFrame> pred, std::span<const FaceFrame> truth,
                            const BlendshapeRig& rig) {
  detail::check_lengths(pred.size(), truth.size(), "landmark_rmse");
  if (rig.landmarks.empty()) throw InvalidInput("landmark_rmse: rig has no landmarks");
  SquaredErrorSum total;
  for (std::size_t i = 0; i < pred.size(); ++i) total += landmark_squared_error(rig, pred[i], truth[i]);
  return std::sqrt(total.sum / static_cast<double>(total.count));
}

/// Mean over frames and the 46 components of squared weight differences.
inline double weights_mse(std::span<const FaceFrame> pred, std::span<const FaceFrame> truth) {
  detail::check_lengths(pred.size(), truth.size(), "weights_mse");
  SquaredErrorSum total;
  for (std::size_t i = 0; i < pred.size(); ++i) total += weights_squared_error(pred[i], truth[i]);
  return total.sum / static_cast<double>(total.count);
}

// ---------------------------------------------------------------------------
// synthetic rig

inline constexpr std::size_t kToyRings = 18;
inline constexpr std::size_t kToySegments = 26;
inline constexpr std::size_t kToyLandmarks = 20;

/**
 * Deterministic stand-in for a personalized blendshape set: a 468-vertex
 * ellipsoid head (18 rings x 26 segments, face towards +z) with 46 smooth,
 * localized displacement shapes and 20 landmarks on the front of the face.
 */
inline BlendshapeRig make_toy_rig(std::uint64_t seed) {
  constexpr double ax = 75.0, ay = 100.0, az = 90.0;  // semi-axes, mm
  Rng rng(seed);
  BlendshapeRig rig;
  rig.vertex_count = static_cast<std::uint32_t>(kToyRings * kToySegments);

  std::vector<float> neutral(rig.vertex_count * 3);
  std::vector<Vec3> normals(rig.vertex_count);
  for (std::size_t i = 0; i < kToyRings; ++i) {
    const double polar = std::numbers::pi * (static_cast<double>(i) + 0.5) / kToyRings;
    for (std::size_t j = 0; j < kToySegments; ++j) {
      const double az_angle = 2.0 * std::numbers::pi * static_cast<double>(j) / kToySegments;
      const std::size_t v = i * kToySegments + j;
      // y up, z towards the viewer
      const Vec3 n{std::sin(polar) * std::sin(az_angle), std::cos(polar),
                   std::sin(polar) * std::cos(az_angle)};
      normals[v] = n;
      neutral[3 * v] = static_cast<float>(ax * n[0]);
      neutral[3 * v + 1] = static_cast<float>(ay * n[1]);
      neutral[3 * v + 2] = static_cast<float>(az * n[2]);
    }
  }
  for (std::size_t i = 0; i + 1 < kToyRings; ++i) {
    for (std::size_t j = 0; j < kToySegments; ++j) {
      const auto a = static_cast<std::uint32_t>(i * kToySegments + j);
      const auto b = static_cast<std::uint32_t>(i * kToySegments + (j + 1) % kToySegments);
      const auto c = static_cast<std::uint32_t>((i + 1) * kToySegments + j);
      const auto d = static_cast<std::uint32_t>((i + 1) * kToySegments + (j + 1) % kToySegments);
      rig.faces.push_back({a, c, b});
      rig.faces.push_back({b, c, d});
    }
  }

  // Front-facing vertices (z > 0.5 radius) host expressions and landmarks.
  std::vector<std::uint32_t> front;
  for (std::uint32_t v = 0; v < rig.vertex_count; ++v)
    if (normals[v][2] > 0.5) front.push_back(v);

  rig.shapes.push_back(neutral);
  for (std::size_t k = 0; k < kExpressionCount; ++k) {
    const std::uint32_t center = front[rng.below(front.size())];
    const double radius = rng.uniform(15.0, 35.0);
    const double amplitude = rng.uniform(3.0, 10.0);
    Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
    const double dn = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
    for (auto& d : dir) d /= dn;
    std::vector<float> shape = neutral;
    const Vec3 c{neutral[3 * center], neutral[3 * center + 1], neutral[3 * center + 2]};
    for (std::size_t v = 0; v < rig.vertex_count; ++v) {
      const double dx = neutral[3 * v] - c[0], dy = neutral[3 * v + 1] - c[1], dz = neutral[3 * v + 2] - c[2];
      const double falloff = std::exp(-(dx * dx + dy * dy + dz * dz) / (2 * radius * radius));
      if (falloff < 1e-4) continue;
      for (int a = 0; a < 3; ++a)
        shape[3 * v + a] = static_cast<float>(neutral[3 * v + a] + amplitude * falloff * dir[a]);
    }
    rig.shapes.push_back(std::move(shape));
  }

  std::vector<std::uint32_t> pool = front;
  rng.shuffle(pool);
  rig.landmarks.assign(pool.begin(), pool.begin() + kToyLandmarks);
  std::sort(rig.landmarks.begin(), rig.landmarks.end());
  return rig;
}

// ---------------------------------------------------------------------------
// rig file: "SFRG", version, V, N, L, landmarks, 47 shapes, optional "TOPO"

inline constexpr std::uint32_t kRigVersion = 1;

inline std::vector<std::uint8_t> encode_rig(const BlendshapeRig& rig) {
  rig.validate();
  io::Writer w;
  w.bytes("SFRG");
  w.u32(kRigVersion);
  w.u32(rig.vertex_count);
  w.u8(static_cast<std::uint8_t>(kExpressionCount));
  w.u16(static_cast<std::uint16_t>(rig.landmarks.size()));
  for (auto l : rig.landmarks) w.u32(l);
  for (const auto& s : rig.shapes)
    for (float v : s) w.f32(v);
  if (!rig.faces.empty()) {
    w.bytes("TOPO");
    w.u32(static_cast<std::uint32_t>(rig.faces.size()));
    for (const auto& f : rig.faces)
      for (auto v : f) w.u32(v);
  }
  return w.buffer();
}

inline BlendshapeRig decode_rig(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes);
  if (r.bytes(4, "magic") != "SFRG") throw LoadError("magic", "not a rig file");
  if (const auto v = r.u32("version"); v != kRigVersion) {
    throw LoadError("version", "unsupported rig version " + std::to_string(v));
  }
  BlendshapeRig rig;
  rig.vertex_count = r.u32("vertex_count");
  if (const auto n = r.u8("expression_count"); n != kExpressionCount) {
    throw LoadError("expression_count", "expected 46, got " + std::to_string(n));
  }
  const std::uint16_t l = r.u16("landmark_count");
  for (std::uint16_t i = 0; i < l; ++i) rig.landmarks.push_back(r.u32("landmarks"));
  if (r.remaining() < (kExpressionCount + 1) * rig.vertex_count * 12) {
    throw LoadError("shapes", "truncated at byte offset " + std::to_string(r.offset()));
  }
  for (std::size_t s = 0; s <= kExpressionCount; ++s) {
    std::vector<float> shape(static_cast<std::size_t>(rig.vertex_count) * 3);
    r.f32_array(shape, "shapes");
    rig.shapes.push_back(std::move(shape));
  }
  if (!r.at_end()) {
    if (r.bytes(4, "topology") != "TOPO") throw LoadError("topology", "unexpected trailing data");
    const std::uint32_t count = r.u32("face_count");
    rig.faces.resize(count);
    for (auto& f : rig.faces)
      for (auto& v : f) v = r.u32("faces");
  }
  try {
    rig.validate();
  } catch (const InvalidInput& e) {
    throw LoadError("landmarks", e.what());
  }
  return rig;
}

inline void save_rig(const std::filesystem::path& path, const BlendshapeRig& rig) {
  io::write_file(path, encode_rig(rig));
}

inline BlendshapeRig load_rig(const std::filesystem::path& path) {
  return decode_rig(io::read_file(path));
}

// ---------------------------------------------------------------------------
// OBJ export

inline std::string to_obj(const std::vector<Vec3>& vertices,
                          std::span<const std::array<std::uint32_t, 3>> faces) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6);
  for (const auto& v : vertices) os << "v " << v[0] << ' ' << v[1] << ' ' << v[2] << '\n';
  for (const auto& f : faces) os << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  return os.str();
}

/// Vertex positions of an OBJ document ("v" lines only).
inline std::vector<Vec3> parse_obj_vertices(const std::string& text) {
  std::vector<Vec3> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.size() < 2 || line[0] != 'v' || line[1] != ' ') continue;
    std::istringstream ls(line.substr(2));
    Vec3 v{};
    if (!(ls >> v[0] >> v[1] >> v[2])) throw InvalidInput("malformed OBJ vertex line: " + line);
    out.push_back(v);
  }
  return out;
}

}  // namespace speechface::face3d
