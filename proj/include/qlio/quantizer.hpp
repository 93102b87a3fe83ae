#pragma once

#include "qlio/common.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace qlio {

/// Static fixed-point configuration shared by both ends of a session.
struct Codebook {
  int l_p = 9;
  int l_n = 3;
  int l_z = 2;
  double r_max = 200.0;  // meters
  double r_thr = 0.04;   // meters

  /// Accepts 1..16 bits for every field; r_max > 0 and 0 < r_thr <= 1.
  void validate() const;
  bool operator==(const Codebook&) const = default;
};

inline constexpr int kMaxBits = 16;

using PointIndex = std::array<std::uint32_t, 3>;
using RqKey = std::uint64_t;

struct QuantizedPoint {
  PointIndex index{};
  Vec3 reconstruction = Vec3::Zero();
};

struct QuantizedResidual {
  RqKey key = 0;
  Vec3 reconstruction = Vec3::Zero();
};

struct QuantizedZ {
  std::uint32_t index = 0;
  double center = 0.0;
  double lower = 0.0;  // z0
  double upper = 0.0;  // z1
};

/// Throws InvalidArgument when any |p_j| >= r_max.
QuantizedPoint quantize_point(const Vec3& p, const Codebook& cb);
Vec3 dequantize_point(const PointIndex& index, const Codebook& cb);

/// Throws InvalidArgument when ||n|| >= r_thr.
QuantizedResidual quantize_residual_vector(const Vec3& n, const Codebook& cb);
Vec3 dequantize_residual_vector(RqKey key, const Codebook& cb);
std::array<std::uint32_t, 3> split_key(RqKey key, int l_n);
RqKey join_key(const std::array<std::uint32_t, 3>& axes, int l_n);

/// Throws InvalidArgument unless 0 <= z < r_thr.
QuantizedZ quantize_z(double z, const Codebook& cb);
/// Interval [z0, z1) and center of cell `index`.
QuantizedZ dequantize_z(std::uint32_t index, const Codebook& cb);

/// N = 3 l_p + 3 l_n + l_z.
int bits_per_measurement(const Codebook& cb);

struct GroupMember {
  std::uint32_t z_index = 0;
  PointIndex point{};

  auto operator<=>(const GroupMember&) const = default;
};

/// Observations sharing one rQ-vector key; the key is stored once.
struct ObservationGroup {
  RqKey key = 0;
  std::vector<GroupMember> members;

  bool operator==(const ObservationGroup&) const = default;
};

using ObservationGroupSet = std::vector<ObservationGroup>;

std::size_t member_count(const ObservationGroupSet& groups);

/// Per-axis min/max INT8 quantization of a whole scan.
struct Int8Scan {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Zero();
  std::vector<std::array<std::uint8_t, 3>> levels;
};

/// Min/max are taken from the scan itself. Throws on an empty scan.
Int8Scan int8_minmax_quantize(std::span<const Vec3> points);
/// Quantizes against given side data; points outside [min, max] clamp.
Int8Scan int8_minmax_quantize(std::span<const Vec3> points, const Vec3& min, const Vec3& max);
std::vector<Vec3> int8_reconstruct(const Int8Scan& q);

}  // namespace qlio
