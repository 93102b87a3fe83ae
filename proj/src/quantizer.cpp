#include "qlio/quantizer.hpp"

#include <algorithm>
#include <cmath>

namespace qlio {

namespace {

std::uint32_t grid_index(double shifted, double step, int bits) {
  const double top = std::ldexp(1.0, bits) - 1.0;
  const double idx = std::clamp(std::floor(shifted / step), 0.0, top);
  return static_cast<std::uint32_t>(idx);
}

}  // namespace

void Codebook::validate() const {
  const auto in_range = [](int b) { return b >= 1 && b <= kMaxBits; };
  if (!in_range(l_p) || !in_range(l_n) || !in_range(l_z)) {
    throw InvalidArgument("codebook bit counts must lie in [1, 16]");
  }
  if (!(r_max > 0.0) || !std::isfinite(r_max)) {
    throw InvalidArgument("codebook r_max must be positive");
  }
  if (!(r_thr > 0.0 && r_thr <= 1.0)) {
    throw InvalidArgument("codebook r_thr must lie in (0, 1]");
  }
}

QuantizedPoint quantize_point(const Vec3& p, const Codebook& cb) {
  const double step = std::ldexp(cb.r_max, 1 - cb.l_p);
  QuantizedPoint q;
  for (int j = 0; j < 3; ++j) {
    if (!(std::abs(p[j]) < cb.r_max)) {
      throw InvalidArgument("quantize_point: coordinate outside (-r_max, r_max)");
    }
    q.index[j] = grid_index(p[j] + cb.r_max, step, cb.l_p);
  }
  q.reconstruction = dequantize_point(q.index, cb);
  return q;
}

Vec3 dequantize_point(const PointIndex& index, const Codebook& cb) {
  const double step = std::ldexp(cb.r_max, 1 - cb.l_p);
  Vec3 out;
  for (int j = 0; j < 3; ++j) out[j] = index[j] * step - cb.r_max + 0.5 * step;
  return out;
}

std::array<std::uint32_t, 3> split_key(RqKey key, int l_n) {
  const RqKey mask = (RqKey{1} << l_n) - 1;
  return {static_cast<std::uint32_t>((key >> (2 * l_n)) & mask),
          static_cast<std::uint32_t>((key >> l_n) & mask), static_cast<std::uint32_t>(key & mask)};
}

RqKey join_key(const std::array<std::uint32_t, 3>& axes, int l_n) {
  return (RqKey{axes[0]} << (2 * l_n)) | (RqKey{axes[1]} << l_n) | RqKey{axes[2]};
}

QuantizedResidual quantize_residual_vector(const Vec3& n, const Codebook& cb) {
  if (!n.allFinite() || !(n.norm() < cb.r_thr)) {
    throw InvalidArgument("quantize_residual_vector: norm must be below r_thr");
  }
  const double step = std::ldexp(cb.r_thr, 1 - cb.l_n);
  std::array<std::uint32_t, 3> axes{};
  for (int j = 0; j < 3; ++j) axes[j] = grid_index(n[j] + cb.r_thr, step, cb.l_n);
  QuantizedResidual q;
  q.key = join_key(axes, cb.l_n);
  q.reconstruction = dequantize_residual_vector(q.key, cb);
  return q;
}

Vec3 dequantize_residual_vector(RqKey key, const Codebook& cb) {
  const double step = std::ldexp(cb.r_thr, 1 - cb.l_n);
  const auto axes = split_key(key, cb.l_n);
  Vec3 out;
  for (int j = 0; j < 3; ++j) out[j] = axes[j] * step - cb.r_thr + 0.5 * step;
  return out;
}

QuantizedZ quantize_z(double z, const Codebook& cb) {
  if (!(z >= 0.0 && z < cb.r_thr)) {
    throw InvalidArgument("quantize_z: residual must lie in [0, r_thr)");
  }
  const double step = std::ldexp(cb.r_thr, -cb.l_z);
  return dequantize_z(grid_index(z, step, cb.l_z), cb);
}

QuantizedZ dequantize_z(std::uint32_t index, const Codebook& cb) {
  const double step = std::ldexp(cb.r_thr, -cb.l_z);
  QuantizedZ q;
  q.index = index;
  q.lower = index * step;
  q.upper = (index + 1 == (std::uint64_t{1} << cb.l_z)) ? cb.r_thr : q.lower + step;
  q.center = q.lower + 0.5 * step;
  return q;
}

int bits_per_measurement(const Codebook& cb) { return 3 * cb.l_p + 3 * cb.l_n + cb.l_z; }

std::size_t member_count(const ObservationGroupSet& groups) {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.members.size();
  return n;
}

Int8Scan int8_minmax_quantize(std::span<const Vec3> points) {
  if (points.empty()) {
    throw InvalidArgument("int8_minmax_quantize: empty scan");
  }
  Vec3 lo = points.front();
  Vec3 hi = points.front();
  for (const Vec3& p : points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  return int8_minmax_quantize(points, lo, hi);
}

Int8Scan int8_minmax_quantize(std::span<const Vec3> points, const Vec3& min, const Vec3& max) {
  Int8Scan q;
  q.min = min;
  q.max = max;
  q.levels.reserve(points.size());
  for (const Vec3& p : points) {
    std::array<std::uint8_t, 3> l{};
    for (int j = 0; j < 3; ++j) {
      const double range = max[j] - min[j];
      if (range > 0.0) {
        const double idx = std::clamp(std::floor((p[j] - min[j]) / range * 256.0), 0.0, 255.0);
        l[j] = static_cast<std::uint8_t>(idx);
      }
    }
    q.levels.push_back(l);
  }
  return q;
}

std::vector<Vec3> int8_reconstruct(const Int8Scan& q) {
  std::vector<Vec3> out;
  out.reserve(q.levels.size());
  for (const auto& l : q.levels) {
    Vec3 p;
    for (int j = 0; j < 3; ++j) {
      const double range = q.max[j] - q.min[j];
      p[j] = range > 0.0 ? q.min[j] + (l[j] + 0.5) * range / 256.0 : q.min[j];
    }
    out.push_back(p);
  }
  return out;
}

}  // namespace qlio
