#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace qlio {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Quaterniond;

/// Microseconds on the clock shared by every stream of one run.
using TimestampUs = std::int64_t;

inline double to_seconds(TimestampUs t) { return static_cast<double>(t) * 1e-6; }
inline TimestampUs to_microseconds(double seconds) {
  return static_cast<TimestampUs>(std::llround(seconds * 1e6));
}

/// Rigid transform acting on points as p -> rotation * p + translation.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }

  Vec3 operator*(const Vec3& p) const { return rotation * p + translation; }
  Pose operator*(const Pose& other) const {
    return {rotation * other.rotation, rotation * other.translation + translation};
  }
  Pose inverse() const {
    const Mat3 rt = rotation.transpose();
    return {rt, -rt * translation};
  }
  Quat quaternion() const {
    Quat q(rotation);
    q.normalize();
    if (q.w() < 0.0) q.coeffs() = -q.coeffs();
    return q;
  }
  static Pose from_quaternion(const Quat& q, const Vec3& t) {
    return {q.normalized().toRotationMatrix(), t};
  }
};

/// Precondition or argument violation detected at an API boundary.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A computation produced (or would produce) a non-finite or indefinite result.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Peer violated the session contract or sent a malformed payload.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Socket or channel failure.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unparseable or inconsistent run configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline bool all_finite(const Vec3& v) { return v.allFinite(); }

struct ScanPoint {
  Vec3 point = Vec3::Zero();  // LiDAR frame at the firing time
  TimestampUs t_us = 0;
};

/// Points fired within [t_start_us, t_end_us).
struct Scan {
  TimestampUs t_start_us = 0;
  TimestampUs t_end_us = 0;
  std::vector<ScanPoint> points;
};

}  // namespace qlio
