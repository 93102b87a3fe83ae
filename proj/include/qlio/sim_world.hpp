#pragma once

#include "qlio/common.hpp"
#include "qlio/manifold.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace qlio::sim {

/// Finite rectangle. Points q on the patch satisfy normal . q + offset() = 0.
struct Patch {
  Vec3 center = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  Vec3 axis_u = Vec3::UnitX();
  Vec3 axis_v = Vec3::UnitY();
  double half_u = 1.0;
  double half_v = 1.0;

  double offset() const { return -normal.dot(center); }
  double signed_distance(const Vec3& q) const { return normal.dot(q) + offset(); }
  bool contains_projection(const Vec3& q, double slack = 1e-9) const;
};

struct Scene {
  std::vector<Patch> patches;
};

/// Scene presets: "box-room", "corridor", "open-yard".
/// `dims` is (length x, width y, height z) in meters; floors sit at `floor_z`
/// so no patch plane passes through the world origin.
struct SceneSpec {
  std::string preset = "box-room";
  Vec3 dims{12.0, 12.0, 4.0};
  double floor_z = -1.2;
  std::uint64_t seed = 1;
};

Scene build_scene(const SceneSpec& spec);

struct RayHit {
  double range = 0.0;
  std::size_t patch = 0;
};

std::optional<RayHit> cast_ray(const Scene& scene, const Vec3& origin, const Vec3& direction,
                               double max_range);

/// Smallest |signed distance| over patches whose extent contains the
/// projection of q; infinity when no patch does.
double distance_to_scene(const Scene& scene, const Vec3& q);

/// Trajectory presets: "static", "circle", "figure-eight", "straight".
struct TrajectorySpec {
  std::string preset = "figure-eight";
  double radius = 2.5;        // circle
  double amplitude_x = 3.0;   // figure-eight / straight
  double amplitude_y = 1.5;   // figure-eight
  double speed = 1.2;         // target mean speed, m/s
  double height = 0.0;        // nominal z
  double heave = 0.15;        // vertical oscillation amplitude (figure-eight, straight)
  double wobble = 0.05;       // roll/pitch amplitude, rad (figure-eight, straight)
};

struct Kinematics {
  TimestampUs t = 0;
  Mat3 rotation = Mat3::Identity();  // world <- body
  Vec3 position = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
  Vec3 acceleration = Vec3::Zero();   // world frame
  Vec3 angular_velocity = Vec3::Zero();  // body frame

  Pose pose() const { return {rotation, position}; }
};

/// Closed-form trajectory with a sampled table at the requested rate.
class GroundTruth {
 public:
  struct Model {
    int kind = 0;
    TrajectorySpec spec;
    double omega = 0.0;  // base angular frequency, rad/s
  };

  GroundTruth(Model model, TimestampUs start, TimestampUs end, double rate_hz);

  Kinematics at(TimestampUs t) const;
  const std::vector<Kinematics>& samples() const { return samples_; }
  TimestampUs start() const { return start_; }
  TimestampUs end() const { return end_; }
  double rate_hz() const { return rate_hz_; }

  /// Rows: t, px, py, pz, qw, qx, qy, qz with t in seconds.
  void write_csv(std::ostream& os) const;

 private:
  Model model_;
  TimestampUs start_;
  TimestampUs end_;
  double rate_hz_;
  std::vector<Kinematics> samples_;
};

inline constexpr double kMaxDurationSeconds = 300.0;
inline constexpr double kMinTrajectoryRate = 100.0;

GroundTruth synth_trajectory(const TrajectorySpec& spec, double duration_s, double rate_hz);

struct ImuBias {
  Vec3 gyro = Vec3::Zero();
  Vec3 accel = Vec3::Zero();
};

/// Samples the specific force and body rate at `imu_rate_hz`, adding constant
/// biases and white noise scaled from the continuous densities.
std::vector<ImuSample> synth_imu(const GroundTruth& gt, const NoiseParams& noise,
                                 const ImuBias& bias, std::uint64_t seed,
                                 double imu_rate_hz = 200.0,
                                 const Vec3& gravity = Vec3(0.0, 0.0, -9.81));

enum class ScanPattern { kSpinning, kRaster };

struct LidarModel {
  double scan_rate_hz = 10.0;
  ScanPattern pattern = ScanPattern::kSpinning;
  int rows = 16;      // rings (spinning) or raster lines
  int columns = 360;  // azimuth steps (spinning) or samples per raster line
  double min_elevation_deg = -25.0;
  double max_elevation_deg = 25.0;
  double horizontal_fov_deg = 70.0;  // raster only
  double range_noise = 0.02;         // meters, 1 sigma
  double min_range = 0.3;
  double max_range = 100.0;

  std::size_t points_per_scan() const { return static_cast<std::size_t>(rows) * columns; }
  TimestampUs period_us() const { return to_microseconds(1.0 / scan_rate_hz); }
  /// Firing offset of ray (row, column) relative to scan start, in [0, period).
  TimestampUs offset_us(int row, int column) const;
  /// Unit ray direction in the LiDAR frame.
  Vec3 ray_direction(int row, int column) const;
  void validate() const;
};

/// Ray-casts one scan ending at `t_end_us`; each ray uses the true LiDAR pose
/// (gt pose composed with `imu_from_lidar`) at its own firing time.
Scan synth_scan(const Scene& scene, const GroundTruth& gt, const LidarModel& lidar,
                TimestampUs t_end_us, std::uint64_t seed,
                const Pose& imu_from_lidar = Pose::identity());

}  // namespace qlio::sim
