#include "qlio/sim_world.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>

namespace qlio::sim {

namespace {

constexpr int kStatic = 0;
constexpr int kCircle = 1;
constexpr int kFigureEight = 2;
constexpr int kStraight = 3;

Patch make_patch(const Vec3& center, const Vec3& normal, const Vec3& axis_u, double half_u,
                 double half_v) {
  Patch p;
  p.center = center;
  p.normal = normal.normalized();
  p.axis_u = (axis_u - axis_u.dot(p.normal) * p.normal).normalized();
  p.axis_v = p.normal.cross(p.axis_u);
  p.half_u = half_u;
  p.half_v = half_v;
  return p;
}

Scene box_room(const SceneSpec& spec) {
  const double hx = 0.5 * spec.dims.x();
  const double hy = 0.5 * spec.dims.y();
  const double h = spec.dims.z();
  const double zc = spec.floor_z + 0.5 * h;
  Scene s;
  s.patches.push_back(make_patch({0, 0, spec.floor_z}, -Vec3::UnitZ(), Vec3::UnitX(), hx, hy));
  s.patches.push_back(make_patch({0, 0, spec.floor_z + h}, Vec3::UnitZ(), Vec3::UnitX(), hx, hy));
  s.patches.push_back(make_patch({hx, 0, zc}, Vec3::UnitX(), Vec3::UnitY(), hy, 0.5 * h));
  s.patches.push_back(make_patch({-hx, 0, zc}, -Vec3::UnitX(), Vec3::UnitY(), hy, 0.5 * h));
  s.patches.push_back(make_patch({0, hy, zc}, Vec3::UnitY(), Vec3::UnitX(), hx, 0.5 * h));
  s.patches.push_back(make_patch({0, -hy, zc}, -Vec3::UnitY(), Vec3::UnitX(), hx, 0.5 * h));
  return s;
}

Scene corridor(const SceneSpec& spec) {
  const double hx = 0.5 * spec.dims.x();
  const double hy = 0.5 * spec.dims.y();
  const double h = spec.dims.z();
  const double zc = spec.floor_z + 0.5 * h;
  Scene s;
  s.patches.push_back(make_patch({0, 0, spec.floor_z}, -Vec3::UnitZ(), Vec3::UnitX(), hx, hy));
  s.patches.push_back(make_patch({0, 0, spec.floor_z + h}, Vec3::UnitZ(), Vec3::UnitX(), hx, hy));
  s.patches.push_back(make_patch({0, hy, zc}, Vec3::UnitY(), Vec3::UnitX(), hx, 0.5 * h));
  s.patches.push_back(make_patch({0, -hy, zc}, -Vec3::UnitY(), Vec3::UnitX(), hx, 0.5 * h));
  return s;
}

// Ground plus seeded panels roughly facing the origin, so their planes keep
// a few meters of clearance from it.
Scene open_yard(const SceneSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double half = 0.5 * std::max(spec.dims.x(), spec.dims.y());
  Scene s;
  s.patches.push_back(make_patch({0, 0, spec.floor_z}, Vec3::UnitZ(), Vec3::UnitX(), half, half));

  constexpr int kPanels = 8;
  for (int i = 0; i < kPanels; ++i) {
    const double azimuth = 2.0 * std::numbers::pi * (i + 0.3 * unit(rng)) / kPanels;
    const double distance = 6.0 + 8.0 * unit(rng);
    const double width = 3.0 + 5.0 * unit(rng);
    const double height = std::min(spec.dims.z(), 2.0 + 3.0 * unit(rng));
    const double yaw_off = (unit(rng) - 0.5) * 1.2;
    const double tilt = (i % 3 == 0) ? (unit(rng) - 0.5) * 0.5 : 0.0;

    const Vec3 radial(std::cos(azimuth), std::sin(azimuth), 0.0);
    const Vec3 facing = (Eigen::AngleAxisd(yaw_off, Vec3::UnitZ()) * radial).normalized();
    const Vec3 normal = (facing + Vec3(0, 0, std::tan(tilt))).normalized();
    const Vec3 center = distance * radial + Vec3(0, 0, spec.floor_z + 0.5 * height);
    s.patches.push_back(
        make_patch(center, normal, Vec3::UnitZ().cross(facing), 0.5 * width, 0.5 * height));
  }
  return s;
}

struct Angles {
  double yaw = 0, pitch = 0, roll = 0;
  double yaw_dot = 0, pitch_dot = 0, roll_dot = 0;
};

Mat3 rotation_from(const Angles& a) {
  return (Eigen::AngleAxisd(a.yaw, Vec3::UnitZ()) * Eigen::AngleAxisd(a.pitch, Vec3::UnitY()) *
          Eigen::AngleAxisd(a.roll, Vec3::UnitX()))
      .toRotationMatrix();
}

// Body rates of the yaw-pitch-roll (Z-Y-X) sequence.
Vec3 body_rate(const Angles& a) {
  const double sr = std::sin(a.roll), cr = std::cos(a.roll);
  const double sp = std::sin(a.pitch), cp = std::cos(a.pitch);
  return {a.roll_dot - a.yaw_dot * sp, a.pitch_dot * cr + a.yaw_dot * sr * cp,
          -a.pitch_dot * sr + a.yaw_dot * cr * cp};
}

void heading_from_velocity(const Vec3& v, const Vec3& acc, Angles& a) {
  const double h2 = v.x() * v.x() + v.y() * v.y();
  a.yaw = std::atan2(v.y(), v.x());
  a.yaw_dot = h2 > 0.0 ? (v.x() * acc.y() - v.y() * acc.x()) / h2 : 0.0;
}

void add_wobble(const TrajectorySpec& spec, double w, double t, Angles& a) {
  a.roll = spec.wobble * std::sin(3.0 * w * t);
  a.roll_dot = 3.0 * w * spec.wobble * std::cos(3.0 * w * t);
  a.pitch = spec.wobble * std::sin(5.0 * w * t + 0.5);
  a.pitch_dot = 5.0 * w * spec.wobble * std::cos(5.0 * w * t + 0.5);
}

double figure_eight_loop_length(const TrajectorySpec& spec) {
  constexpr int kSteps = 4096;
  double length = 0.0;
  for (int i = 0; i < kSteps; ++i) {
    const double s = 2.0 * std::numbers::pi * (i + 0.5) / kSteps;
    const Vec3 d(spec.amplitude_x * std::cos(s), 2.0 * spec.amplitude_y * std::cos(2.0 * s),
                 spec.heave * std::cos(s));
    length += d.norm();
  }
  return length * 2.0 * std::numbers::pi / kSteps;
}

int loops_for(double duration, double speed, double loop_length) {
  return std::max(1, static_cast<int>(std::lround(duration * speed / loop_length)));
}

}  // namespace

bool Patch::contains_projection(const Vec3& q, double slack) const {
  const Vec3 d = q - center;
  return std::abs(d.dot(axis_u)) <= half_u + slack && std::abs(d.dot(axis_v)) <= half_v + slack;
}

Scene build_scene(const SceneSpec& spec) {
  if (!(spec.dims.minCoeff() > 0.0)) {
    throw InvalidArgument("scene dimensions must be positive");
  }
  if (spec.preset == "box-room") return box_room(spec);
  if (spec.preset == "corridor") return corridor(spec);
  if (spec.preset == "open-yard") return open_yard(spec);
  throw InvalidArgument("unknown scene preset '" + spec.preset + "'");
}

std::optional<RayHit> cast_ray(const Scene& scene, const Vec3& origin, const Vec3& direction,
                               double max_range) {
  std::optional<RayHit> best;
  for (std::size_t i = 0; i < scene.patches.size(); ++i) {
    const Patch& p = scene.patches[i];
    const double denom = p.normal.dot(direction);
    if (std::abs(denom) < 1e-12) continue;
    const double t = -p.signed_distance(origin) / denom;
    if (!(t > 0.0) || t > max_range) continue;
    if (best && t >= best->range) continue;
    if (!p.contains_projection(origin + t * direction, 0.0)) continue;
    best = RayHit{t, i};
  }
  return best;
}

double distance_to_scene(const Scene& scene, const Vec3& q) {
  double best = std::numeric_limits<double>::infinity();
  for (const Patch& p : scene.patches) {
    const double sd = p.signed_distance(q);
    if (p.contains_projection(q - sd * p.normal, 1e-6)) best = std::min(best, std::abs(sd));
  }
  return best;
}

GroundTruth::GroundTruth(Model model, TimestampUs start, TimestampUs end, double rate_hz)
    : model_(std::move(model)), start_(start), end_(end), rate_hz_(rate_hz) {
  if (rate_hz < kMinTrajectoryRate) {
    throw InvalidArgument("ground truth rate below 100 Hz");
  }
  for (std::int64_t i = 0;; ++i) {
    const TimestampUs t = start_ + static_cast<TimestampUs>(std::llround(i * 1e6 / rate_hz_));
    if (t > end_) break;
    samples_.push_back(at(t));
  }
}

Kinematics GroundTruth::at(TimestampUs t_us) const {
  const TrajectorySpec& s = model_.spec;
  const double w = model_.omega;
  const double t = to_seconds(t_us - start_);
  Kinematics k;
  k.t = t_us;
  Angles a;

  switch (model_.kind) {
    case kStatic:
      k.position = Vec3(0.0, 0.0, s.height);
      break;
    case kCircle: {
      const double c = std::cos(w * t), sn = std::sin(w * t);
      k.position = Vec3(s.radius * c, s.radius * sn, s.height);
      k.velocity = Vec3(-s.radius * w * sn, s.radius * w * c, 0.0);
      k.acceleration = Vec3(-s.radius * w * w * c, -s.radius * w * w * sn, 0.0);
      heading_from_velocity(k.velocity, k.acceleration, a);
      break;
    }
    case kFigureEight: {
      const double s1 = std::sin(w * t), c1 = std::cos(w * t);
      const double s2 = std::sin(2 * w * t), c2 = std::cos(2 * w * t);
      k.position = Vec3(s.amplitude_x * s1, s.amplitude_y * s2, s.height + s.heave * s1);
      k.velocity = Vec3(s.amplitude_x * w * c1, 2 * s.amplitude_y * w * c2, s.heave * w * c1);
      k.acceleration = Vec3(-s.amplitude_x * w * w * s1, -4 * s.amplitude_y * w * w * s2,
                            -s.heave * w * w * s1);
      heading_from_velocity(k.velocity, k.acceleration, a);
      add_wobble(s, w, t, a);
      break;
    }
    case kStraight: {
      const double s1 = std::sin(w * t), c1 = std::cos(w * t);
      const double s2 = std::sin(2 * w * t), c2 = std::cos(2 * w * t);
      k.position = Vec3(s.amplitude_x * s1, 0.0, s.height + s.heave * s2);
      k.velocity = Vec3(s.amplitude_x * w * c1, 0.0, 2 * s.heave * w * c2);
      k.acceleration = Vec3(-s.amplitude_x * w * w * s1, 0.0, -4 * s.heave * w * w * s2);
      add_wobble(s, w, t, a);
      break;
    }
    default:
      throw InvalidArgument("corrupt trajectory model");
  }
  k.rotation = rotation_from(a);
  k.angular_velocity = body_rate(a);
  return k;
}

void GroundTruth::write_csv(std::ostream& os) const {
  os << "t,px,py,pz,qw,qx,qy,qz\n";
  os.precision(17);
  for (const Kinematics& k : samples_) {
    const Quat q = k.pose().quaternion();
    os << to_seconds(k.t) << ',' << k.position.x() << ',' << k.position.y() << ','
       << k.position.z() << ',' << q.w() << ',' << q.x() << ',' << q.y() << ',' << q.z() << '\n';
  }
}

GroundTruth synth_trajectory(const TrajectorySpec& spec, double duration_s, double rate_hz) {
  if (!(duration_s > 0.0) || duration_s > kMaxDurationSeconds) {
    throw InvalidArgument("trajectory duration must lie in (0, 300] s");
  }
  if (rate_hz < kMinTrajectoryRate) {
    throw InvalidArgument("trajectory rate below 100 Hz");
  }
  GroundTruth::Model model;
  model.spec = spec;
  const double two_pi = 2.0 * std::numbers::pi;
  if (spec.preset == "static") {
    model.kind = kStatic;
  } else if (spec.preset == "circle") {
    model.kind = kCircle;
    const int loops = loops_for(duration_s, spec.speed, two_pi * spec.radius);
    model.omega = two_pi * loops / duration_s;
  } else if (spec.preset == "figure-eight") {
    model.kind = kFigureEight;
    const int loops = loops_for(duration_s, spec.speed, figure_eight_loop_length(spec));
    model.omega = two_pi * loops / duration_s;
  } else if (spec.preset == "straight") {
    model.kind = kStraight;
    const int loops = loops_for(duration_s, spec.speed, 4.0 * spec.amplitude_x);
    model.omega = two_pi * loops / duration_s;
  } else {
    throw InvalidArgument("unknown trajectory preset '" + spec.preset + "'");
  }
  return GroundTruth(model, 0, to_microseconds(duration_s), rate_hz);
}

std::vector<ImuSample> synth_imu(const GroundTruth& gt, const NoiseParams& noise,
                                 const ImuBias& bias, std::uint64_t seed, double imu_rate_hz,
                                 const Vec3& gravity) {
  noise.validate();
  if (!(imu_rate_hz > 0.0) || imu_rate_hz > gt.rate_hz()) {
    throw InvalidArgument("IMU rate must be positive and not exceed the ground-truth rate");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto white = [&](double density) -> Vec3 {
    return Vec3(normal(rng), normal(rng), normal(rng)) * density * std::sqrt(imu_rate_hz);
  };

  std::vector<ImuSample> out;
  for (std::int64_t i = 0;; ++i) {
    const TimestampUs t =
        gt.start() + static_cast<TimestampUs>(std::llround(i * 1e6 / imu_rate_hz));
    if (t > gt.end()) break;
    const Kinematics k = gt.at(t);
    ImuSample s;
    s.timestamp_us = t;
    s.gyro = k.angular_velocity + bias.gyro + white(noise.gyro_noise);
    s.accel = k.rotation.transpose() * (k.acceleration - gravity) + bias.accel +
              white(noise.accel_noise);
    out.push_back(s);
  }
  return out;
}

void LidarModel::validate() const {
  if (!(scan_rate_hz > 0.0) || rows < 1 || columns < 1 || !(range_noise >= 0.0) ||
      !(max_range > min_range) || !(max_elevation_deg >= min_elevation_deg)) {
    throw InvalidArgument("invalid LiDAR model");
  }
}

TimestampUs LidarModel::offset_us(int row, int column) const {
  const auto period = static_cast<double>(period_us());
  if (pattern == ScanPattern::kSpinning) {
    return static_cast<TimestampUs>(std::floor(period * column / columns));
  }
  const double index = static_cast<double>(row) * columns + column;
  return static_cast<TimestampUs>(std::floor(period * index / points_per_scan()));
}

Vec3 LidarModel::ray_direction(int row, int column) const {
  const double deg = std::numbers::pi / 180.0;
  const double el =
      rows == 1 ? 0.5 * (min_elevation_deg + max_elevation_deg) * deg
                : (min_elevation_deg + (max_elevation_deg - min_elevation_deg) * row / (rows - 1)) *
                      deg;
  double az = 0.0;
  if (pattern == ScanPattern::kSpinning) {
    az = 2.0 * std::numbers::pi * column / columns;
  } else {
    const double fov = horizontal_fov_deg * deg;
    az = columns == 1 ? 0.0 : -0.5 * fov + fov * column / (columns - 1);
  }
  return Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
}

Scan synth_scan(const Scene& scene, const GroundTruth& gt, const LidarModel& lidar,
                TimestampUs t_end_us, std::uint64_t seed, const Pose& imu_from_lidar) {
  lidar.validate();
  Scan scan;
  scan.t_end_us = t_end_us;
  scan.t_start_us = t_end_us - lidar.period_us();
  if (scan.t_start_us < gt.start() || t_end_us > gt.end()) {
    throw InvalidArgument("scan window outside the ground-truth span");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  scan.points.reserve(lidar.points_per_scan());

  for (int c = 0; c < lidar.columns; ++c) {
    for (int r = 0; r < lidar.rows; ++r) {
      // Raster firing order is row-major; spinning fires a full column at once.
      const TimestampUs t = scan.t_start_us + lidar.offset_us(r, c);
      const Pose world_from_lidar = gt.at(t).pose() * imu_from_lidar;
      const Vec3 dir = lidar.ray_direction(r, c);
      const auto hit = cast_ray(scene, world_from_lidar.translation,
                                world_from_lidar.rotation * dir, lidar.max_range);
      const double noise = lidar.range_noise > 0.0 ? lidar.range_noise * normal(rng) : 0.0;
      if (!hit || hit->range < lidar.min_range) continue;
      const double range = hit->range + noise;
      if (range < lidar.min_range || range > lidar.max_range) continue;
      scan.points.push_back({range * dir, t});
    }
  }
  if (lidar.pattern == ScanPattern::kRaster) {
    std::stable_sort(scan.points.begin(), scan.points.end(),
                     [](const ScanPoint& a, const ScanPoint& b) { return a.t_us < b.t_us; });
  }
  return scan;
}

}  // namespace qlio::sim
