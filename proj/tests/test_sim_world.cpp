#include "qlio/sim_world.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <limits>
#include <sstream>

namespace qlio::sim {
namespace {

std::size_t distinct_normals(const Scene& s) {
  std::vector<Vec3> seen;
  for (const Patch& p : s.patches) {
    const bool dup = std::any_of(seen.begin(), seen.end(),
                                 [&](const Vec3& n) { return (n - p.normal).norm() < 1e-9; });
    if (!dup) seen.push_back(p.normal);
  }
  return seen.size();
}

TEST(Scene, BoxRoomHasSixOutwardPatches) {
  SceneSpec spec;
  spec.dims = Vec3(10, 10, 3);
  const Scene s = build_scene(spec);
  ASSERT_EQ(s.patches.size(), 6u);
  const Vec3 middle(0, 0, spec.floor_z + 1.5);
  for (const Patch& p : s.patches) {
    EXPECT_NEAR(p.normal.norm(), 1.0, 1e-12);
    EXPECT_GT(p.normal.dot(p.center - middle), 0.0);
    EXPECT_GT(std::abs(p.offset()), 0.5);  // no plane through the origin
  }
}

TEST(Scene, CorridorHasTwoParallelPairs) {
  SceneSpec spec;
  spec.preset = "corridor";
  spec.dims = Vec3(40, 3, 3);
  const Scene s = build_scene(spec);
  ASSERT_EQ(s.patches.size(), 4u);
  int antiparallel = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = i + 1; j < 4; ++j) {
      if ((s.patches[i].normal + s.patches[j].normal).norm() < 1e-12) ++antiparallel;
    }
    EXPECT_NEAR(s.patches[i].normal.x(), 0.0, 1e-12);  // all long patches run along x
    EXPECT_NEAR(std::max(s.patches[i].half_u, s.patches[i].half_v), 20.0, 1e-12);
  }
  EXPECT_EQ(antiparallel, 2);
}

TEST(Scene, DefaultScenesAreObservable) {
  for (const char* name : {"box-room", "corridor", "open-yard"}) {
    SceneSpec spec;
    spec.preset = name;
    const Scene s = build_scene(spec);
    EXPECT_GE(distinct_normals(s), 4u) << name;
    for (const Patch& p : s.patches) EXPECT_NEAR(p.normal.norm(), 1.0, 1e-12);
  }
}

TEST(Scene, DeterministicAndValidated) {
  SceneSpec spec;
  spec.preset = "open-yard";
  spec.seed = 42;
  const Scene a = build_scene(spec);
  const Scene b = build_scene(spec);
  ASSERT_EQ(a.patches.size(), b.patches.size());
  for (std::size_t i = 0; i < a.patches.size(); ++i) {
    EXPECT_EQ(a.patches[i].center, b.patches[i].center);
    EXPECT_EQ(a.patches[i].normal, b.patches[i].normal);
  }
  spec.preset = "cathedral";
  EXPECT_THROW(build_scene(spec), InvalidArgument);
}

TEST(Trajectory, StaticIsConstant) {
  TrajectorySpec spec;
  spec.preset = "static";
  const GroundTruth gt = synth_trajectory(spec, 10.0, 200.0);
  for (const Kinematics& k : gt.samples()) {
    EXPECT_EQ(k.position, gt.samples().front().position);
    EXPECT_EQ(k.rotation, gt.samples().front().rotation);
  }
  EXPECT_EQ(gt.samples().size(), 2001u);
}

TEST(Trajectory, CircleCloses) {
  TrajectorySpec spec;
  spec.preset = "circle";
  spec.radius = 5.0;
  const GroundTruth gt = synth_trajectory(spec, 60.0, 200.0);
  const Kinematics a = gt.samples().front();
  const Kinematics b = gt.samples().back();
  EXPECT_LT((a.position - b.position).norm(), 1e-6);
  EXPECT_LT((a.rotation - b.rotation).norm(), 1e-6);
}

TEST(Trajectory, FigureEightRespectsSpeedBounds) {
  TrajectorySpec spec;
  const GroundTruth gt = synth_trajectory(spec, 60.0, 400.0);
  const auto& s = gt.samples();
  double vmax = 0.0, wmax = 0.0;
  for (std::size_t i = 1; i < s.size(); ++i) {
    const double dt = to_seconds(s[i].t - s[i - 1].t);
    vmax = std::max(vmax, (s[i].position - s[i - 1].position).norm() / dt);
    wmax = std::max(wmax, so3_log(s[i - 1].rotation.transpose() * s[i].rotation).norm() / dt);
  }
  EXPECT_LE(vmax, 3.0);
  EXPECT_LE(wmax, 1.5);
  EXPECT_GT(vmax, 0.5);
}

TEST(Trajectory, AnalyticVelocityMatchesFiniteDifference) {
  for (const char* name : {"circle", "figure-eight", "straight"}) {
    TrajectorySpec spec;
    spec.preset = name;
    const GroundTruth gt = synth_trajectory(spec, 20.0, 400.0);
    const TimestampUs h = 100;
    for (TimestampUs t = 1000; t < 19'000'000; t += 997'003) {
      const Kinematics k = gt.at(t);
      const Vec3 fd_v = (gt.at(t + h).position - gt.at(t - h).position) / to_seconds(2 * h);
      const Vec3 fd_a = (gt.at(t + h).velocity - gt.at(t - h).velocity) / to_seconds(2 * h);
      const Vec3 fd_w =
          so3_log(gt.at(t - h).rotation.transpose() * gt.at(t + h).rotation) / to_seconds(2 * h);
      EXPECT_LT((fd_v - k.velocity).norm(), 1e-6) << name;
      EXPECT_LT((fd_a - k.acceleration).norm(), 1e-5) << name;
      EXPECT_LT((fd_w - k.angular_velocity).norm(), 1e-6) << name;
    }
  }
}

TEST(Trajectory, RejectsBadArguments) {
  TrajectorySpec spec;
  EXPECT_THROW(synth_trajectory(spec, 301.0, 200.0), InvalidArgument);
  EXPECT_THROW(synth_trajectory(spec, 10.0, 99.0), InvalidArgument);
  spec.preset = "spiral";
  EXPECT_THROW(synth_trajectory(spec, 10.0, 200.0), InvalidArgument);
}

TEST(Trajectory, CsvExport) {
  TrajectorySpec spec;
  spec.preset = "static";
  const GroundTruth gt = synth_trajectory(spec, 0.01, 200.0);
  std::ostringstream os;
  gt.write_csv(os);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "t,px,py,pz,qw,qx,qy,qz");
  std::getline(in, line);
  EXPECT_EQ(line, "0,0,0,0,1,0,0,0");
}

TEST(Imu, StaticNoiseFree) {
  TrajectorySpec spec;
  spec.preset = "static";
  const GroundTruth gt = synth_trajectory(spec, 2.0, 400.0);
  const auto imu = synth_imu(gt, NoiseParams{0, 0, 0, 0}, {}, 1);
  for (const ImuSample& s : imu) {
    EXPECT_LT((s.accel - Vec3(0, 0, 9.81)).norm(), 1e-12);
    EXPECT_LT(s.gyro.norm(), 1e-12);
  }
}

TEST(Imu, CircleCentripetal) {
  TrajectorySpec spec;
  spec.preset = "circle";
  spec.radius = 5.0;
  const GroundTruth gt = synth_trajectory(spec, 20.0, 400.0);
  const auto imu = synth_imu(gt, NoiseParams{0, 0, 0, 0}, {}, 1);
  for (std::size_t i = 0; i < imu.size(); i += 37) {
    const Kinematics k = gt.at(imu[i].timestamp_us);
    const Vec3 a_world = k.rotation * imu[i].accel + Vec3(0, 0, -9.81);
    const double v = k.velocity.norm();
    EXPECT_NEAR(a_world.norm(), v * v / 5.0, 1e-3);
  }
}

TEST(Imu, ReintegrationRecoversTruth) {
  TrajectorySpec spec;
  const GroundTruth gt = synth_trajectory(spec, 10.0, 400.0);
  const auto imu = synth_imu(gt, NoiseParams{0, 0, 0, 0}, {}, 1);
  const Kinematics k0 = gt.at(0);
  NavState x;
  x.rotation = k0.rotation;
  x.position = k0.position;
  x.velocity = k0.velocity;
  const Propagated p = propagate(x, Covariance::Zero(), imu, NoiseParams{});
  const Kinematics k1 = gt.at(imu.back().timestamp_us);
  EXPECT_LT((p.state.position - k1.position).norm(), 1e-3);
}

TEST(Imu, DeterministicGivenSeed) {
  TrajectorySpec spec;
  const GroundTruth gt = synth_trajectory(spec, 1.0, 400.0);
  const auto a = synth_imu(gt, NoiseParams{}, {}, 7);
  const auto b = synth_imu(gt, NoiseParams{}, {}, 7);
  const auto c = synth_imu(gt, NoiseParams{}, {}, 8);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].gyro, b[i].gyro);
    EXPECT_EQ(a[i].accel, b[i].accel);
  }
  EXPECT_NE(a[5].accel, c[5].accel);
  EXPECT_THROW(synth_imu(gt, NoiseParams{}, {}, 1, 500.0), InvalidArgument);
}

TEST(Imu, NoiseHasConfiguredScale) {
  TrajectorySpec spec;
  spec.preset = "static";
  const GroundTruth gt = synth_trajectory(spec, 50.0, 200.0);
  NoiseParams n{1e-3, 1e-2, 0, 0};
  const auto imu = synth_imu(gt, n, {}, 3, 200.0);
  double sq = 0.0;
  for (const auto& s : imu) sq += s.gyro.squaredNorm();
  const double sigma = std::sqrt(sq / (3.0 * imu.size()));
  EXPECT_NEAR(sigma, 1e-3 * std::sqrt(200.0), 0.03 * 1e-3 * std::sqrt(200.0));
}

TEST(Lidar, OffsetsWithinPeriod) {
  for (auto pattern : {ScanPattern::kSpinning, ScanPattern::kRaster}) {
    LidarModel m;
    m.pattern = pattern;
    for (int r = 0; r < m.rows; ++r) {
      for (int c = 0; c < m.columns; ++c) {
        const TimestampUs o = m.offset_us(r, c);
        EXPECT_GE(o, 0);
        EXPECT_LT(o, m.period_us());
      }
    }
  }
}

TEST(Lidar, RangeToWallIsExact) {
  Scene scene;
  Patch wall;
  wall.center = Vec3(1, 0, 0);
  wall.normal = Vec3(-1, 0, 0);
  wall.axis_u = Vec3::UnitY();
  wall.axis_v = Vec3::UnitZ();
  scene.patches.push_back(wall);
  TrajectorySpec spec;
  spec.preset = "static";
  const GroundTruth gt = synth_trajectory(spec, 1.0, 200.0);
  LidarModel m;
  m.rows = 1;
  m.columns = 1;
  m.range_noise = 0.0;
  const Scan s = synth_scan(scene, gt, m, 500000, 1);
  ASSERT_EQ(s.points.size(), 1u);
  EXPECT_EQ(s.points[0].point, Vec3(1.0, 0.0, 0.0));
}

TEST(Lidar, StaticPosePerPointPosesAgree) {
  const Scene scene = build_scene({});
  TrajectorySpec spec;
  spec.preset = "static";
  const GroundTruth gt = synth_trajectory(spec, 1.0, 200.0);
  const Scan s = synth_scan(scene, gt, LidarModel{}, 500000, 1);
  ASSERT_FALSE(s.points.empty());
  const Pose first = gt.at(s.points.front().t_us).pose();
  for (const ScanPoint& p : s.points) {
    const Pose pose = gt.at(p.t_us).pose();
    EXPECT_EQ(pose.rotation, first.rotation);
    EXPECT_EQ(pose.translation, first.translation);
  }
}

class MovingScan : public ::testing::TestWithParam<ScanPattern> {};

TEST_P(MovingScan, NoiseFreePointsLieOnPatches) {
  const Scene scene = build_scene({});
  const GroundTruth gt = synth_trajectory({}, 5.0, 400.0);
  LidarModel m;
  m.pattern = GetParam();
  m.range_noise = 0.0;
  const Pose extr{so3_exp(Vec3(0.01, -0.02, 0.03)), Vec3(0.05, 0, 0.1)};
  const Scan s = synth_scan(scene, gt, m, 2'000'000, 1, extr);
  ASSERT_GT(s.points.size(), 1000u);
  for (const ScanPoint& p : s.points) {
    EXPECT_GE(p.t_us, s.t_start_us);
    EXPECT_LT(p.t_us, s.t_end_us);
    const Vec3 w = gt.at(p.t_us).pose() * (extr * p.point);
    EXPECT_LT(distance_to_scene(scene, w), 1e-9);
  }
  EXPECT_TRUE(std::is_sorted(s.points.begin(), s.points.end(),
                             [](const ScanPoint& a, const ScanPoint& b) { return a.t_us < b.t_us; }));
}

TEST_P(MovingScan, NoisyPointsWithinSixSigma) {
  const Scene scene = build_scene({});
  const GroundTruth gt = synth_trajectory({}, 5.0, 400.0);
  LidarModel m;
  m.pattern = GetParam();
  const Scan s = synth_scan(scene, gt, m, 3'000'000, 9);
  const double bound = 6.0 * m.range_noise;
  for (const ScanPoint& p : s.points) {
    const Vec3 w = gt.at(p.t_us).pose() * p.point;
    // Noise can push a point near an edge just past its patch, so the extent
    // test gets the same slack. A grazing ray only shortens the distance.
    double best = std::numeric_limits<double>::infinity();
    for (const Patch& patch : scene.patches) {
      if (patch.contains_projection(w, bound)) best = std::min(best, std::abs(patch.signed_distance(w)));
    }
    EXPECT_LE(best, bound);
  }
  const Scan again = synth_scan(scene, gt, m, 3'000'000, 9);
  ASSERT_EQ(s.points.size(), again.points.size());
  for (std::size_t i = 0; i < s.points.size(); ++i) {
    EXPECT_EQ(s.points[i].point, again.points[i].point);
  }
}

INSTANTIATE_TEST_SUITE_P(Patterns, MovingScan,
                         ::testing::Values(ScanPattern::kSpinning, ScanPattern::kRaster));

TEST(Lidar, ScanOutsideTruthSpanRejected) {
  const GroundTruth gt = synth_trajectory({}, 1.0, 400.0);
  EXPECT_THROW(synth_scan(build_scene({}), gt, LidarModel{}, 50'000, 1), InvalidArgument);
  EXPECT_THROW(synth_scan(build_scene({}), gt, LidarModel{}, 1'100'000, 1), InvalidArgument);
}

}  // namespace
}  // namespace qlio::sim
