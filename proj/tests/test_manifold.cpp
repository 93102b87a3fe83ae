#include "qlio/manifold.hpp"

#include "test_util.hpp"

#include <Eigen/Eigenvalues>
#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

namespace qlio {
namespace {

using testing::random_spd;
using testing::random_state;
using testing::random_vec;
using testing::series_exp;

TEST(So3, ExpOfZeroIsIdentity) { EXPECT_TRUE(so3_exp(Vec3::Zero()).isIdentity(0.0)); }

TEST(So3, QuarterTurnAboutZ) {
  const Vec3 y = so3_exp(Vec3(0, 0, std::numbers::pi / 2)) * Vec3::UnitX();
  EXPECT_NEAR((y - Vec3::UnitY()).norm(), 0.0, 1e-15);
}

TEST(So3, ExpMatchesSeries) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> angle(1e-3, std::numbers::pi - 1e-3);
  for (int i = 0; i < 500; ++i) {
    const Vec3 w = random_vec(rng, 1.0).normalized() * angle(rng);
    const Mat3 r = so3_exp(w);
    EXPECT_LT((r - series_exp(skew(w), 30)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(r.determinant(), 1.0, 1e-12);
    EXPECT_LT((r * r.transpose() - Mat3::Identity()).norm(), 1e-12);
  }
}

TEST(So3, SmallAngleSeriesBranch) {
  const Vec3 w(3e-9, -2e-9, 1e-9);
  EXPECT_LT((so3_exp(w) - series_exp(skew(w))).cwiseAbs().maxCoeff(), 1e-16);
  EXPECT_LT((so3_log(so3_exp(w)) - w).norm(), 1e-20);
}

TEST(So3, LogOfIdentity) { EXPECT_EQ(so3_log(Mat3::Identity()), Vec3::Zero()); }

TEST(So3, LogRoundTrip) {
  const Vec3 w(0.1, -0.2, 0.3);
  EXPECT_LT((so3_log(so3_exp(w)) - w).norm(), 1e-10);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 500; ++i) {
    const Mat3 r = so3_exp(random_vec(rng, 1.8));
    EXPECT_LT((so3_exp(so3_log(r)) - r).norm(), 1e-9);
    EXPECT_LE(so3_log(r).norm(), std::numbers::pi + 1e-12);
  }
}

TEST(So3, LogAtHalfTurn) {
  const Mat3 r = series_exp(skew(Vec3(0, 0, std::numbers::pi)), 40);
  const Vec3 w = so3_log(r);
  EXPECT_NEAR(w.norm(), std::numbers::pi, 1e-9);
  EXPECT_NEAR(std::abs(w.z()), std::numbers::pi, 1e-9);
  EXPECT_LT((so3_exp(w) - r).norm(), 1e-9);
}

TEST(So3, LogRejectsNonOrthonormal) {
  Mat3 r = Mat3::Identity();
  r(0, 1) = 1e-3;
  EXPECT_THROW(so3_log(r), InvalidArgument);
}

TEST(So3, RightJacobianMatchesFiniteDifference) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    const Vec3 phi = random_vec(rng, 1.2);
    const Mat3 jr = so3_right_jacobian(phi);
    const double h = 1e-6;
    for (int k = 0; k < 3; ++k) {
      const Vec3 d = Vec3::Unit(k) * h;
      const Vec3 fd = (so3_log(so3_exp(phi).transpose() * so3_exp(phi + d)) -
                       so3_log(so3_exp(phi).transpose() * so3_exp(phi - d))) /
                      (2 * h);
      EXPECT_LT((fd - jr.col(k)).norm(), 1e-7);
    }
  }
}

TEST(Boxplus, ZeroIsIdentity) {
  std::mt19937_64 rng(1);
  const NavState x = random_state(rng);
  const NavState y = boxplus(x, ErrorState::Zero());
  EXPECT_EQ(y.rotation, x.rotation);
  EXPECT_EQ(y.position, x.position);
  EXPECT_EQ(y.gravity, x.gravity);
}

TEST(Boxplus, PurePositionShift) {
  std::mt19937_64 rng(2);
  const NavState x = random_state(rng);
  ErrorState dx = ErrorState::Zero();
  dx.segment<3>(block::kPos) = Vec3::UnitX();
  const NavState y = boxplus(x, dx);
  EXPECT_EQ(y.position, x.position + Vec3::UnitX());
  EXPECT_EQ(y.rotation, x.rotation);
  EXPECT_EQ(y.velocity, x.velocity);
  EXPECT_EQ(y.bias_gyro, x.bias_gyro);
  EXPECT_EQ(y.bias_accel, x.bias_accel);
  EXPECT_EQ(y.gravity, x.gravity);

  const ErrorState back = boxminus(y, x);
  EXPECT_LT((back - dx).norm(), 1e-12);
}

TEST(Boxplus, RotationIsRightMultiplied) {
  std::mt19937_64 rng(4);
  const NavState x = random_state(rng);
  ErrorState dx = ErrorState::Zero();
  dx.segment<3>(block::kRot) = Vec3(0.01, -0.02, 0.03);
  EXPECT_LT((boxplus(x, dx).rotation - x.rotation * so3_exp(Vec3(0.01, -0.02, 0.03))).norm(),
            1e-15);
}

TEST(Boxplus, RetractionPair) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 200; ++i) {
    const NavState x = random_state(rng);
    const NavState y = random_state(rng);
    EXPECT_LT(boxminus(x, x).norm(), 1e-15);
    const NavState z = boxplus(x, boxminus(y, x));
    EXPECT_LT((z.rotation - y.rotation).norm(), 1e-9);
    EXPECT_LT((z.position - y.position).norm(), 1e-9);
    EXPECT_LT((z.gravity - y.gravity).norm(), 1e-9);

    ErrorState dx;
    for (int k = 0; k < kStateDim; ++k) dx[k] = std::uniform_real_distribution<double>(-1, 1)(rng);
    EXPECT_LT((boxminus(boxplus(x, dx), x) - dx).norm(), 1e-9);
  }
}

std::vector<ImuSample> constant_segment(const Vec3& gyro, const Vec3& accel, double seconds,
                                        double rate) {
  std::vector<ImuSample> seg;
  const int n = static_cast<int>(std::lround(seconds * rate));
  for (int i = 0; i <= n; ++i) seg.push_back({to_microseconds(i / rate), gyro, accel});
  return seg;
}

TEST(Propagate, StationaryHover) {
  NavState x;
  x.rotation = so3_exp(Vec3(0.2, -0.1, 0.7));
  x.position = Vec3(1, 2, 3);
  const Vec3 accel = -(x.rotation.transpose() * x.gravity);
  const auto seg = constant_segment(Vec3::Zero(), accel, 1.0, 200.0);
  const Propagated p = propagate(x, Covariance::Identity() * 1e-4, seg, NoiseParams{});
  EXPECT_LT((p.state.position - x.position).norm(), 1e-9);
  EXPECT_LT(p.state.velocity.norm(), 1e-9);
}

TEST(Propagate, FreeFall) {
  NavState x;
  const auto seg = constant_segment(Vec3::Zero(), Vec3::Zero(), 0.1, 200.0);
  const Propagated p = propagate(x, Covariance::Zero(), seg, NoiseParams{});
  EXPECT_LT((p.state.velocity - x.gravity * 0.1).norm(), 1e-12);
  EXPECT_LT((p.state.position - 0.5 * x.gravity * 0.01).norm(), 1e-12);
}

TEST(Propagate, RejectsBadSegments) {
  NavState x;
  std::vector<ImuSample> one{{0, Vec3::Zero(), Vec3::Zero()}};
  EXPECT_THROW(propagate(x, Covariance::Zero(), one, NoiseParams{}), InvalidArgument);
  std::vector<ImuSample> back{{10, Vec3::Zero(), Vec3::Zero()}, {5, Vec3::Zero(), Vec3::Zero()}};
  EXPECT_THROW(propagate(x, Covariance::Zero(), back, NoiseParams{}), InvalidArgument);
  std::vector<ImuSample> gap{{0, Vec3::Zero(), Vec3::Zero()}, {60000, Vec3::Zero(), Vec3::Zero()}};
  EXPECT_THROW(propagate(x, Covariance::Zero(), gap, NoiseParams{}), InvalidArgument);
}

Vec3 profile_gyro(double t) {
  return {0.8 * std::sin(2 * t), 0.5 * std::cos(3 * t), 1.2 * std::sin(t)};
}
Vec3 profile_accel(double t) {
  return {1.5 * std::sin(4 * t), -std::cos(2 * t), 9.81 + 0.7 * std::sin(5 * t)};
}

// Fine-step oracle on the continuous profile: exact attitude over each
// substep, specific force evaluated at the substep midpoint.
NavState fine_integrate(NavState x, double seconds, double rate) {
  const int n = static_cast<int>(std::lround(seconds * rate));
  const double h = seconds / n;
  for (int s = 0; s < n; ++s) {
    const double tm = (s + 0.5) * h;
    const Vec3 w = profile_gyro(tm) - x.bias_gyro;
    const Vec3 a = profile_accel(tm) - x.bias_accel;
    const Vec3 a_mid = x.rotation * so3_exp(0.5 * h * w) * a + x.gravity;
    x.position += x.velocity * h + 0.5 * a_mid * h * h;
    x.velocity += a_mid * h;
    x.rotation = x.rotation * so3_exp(w * h);
  }
  return x;
}

TEST(Propagate, SinusoidalProfileMatchesFineStepOracle) {
  std::vector<ImuSample> seg;
  for (int i = 0; i <= 200; ++i) {
    const double t = i / 200.0;
    seg.push_back({to_microseconds(t), profile_gyro(t), profile_accel(t)});
  }
  NavState x;
  x.velocity = Vec3(0.5, -0.2, 0.1);
  x.bias_gyro = Vec3(0.01, 0.0, -0.01);
  x.bias_accel = Vec3(0.05, 0.02, 0.0);
  const Propagated p = propagate(x, Covariance::Zero(), seg, NoiseParams{});
  const NavState ref = fine_integrate(x, 1.0, 10000.0);
  EXPECT_LT((p.state.position - ref.position).norm(), 1e-5);
}

TEST(Propagate, StateJacobianMatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const NavState x = random_state(rng);
    const Vec3 gyro = random_vec(rng, 1.0);
    const Vec3 accel = Vec3(0, 0, 9.81) + random_vec(rng, 2.0);
    const double dt = 0.005;
    const StepJacobians j = step_jacobians(x, gyro, accel, dt);
    const NavState f0 = propagate_step(x, gyro, accel, dt);
    const double h = 1e-6;
    for (int k = 0; k < kStateDim; ++k) {
      const ErrorState e = ErrorState::Unit(k) * h;
      const ErrorState fd = (boxminus(propagate_step(boxplus(x, e), gyro, accel, dt), f0) -
                             boxminus(propagate_step(boxplus(x, -e), gyro, accel, dt), f0)) /
                            (2 * h);
      const double scale = std::max(1.0, j.state.col(k).norm());
      EXPECT_LT((fd - j.state.col(k)).norm() / scale, 1e-4) << "column " << k;
    }
  }
}

TEST(Propagate, NoiseJacobianMatchesFiniteDifferences) {
  std::mt19937_64 rng(22);
  const NavState x = random_state(rng);
  const Vec3 gyro = random_vec(rng, 1.0);
  const Vec3 accel = Vec3(0, 0, 9.81) + random_vec(rng, 2.0);
  const double dt = 0.005;
  const StepJacobians j = step_jacobians(x, gyro, accel, dt);
  const NavState f0 = propagate_step(x, gyro, accel, dt);
  const double h = 1e-6;
  for (int k = 0; k < 6; ++k) {
    const Vec3 d = Vec3::Unit(k % 3) * h;
    const bool g = k < 3;
    const ErrorState plus =
        boxminus(propagate_step(x, g ? gyro + d : gyro, g ? accel : accel + d, dt), f0);
    const ErrorState minus =
        boxminus(propagate_step(x, g ? gyro - d : gyro, g ? accel : accel - d, dt), f0);
    // Measurement noise enters with the sign of the bias it adds to.
    const ErrorState fd = -(plus - minus) / (2 * h);
    EXPECT_LT((fd - j.noise.col(k)).norm() / std::max(1e-12, j.noise.col(k).norm()), 1e-4);
  }
}

TEST(Propagate, CovarianceStaysSymmetricPsd) {
  std::mt19937_64 rng(8);
  NavState x = random_state(rng);
  Covariance p = random_spd(rng, 1e-3);
  NoiseParams noise;
  for (int step = 0; step < 1000; ++step) {
    std::vector<ImuSample> seg{{0, random_vec(rng, 1.0), Vec3(0, 0, 9.81) + random_vec(rng, 1.0)},
                               {5000, Vec3::Zero(), Vec3::Zero()}};
    const Propagated out = propagate(x, p, seg, noise);
    x = out.state;
    p = out.covariance;
    ASSERT_LT((p - p.transpose()).cwiseAbs().maxCoeff(), 1e-9);
    const Eigen::SelfAdjointEigenSolver<Covariance> eig(p, Eigen::EigenvaluesOnly);
    ASSERT_GE(eig.eigenvalues().minCoeff(), -1e-9);
  }
}

TEST(Se3, ExpLogRoundTrip) {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 100; ++i) {
    Twist xi;
    xi << random_vec(rng, 2.0), random_vec(rng, 1.5);
    const Twist back = se3_log(se3_exp(xi));
    EXPECT_LT((back - xi).norm(), 1e-9);
  }
  Twist t = Twist::Zero();
  t.head<3>() = Vec3(1, 0, 0);
  EXPECT_LT((se3_exp(0.5 * t).translation - Vec3(0.5, 0, 0)).norm(), 1e-15);
}

TEST(NoiseParams, RejectsNegativeDensities) {
  NoiseParams n;
  n.accel_noise = -1.0;
  EXPECT_THROW(n.validate(), InvalidArgument);
}

}  // namespace
}  // namespace qlio
