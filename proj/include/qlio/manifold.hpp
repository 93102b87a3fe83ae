#pragma once

#include "qlio/common.hpp"

#include <Eigen/Core>

#include <span>

namespace qlio {

inline constexpr int kStateDim = 18;
inline constexpr int kNoiseDim = 12;

/// Block offsets inside ErrorState / Covariance.
namespace block {
inline constexpr int kRot = 0;
inline constexpr int kPos = 3;
inline constexpr int kVel = 6;
inline constexpr int kBiasGyro = 9;
inline constexpr int kBiasAccel = 12;
inline constexpr int kGravity = 15;
}  // namespace block

using ErrorState = Eigen::Matrix<double, kStateDim, 1>;
using Covariance = Eigen::Matrix<double, kStateDim, kStateDim>;
using StateJacobian = Eigen::Matrix<double, kStateDim, kStateDim>;
using NoiseJacobian = Eigen::Matrix<double, kStateDim, kNoiseDim>;
using NoiseCovariance = Eigen::Matrix<double, kNoiseDim, kNoiseDim>;

/// Full navigation state. `rotation` maps body (IMU) vectors into the world frame.
struct NavState {
  Mat3 rotation = Mat3::Identity();
  Vec3 position = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
  Vec3 bias_gyro = Vec3::Zero();
  Vec3 bias_accel = Vec3::Zero();
  Vec3 gravity{0.0, 0.0, -9.81};

  Pose pose() const { return {rotation, position}; }
  bool is_finite() const;
};

struct ImuSample {
  TimestampUs timestamp_us = 0;
  Vec3 gyro = Vec3::Zero();   // rad/s
  Vec3 accel = Vec3::Zero();  // m/s^2, specific force
};

/// Continuous-time noise spectral densities (per sqrt(Hz)).
struct NoiseParams {
  double gyro_noise = 1e-3;
  double accel_noise = 1e-2;
  double gyro_bias_walk = 1e-5;
  double accel_bias_walk = 1e-4;

  void validate() const;
};

Mat3 skew(const Vec3& v);

/// Rodrigues exponential; falls back to the second-order series near zero.
Mat3 so3_exp(const Vec3& omega);

/// Principal logarithm, |result| <= pi. Throws InvalidArgument when `rotation`
/// deviates from SO(3) by more than 1e-6 in Frobenius norm.
Vec3 so3_log(const Mat3& rotation);

/// Right Jacobian J_r(phi) of SO(3): Exp(phi + d) ~= Exp(phi) Exp(J_r(phi) d).
Mat3 so3_right_jacobian(const Vec3& phi);
Mat3 so3_left_jacobian(const Vec3& phi);

/// Projects a nearly orthonormal matrix back onto SO(3).
Mat3 orthonormalize(const Mat3& m);

NavState boxplus(const NavState& x, const ErrorState& dx);
ErrorState boxminus(const NavState& x1, const NavState& x0);

/// One zero-order-hold step of the kinematics with zero noise.
NavState propagate_step(const NavState& x, const Vec3& gyro, const Vec3& accel, double dt);

struct StepJacobians {
  StateJacobian state;  // F_x
  NoiseJacobian noise;  // F_w, noise ordered (n_g, n_a, n_bg, n_ba)
};

/// Jacobians of `propagate_step` with respect to the error state and the
/// discrete noise, both expressed through boxplus/boxminus.
StepJacobians step_jacobians(const NavState& x, const Vec3& gyro, const Vec3& accel, double dt);

/// Discrete noise covariance Q_i for a step of length dt.
NoiseCovariance discrete_noise(const NoiseParams& noise, double dt);

struct Propagated {
  NavState state;
  Covariance covariance;
};

inline constexpr double kMaxPropagationStep = 0.05;

/// Integrates a time-ordered IMU segment. The mean follows a cubic
/// interpolant of the samples; the covariance takes one step per interval.


/// Throws InvalidArgument for fewer than two samples, non-increasing
/// timestamps, or a step longer than 50 ms.
Propagated propagate(const NavState& x, const Covariance& covariance,
                     std::span<const ImuSample> segment, const NoiseParams& noise);

void symmetrize(Covariance& p);

using Twist = Eigen::Matrix<double, 6, 1>;  // (rho, phi)

/// SE(3) exponential with the rotation acting first: t = J_l(phi) rho.
Pose se3_exp(const Twist& xi);
Twist se3_log(const Pose& pose);

}  // namespace qlio
