#include "qlio/manifold.hpp"

#include <Eigen/Geometry>
#include <Eigen/LU>
#include <Eigen/SVD>

#include <string>

namespace qlio {

namespace {

constexpr double kSmallAngle = 1e-8;

}  // namespace

bool NavState::is_finite() const {
  return rotation.allFinite() && position.allFinite() && velocity.allFinite() &&
         bias_gyro.allFinite() && bias_accel.allFinite() && gravity.allFinite();
}

void NoiseParams::validate() const {
  if (!(gyro_noise >= 0.0 && accel_noise >= 0.0 && gyro_bias_walk >= 0.0 &&
        accel_bias_walk >= 0.0)) {
    throw InvalidArgument("noise densities must be nonnegative");
  }
}

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

Mat3 so3_exp(const Vec3& omega) {
  const double theta = omega.norm();
  const Mat3 k = skew(omega);
  if (theta < kSmallAngle) {
    return Mat3::Identity() + k + 0.5 * k * k;
  }
  const double s = std::sin(theta) / theta;
  const double c = (1.0 - std::cos(theta)) / (theta * theta);
  return Mat3::Identity() + s * k + c * k * k;
}

Vec3 so3_log(const Mat3& rotation) {
  const double deviation = (rotation.transpose() * rotation - Mat3::Identity()).norm();
  if (!(deviation <= 1e-6) || rotation.determinant() < 0.0) {
    throw InvalidArgument("so3_log: matrix is not a rotation (orthonormality deviation " +
                          std::to_string(deviation) + ")");
  }
  // The quaternion route stays well conditioned at both 0 and pi.
  const Eigen::AngleAxisd aa{Quat(rotation).normalized()};
  return aa.angle() * aa.axis();
}

Mat3 so3_right_jacobian(const Vec3& phi) {
  const double theta = phi.norm();
  const Mat3 k = skew(phi);
  if (theta < 1e-5) {
    return Mat3::Identity() - 0.5 * k + (1.0 / 6.0) * k * k;
  }
  const double t2 = theta * theta;
  return Mat3::Identity() - (1.0 - std::cos(theta)) / t2 * k +
         (theta - std::sin(theta)) / (t2 * theta) * k * k;
}

Mat3 so3_left_jacobian(const Vec3& phi) { return so3_right_jacobian(-phi); }

Mat3 orthonormalize(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0.0) {
    Mat3 u = svd.matrixU();
    u.col(2) *= -1.0;
    r = u * svd.matrixV().transpose();
  }
  return r;
}

NavState boxplus(const NavState& x, const ErrorState& dx) {
  NavState out = x;
  out.rotation = x.rotation * so3_exp(dx.segment<3>(block::kRot));
  out.position += dx.segment<3>(block::kPos);
  out.velocity += dx.segment<3>(block::kVel);
  out.bias_gyro += dx.segment<3>(block::kBiasGyro);
  out.bias_accel += dx.segment<3>(block::kBiasAccel);
  out.gravity += dx.segment<3>(block::kGravity);
  return out;
}

ErrorState boxminus(const NavState& x1, const NavState& x0) {
  ErrorState dx;
  dx.segment<3>(block::kRot) = so3_log(x0.rotation.transpose() * x1.rotation);
  dx.segment<3>(block::kPos) = x1.position - x0.position;
  dx.segment<3>(block::kVel) = x1.velocity - x0.velocity;
  dx.segment<3>(block::kBiasGyro) = x1.bias_gyro - x0.bias_gyro;
  dx.segment<3>(block::kBiasAccel) = x1.bias_accel - x0.bias_accel;
  dx.segment<3>(block::kGravity) = x1.gravity - x0.gravity;
  return dx;
}

namespace {

// Integrals of the attitude over one hold interval, phi = w dt:
//   gamma1 = int_0^1 Exp(s phi) ds          (the left Jacobian)
//   gamma2 = int_0^1 (1 - s) Exp(s phi) ds
Mat3 gamma2(const Vec3& phi) {
  const double theta = phi.norm();
  const Mat3 k = skew(phi);
  if (theta < 1e-4) {
    return 0.5 * Mat3::Identity() + k / 6.0 + k * k / 24.0;
  }
  const double t2 = theta * theta;
  return 0.5 * Mat3::Identity() + (theta - std::sin(theta)) / (t2 * theta) * k +
         (0.5 * t2 + std::cos(theta) - 1.0) / (t2 * t2) * k * k;
}

// d/dphi of int_0^1 weight(s) Exp(s phi) a ds, by 4-point Gauss-Legendre.
template <typename Weight>
Mat3 attitude_integral_derivative(const Vec3& phi, const Vec3& a, Weight weight) {
  static constexpr double kNodes[4] = {0.0694318442029737, 0.3300094782075719,
                                       0.6699905217924281, 0.9305681557970263};
  static constexpr double kWeights[4] = {0.1739274225687269, 0.3260725774312731,
                                         0.3260725774312731, 0.1739274225687269};
  Mat3 d = Mat3::Zero();
  for (int q = 0; q < 4; ++q) {
    const double s = kNodes[q];
    d -= kWeights[q] * weight(s) * s * so3_exp(s * phi) * skew(a) * so3_right_jacobian(s * phi);
  }
  return d;
}

}  // namespace

// Exact for inputs held constant over dt.
NavState propagate_step(const NavState& x, const Vec3& gyro, const Vec3& accel, double dt) {
  const Vec3 phi = (gyro - x.bias_gyro) * dt;
  const Vec3 a_body = accel - x.bias_accel;

  NavState out = x;
  out.rotation = x.rotation * so3_exp(phi);
  out.position = x.position + x.velocity * dt +
                 (x.rotation * (gamma2(phi) * a_body) + 0.5 * x.gravity) * dt * dt;
  out.velocity = x.velocity + (x.rotation * (so3_left_jacobian(phi) * a_body) + x.gravity) * dt;
  return out;
}

StepJacobians step_jacobians(const NavState& x, const Vec3& gyro, const Vec3& accel, double dt) {
  using namespace block;
  const Vec3 phi = (gyro - x.bias_gyro) * dt;
  const Vec3 a_body = accel - x.bias_accel;
  const Mat3 g1 = so3_left_jacobian(phi);
  const Mat3 g2 = gamma2(phi);
  const Mat3& r = x.rotation;
  const Mat3 i3 = Mat3::Identity();
  const double dt2 = dt * dt;

  // Sensitivities to the bias-corrected rate.
  const Mat3 d_rot = -so3_right_jacobian(phi) * dt;
  const Mat3 d_vel = -r * attitude_integral_derivative(phi, a_body, [](double) { return 1.0; }) * dt2;
  const Mat3 d_pos =
      -r * attitude_integral_derivative(phi, a_body, [](double s) { return 1.0 - s; }) * dt2 * dt;

  StepJacobians j;
  j.state.setIdentity();
  j.state.block<3, 3>(kRot, kRot) = so3_exp(phi).transpose();
  j.state.block<3, 3>(kRot, kBiasGyro) = d_rot;

  j.state.block<3, 3>(kPos, kRot) = -r * skew(g2 * a_body) * dt2;
  j.state.block<3, 3>(kPos, kVel) = i3 * dt;
  j.state.block<3, 3>(kPos, kBiasGyro) = d_pos;
  j.state.block<3, 3>(kPos, kBiasAccel) = -r * g2 * dt2;
  j.state.block<3, 3>(kPos, kGravity) = 0.5 * i3 * dt2;

  j.state.block<3, 3>(kVel, kRot) = -r * skew(g1 * a_body) * dt;
  j.state.block<3, 3>(kVel, kBiasGyro) = d_vel;
  j.state.block<3, 3>(kVel, kBiasAccel) = -r * g1 * dt;
  j.state.block<3, 3>(kVel, kGravity) = i3 * dt;

  // Measurement noise enters exactly like the biases it corrupts.
  j.noise.setZero();
  j.noise.block<3, 3>(kRot, 0) = d_rot;
  j.noise.block<3, 3>(kPos, 0) = d_pos;
  j.noise.block<3, 3>(kVel, 0) = d_vel;
  j.noise.block<3, 3>(kPos, 3) = -r * g2 * dt2;
  j.noise.block<3, 3>(kVel, 3) = -r * g1 * dt;
  j.noise.block<3, 3>(kBiasGyro, 6) = i3 * dt;
  j.noise.block<3, 3>(kBiasAccel, 9) = i3 * dt;
  return j;
}

NoiseCovariance discrete_noise(const NoiseParams& noise, double dt) {
  NoiseCovariance q = NoiseCovariance::Zero();
  const auto density = [dt](double sigma) { return sigma * sigma / dt; };
  q.diagonal().segment<3>(0).setConstant(density(noise.gyro_noise));
  q.diagonal().segment<3>(3).setConstant(density(noise.accel_noise));
  q.diagonal().segment<3>(6).setConstant(density(noise.gyro_bias_walk));
  q.diagonal().segment<3>(9).setConstant(density(noise.accel_bias_walk));
  return q;
}

void symmetrize(Covariance& p) { p = 0.5 * (p + p.transpose()).eval(); }

Pose se3_exp(const Twist& xi) {
  const Vec3 rho = xi.head<3>();
  const Vec3 phi = xi.tail<3>();
  return {so3_exp(phi), so3_left_jacobian(phi) * rho};
}

Twist se3_log(const Pose& pose) {
  const Vec3 phi = so3_log(pose.rotation);
  Twist xi;
  xi.head<3>() = so3_left_jacobian(phi).inverse() * pose.translation;
  xi.tail<3>() = phi;
  return xi;
}

namespace {

// Mean input over [t_i, t_{i+1}]: cubic through four equally spaced samples
// where both neighbours exist, trapezoid otherwise.
// Input interpolant over interval i at fraction s in [0, 1]: cubic through
// the two neighbouring samples when they exist, linear otherwise.
std::pair<Vec3, Vec3> input_at(std::span<const ImuSample> seg, std::size_t i, double s) {
  const double t = static_cast<double>(seg[i].timestamp_us) +
                   s * static_cast<double>(seg[i + 1].timestamp_us - seg[i].timestamp_us);
  const std::size_t lo = i > 0 && i + 2 < seg.size() ? i - 1 : i;
  const std::size_t hi = lo == i ? i + 1 : i + 2;
  Vec3 gyro = Vec3::Zero();
  Vec3 accel = Vec3::Zero();
  for (std::size_t k = lo; k <= hi; ++k) {
    double w = 1.0;
    for (std::size_t m = lo; m <= hi; ++m) {
      if (m == k) continue;
      const auto tm = static_cast<double>(seg[m].timestamp_us);
      w *= (t - tm) / (static_cast<double>(seg[k].timestamp_us) - tm);
    }
    gyro += w * seg[k].gyro;
    accel += w * seg[k].accel;
  }
  return {gyro, accel};
}

// Mean input over [s0, s1] of interval i, exact for the cubic interpolant.
std::pair<Vec3, Vec3> mean_input(std::span<const ImuSample> seg, std::size_t i, double s0,
                                 double s1) {
  const double c = 0.5 * (s0 + s1);
  const double r = 0.5 * (s1 - s0) / std::sqrt(3.0);
  const auto [g0, a0] = input_at(seg, i, c - r);
  const auto [g1, a1] = input_at(seg, i, c + r);
  return {0.5 * (g0 + g1), 0.5 * (a0 + a1)};
}

constexpr int kSubsteps = 4;

}  // namespace

Propagated propagate(const NavState& x, const Covariance& covariance,
                     std::span<const ImuSample> segment, const NoiseParams& noise) {
  if (segment.size() < 2) {
    throw InvalidArgument("propagate: empty IMU segment");
  }
  noise.validate();
  for (std::size_t i = 1; i < segment.size(); ++i) {
    if (segment[i].timestamp_us <= segment[i - 1].timestamp_us) {
      throw InvalidArgument("propagate: IMU timestamps are not strictly increasing");
    }
    if (to_seconds(segment[i].timestamp_us - segment[i - 1].timestamp_us) >
        kMaxPropagationStep + 1e-12) {
      throw InvalidArgument("propagate: IMU step exceeds 50 ms");
    }
  }

  Propagated out{x, covariance};
  for (std::size_t i = 0; i + 1 < segment.size(); ++i) {
    const double dt = to_seconds(segment[i + 1].timestamp_us - segment[i].timestamp_us);
    const auto [gyro, accel] = mean_input(segment, i, 0.0, 1.0);
    const StepJacobians j = step_jacobians(out.state, gyro, accel, dt);
    out.covariance = j.state * out.covariance * j.state.transpose() +
                     j.noise * discrete_noise(noise, dt) * j.noise.transpose();
    symmetrize(out.covariance);
    // The mean follows the interpolated input more closely than one hold.
    for (int k = 0; k < kSubsteps; ++k) {
      const auto [g, a] = mean_input(segment, i, double(k) / kSubsteps, double(k + 1) / kSubsteps);
      out.state = propagate_step(out.state, g, a, dt / kSubsteps);
    }
  }
  out.state.rotation = orthonormalize(out.state.rotation);
  return out;
}

}  // namespace qlio
