#include "qlio/qmap.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <cmath>
#include <limits>
#include <numbers>

namespace qlio {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kTailSwitch = 5.0;

double normal_pdf(double x) {
  if (std::isinf(x)) return 0.0;
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

// x * phi(x) with the infinite limits taken.
double x_pdf(double x) { return std::isinf(x) ? 0.0 : x * normal_pdf(x); }

}  // namespace

double gaussian_tail(double x) {
  if (x == kInf) return 0.0;
  if (x == -kInf) return 1.0;
  return 0.5 * std::erfc(x / std::numbers::sqrt2);
}

double mills_ratio(double x) {
  if (x == kInf) return 0.0;
  if (x < kTailSwitch) return gaussian_tail(x) / normal_pdf(x);
  // Continued fraction 1 / (x + 1/(x + 2/(x + 3/(x + ...)))).
  double t = x;
  for (int k = 120; k >= 1; --k) t = x + k / t;
  return 1.0 / t;
}

double log_gaussian_tail(double x) {
  if (x == kInf) return -kInf;
  if (x == -kInf) return 0.0;
  if (x > 8.0) {
    return -0.5 * x * x - 0.5 * std::log(2.0 * std::numbers::pi) + std::log(mills_ratio(x));
  }
  return std::log(gaussian_tail(x));
}

TruncationMoments truncation_moments(const QuantInterval& iv) {
  if (!(iv.sigma > 0.0) || std::isnan(iv.lower) || std::isnan(iv.upper) ||
      !(iv.lower < iv.upper)) {
    throw InvalidArgument("quantization interval needs lower < upper and sigma > 0");
  }
  double a = -iv.upper / iv.sigma;
  double b = -iv.lower / iv.sigma;
  TruncationMoments m;
  if (a == -kInf && b == kInf) return m;  // whole line: no information

  // Work on the side where the interval mass is upper-tail-like; the
  // score flips sign under reflection, the information does not.
  double sign = 1.0;
  if (a + b < 0.0) {
    const double t = a;
    a = -b;
    b = -t;
    sign = -1.0;
  }

  if (a < kTailSwitch) {
    const double p = gaussian_tail(a) - gaussian_tail(b);
    m.log_probability = std::log(p);
    m.lambda = (normal_pdf(a) - normal_pdf(b)) / p;
    m.omega = m.lambda * m.lambda + (x_pdf(b) - x_pdf(a)) / p;
  } else {
    // P = phi(a) (M(a) - r M(b)) with r = phi(b) / phi(a).
    const double r = b == kInf ? 0.0 : std::exp(-0.5 * (b - a) * (b + a));
    const double one_minus_r = b == kInf ? 1.0 : -std::expm1(-0.5 * (b - a) * (b + a));
    const double d = mills_ratio(a) - r * mills_ratio(b);
    const double br = b == kInf ? 0.0 : b * r;
    m.log_probability = -0.5 * a * a - 0.5 * std::log(2.0 * std::numbers::pi) + std::log(d);
    m.lambda = one_minus_r / d;
    m.omega = m.lambda * m.lambda + (br - a) / d;
  }
  m.lambda *= sign;
  return m;
}

std::optional<EffectiveMeasurement> effective_measurement(const QuantInterval& iv) {
  const TruncationMoments m = truncation_moments(iv);
  if (!(m.log_probability >= std::log(kMinIntervalProbability))) return std::nullopt;
  if (!(m.omega > 0.0) || !std::isfinite(m.omega) || !std::isfinite(m.lambda)) {
    return std::nullopt;
  }
  EffectiveMeasurement e;
  e.variance = iv.sigma * iv.sigma / m.omega;
  e.z = -iv.sigma * m.lambda / m.omega;
  // An information too small for double leaves nothing to fuse.
  if (!std::isfinite(e.variance) || !std::isfinite(e.z)) return std::nullopt;
  return e;
}

HRow jacobian_point_plane(const NavState& x, const Vec3& p_lidar, const Vec3& normal,
                          const Pose& imu_from_lidar) {
  const Vec3 p_imu = imu_from_lidar * p_lidar;
  HRow h = HRow::Zero();
  h.segment<3>(block::kRot) = -normal.transpose() * x.rotation * skew(p_imu);
  h.segment<3>(block::kPos) = normal.transpose();
  return h;
}

UpdateResult kalman_update(const NavState& x, const Covariance& p,
                           std::span<const ScalarObservation> obs) {
  const Eigen::SelfAdjointEigenSolver<Covariance> eig(p, Eigen::EigenvaluesOnly);
  if (!(eig.eigenvalues().minCoeff() >= -1e-9)) {
    throw NumericalError("prior covariance is not positive semidefinite (min eigenvalue " +
                         std::to_string(eig.eigenvalues().minCoeff()) + ")");
  }
  UpdateResult out{x, p, obs.size(), 0, obs.empty()};
  if (obs.empty()) return out;

  using Mat6 = Eigen::Matrix<double, 6, 6>;
  using Vec6 = Eigen::Matrix<double, 6, 1>;
  Mat6 info = Mat6::Zero();
  Vec6 score = Vec6::Zero();
  for (const ScalarObservation& o : obs) {
    const Vec6 h = o.h.head<6>().transpose();
    info.noalias() += h * h.transpose() / o.variance;
    score.noalias() += h * (o.z / o.variance);
  }

  // Woodbury form of (P^-1 + H^T R^-1 H)^-1 restricted to the six observed
  // columns; P itself is never inverted.
  const Mat6 p66 = p.topLeftCorner<6, 6>();
  const Mat6 s = Mat6::Identity() + p66 * info;
  Mat6 gain_core = info * s.inverse();
  gain_core = 0.5 * (gain_core + gain_core.transpose()).eval();
  const Eigen::Matrix<double, kStateDim, 6> pe = p.leftCols<6>();
  out.covariance = p - pe * gain_core * pe.transpose();
  symmetrize(out.covariance);
  const ErrorState dx = -(out.covariance.leftCols<6>() * score);
  out.state = boxplus(x, dx);
  return out;
}

UpdateResult qmap_update(const NavState& x, const Covariance& p,
                         const ObservationGroupSet& groups, const Codebook& cb, double sigma,
                         const Pose& imu_from_lidar) {
  cb.validate();
  std::vector<ScalarObservation> obs;
  obs.reserve(member_count(groups));
  std::size_t rejected = 0;
  for (const ObservationGroup& g : groups) {
    const Vec3 n = dequantize_residual_vector(g.key, cb);
    const Vec3 u = n.normalized();
    for (const GroupMember& m : g.members) {
      if (m.z_index >> cb.l_z != 0) {
        throw ProtocolError("z index exceeds the codebook range");
      }
      const QuantizedZ qz = dequantize_z(m.z_index, cb);
      const auto eff = effective_measurement({qz.lower, qz.upper, sigma});
      if (!eff) {
        ++rejected;
        continue;
      }
      const Vec3 point = dequantize_point(m.point, cb);
      obs.push_back({jacobian_point_plane(x, point, u, imu_from_lidar), eff->z, eff->variance});
    }
  }
  UpdateResult out = kalman_update(x, p, obs);
  out.rejected = rejected;
  return out;
}

UpdateResult float_update(const NavState& x, const Covariance& p,
                          std::span<const wire::FloatObservation> obs, double sigma,
                          const Pose& imu_from_lidar) {
  if (!(sigma > 0.0)) throw InvalidArgument("float_update: sigma must be positive");
  std::vector<ScalarObservation> rows;
  rows.reserve(obs.size());
  for (const auto& o : obs) {
    const Vec3 u = o.normal.cast<double>().normalized();
    rows.push_back({jacobian_point_plane(x, o.point.cast<double>(), u, imu_from_lidar),
                    static_cast<double>(o.z), sigma * sigma});
  }
  return kalman_update(x, p, rows);
}

}  // namespace qlio
