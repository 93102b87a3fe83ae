#pragma once

#include "qlio/common.hpp"
#include "qlio/manifold.hpp"
#include "qlio/quantizer.hpp"
#include "qlio/wire.hpp"

#include <optional>
#include <span>
#include <vector>

namespace qlio {

/// Q(x) = P[N(0,1) > x]; Q(-inf) = 1, Q(+inf) = 0.
double gaussian_tail(double x);
/// ln Q(x), accurate far into the upper tail.
double log_gaussian_tail(double x);
/// Q(x) / phi(x).
double mills_ratio(double x);

/// Residual bounds [lower, upper] and noise std. `upper` may be +inf and
/// `lower` may be -inf.
struct QuantInterval {
  double lower = 0.0;
  double upper = 0.0;
  double sigma = 1.0;
};

/// Standardized truncation moments: lambda is the score and omega the
/// information (in units of 1/sigma and 1/sigma^2) of ln P(shift) at zero.
struct TruncationMoments {
  double lambda = 0.0;
  double omega = 0.0;
  double log_probability = 0.0;
};

/// Throws InvalidArgument unless lower < upper and sigma > 0.
TruncationMoments truncation_moments(const QuantInterval& iv);

struct EffectiveMeasurement {
  double z = 0.0;         // z'
  double variance = 0.0;  // R'
};

inline constexpr double kMinIntervalProbability = 1e-300;

/// Gaussian surrogate 0.5 (h + z')^2 / R' of the interval likelihood.
/// nullopt when the interval probability is below 1e-300 or carries no
/// information.
std::optional<EffectiveMeasurement> effective_measurement(const QuantInterval& iv);

using HRow = Eigen::Matrix<double, 1, kStateDim>;

/// Row of d(u . (R (R_IL p + t_IL) + t)) / d(error state).
HRow jacobian_point_plane(const NavState& x, const Vec3& p_lidar, const Vec3& normal,
                          const Pose& imu_from_lidar);

struct ScalarObservation {
  HRow h = HRow::Zero();  // only the first six entries may be nonzero
  double z = 0.0;
  double variance = 1.0;
};

struct UpdateResult {
  NavState state;
  Covariance covariance;
  std::size_t used = 0;
  std::size_t rejected = 0;  // numerically vacuous intervals
  bool vacuous = false;      // nothing usable: state returned unchanged
};

/// One-pass MAP update: K = (H^T R^-1 H + P^-1)^-1 H^T R^-1,
/// x = x (+) (-K z), P = (I - K H) P. Throws NumericalError when P has an
/// eigenvalue below -1e-9.
UpdateResult kalman_update(const NavState& x, const Covariance& p,
                           std::span<const ScalarObservation> obs);

UpdateResult qmap_update(const NavState& x, const Covariance& p,
                         const ObservationGroupSet& groups, const Codebook& cb, double sigma,
                         const Pose& imu_from_lidar);

/// Same update with unquantized observations and R = sigma^2.
UpdateResult float_update(const NavState& x, const Covariance& p,
                          std::span<const wire::FloatObservation> obs, double sigma,
                          const Pose& imu_from_lidar);

}  // namespace qlio
