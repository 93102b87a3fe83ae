#pragma once

#include "qlio/common.hpp"
#include "qlio/quantizer.hpp"
#include "qlio/transport.hpp"
#include "qlio/voxel_map.hpp"
#include "qlio/wire.hpp"

#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace qlio {

struct PlaneObservation {
  Vec3 world = Vec3::Zero();     // ^G p
  Vec3 lidar = Vec3::Zero();     // ^L p, end-of-scan frame
  Vec3 normal = Vec3::UnitZ();   // u, oriented so that z >= 0
  double offset = 0.0;           // d, normal . q + d = 0 on the plane
  Vec3 residual = Vec3::Zero();  // n = z u
  double z = 0.0;
};

/// Maps every point to the LiDAR frame at t_curr. `delta` is the body motion
/// over the scan (end-of-scan body <- start-of-scan body); the pose at each
/// point's time comes from constant-twist interpolation. Throws
/// InvalidArgument for timestamps outside [t_prev, t_curr].
std::vector<Vec3> undistort(std::span<const ScanPoint> points, TimestampUs t_prev,
                            TimestampUs t_curr, const Pose& delta, const Pose& imu_from_lidar);

/// Indices of the points kept by a voxel grid of the given edge: per voxel,
/// the point nearest the voxel center (lower index on ties). Ascending order.
std::vector<std::size_t> voxel_downsample(std::span<const Vec3> points, double edge);

struct AssociationStats {
  std::size_t attempted = 0;
  std::size_t out_of_range = 0;  // a coordinate beyond r_max
  std::size_t sparse = 0;        // fewer than 5 neighbors within the search radius
  std::size_t no_plane = 0;      // plane fit rejected
  std::size_t gated = 0;         // z >= r_thr
  std::size_t accepted = 0;
};

struct Association {
  std::vector<PlaneObservation> observations;
  AssociationStats stats;
};

/// Point-to-plane association of end-of-scan LiDAR points against the map.
Association associate(std::span<const Vec3> lidar_points, const Pose& world_from_lidar,
                      const VoxelMap& map, const Codebook& cb,
                      double plane_threshold = kPlaneFitThreshold);

/// ds_k = ds_0 + alpha * mean range.
double bucket_cell_size(double ds_0, double alpha, double mean_range);

struct BucketStat {
  RqKey key = 0;
  double cell_size = 0.0;
  std::size_t before = 0;
  std::size_t after = 0;
};

struct Resampled {
  std::vector<PlaneObservation> observations;  // ordered by key, then input order
  std::vector<BucketStat> buckets;             // ascending key
};

Resampled rq_resample(std::span<const PlaneObservation> obs, const Codebook& cb, double ds_0,
                      double alpha);

ObservationGroupSet build_groups(std::span<const PlaneObservation> obs, const Codebook& cb);

enum class ObservationEncoding { kGroups, kFloat };

struct CoprocessorOptions {
  ObservationEncoding encoding = ObservationEncoding::kGroups;
  bool rq_resample = true;
  bool int8_scan = false;  // min/max INT8 round trip of raw scans
  double plane_threshold = kPlaneFitThreshold;
  VoxelMapParams map;
};

struct ScanReport {
  TimestampUs t_curr = 0;
  std::size_t raw_points = 0;
  std::size_t downsampled = 0;
  AssociationStats association;
  std::size_t transmitted = 0;  // measurements in the observation frame
  std::size_t groups = 0;
  std::size_t payload_bytes = 0;
  std::size_t payload_bits = 0;    // payload bytes * 8 minus padding
  std::size_t bitstream_bits = 0;  // group headers and members only
  double undistort_ms = 0.0;
  double associate_ms = 0.0;
  double encode_ms = 0.0;
  double map_ms = 0.0;
};

/// The LiDAR-side component. Owns the map; all calls come from one task.
class Coprocessor {
 public:
  explicit Coprocessor(CoprocessorOptions options = {});

  void configure(const wire::ConfigPayload& config);
  /// Stores the scan and returns its POSE_REQ frame.
  wire::Frame request(Scan scan);
  /// Handles POSE_RESP for the pending scan; returns the observation frame.
  wire::Frame observe(const wire::Frame& pose_response);
  /// Handles STATE_UPDATE: inserts the scan into the map at the posterior pose.
  void commit(const wire::Frame& state_update);

  const std::vector<ScanReport>& reports() const { return reports_; }
  const VoxelMap& map() const { return map_; }
  const wire::ConfigPayload& config() const { return config_; }
  /// Groups encoded for the most recent scan (empty in float mode).
  const ObservationGroupSet& last_groups() const { return last_groups_; }

 private:
  CoprocessorOptions options_;
  wire::ConfigPayload config_;
  bool configured_ = false;
  VoxelMap map_;
  std::optional<Scan> pending_;
  std::vector<Vec3> pending_points_;  // downsampled, end-of-scan LiDAR frame
  ObservationGroupSet last_groups_;
  std::vector<ScanReport> reports_;
};

/// Runs the coprocessor side of a session until `next_scan` is exhausted,
/// then closes the endpoint.
void run_coprocessor(transport::Endpoint& endpoint, Coprocessor& coprocessor,
                     const std::function<std::optional<Scan>()>& next_scan);

}  // namespace qlio
