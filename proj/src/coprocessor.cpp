#include "qlio/coprocessor.hpp"

#include "qlio/manifold.hpp"
#include "qlio/session.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <map>
#include <tuple>
#include <string>
#include <unordered_map>

namespace qlio {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

struct CellHash {
  std::size_t operator()(const std::array<std::int64_t, 3>& c) const noexcept {
    return static_cast<std::size_t>(static_cast<std::uint64_t>(c[0]) * 73856093ULL ^
                                    static_cast<std::uint64_t>(c[1]) * 19349663ULL ^
                                    static_cast<std::uint64_t>(c[2]) * 83492791ULL);
  }
};

bool in_codebook_range(const Vec3& p, const Codebook& cb) {
  return (p.array().abs() < cb.r_max).all();
}

}  // namespace

std::vector<Vec3> undistort(std::span<const ScanPoint> points, TimestampUs t_prev,
                            TimestampUs t_curr, const Pose& delta, const Pose& imu_from_lidar) {
  if (t_curr <= t_prev) {
    throw InvalidArgument("undistort: empty scan window");
  }
  for (const ScanPoint& sp : points) {
    if (sp.t_us < t_prev || sp.t_us > t_curr) {
      throw InvalidArgument("undistort: point timestamp " + std::to_string(sp.t_us) +
                            " outside the scan window");
    }
  }
  std::vector<Vec3> out;
  out.reserve(points.size());
  if (delta.rotation == Mat3::Identity() && delta.translation.isZero(0.0)) {
    for (const ScanPoint& sp : points) out.push_back(sp.point);
    return out;
  }
  const Twist xi = se3_log(delta);
  const Pose lidar_from_imu = imu_from_lidar.inverse();
  const double span = static_cast<double>(t_curr - t_prev);
  for (const ScanPoint& sp : points) {
    const double s = static_cast<double>(t_curr - sp.t_us) / span;
    const Pose delta_j = se3_exp(s * xi);
    out.push_back(lidar_from_imu * (delta_j * (imu_from_lidar * sp.point)));
  }
  return out;
}

std::vector<std::size_t> voxel_downsample(std::span<const Vec3> points, double edge) {
  if (!(edge > 0.0)) {
    throw InvalidArgument("voxel_downsample: cell edge must be positive");
  }
  struct Best {
    std::size_t index;
    double dist2;
  };
  std::unordered_map<std::array<std::int64_t, 3>, Best, CellHash> cells;
  cells.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    std::array<std::int64_t, 3> c{};
    Vec3 center;
    for (int j = 0; j < 3; ++j) {
      const double f = std::floor(points[i][j] / edge);
      c[j] = static_cast<std::int64_t>(f);
      center[j] = (f + 0.5) * edge;
    }
    const double d2 = (points[i] - center).squaredNorm();
    const auto [it, inserted] = cells.try_emplace(c, Best{i, d2});
    if (!inserted && d2 < it->second.dist2) it->second = Best{i, d2};
  }
  std::vector<std::size_t> kept;
  kept.reserve(cells.size());
  for (const auto& [cell, best] : cells) kept.push_back(best.index);
  std::sort(kept.begin(), kept.end());
  return kept;
}

Association associate(std::span<const Vec3> lidar_points, const Pose& world_from_lidar,
                      const VoxelMap& map, const Codebook& cb, double plane_threshold) {
  Association out;
  auto& st = out.stats;
  for (const Vec3& p : lidar_points) {
    ++st.attempted;
    if (!in_codebook_range(p, cb)) {
      ++st.out_of_range;
      continue;
    }
    const Vec3 pw = world_from_lidar * p;
    const std::vector<Vec3> nbrs = map.knn(pw, 5);
    if (nbrs.size() < 5) {
      ++st.sparse;
      continue;
    }
    const PlaneFitResult fit = plane_fit(nbrs, plane_threshold);
    if (!fit.accepted()) {
      ++st.no_plane;
      continue;
    }
    Vec3 u = fit.plane.normal;
    double d = fit.plane.offset;
    double z = u.dot(pw) + d;
    if (z < 0.0) {
      u = -u;
      d = -d;
      z = -z;
    }
    if (!(z < cb.r_thr)) {
      ++st.gated;
      continue;
    }
    out.observations.push_back({pw, p, u, d, z * u, z});
    ++st.accepted;
  }
  return out;
}

double bucket_cell_size(double ds_0, double alpha, double mean_range) {
  return ds_0 + alpha * mean_range;
}

Resampled rq_resample(std::span<const PlaneObservation> obs, const Codebook& cb, double ds_0,
                      double alpha) {
  if (!(ds_0 > 0.0) || !(alpha >= 0.0)) {
    throw InvalidArgument("rq_resample: ds_0 must be positive and alpha nonnegative");
  }
  std::map<RqKey, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    buckets[quantize_residual_vector(obs[i].residual, cb).key].push_back(i);
  }
  Resampled out;
  out.observations.reserve(obs.size());
  std::vector<Vec3> members;
  for (const auto& [key, idx] : buckets) {
    double range = 0.0;
    members.clear();
    for (std::size_t i : idx) {
      range += obs[i].lidar.norm();
      members.push_back(obs[i].world);
    }
    BucketStat stat;
    stat.key = key;
    stat.cell_size = bucket_cell_size(ds_0, alpha, range / static_cast<double>(idx.size()));
    stat.before = idx.size();
    for (std::size_t m : voxel_downsample(members, stat.cell_size)) {
      out.observations.push_back(obs[idx[m]]);
      ++stat.after;
    }
    out.buckets.push_back(stat);
  }
  return out;
}

ObservationGroupSet build_groups(std::span<const PlaneObservation> obs, const Codebook& cb) {
  std::map<RqKey, std::vector<GroupMember>> by_key;
  for (const PlaneObservation& o : obs) {
    GroupMember m;
    m.z_index = quantize_z(o.z, cb).index;
    m.point = quantize_point(o.lidar, cb).index;
    by_key[quantize_residual_vector(o.residual, cb).key].push_back(m);
  }
  ObservationGroupSet groups;
  groups.reserve(by_key.size());
  for (auto& [key, members] : by_key) {
    std::sort(members.begin(), members.end(), [](const GroupMember& a, const GroupMember& b) {
      return std::tie(a.point, a.z_index) < std::tie(b.point, b.z_index);
    });
    groups.push_back({key, std::move(members)});
  }
  return groups;
}

Coprocessor::Coprocessor(CoprocessorOptions options)
    : options_(options), map_(options.map) {}

void Coprocessor::configure(const wire::ConfigPayload& config) {
  config.codebook.validate();
  if (!(config.ds_0 > 0.0) || !(config.alpha >= 0.0) || !(config.sigma > 0.0)) {
    throw ProtocolError("CONFIG carries invalid ds_0, alpha, or sigma");
  }
  config_ = config;
  configured_ = true;
}

wire::Frame Coprocessor::request(Scan scan) {
  if (!configured_) throw ProtocolError("scan requested before CONFIG");
  if (pending_) throw ProtocolError("previous scan was not committed");
  wire::Frame f;
  f.type = wire::FrameType::kPoseRequest;
  f.timestamp = static_cast<std::uint64_t>(scan.t_end_us);
  f.payload = wire::encode_pose_request({scan.t_start_us, scan.t_end_us});
  pending_ = std::move(scan);
  return f;
}

wire::Frame Coprocessor::observe(const wire::Frame& pose_response) {
  if (!pending_) throw ProtocolError("POSE_RESP without a pending scan");
  if (pose_response.type != wire::FrameType::kPoseResponse) {
    throw ProtocolError("expected POSE_RESP");
  }
  const wire::PoseResponse resp = wire::decode_pose_response(pose_response.payload);
  const Scan& scan = *pending_;
  const Codebook& cb = config_.codebook;

  ScanReport rep;
  rep.t_curr = scan.t_end_us;
  rep.raw_points = scan.points.size();

  auto t0 = Clock::now();
  std::vector<ScanPoint> raw = scan.points;
  if (options_.int8_scan && !raw.empty()) {
    std::vector<Vec3> xyz;
    xyz.reserve(raw.size());
    for (const auto& sp : raw) xyz.push_back(sp.point);
    const std::vector<Vec3> rec = int8_reconstruct(int8_minmax_quantize(xyz));
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i].point = rec[i];
  }
  const std::vector<Vec3> undistorted =
      undistort(raw, scan.t_start_us, scan.t_end_us, resp.delta, config_.imu_from_lidar);
  pending_points_.clear();
  for (std::size_t i : voxel_downsample(undistorted, config_.ds_0)) {
    if (in_codebook_range(undistorted[i], cb)) pending_points_.push_back(undistorted[i]);
  }
  rep.downsampled = pending_points_.size();
  rep.undistort_ms = elapsed_ms(t0);

  if (!resp.prev.rotation.allFinite() || !resp.prev.translation.allFinite() ||
      !resp.delta.rotation.allFinite() || !resp.delta.translation.allFinite()) {
    throw NumericalError("host pose is not finite");
  }
  t0 = Clock::now();
  const Pose world_from_lidar = resp.prev * resp.delta.inverse() * config_.imu_from_lidar;
  Association assoc =
      associate(pending_points_, world_from_lidar, map_, cb, options_.plane_threshold);
  rep.association = assoc.stats;
  rep.associate_ms = elapsed_ms(t0);

  t0 = Clock::now();
  wire::Frame f;
  f.timestamp = static_cast<std::uint64_t>(scan.t_end_us);
  last_groups_.clear();
  if (options_.encoding == ObservationEncoding::kFloat) {
    std::vector<wire::FloatObservation> fo;
    fo.reserve(assoc.observations.size());
    for (const auto& o : assoc.observations) {
      fo.push_back({o.lidar.cast<float>(), o.normal.cast<float>(), static_cast<float>(o.z)});
    }
    f.type = wire::FrameType::kObsFloat;
    f.payload = wire::encode_float_observations(fo);
    rep.transmitted = fo.size();
    rep.payload_bits = f.payload.size() * 8;
    rep.bitstream_bits = fo.size() * wire::kFloatObservationBytes * 8;
  } else {
    std::vector<PlaneObservation> obs = std::move(assoc.observations);
    if (options_.rq_resample) {
      obs = rq_resample(obs, cb, config_.ds_0, config_.alpha).observations;
    }
    last_groups_ = build_groups(obs, cb);
    const wire::PackedGroups packed = wire::pack_groups(last_groups_, cb);
    f.type = wire::FrameType::kObsGroups;
    f.payload = packed.payload;
    rep.transmitted = obs.size();
    rep.groups = last_groups_.size();
    rep.payload_bits = packed.payload.size() * 8 - static_cast<std::size_t>(packed.pad_bits);
    rep.bitstream_bits = packed.bitstream_bits;
  }
  rep.payload_bytes = f.payload.size();
  rep.encode_ms = elapsed_ms(t0);
  reports_.push_back(rep);
  return f;
}

void Coprocessor::commit(const wire::Frame& state_update) {
  if (!pending_) throw ProtocolError("STATE_UPDATE without a pending scan");
  if (state_update.type != wire::FrameType::kStateUpdate) {
    throw ProtocolError("expected STATE_UPDATE");
  }
  const wire::StateUpdate su = wire::decode_state_update(state_update.payload);
  if (!su.posterior.rotation.allFinite() || !su.posterior.translation.allFinite()) {
    throw NumericalError("posterior pose is not finite");
  }
  const auto t0 = Clock::now();
  const Pose world_from_lidar = su.posterior * config_.imu_from_lidar;
  std::vector<Vec3> world;
  world.reserve(pending_points_.size());
  for (const Vec3& p : pending_points_) world.push_back(world_from_lidar * p);
  map_.insert(world);
  if (!reports_.empty()) reports_.back().map_ms = elapsed_ms(t0);
  pending_.reset();
  pending_points_.clear();
}

void run_coprocessor(transport::Endpoint& endpoint, Coprocessor& coprocessor,
                     const std::function<std::optional<Scan>()>& next_scan) {
  SessionOrder order;
  const auto receive = [&](wire::FrameType want) {
    std::optional<wire::Frame> f = endpoint.receive();
    if (!f) throw ProtocolError("host closed the session early");
    order.accept(*f);
    if (f->type != want) {
      throw ProtocolError("expected " + std::string(wire::to_string(want)) + ", got " +
                          std::string(wire::to_string(f->type)));
    }
    return std::move(*f);
  };
  const auto send = [&](const wire::Frame& f) {
    order.accept(f);
    endpoint.send(f);
  };

  coprocessor.configure(wire::decode_config(receive(wire::FrameType::kConfig).payload));
  while (std::optional<Scan> scan = next_scan()) {
    send(coprocessor.request(std::move(*scan)));
    const wire::Frame resp = receive(wire::FrameType::kPoseResponse);
    send(coprocessor.observe(resp));
    coprocessor.commit(receive(wire::FrameType::kStateUpdate));
  }
  endpoint.close();
}

}  // namespace qlio
