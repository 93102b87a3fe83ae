#include "qlio/host.hpp"

#include <Eigen/Eigenvalues>

#include <chrono>
#include <string>

namespace qlio {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

double min_eigenvalue(const Covariance& m) {
  if (!m.allFinite()) return std::numeric_limits<double>::quiet_NaN();
  const Eigen::SelfAdjointEigenSolver<Covariance> eig(m, Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff();
}

}  // namespace

ImuQueue::ImuQueue(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw InvalidArgument("IMU queue capacity must be positive");
}

bool ImuQueue::push(const ImuSample& sample) {
  std::unique_lock lock(mu_);
  not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_; });
  if (closed_) return false;
  items_.push_back(sample);
  lock.unlock();
  not_empty_.notify_one();
  return true;
}

std::optional<ImuSample> ImuQueue::pop() {
  std::unique_lock lock(mu_);
  not_empty_.wait(lock, [&] { return !items_.empty() || closed_; });
  if (items_.empty()) return std::nullopt;
  const ImuSample s = items_.front();
  items_.pop_front();
  lock.unlock();
  not_full_.notify_one();
  return s;
}

void ImuQueue::close() {
  {
    std::lock_guard lock(mu_);
    closed_ = true;
  }
  not_empty_.notify_all();
  not_full_.notify_all();
}

HostEstimator::HostEstimator(wire::ConfigPayload config, NoiseParams noise, NavState initial,
                             Covariance initial_covariance, TimestampUs t0, ImuQueue& imu)
    : config_(std::move(config)),
      noise_(noise),
      state_(std::move(initial)),
      covariance_(initial_covariance),
      time_(t0),
      imu_(imu) {
  config_.codebook.validate();
  noise_.validate();
  if (!(config_.sigma > 0.0)) throw InvalidArgument("sigma must be positive");
}

wire::Frame HostEstimator::config_frame() const {
  return {wire::FrameType::kConfig, 0, wire::encode_config(config_)};
}

wire::Frame HostEstimator::handle(const wire::Frame& frame) {
  if (!order_.configured()) order_.accept(config_frame());
  order_.accept(frame);
  wire::Frame reply;
  switch (frame.type) {
    case wire::FrameType::kPoseRequest: reply = on_pose_request(frame); break;
    case wire::FrameType::kObsGroups:
    case wire::FrameType::kObsFloat: reply = on_observations(frame); break;
    default:
      throw ProtocolError("host cannot handle " + std::string(wire::to_string(frame.type)));
  }
  order_.accept(reply);
  return reply;
}

std::vector<ImuSample> HostEstimator::segment(TimestampUs t_prev, TimestampUs t_curr) {
  while (!imu_closed_ && (buffer_.empty() || buffer_.back().timestamp_us < t_curr)) {
    if (auto s = imu_.pop()) {
      if (!buffer_.empty() && s->timestamp_us <= buffer_.back().timestamp_us) {
        throw InvalidArgument("IMU stream timestamps are not strictly increasing");
      }
      buffer_.push_back(*s);
    } else {
      imu_closed_ = true;
    }
  }
  if (buffer_.empty() || buffer_.front().timestamp_us > t_prev ||
      buffer_.back().timestamp_us < t_curr) {
    throw ProtocolError("no IMU coverage for [" + std::to_string(t_prev) + ", " +
                        std::to_string(t_curr) + "]");
  }
  // End nodes are linearly interpolated so the segment starts at t_prev and
  // closes at t_curr exactly.
  const auto sample_at = [&](TimestampUs t) {
    std::size_t i = 0;
    while (i + 1 < buffer_.size() && buffer_[i + 1].timestamp_us <= t) ++i;
    ImuSample s = buffer_[i];
    if (s.timestamp_us != t && i + 1 < buffer_.size()) {
      const ImuSample& b = buffer_[i + 1];
      const double f = static_cast<double>(t - s.timestamp_us) /
                       static_cast<double>(b.timestamp_us - s.timestamp_us);
      s.gyro += f * (b.gyro - s.gyro);
      s.accel += f * (b.accel - s.accel);
    }
    s.timestamp_us = t;
    return std::pair{s, i};
  };
  std::vector<ImuSample> seg;
  const auto [first, i] = sample_at(t_prev);
  seg.push_back(first);
  for (std::size_t j = i + 1; j < buffer_.size() && buffer_[j].timestamp_us < t_curr; ++j) {
    seg.push_back(buffer_[j]);
  }
  const auto [closing, last] = sample_at(t_curr);
  seg.push_back(closing);
  // Keep the sample at or before t_curr for the next segment.
  buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(last));
  return seg;
}

wire::Frame HostEstimator::on_pose_request(const wire::Frame& frame) {
  const wire::PoseRequest req = wire::decode_pose_request(frame.payload);
  if (req.t_curr != static_cast<TimestampUs>(frame.timestamp) || req.t_prev >= req.t_curr) {
    throw ProtocolError("POSE_REQ carries an inconsistent scan window");
  }
  if (req.t_prev != time_) {
    throw ProtocolError("POSE_REQ starts at t=" + std::to_string(req.t_prev) +
                        " but the host state is at t=" + std::to_string(time_));
  }
  const auto t0 = Clock::now();
  const std::vector<ImuSample> seg = segment(req.t_prev, req.t_curr);
  const Propagated prop = propagate(state_, covariance_, seg, noise_);

  Pending pending;
  pending.t_curr = req.t_curr;
  pending.prior = prop.state;
  pending.prior_covariance = prop.covariance;
  pending.propagate_ms = elapsed_ms(t0);

  wire::PoseResponse resp;
  resp.prev = state_.pose();
  resp.delta = prop.state.pose().inverse() * state_.pose();
  pending_ = std::move(pending);
  return {wire::FrameType::kPoseResponse, frame.timestamp, wire::encode_pose_response(resp)};
}

wire::Frame HostEstimator::on_observations(const wire::Frame& frame) {
  if (!pending_) throw ProtocolError("observations without a pose request");
  const auto t0 = Clock::now();
  const Pending& pend = *pending_;
  ScanLog row;
  row.t = pend.t_curr;

  UpdateResult upd;
  if (frame.type == wire::FrameType::kObsGroups) {
    const ObservationGroupSet groups = wire::unpack_groups(frame.payload, config_.codebook);
    upd = qmap_update(pend.prior, pend.prior_covariance, groups, config_.codebook, config_.sigma,
                      config_.imu_from_lidar);
    row.groups = groups.size();
    row.bitstream_bits = wire::group_bits(groups, config_.codebook);
    row.payload_bits = 16 + row.bitstream_bits;
  } else {
    const auto obs = wire::decode_float_observations(frame.payload);
    upd = float_update(pend.prior, pend.prior_covariance, obs, config_.sigma,
                       config_.imu_from_lidar);
    row.payload_bits = frame.payload.size() * 8;
    row.bitstream_bits = obs.size() * wire::kFloatObservationBytes * 8;
  }
  state_ = upd.state;
  state_.rotation = orthonormalize(state_.rotation);
  covariance_ = upd.covariance;
  time_ = pend.t_curr;

  row.pose = state_.pose();
  row.trace = covariance_.trace();
  row.measurements = upd.used;
  row.rejected = upd.rejected;
  row.min_eigenvalue = min_eigenvalue(covariance_);
  const Covariance shrink = pend.prior_covariance - covariance_;
  row.min_contraction_eigenvalue = min_eigenvalue(0.5 * (shrink + shrink.transpose()));
  row.asymmetry = (covariance_ - covariance_.transpose()).cwiseAbs().maxCoeff();
  row.propagate_ms = pend.propagate_ms;
  row.update_ms = elapsed_ms(t0);
  log_.push_back(row);
  pending_.reset();

  return {wire::FrameType::kStateUpdate, frame.timestamp,
          wire::encode_state_update({state_.pose()})};
}

void run_host(transport::Endpoint& endpoint, HostEstimator& host) {
  endpoint.send(host.config_frame());
  while (std::optional<wire::Frame> frame = endpoint.receive()) {
    endpoint.send(host.handle(*frame));
  }
}

}  // namespace qlio
