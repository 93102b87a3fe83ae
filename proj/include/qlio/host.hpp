#pragma once

#include "qlio/common.hpp"
#include "qlio/manifold.hpp"
#include "qlio/qmap.hpp"
#include "qlio/session.hpp"
#include "qlio/transport.hpp"
#include "qlio/wire.hpp"

#include <condition_variable>
#include <deque>
#include <mutex>
#include <optional>
#include <vector>

namespace qlio {

/// Bounded single-producer / single-consumer IMU buffer.
class ImuQueue {
 public:
  explicit ImuQueue(std::size_t capacity = 1024);

  /// Blocks while full. Returns false once the queue was closed.
  bool push(const ImuSample& sample);
  /// Blocks while empty; nullopt once closed and drained.
  std::optional<ImuSample> pop();
  void close();

 private:
  std::size_t capacity_;
  std::mutex mu_;
  std::condition_variable not_empty_;
  std::condition_variable not_full_;
  std::deque<ImuSample> items_;
  bool closed_ = false;
};

struct ScanLog {
  TimestampUs t = 0;
  Pose pose;
  double trace = 0.0;
  std::size_t measurements = 0;
  std::size_t rejected = 0;
  std::size_t payload_bits = 0;    // payload bytes * 8 minus padding
  std::size_t bitstream_bits = 0;  // group headers and members only
  std::size_t groups = 0;
  double min_eigenvalue = 0.0;              // of the posterior covariance
  double min_contraction_eigenvalue = 0.0;  // of prior minus posterior
  double asymmetry = 0.0;                   // max |P - P^T|
  double propagate_ms = 0.0;
  double update_ms = 0.0;
};

/// Host component: IMU propagation and the observation update. All calls
/// come from one task; IMU samples arrive through the queue.
class HostEstimator {
 public:
  HostEstimator(wire::ConfigPayload config, NoiseParams noise, NavState initial,
                Covariance initial_covariance, TimestampUs t0, ImuQueue& imu);

  wire::Frame config_frame() const;
  /// POSE_REQ yields POSE_RESP; an observation frame yields STATE_UPDATE.
  /// Throws ProtocolError on order violations or missing IMU coverage.
  wire::Frame handle(const wire::Frame& frame);

  const NavState& state() const { return state_; }
  const Covariance& covariance() const { return covariance_; }
  TimestampUs time() const { return time_; }
  const std::vector<ScanLog>& log() const { return log_; }
  const wire::ConfigPayload& config() const { return config_; }

 private:
  wire::Frame on_pose_request(const wire::Frame& frame);
  wire::Frame on_observations(const wire::Frame& frame);
  std::vector<ImuSample> segment(TimestampUs t_prev, TimestampUs t_curr);

  wire::ConfigPayload config_;
  NoiseParams noise_;
  NavState state_;
  Covariance covariance_;
  TimestampUs time_;
  ImuQueue& imu_;
  std::deque<ImuSample> buffer_;
  bool imu_closed_ = false;
  SessionOrder order_;

  struct Pending {
    TimestampUs t_curr = 0;
    NavState prior;
    Covariance prior_covariance;
    double propagate_ms = 0.0;
  };
  std::optional<Pending> pending_;
  std::vector<ScanLog> log_;
};

/// Sends CONFIG, then answers frames until the coprocessor closes the stream.
void run_host(transport::Endpoint& endpoint, HostEstimator& host);

}  // namespace qlio
