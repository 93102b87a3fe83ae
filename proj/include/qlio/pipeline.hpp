#pragma once

#include "qlio/common.hpp"
#include "qlio/coprocessor.hpp"
#include "qlio/host.hpp"
#include "qlio/manifold.hpp"
#include "qlio/quantizer.hpp"
#include "qlio/sim_world.hpp"
#include "qlio/transport.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace qlio {

enum class Mode { kQlio, kBaselineFloat, kBaselineInt8, kQlioNoRqrs };

std::string to_string(Mode mode);
/// Throws ConfigError for unknown names.
Mode parse_mode(const std::string& name);

struct TransportSpec {
  bool socket = false;
  std::uint16_t port = 0;  // 0: ephemeral
};

/// "inproc" or "socket:PORT".
TransportSpec parse_transport(const std::string& text);
std::string to_string(const TransportSpec& t);

struct RunConfig {
  sim::SceneSpec scene;
  sim::TrajectorySpec trajectory;
  double duration_s = 60.0;
  double truth_rate_hz = 400.0;
  std::uint64_t seed = 1;

  sim::LidarModel lidar;
  double imu_rate_hz = 200.0;
  NoiseParams imu_noise;
  sim::ImuBias imu_bias{Vec3(0.002, -0.0015, 0.001), Vec3(0.03, -0.02, 0.015)};
  Pose imu_from_lidar{Mat3::Identity(), Vec3(0.05, 0.0, 0.1)};

  Codebook codebook;
  double ds_0 = 0.5;
  double alpha = 0.01;
  double sigma = 0.02;
  double plane_threshold = kPlaneFitThreshold;

  Mode mode = Mode::kQlio;
  TransportSpec transport;
  std::string out_dir;

  /// Throws ConfigError.
  void validate() const;
};

/// Applies one key=value setting. Throws ConfigError on unknown keys or
/// unparseable values.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);
/// Reads key=value lines; '#' starts a comment.
RunConfig parse_config(std::istream& in, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

struct StampedPose {
  TimestampUs t = 0;
  Pose pose;
};

struct AteResult {
  double translation = 0.0;  // m
  double rotation = 0.0;     // rad
  std::size_t matched = 0;
};

/// Rigid (no scale) alignment of `estimate` onto `truth`, pairing each
/// estimate with the nearest truth sample within `tolerance_us`. Throws
/// InvalidArgument when fewer than two pairs exist.
AteResult ate(const std::vector<StampedPose>& estimate, const std::vector<StampedPose>& truth,
              TimestampUs tolerance_us = 5000);

struct RunMetrics {
  double ate_translation = 0.0;
  double ate_rotation = 0.0;
  std::size_t scans = 0;
  std::size_t measurements = 0;    // transmitted across the run
  std::size_t payload_bits = 0;    // observation payloads, padding excluded
  std::size_t bitstream_bits = 0;  // group headers and members only
  double bits_per_measurement = 0.0;
  double reduction_vs_224 = 0.0;
  double reduction_vs_96 = 0.0;
  double mean_measurements_per_scan = 0.0;
  double association_rate = 0.0;
  double max_trace = 0.0;
  bool numerically_diverged = false;
  std::string failure;  // empty unless a component stopped early
};

struct StageTiming {
  double undistort_ms = 0.0;
  double associate_ms = 0.0;
  double encode_ms = 0.0;
  double map_ms = 0.0;
  double propagate_ms = 0.0;
  double update_ms = 0.0;
  double total_s = 0.0;
};

struct RunResult {
  RunMetrics metrics;
  StageTiming timing;
  std::vector<ScanLog> host_log;
  std::vector<ScanReport> coprocessor_log;
  std::vector<StampedPose> truth;
};

inline constexpr double kTraceOverflow = 1e6;

/// One end-to-end run: IMU producer, host, and coprocessor on separate
/// threads, connected through the configured transport.
RunResult run(const RunConfig& config, transport::Recorder* recorder = nullptr);

void write_trajectory_csv(const RunResult& result, std::ostream& os);
void write_metrics_csv(const RunResult& result, const RunConfig& config, std::ostream& os);
void write_timing_csv(const RunResult& result, std::ostream& os);
void write_outputs(const RunResult& result, const RunConfig& config,
                   const std::filesystem::path& dir);

struct SweepSpec {
  std::vector<int> l_p;
  std::vector<int> l_n;
  std::vector<int> l_z;
};

/// "lp=3..12,ln=3,lz=2"; a missing key keeps the template value; a range
/// with lo > hi is empty.
SweepSpec parse_sweep(const std::string& text, const Codebook& base);

struct SweepRow {
  Codebook codebook;
  int formula_bits = 0;
  double ate_with = 0.0;
  double ate_without = 0.0;
  double bits_with = 0.0;
  double bits_without = 0.0;
  bool diverged_with = false;
  bool diverged_without = false;
};

inline constexpr double kDivergenceFactor = 10.0;

/// ATE above 10x the float baseline, or a numerical blow-up.
bool diverged(const RunMetrics& run, double baseline_ate);

/// Runs qlio and qlio-no-rqrs for every combination, plus one float
/// baseline for the divergence reference. Empty spec: no runs at all.
std::vector<SweepRow> sweep(const RunConfig& base, const SweepSpec& spec);
void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& os);

}  // namespace qlio
