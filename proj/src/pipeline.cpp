#include "qlio/pipeline.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

namespace qlio {

namespace {

using Clock = std::chrono::steady_clock;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined value
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
}

long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("'" + key + "' expects an integer, got '" + v + "'");
  }
  return out;
}

Vec3 parse_vec3(const std::string& key, const std::string& v) {
  std::stringstream ss(v);
  std::string item;
  Vec3 out;
  int n = 0;
  while (std::getline(ss, item, ',')) {
    if (n == 3) break;
    out[n++] = parse_double(key, trim(item));
  }
  if (n != 3 || std::getline(ss, item, ',')) {
    throw ConfigError("'" + key + "' expects three comma-separated numbers");
  }
  return out;
}

Covariance initial_covariance() {
  Covariance p = Covariance::Zero();
  p.diagonal().segment<3>(block::kRot).setConstant(1e-6);
  p.diagonal().segment<3>(block::kPos).setConstant(1e-6);
  p.diagonal().segment<3>(block::kVel).setConstant(1e-4);
  p.diagonal().segment<3>(block::kBiasGyro).setConstant(1e-6);
  p.diagonal().segment<3>(block::kBiasAccel).setConstant(1e-3);
  p.diagonal().segment<3>(block::kGravity).setConstant(1e-6);
  return p;
}

CoprocessorOptions options_for(const RunConfig& c) {
  CoprocessorOptions o;
  o.plane_threshold = c.plane_threshold;
  switch (c.mode) {
    case Mode::kQlio: break;
    case Mode::kQlioNoRqrs: o.rq_resample = false; break;
    case Mode::kBaselineFloat: o.encoding = ObservationEncoding::kFloat; break;
    case Mode::kBaselineInt8:
      o.encoding = ObservationEncoding::kFloat;
      o.int8_scan = true;
      break;
  }
  return o;
}

bool is_numerical(const std::exception_ptr& e) {
  if (!e) return false;
  try {
    std::rethrow_exception(e);
  } catch (const NumericalError&) {
    return true;
  } catch (...) {
    return false;
  }
}

std::string message_of(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const std::exception& ex) {
    return ex.what();
  } catch (...) {
    return "unknown error";
  }
}

}  // namespace

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::kQlio: return "qlio";
    case Mode::kBaselineFloat: return "baseline-float";
    case Mode::kBaselineInt8: return "baseline-int8";
    case Mode::kQlioNoRqrs: return "qlio-no-rqrs";
  }
  return "unknown";
}

Mode parse_mode(const std::string& name) {
  for (Mode m : {Mode::kQlio, Mode::kBaselineFloat, Mode::kBaselineInt8, Mode::kQlioNoRqrs}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown mode '" + name + "'");
}

TransportSpec parse_transport(const std::string& text) {
  if (text == "inproc") return {};
  const std::string prefix = "socket:";
  if (text.rfind(prefix, 0) == 0) {
    const long long port = parse_int("transport", text.substr(prefix.size()));
    if (port < 0 || port > 65535) throw ConfigError("socket port out of range");
    return {true, static_cast<std::uint16_t>(port)};
  }
  throw ConfigError("unknown transport '" + text + "' (expected inproc or socket:PORT)");
}

std::string to_string(const TransportSpec& t) {
  return t.socket ? "socket:" + std::to_string(t.port) : "inproc";
}

void RunConfig::validate() const {
  try {
    codebook.validate();
    imu_noise.validate();
    lidar.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  if (!(duration_s > 0.0) || duration_s > sim::kMaxDurationSeconds) {
    throw ConfigError("duration must lie in (0, 300] s");
  }
  if (!(ds_0 > 0.0) || !(alpha >= 0.0) || !(sigma > 0.0) || !(plane_threshold > 0.0)) {
    throw ConfigError("ds_0, sigma, and plane_threshold must be positive; alpha nonnegative");
  }
  if (!(imu_rate_hz > 0.0) || imu_rate_hz > truth_rate_hz) {
    throw ConfigError("imu_rate must be positive and not above truth_rate");
  }
  if (duration_s * lidar.scan_rate_hz < 1.0) {
    throw ConfigError("duration shorter than one scan");
  }
}

void apply_setting(RunConfig& c, const std::string& key, const std::string& v) {
  const auto d = [&] { return parse_double(key, v); };
  const auto i = [&] { return static_cast<int>(parse_int(key, v)); };
  if (key == "scene") c.scene.preset = v;
  else if (key == "scene_dims") c.scene.dims = parse_vec3(key, v);
  else if (key == "floor_z") c.scene.floor_z = d();
  else if (key == "scene_seed") c.scene.seed = static_cast<std::uint64_t>(parse_int(key, v));
  else if (key == "trajectory") c.trajectory.preset = v;
  else if (key == "radius") c.trajectory.radius = d();
  else if (key == "amplitude_x") c.trajectory.amplitude_x = d();
  else if (key == "amplitude_y") c.trajectory.amplitude_y = d();
  else if (key == "speed") c.trajectory.speed = d();
  else if (key == "height") c.trajectory.height = d();
  else if (key == "heave") c.trajectory.heave = d();
  else if (key == "wobble") c.trajectory.wobble = d();
  else if (key == "duration") c.duration_s = d();
  else if (key == "truth_rate") c.truth_rate_hz = d();
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_int(key, v));
  else if (key == "lidar_pattern") {
    if (v == "spinning") c.lidar.pattern = sim::ScanPattern::kSpinning;
    else if (v == "raster") c.lidar.pattern = sim::ScanPattern::kRaster;
    else throw ConfigError("unknown lidar_pattern '" + v + "'");
  } else if (key == "lidar_rows") c.lidar.rows = i();
  else if (key == "lidar_columns") c.lidar.columns = i();
  else if (key == "scan_rate") c.lidar.scan_rate_hz = d();
  else if (key == "range_noise") c.lidar.range_noise = d();
  else if (key == "max_range") c.lidar.max_range = d();
  else if (key == "imu_rate") c.imu_rate_hz = d();
  else if (key == "gyro_noise") c.imu_noise.gyro_noise = d();
  else if (key == "accel_noise") c.imu_noise.accel_noise = d();
  else if (key == "gyro_bias_walk") c.imu_noise.gyro_bias_walk = d();
  else if (key == "accel_bias_walk") c.imu_noise.accel_bias_walk = d();
  else if (key == "gyro_bias") c.imu_bias.gyro = parse_vec3(key, v);
  else if (key == "accel_bias") c.imu_bias.accel = parse_vec3(key, v);
  else if (key == "extrinsic_translation") c.imu_from_lidar.translation = parse_vec3(key, v);
  else if (key == "extrinsic_rpy") {
    const Vec3 rpy = parse_vec3(key, v);
    c.imu_from_lidar.rotation = (Eigen::AngleAxisd(rpy.z(), Vec3::UnitZ()) *
                                 Eigen::AngleAxisd(rpy.y(), Vec3::UnitY()) *
                                 Eigen::AngleAxisd(rpy.x(), Vec3::UnitX()))
                                    .toRotationMatrix();
  } else if (key == "lp") c.codebook.l_p = i();
  else if (key == "ln") c.codebook.l_n = i();
  else if (key == "lz") c.codebook.l_z = i();
  else if (key == "r_max") c.codebook.r_max = d();
  else if (key == "r_thr") c.codebook.r_thr = d();
  else if (key == "ds_0") c.ds_0 = d();
  else if (key == "alpha") c.alpha = d();
  else if (key == "sigma") c.sigma = d();
  else if (key == "plane_threshold") c.plane_threshold = d();
  else if (key == "mode") c.mode = parse_mode(v);
  else if (key == "transport") c.transport = parse_transport(v);
  else if (key == "out") c.out_dir = v;
  else throw ConfigError("unknown config key '" + key + "'");
}

RunConfig parse_config(std::istream& in, RunConfig base) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    }
    apply_setting(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_config(in, std::move(base));
}

AteResult ate(const std::vector<StampedPose>& estimate, const std::vector<StampedPose>& truth,
              TimestampUs tolerance_us) {
  std::vector<std::pair<const StampedPose*, const StampedPose*>> pairs;
  for (const StampedPose& e : estimate) {
    const auto it = std::lower_bound(truth.begin(), truth.end(), e.t,
                                     [](const StampedPose& s, TimestampUs t) { return s.t < t; });
    const StampedPose* best = nullptr;
    TimestampUs gap = std::numeric_limits<TimestampUs>::max();
    if (it != truth.end()) {
      best = &*it;
      gap = it->t - e.t;
    }
    if (it != truth.begin() && e.t - std::prev(it)->t < gap) {
      best = &*std::prev(it);
      gap = e.t - best->t;
    }
    if (best != nullptr && gap <= tolerance_us) pairs.emplace_back(&e, best);
  }
  if (pairs.size() < 2) {
    throw InvalidArgument("ate: fewer than two time-aligned poses");
  }
  const auto n = static_cast<Eigen::Index>(pairs.size());
  Eigen::Matrix3Xd src(3, n), dst(3, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    src.col(k) = pairs[k].first->pose.translation;
    dst.col(k) = pairs[k].second->pose.translation;
  }
  if (!src.allFinite()) {
    const double inf = std::numeric_limits<double>::infinity();
    return {inf, inf, pairs.size()};
  }
  const Eigen::Matrix4d t = Eigen::umeyama(src, dst, false);
  const Mat3 r = t.topLeftCorner<3, 3>();
  const Vec3 tr = t.topRightCorner<3, 1>();
  double sq_t = 0.0, sq_r = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    sq_t += (r * src.col(k) + tr - dst.col(k)).squaredNorm();
    const Mat3 err = pairs[k].second->pose.rotation.transpose() * r * pairs[k].first->pose.rotation;
    const double angle = Eigen::AngleAxisd(Quat(err).normalized()).angle();
    sq_r += angle * angle;
  }
  return {std::sqrt(sq_t / static_cast<double>(n)), std::sqrt(sq_r / static_cast<double>(n)),
          pairs.size()};
}

RunResult run(const RunConfig& config, transport::Recorder* recorder) {
  config.validate();
  const auto wall = Clock::now();

  sim::Scene scene;
  std::optional<sim::GroundTruth> gt;
  std::vector<ImuSample> imu;
  try {
    scene = sim::build_scene(config.scene);
    gt.emplace(sim::synth_trajectory(config.trajectory, config.duration_s, config.truth_rate_hz));
    imu = sim::synth_imu(*gt, config.imu_noise, config.imu_bias, mix_seed(config.seed, 0),
                         config.imu_rate_hz);
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }

  const sim::Kinematics k0 = gt->at(gt->start());
  NavState x0;
  x0.rotation = k0.rotation;
  x0.position = k0.position;
  x0.velocity = k0.velocity;

  wire::ConfigPayload wire_config;
  wire_config.codebook = config.codebook;
  wire_config.ds_0 = config.ds_0;
  wire_config.alpha = config.alpha;
  wire_config.sigma = config.sigma;
  wire_config.imu_from_lidar = config.imu_from_lidar;

  ImuQueue queue(256);
  HostEstimator host(wire_config, config.imu_noise, x0, initial_covariance(), gt->start(), queue);
  Coprocessor coprocessor(options_for(config));

  std::unique_ptr<transport::Channel> host_channel, cop_channel;
  if (config.transport.socket) {
    transport::SocketListener listener(config.transport.port);
    cop_channel = transport::connect_socket(listener.port());
    host_channel = listener.accept();
  } else {
    auto pair = transport::make_inproc_pair();
    host_channel = std::move(pair.first);
    cop_channel = std::move(pair.second);
  }
  transport::Endpoint host_end(*host_channel, recorder);
  transport::Endpoint cop_end(*cop_channel, recorder);

  const TimestampUs period = config.lidar.period_us();
  const TimestampUs last_end = gt->end();
  std::uint64_t scan_index = 0;
  const auto next_scan = [&]() -> std::optional<Scan> {
    const TimestampUs t_end = gt->start() + static_cast<TimestampUs>(scan_index + 1) * period;
    if (t_end > last_end) return std::nullopt;
    ++scan_index;
    return sim::synth_scan(scene, *gt, config.lidar, t_end, mix_seed(config.seed, scan_index),
                           config.imu_from_lidar);
  };

  std::exception_ptr host_error, cop_error;
  std::thread producer([&] {
    for (const ImuSample& s : imu) {
      if (!queue.push(s)) break;
    }
    queue.close();
  });
  std::thread host_thread([&] {
    try {
      run_host(host_end, host);
    } catch (...) {
      host_error = std::current_exception();
    }
    host_end.close();
    queue.close();
  });
  std::thread cop_thread([&] {
    try {
      run_coprocessor(cop_end, coprocessor, next_scan);
    } catch (...) {
      cop_error = std::current_exception();
    }
    cop_end.close();
  });
  cop_thread.join();
  host_thread.join();
  producer.join();

  RunResult result;
  RunMetrics& m = result.metrics;
  if (is_numerical(host_error) || is_numerical(cop_error)) {
    m.numerically_diverged = true;
    m.failure = message_of(is_numerical(host_error) ? host_error : cop_error);
  } else if (host_error) {
    std::rethrow_exception(host_error);
  } else if (cop_error) {
    std::rethrow_exception(cop_error);
  }

  result.host_log = host.log();
  result.coprocessor_log = coprocessor.reports();
  for (const sim::Kinematics& k : gt->samples()) result.truth.push_back({k.t, k.pose()});

  std::vector<StampedPose> estimate;
  for (const ScanLog& row : result.host_log) {
    estimate.push_back({row.t, row.pose});
    m.max_trace = std::max(m.max_trace, row.trace);
    if (!std::isfinite(row.trace) || row.trace > kTraceOverflow) m.numerically_diverged = true;
  }
  m.scans = result.host_log.size();
  const double inf = std::numeric_limits<double>::infinity();
  if (m.numerically_diverged || estimate.size() < 2) {
    m.ate_translation = m.ate_rotation = inf;
  } else {
    const AteResult a = ate(estimate, result.truth);
    m.ate_translation = a.translation;
    m.ate_rotation = a.rotation;
  }

  std::size_t attempted = 0, accepted = 0;
  StageTiming& tm = result.timing;
  for (const ScanReport& r : result.coprocessor_log) {
    m.measurements += r.transmitted;
    m.payload_bits += r.payload_bits;
    m.bitstream_bits += r.bitstream_bits;
    attempted += r.association.attempted;
    accepted += r.association.accepted;
    tm.undistort_ms += r.undistort_ms;
    tm.associate_ms += r.associate_ms;
    tm.encode_ms += r.encode_ms;
    tm.map_ms += r.map_ms;
  }
  for (const ScanLog& row : result.host_log) {
    tm.propagate_ms += row.propagate_ms;
    tm.update_ms += row.update_ms;
  }
  if (m.measurements > 0) {
    m.bits_per_measurement =
        static_cast<double>(m.bitstream_bits) / static_cast<double>(m.measurements);
    m.reduction_vs_224 = 224.0 / m.bits_per_measurement;
    m.reduction_vs_96 = 96.0 / m.bits_per_measurement;
  }
  if (m.scans > 0) {
    m.mean_measurements_per_scan =
        static_cast<double>(m.measurements) / static_cast<double>(m.scans);
  }
  if (attempted > 0) {
    m.association_rate = static_cast<double>(accepted) / static_cast<double>(attempted);
  }
  tm.total_s = std::chrono::duration<double>(Clock::now() - wall).count();
  return result;
}

void write_trajectory_csv(const RunResult& result, std::ostream& os) {
  os << "t,px,py,pz,qw,qx,qy,qz,trace_p,measurements,payload_bits\n";
  os.precision(17);
  for (const ScanLog& row : result.host_log) {
    const Quat q = row.pose.quaternion();
    os << to_seconds(row.t) << ',' << row.pose.translation.x() << ',' << row.pose.translation.y()
       << ',' << row.pose.translation.z() << ',' << q.w() << ',' << q.x() << ',' << q.y() << ','
       << q.z() << ',' << row.trace << ',' << row.measurements << ',' << row.payload_bits << '\n';
  }
}

void write_metrics_csv(const RunResult& result, const RunConfig& config, std::ostream& os) {
  const RunMetrics& m = result.metrics;
  os.precision(12);
  os << "key,value\n"
     << "mode," << to_string(config.mode) << '\n'
     << "scene," << config.scene.preset << '\n'
     << "trajectory," << config.trajectory.preset << '\n'
     << "seed," << config.seed << '\n'
     << "lp," << config.codebook.l_p << '\n'
     << "ln," << config.codebook.l_n << '\n'
     << "lz," << config.codebook.l_z << '\n'
     << "ate_translation_m," << m.ate_translation << '\n'
     << "ate_rotation_rad," << m.ate_rotation << '\n'
     << "scans," << m.scans << '\n'
     << "measurements," << m.measurements << '\n'
     << "payload_bits," << m.payload_bits << '\n'
     << "bitstream_bits," << m.bitstream_bits << '\n'
     << "formula_bits_per_measurement," << bits_per_measurement(config.codebook) << '\n'
     << "bits_per_measurement," << m.bits_per_measurement << '\n'
     << "reduction_vs_224," << m.reduction_vs_224 << '\n'
     << "reduction_vs_96," << m.reduction_vs_96 << '\n'
     << "mean_measurements_per_scan," << m.mean_measurements_per_scan << '\n'
     << "association_rate," << m.association_rate << '\n'
     << "max_trace_p," << m.max_trace << '\n'
     << "numerically_diverged," << (m.numerically_diverged ? 1 : 0) << '\n';
}

void write_timing_csv(const RunResult& result, std::ostream& os) {
  const StageTiming& t = result.timing;
  os << "stage,milliseconds\n"
     << "undistort," << t.undistort_ms << '\n'
     << "associate," << t.associate_ms << '\n'
     << "encode," << t.encode_ms << '\n'
     << "map_insert," << t.map_ms << '\n'
     << "propagate," << t.propagate_ms << '\n'
     << "update," << t.update_ms << '\n'
     << "total," << t.total_s * 1000.0 << '\n';
}

void write_outputs(const RunResult& result, const RunConfig& config,
                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto open = [&](const char* name) {
    std::ofstream f(dir / name);
    if (!f) throw ConfigError("cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open("trajectory.csv");
    write_trajectory_csv(result, f);
  }
  {
    auto f = open("metrics.csv");
    write_metrics_csv(result, config, f);
  }
  {
    auto f = open("timing.csv");
    write_timing_csv(result, f);
  }
}

SweepSpec parse_sweep(const std::string& text, const Codebook& base) {
  SweepSpec spec{{base.l_p}, {base.l_n}, {base.l_z}};
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("sweep item '" + item + "' lacks '='");
    const std::string key = trim(item.substr(0, eq));
    const std::string val = trim(item.substr(eq + 1));
    int lo = 0, hi = 0;
    if (const auto dots = val.find(".."); dots != std::string::npos) {
      lo = static_cast<int>(parse_int(key, trim(val.substr(0, dots))));
      hi = static_cast<int>(parse_int(key, trim(val.substr(dots + 2))));
    } else {
      lo = hi = static_cast<int>(parse_int(key, val));
    }
    std::vector<int> range;
    for (int b = lo; b <= hi; ++b) {
      if (b < 1 || b > kMaxBits) throw ConfigError("sweep bit count out of [1, 16]");
      range.push_back(b);
    }
    if (key == "lp") spec.l_p = range;
    else if (key == "ln") spec.l_n = range;
    else if (key == "lz") spec.l_z = range;
    else throw ConfigError("unknown sweep key '" + key + "'");
  }
  return spec;
}

bool diverged(const RunMetrics& run, double baseline_ate) {
  return run.numerically_diverged || !std::isfinite(run.ate_translation) ||
         run.ate_translation > kDivergenceFactor * baseline_ate;
}

std::vector<SweepRow> sweep(const RunConfig& base, const SweepSpec& spec) {
  std::vector<SweepRow> rows;
  if (spec.l_p.empty() || spec.l_n.empty() || spec.l_z.empty()) return rows;
  RunConfig float_cfg = base;
  float_cfg.mode = Mode::kBaselineFloat;
  const double baseline = run(float_cfg).metrics.ate_translation;

  for (int lp : spec.l_p) {
    for (int ln : spec.l_n) {
      for (int lz : spec.l_z) {
        RunConfig cfg = base;
        cfg.codebook.l_p = lp;
        cfg.codebook.l_n = ln;
        cfg.codebook.l_z = lz;
        SweepRow row;
        row.codebook = cfg.codebook;
        row.formula_bits = bits_per_measurement(cfg.codebook);
        cfg.mode = Mode::kQlio;
        const RunMetrics with = run(cfg).metrics;
        cfg.mode = Mode::kQlioNoRqrs;
        const RunMetrics without = run(cfg).metrics;
        row.ate_with = with.ate_translation;
        row.ate_without = without.ate_translation;
        row.bits_with = with.bits_per_measurement;
        row.bits_without = without.bits_per_measurement;
        row.diverged_with = diverged(with, baseline);
        row.diverged_without = diverged(without, baseline);
        rows.push_back(row);
      }
    }
  }
  return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& os) {
  os << "lp,ln,lz,ate_with_rqrs_m,ate_without_rqrs_m,formula_bits,bits_with_rqrs,"
        "bits_without_rqrs,diverged_with_rqrs,diverged_without_rqrs\n";
  os.precision(10);
  for (const SweepRow& r : rows) {
    os << r.codebook.l_p << ',' << r.codebook.l_n << ',' << r.codebook.l_z << ',' << r.ate_with
       << ',' << r.ate_without << ',' << r.formula_bits << ',' << r.bits_with << ','
       << r.bits_without << ',' << (r.diverged_with ? 1 : 0) << ','
       << (r.diverged_without ? 1 : 0) << '\n';
  }
}

}  // namespace qlio
