#include "qlio/wire.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <limits>
#include <string>

namespace qlio::wire {

namespace {

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

template <typename T>
void put_le(Bytes& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T get_le(std::span<const std::uint8_t> in, std::size_t offset) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<std::uint64_t>(in[offset + i]) << (8 * i);
  }
  return static_cast<T>(v);
}

bool known_type(std::uint8_t t) { return t <= static_cast<std::uint8_t>(FrameType::kObsFloat); }

class PayloadWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u64(std::uint64_t v) { put_le(out_, v); }
  void f64(double v) { put_le(out_, std::bit_cast<std::uint64_t>(v)); }
  void f32(float v) { put_le(out_, std::bit_cast<std::uint32_t>(v)); }
  void u32(std::uint32_t v) { put_le(out_, v); }
  void pose(const Pose& p) {
    const Quat q = p.quaternion();
    f64(q.w());
    f64(q.x());
    f64(q.y());
    f64(q.z());
    for (int i = 0; i < 3; ++i) f64(p.translation[i]);
  }
  Bytes take() { return std::move(out_); }

 private:
  Bytes out_;
};

class PayloadReader {
 public:
  PayloadReader(std::span<const std::uint8_t> in, std::size_t expected, const char* what)
      : in_(in) {
    if (in.size() != expected) {
      throw ProtocolError(std::string(what) + " payload has " + std::to_string(in.size()) +
                          " bytes, expected " + std::to_string(expected));
    }
  }
  std::uint8_t u8() { return in_[pos_++]; }
  std::uint64_t u64() { return advance<std::uint64_t>(); }
  std::uint32_t u32() { return advance<std::uint32_t>(); }
  double f64() { return std::bit_cast<double>(advance<std::uint64_t>()); }
  float f32() { return std::bit_cast<float>(advance<std::uint32_t>()); }
  Pose pose() {
    const double w = f64(), x = f64(), y = f64(), z = f64();
    Vec3 t;
    for (int i = 0; i < 3; ++i) t[i] = f64();
    const Quat q(w, x, y, z);
    if (!(q.norm() > 0.0)) {
      // A diverged estimate still has to cross the wire; keep it non-finite.
      const double nan = std::numeric_limits<double>::quiet_NaN();
      return {Mat3::Constant(nan), t};
    }
    return Pose::from_quaternion(q, t);
  }

 private:
  template <typename T>
  T advance() {
    const T v = get_le<T>(in_, pos_);
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

constexpr std::size_t kPoseBytes = 7 * 8;
constexpr std::size_t kConfigBytes = 3 + 5 * 8 + 12 * 8;

}  // namespace

std::string_view to_string(FrameType type) {
  switch (type) {
    case FrameType::kConfig: return "CONFIG";
    case FrameType::kPoseRequest: return "POSE_REQ";
    case FrameType::kPoseResponse: return "POSE_RESP";
    case FrameType::kObsGroups: return "OBS_GROUPS";
    case FrameType::kStateUpdate: return "STATE_UPDATE";
    case FrameType::kObsFloat: return "OBS_FLOAT";
  }
  return "UNKNOWN";
}

std::string_view to_string(DecodeError error) {
  switch (error) {
    case DecodeError::kNone: return "none";
    case DecodeError::kTruncated: return "truncated";
    case DecodeError::kBadCrc: return "bad CRC";
    case DecodeError::kBadMagic: return "bad magic";
    case DecodeError::kBadVersion: return "bad version";
    case DecodeError::kUnknownType: return "unknown frame type";
    case DecodeError::kLengthMismatch: return "length mismatch";
  }
  return "unknown";
}

Bytes encode_frame(const Frame& frame) {
  if (frame.payload.size() >= kMaxPayload) {
    throw InvalidArgument("encode_frame: payload of " + std::to_string(frame.payload.size()) +
                          " bytes exceeds the 2^24 limit");
  }
  Bytes out;
  out.reserve(kFrameOverhead + frame.payload.size());
  out.push_back(kMagic0);
  out.push_back(kMagic1);
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(frame.type));
  put_le(out, frame.timestamp);
  put_le(out, static_cast<std::uint32_t>(frame.payload.size()));
  out.insert(out.end(), frame.payload.begin(), frame.payload.end());
  put_le(out, crc32_of(out));
  return out;
}

DecodeResult decode_frame(std::span<const std::uint8_t> bytes) {
  DecodeResult r;
  if (bytes.size() < kFrameOverhead) {
    r.error = DecodeError::kTruncated;
    return r;
  }
  const std::size_t body = bytes.size() - kCrcSize;
  if (crc32_of(bytes.first(body)) != get_le<std::uint32_t>(bytes, body)) {
    r.error = DecodeError::kBadCrc;
    return r;
  }
  if (bytes[0] != kMagic0 || bytes[1] != kMagic1) {
    r.error = DecodeError::kBadMagic;
    return r;
  }
  if (bytes[2] != kVersion) {
    r.error = DecodeError::kBadVersion;
    return r;
  }
  if (!known_type(bytes[3])) {
    r.error = DecodeError::kUnknownType;
    return r;
  }
  const auto len = get_le<std::uint32_t>(bytes, 12);
  if (len != body - kHeaderSize) {
    r.error = DecodeError::kLengthMismatch;
    return r;
  }
  r.frame.type = static_cast<FrameType>(bytes[3]);
  r.frame.timestamp = get_le<std::uint64_t>(bytes, 4);
  r.frame.payload.assign(bytes.begin() + kHeaderSize, bytes.begin() + body);
  return r;
}

void FrameAssembler::feed(std::span<const std::uint8_t> bytes) {
  // Drop consumed bytes once they dominate, keeping appends amortized O(1).
  if (head_ > 0 && head_ >= buffer_.size() / 2) {
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(head_));
    head_ = 0;
  }
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

std::optional<Frame> FrameAssembler::next() {
  const std::span<const std::uint8_t> rest = std::span(buffer_).subspan(head_);
  if (rest.size() >= 2 && (rest[0] != kMagic0 || rest[1] != kMagic1)) {
    throw ProtocolError("stream desynchronized: bad magic");
  }
  if (rest.size() < kHeaderSize) return std::nullopt;
  const auto len = get_le<std::uint32_t>(rest, 12);
  if (len >= kMaxPayload) {
    throw ProtocolError("frame header declares an oversized payload");
  }
  const std::size_t total = kFrameOverhead + len;
  if (rest.size() < total) return std::nullopt;
  DecodeResult r = decode_frame(rest.first(total));
  if (!r.ok()) {
    throw ProtocolError("frame rejected: " + std::string(to_string(r.error)));
  }
  head_ += total;
  return std::move(r.frame);
}

void BitWriter::write(std::uint64_t value, int bits) {
  if (bits < 0 || bits > 64 || (bits < 64 && (value >> bits) != 0)) {
    throw InvalidArgument("BitWriter: value does not fit in " + std::to_string(bits) + " bits");
  }
  for (int i = bits - 1; i >= 0; --i) {
    if (bits_ % 8 == 0) bytes_.push_back(0);
    if ((value >> i) & 1U) bytes_.back() |= static_cast<std::uint8_t>(0x80U >> (bits_ % 8));
    ++bits_;
  }
}

int BitWriter::finish() {
  const int pad = static_cast<int>((8 - bits_ % 8) % 8);
  bits_ += pad;
  return pad;
}

std::uint64_t BitReader::read(int bits) {
  if (bits < 0 || bits > 64 || static_cast<std::size_t>(bits) > remaining_bits()) {
    throw ProtocolError("bitstream ended early");
  }
  std::uint64_t v = 0;
  for (int i = 0; i < bits; ++i, ++pos_) {
    v = (v << 1) | ((bytes_[pos_ / 8] >> (7 - pos_ % 8)) & 1U);
  }
  return v;
}

std::size_t group_bits(const ObservationGroupSet& groups, const Codebook& cb) {
  std::size_t bits = 0;
  for (const auto& g : groups) {
    bits += 3 * cb.l_n + 16 + g.members.size() * (cb.l_z + 3 * cb.l_p);
  }
  return bits;
}

PackedGroups pack_groups(const ObservationGroupSet& groups, const Codebook& cb) {
  cb.validate();
  if (groups.size() > 0xFFFF) {
    throw InvalidArgument("pack_groups: more than 65535 groups");
  }
  PackedGroups out;
  put_le(out.payload, static_cast<std::uint16_t>(groups.size()));
  BitWriter w;
  for (const auto& g : groups) {
    if (g.members.size() > 0xFFFF) {
      throw InvalidArgument("pack_groups: more than 65535 members in one group");
    }
    w.write(g.key, 3 * cb.l_n);
    w.write(g.members.size(), 16);
    for (const auto& m : g.members) {
      w.write(m.z_index, cb.l_z);
      for (std::uint32_t idx : m.point) w.write(idx, cb.l_p);
    }
  }
  out.bitstream_bits = w.bit_count();
  out.pad_bits = w.finish();
  out.payload.insert(out.payload.end(), w.bytes().begin(), w.bytes().end());
  return out;
}

ObservationGroupSet unpack_groups(std::span<const std::uint8_t> payload, const Codebook& cb) {
  cb.validate();
  if (payload.size() < 2) {
    throw ProtocolError("OBS_GROUPS payload shorter than its group count");
  }
  const auto count = get_le<std::uint16_t>(payload, 0);
  BitReader r(payload.subspan(2));
  ObservationGroupSet groups(count);
  for (auto& g : groups) {
    g.key = r.read(3 * cb.l_n);
    g.members.resize(r.read(16));
    for (auto& m : g.members) {
      m.z_index = static_cast<std::uint32_t>(r.read(cb.l_z));
      for (auto& idx : m.point) idx = static_cast<std::uint32_t>(r.read(cb.l_p));
    }
  }
  const std::size_t rest = r.remaining_bits();
  if (rest > 7 || r.read(static_cast<int>(rest)) != 0) {
    throw ProtocolError("OBS_GROUPS payload has trailing data");
  }
  return groups;
}

bool ConfigPayload::operator==(const ConfigPayload& o) const {
  return codebook == o.codebook && ds_0 == o.ds_0 && alpha == o.alpha && sigma == o.sigma &&
         imu_from_lidar.rotation == o.imu_from_lidar.rotation &&
         imu_from_lidar.translation == o.imu_from_lidar.translation;
}

Bytes encode_config(const ConfigPayload& c) {
  c.codebook.validate();
  PayloadWriter w;
  w.u8(static_cast<std::uint8_t>(c.codebook.l_p));
  w.u8(static_cast<std::uint8_t>(c.codebook.l_n));
  w.u8(static_cast<std::uint8_t>(c.codebook.l_z));
  w.f64(c.codebook.r_max);
  w.f64(c.codebook.r_thr);
  w.f64(c.ds_0);
  w.f64(c.alpha);
  w.f64(c.sigma);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) w.f64(c.imu_from_lidar.rotation(i, j));
  }
  for (int i = 0; i < 3; ++i) w.f64(c.imu_from_lidar.translation[i]);
  return w.take();
}

ConfigPayload decode_config(std::span<const std::uint8_t> payload) {
  PayloadReader r(payload, kConfigBytes, "CONFIG");
  ConfigPayload c;
  c.codebook.l_p = r.u8();
  c.codebook.l_n = r.u8();
  c.codebook.l_z = r.u8();
  c.codebook.r_max = r.f64();
  c.codebook.r_thr = r.f64();
  c.ds_0 = r.f64();
  c.alpha = r.f64();
  c.sigma = r.f64();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) c.imu_from_lidar.rotation(i, j) = r.f64();
  }
  for (int i = 0; i < 3; ++i) c.imu_from_lidar.translation[i] = r.f64();
  try {
    c.codebook.validate();
  } catch (const InvalidArgument& e) {
    throw ProtocolError(std::string("CONFIG carries an invalid codebook: ") + e.what());
  }
  return c;
}

Bytes encode_pose_request(const PoseRequest& req) {
  PayloadWriter w;
  w.u64(static_cast<std::uint64_t>(req.t_prev));
  w.u64(static_cast<std::uint64_t>(req.t_curr));
  return w.take();
}

PoseRequest decode_pose_request(std::span<const std::uint8_t> payload) {
  PayloadReader r(payload, 16, "POSE_REQ");
  PoseRequest req;
  req.t_prev = static_cast<TimestampUs>(r.u64());
  req.t_curr = static_cast<TimestampUs>(r.u64());
  return req;
}

Bytes encode_pose_response(const PoseResponse& resp) {
  PayloadWriter w;
  w.pose(resp.delta);
  w.pose(resp.prev);
  return w.take();
}

PoseResponse decode_pose_response(std::span<const std::uint8_t> payload) {
  PayloadReader r(payload, 2 * kPoseBytes, "POSE_RESP");
  PoseResponse resp;
  resp.delta = r.pose();
  resp.prev = r.pose();
  return resp;
}

Bytes encode_state_update(const StateUpdate& s) {
  PayloadWriter w;
  w.pose(s.posterior);
  return w.take();
}

StateUpdate decode_state_update(std::span<const std::uint8_t> payload) {
  PayloadReader r(payload, kPoseBytes, "STATE_UPDATE");
  return {r.pose()};
}

Bytes encode_float_observations(std::span<const FloatObservation> obs) {
  PayloadWriter w;
  w.u32(static_cast<std::uint32_t>(obs.size()));
  for (const auto& o : obs) {
    for (int i = 0; i < 3; ++i) w.f32(o.point[i]);
    for (int i = 0; i < 3; ++i) w.f32(o.normal[i]);
    w.f32(o.z);
  }
  return w.take();
}

std::vector<FloatObservation> decode_float_observations(std::span<const std::uint8_t> payload) {
  if (payload.size() < 4) {
    throw ProtocolError("OBS_FLOAT payload shorter than its count");
  }
  const auto n = get_le<std::uint32_t>(payload, 0);
  PayloadReader r(payload, 4 + std::size_t{n} * kFloatObservationBytes, "OBS_FLOAT");
  r.u32();
  std::vector<FloatObservation> out(n);
  for (auto& o : out) {
    for (int i = 0; i < 3; ++i) o.point[i] = r.f32();
    for (int i = 0; i < 3; ++i) o.normal[i] = r.f32();
    o.z = r.f32();
  }
  return out;
}

}  // namespace qlio::wire
