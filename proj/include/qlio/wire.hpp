#pragma once

#include "qlio/common.hpp"
#include "qlio/quantizer.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace qlio::wire {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint8_t kMagic0 = 0x51;
inline constexpr std::uint8_t kMagic1 = 0x4C;
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 16;
inline constexpr std::size_t kCrcSize = 4;
inline constexpr std::size_t kFrameOverhead = kHeaderSize + kCrcSize;
inline constexpr std::size_t kMaxPayload = std::size_t{1} << 24;  // exclusive

enum class FrameType : std::uint8_t {
  kConfig = 0x00,
  kPoseRequest = 0x01,
  kPoseResponse = 0x02,
  kObsGroups = 0x03,
  kStateUpdate = 0x04,
  kObsFloat = 0x05,  // unquantized observations for the float baseline
};

std::string_view to_string(FrameType type);

struct Frame {
  FrameType type = FrameType::kConfig;
  std::uint64_t timestamp = 0;  // microseconds
  Bytes payload;

  bool operator==(const Frame&) const = default;
};

/// Throws InvalidArgument when the payload is 2^24 bytes or larger.
Bytes encode_frame(const Frame& frame);

enum class DecodeError {
  kNone,
  kTruncated,       // retriable: wait for more bytes
  kBadCrc,
  kBadMagic,
  kBadVersion,
  kUnknownType,
  kLengthMismatch,
};

std::string_view to_string(DecodeError error);

struct DecodeResult {
  DecodeError error = DecodeError::kNone;
  Frame frame;

  bool ok() const { return error == DecodeError::kNone; }
};

/// Decodes one complete frame occupying the whole buffer. The CRC is
/// verified before any header field is trusted.
DecodeResult decode_frame(std::span<const std::uint8_t> bytes);

/// Splits a byte stream into frames.
class FrameAssembler {
 public:
  void feed(std::span<const std::uint8_t> bytes);
  /// Next complete frame, nullopt when more bytes are needed. Throws
  /// ProtocolError on a corrupt frame.
  std::optional<Frame> next();
  std::size_t buffered() const { return buffer_.size() - head_; }

 private:
  Bytes buffer_;
  std::size_t head_ = 0;  // start of the unconsumed bytes
};

/// MSB-first bit packing.
class BitWriter {
 public:
  void write(std::uint64_t value, int bits);
  /// Zero-pads to a byte boundary; returns the number of pad bits.
  int finish();
  std::size_t bit_count() const { return bits_; }
  const Bytes& bytes() const { return bytes_; }

 private:
  Bytes bytes_;
  std::size_t bits_ = 0;
};

class BitReader {
 public:
  explicit BitReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  /// Throws ProtocolError when reading past the end.
  std::uint64_t read(int bits);
  std::size_t remaining_bits() const { return bytes_.size() * 8 - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

struct PackedGroups {
  Bytes payload;
  std::size_t bitstream_bits = 0;  // excludes the group count and padding
  int pad_bits = 0;
};

/// u16 group count, then per group: key (3 l_n bits), member count (16 bits),
/// members as [z (l_z bits), px, py, pz (l_p bits each)]; one final pad.
PackedGroups pack_groups(const ObservationGroupSet& groups, const Codebook& cb);
ObservationGroupSet unpack_groups(std::span<const std::uint8_t> payload, const Codebook& cb);

/// Bits a group set occupies in the bitstream, excluding count and pad.
std::size_t group_bits(const ObservationGroupSet& groups, const Codebook& cb);

struct ConfigPayload {
  Codebook codebook;
  double ds_0 = 0.5;
  double alpha = 0.01;
  double sigma = 0.02;
  Pose imu_from_lidar;

  bool operator==(const ConfigPayload& o) const;
};

struct PoseRequest {
  TimestampUs t_prev = 0;
  TimestampUs t_curr = 0;
};

struct PoseResponse {
  Pose delta;  // end-of-scan body <- start-of-scan body
  Pose prev;   // world <- body at t_prev
};

struct StateUpdate {
  Pose posterior;  // world <- body at t_curr
};

/// One unquantized observation, 28 bytes on the wire.
struct FloatObservation {
  Eigen::Vector3f point;   // LiDAR frame, end of scan
  Eigen::Vector3f normal;  // unit
  float z = 0.0f;

  bool operator==(const FloatObservation&) const = default;
};

inline constexpr std::size_t kFloatObservationBytes = 28;

Bytes encode_config(const ConfigPayload& c);
ConfigPayload decode_config(std::span<const std::uint8_t> payload);
Bytes encode_pose_request(const PoseRequest& r);
PoseRequest decode_pose_request(std::span<const std::uint8_t> payload);
Bytes encode_pose_response(const PoseResponse& r);
PoseResponse decode_pose_response(std::span<const std::uint8_t> payload);
Bytes encode_state_update(const StateUpdate& s);
StateUpdate decode_state_update(std::span<const std::uint8_t> payload);
Bytes encode_float_observations(std::span<const FloatObservation> obs);
std::vector<FloatObservation> decode_float_observations(std::span<const std::uint8_t> payload);

}  // namespace qlio::wire
