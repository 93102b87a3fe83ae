#pragma once

#include "qlio/wire.hpp"

#include <cstddef>
#include <span>

namespace qlio {

/// Enforces the frame order of one session: CONFIG once, then per scan
/// POSE_REQ, POSE_RESP, one observation frame, STATE_UPDATE. Scan frames carry
/// t_k as their timestamp and t_k strictly increases between scans.
class SessionOrder {
 public:
  /// Throws ProtocolError when `frame` may not come next.
  void accept(const wire::Frame& frame);

  std::size_t scans_completed() const { return scans_; }
  bool configured() const { return configured_; }
  /// True between scans (after CONFIG or a STATE_UPDATE).
  bool idle() const { return configured_ && expected_ == wire::FrameType::kPoseRequest; }

 private:
  bool configured_ = false;
  wire::FrameType expected_ = wire::FrameType::kConfig;
  std::uint64_t scan_time_ = 0;
  bool any_scan_ = false;
  std::size_t scans_ = 0;
};

struct TranscriptSummary {
  std::size_t config_frames = 0;
  std::size_t scan_frames = 0;
  std::size_t scans = 0;
};

/// Replays a captured byte stream through the decoder and the order checker.
/// Throws ProtocolError on any corruption or order violation.
TranscriptSummary verify_transcript(std::span<const std::uint8_t> stream);

}  // namespace qlio
