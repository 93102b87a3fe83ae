#include "qlio/session.hpp"

#include <string>

namespace qlio {

using wire::FrameType;

void SessionOrder::accept(const wire::Frame& frame) {
  const auto fail = [&](const std::string& why) {
    throw ProtocolError("protocol order violation at " + std::string(wire::to_string(frame.type)) +
                        " (t=" + std::to_string(frame.timestamp) + "): " + why);
  };

  if (!configured_) {
    if (frame.type != FrameType::kConfig) fail("session must start with CONFIG");
    configured_ = true;
    expected_ = FrameType::kPoseRequest;
    return;
  }
  if (frame.type == FrameType::kConfig) fail("duplicate CONFIG");

  const bool obs = frame.type == FrameType::kObsGroups || frame.type == FrameType::kObsFloat;
  const bool matches = obs ? expected_ == FrameType::kObsGroups : frame.type == expected_;
  if (!matches) {
    fail("expected " + std::string(wire::to_string(expected_)));
  }

  if (frame.type == FrameType::kPoseRequest) {
    if (any_scan_ && frame.timestamp <= scan_time_) {
      fail("scan timestamp does not advance");
    }
    scan_time_ = frame.timestamp;
    any_scan_ = true;
  } else if (frame.timestamp != scan_time_) {
    fail("timestamp differs from the open scan");
  }

  switch (frame.type) {
    case FrameType::kPoseRequest: expected_ = FrameType::kPoseResponse; break;
    case FrameType::kPoseResponse: expected_ = FrameType::kObsGroups; break;
    case FrameType::kStateUpdate:
      expected_ = FrameType::kPoseRequest;
      ++scans_;
      break;
    default: expected_ = FrameType::kStateUpdate; break;
  }
}

TranscriptSummary verify_transcript(std::span<const std::uint8_t> stream) {
  wire::FrameAssembler assembler;
  assembler.feed(stream);
  SessionOrder order;
  TranscriptSummary summary;
  while (auto frame = assembler.next()) {
    order.accept(*frame);
    if (frame->type == FrameType::kConfig) {
      ++summary.config_frames;
    } else {
      ++summary.scan_frames;
    }
  }
  if (assembler.buffered() != 0) {
    throw ProtocolError("transcript ends inside a frame");
  }
  if (!order.idle() && order.configured()) {
    throw ProtocolError("transcript ends inside a scan");
  }
  summary.scans = order.scans_completed();
  return summary;
}

}  // namespace qlio
