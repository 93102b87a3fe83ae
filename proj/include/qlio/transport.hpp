#pragma once

#include "qlio/wire.hpp"

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <vector>

namespace qlio::transport {

/// Ordered, reliable, bidirectional byte stream.
class Channel {
 public:
  virtual ~Channel() = default;
  virtual void send(std::span<const std::uint8_t> bytes) = 0;
  /// Blocks until at least one byte is available; returns 0 once the peer
  /// has closed and everything was drained.
  virtual std::size_t receive(std::span<std::uint8_t> buffer) = 0;
  /// Signals end of stream to the peer.
  virtual void close() = 0;
};

struct ChannelPair {
  std::unique_ptr<Channel> first;
  std::unique_ptr<Channel> second;
};

ChannelPair make_inproc_pair();

/// TCP listener on 127.0.0.1. Port 0 picks an ephemeral port.
class SocketListener {
 public:
  explicit SocketListener(std::uint16_t port);
  ~SocketListener();
  SocketListener(const SocketListener&) = delete;
  SocketListener& operator=(const SocketListener&) = delete;

  std::uint16_t port() const { return port_; }
  std::unique_ptr<Channel> accept();

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

std::unique_ptr<Channel> connect_socket(std::uint16_t port);

/// Raw bytes of every frame sent through any endpoint sharing it, in send order.
class Recorder {
 public:
  void record(const wire::Bytes& frame);
  std::vector<wire::Bytes> frames() const;
  wire::Bytes stream() const;

 private:
  mutable std::mutex mu_;
  std::vector<wire::Bytes> frames_;
};

/// Frame-level view of a channel.
class Endpoint {
 public:
  explicit Endpoint(Channel& channel, Recorder* recorder = nullptr)
      : channel_(channel), recorder_(recorder) {}

  /// Returns the encoded size in bytes.
  std::size_t send(const wire::Frame& frame);
  /// Next frame, or nullopt on a clean end of stream. Throws ProtocolError on
  /// corruption and TransportError on a stream cut mid-frame.
  std::optional<wire::Frame> receive();
  void close() { channel_.close(); }

 private:
  Channel& channel_;
  Recorder* recorder_;
  wire::FrameAssembler assembler_;
};

}  // namespace qlio::transport
