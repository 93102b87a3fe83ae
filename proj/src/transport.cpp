#include "qlio/transport.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <array>
#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <string>

namespace qlio::transport {

namespace {

class ByteQueue {
 public:
  void push(std::span<const std::uint8_t> bytes) {
    {
      std::lock_guard lock(mu_);
      if (closed_) throw TransportError("write to a closed in-process channel");
      data_.insert(data_.end(), bytes.begin(), bytes.end());
    }
    cv_.notify_all();
  }

  std::size_t pop(std::span<std::uint8_t> out) {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !data_.empty() || closed_; });
    const std::size_t n = std::min(out.size(), data_.size());
    std::copy_n(data_.begin(), n, out.begin());
    data_.erase(data_.begin(), data_.begin() + static_cast<std::ptrdiff_t>(n));
    return n;
  }

  void close() {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::uint8_t> data_;
  bool closed_ = false;
};

class InprocChannel : public Channel {
 public:
  InprocChannel(std::shared_ptr<ByteQueue> out, std::shared_ptr<ByteQueue> in)
      : out_(std::move(out)), in_(std::move(in)) {}
  ~InprocChannel() override { out_->close(); }

  void send(std::span<const std::uint8_t> bytes) override { out_->push(bytes); }
  std::size_t receive(std::span<std::uint8_t> buffer) override { return in_->pop(buffer); }
  void close() override { out_->close(); }

 private:
  std::shared_ptr<ByteQueue> out_;
  std::shared_ptr<ByteQueue> in_;
};

std::string errno_text(const char* what) {
  return std::string(what) + ": " + std::strerror(errno);
}

class SocketChannel : public Channel {
 public:
  explicit SocketChannel(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  ~SocketChannel() override { ::close(fd_); }

  void send(std::span<const std::uint8_t> bytes) override {
    std::size_t sent = 0;
    while (sent < bytes.size()) {
      const ssize_t n = ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw TransportError(errno_text("socket send"));
      }
      sent += static_cast<std::size_t>(n);
    }
  }

  std::size_t receive(std::span<std::uint8_t> buffer) override {
    for (;;) {
      const ssize_t n = ::recv(fd_, buffer.data(), buffer.size(), 0);
      if (n >= 0) return static_cast<std::size_t>(n);
      if (errno != EINTR) throw TransportError(errno_text("socket recv"));
    }
  }

  void close() override { ::shutdown(fd_, SHUT_WR); }

 private:
  int fd_;
};

}  // namespace

ChannelPair make_inproc_pair() {
  auto a_to_b = std::make_shared<ByteQueue>();
  auto b_to_a = std::make_shared<ByteQueue>();
  return {std::make_unique<InprocChannel>(a_to_b, b_to_a),
          std::make_unique<InprocChannel>(b_to_a, a_to_b)};
}

SocketListener::SocketListener(std::uint16_t port) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw TransportError(errno_text("socket"));
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    const std::string msg = errno_text(("bind to port " + std::to_string(port)).c_str());
    ::close(fd_);
    throw TransportError(msg);
  }
  if (::listen(fd_, 1) != 0) {
    const std::string msg = errno_text("listen");
    ::close(fd_);
    throw TransportError(msg);
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

SocketListener::~SocketListener() {
  if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<Channel> SocketListener::accept() {
  for (;;) {
    const int fd = ::accept(fd_, nullptr, nullptr);
    if (fd >= 0) return std::make_unique<SocketChannel>(fd);
    if (errno != EINTR) throw TransportError(errno_text("accept"));
  }
}

std::unique_ptr<Channel> connect_socket(std::uint16_t port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw TransportError(errno_text("socket"));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    const std::string msg = errno_text(("connect to port " + std::to_string(port)).c_str());
    ::close(fd);
    throw TransportError(msg);
  }
  return std::make_unique<SocketChannel>(fd);
}

void Recorder::record(const wire::Bytes& frame) {
  std::lock_guard lock(mu_);
  frames_.push_back(frame);
}

std::vector<wire::Bytes> Recorder::frames() const {
  std::lock_guard lock(mu_);
  return frames_;
}

wire::Bytes Recorder::stream() const {
  std::lock_guard lock(mu_);
  wire::Bytes out;
  for (const auto& f : frames_) out.insert(out.end(), f.begin(), f.end());
  return out;
}

std::size_t Endpoint::send(const wire::Frame& frame) {
  const wire::Bytes bytes = wire::encode_frame(frame);
  // Record before sending so the capture order matches the causal order.
  if (recorder_ != nullptr) recorder_->record(bytes);
  channel_.send(bytes);
  return bytes.size();
}

std::optional<wire::Frame> Endpoint::receive() {
  std::array<std::uint8_t, 65536> buf{};
  for (;;) {
    if (auto frame = assembler_.next()) return frame;
    const std::size_t n = channel_.receive(buf);
    if (n == 0) {
      if (assembler_.buffered() != 0) {
        throw TransportError("stream closed in the middle of a frame");
      }
      return std::nullopt;
    }
    assembler_.feed(std::span(buf).first(n));
  }
}

}  // namespace qlio::transport
