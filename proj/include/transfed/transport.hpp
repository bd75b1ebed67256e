#pragma once

// Blocking TCP streams with optional TLS (OpenSSL) and framed message I/O.

#include "transfed/wire.hpp"

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>

namespace transfed::transport {

struct TransportError : Error {
  using Error::Error;
};

struct TimeoutError : TransportError {
  using TransportError::TransportError;
};

/// Peer closed the stream.
struct ClosedError : TransportError {
  using TransportError::TransportError;
};

/// Server side: `cert`/`key` identify the server; `ca` plus
/// `require_peer_cert` turns on mutual authentication. Client side: `ca`
/// verifies the server chain; `cert`/`key` are presented when set.
struct TlsConfig {
  bool enabled = false;
  std::string cert;
  std::string key;
  std::string ca;
  bool require_peer_cert = false;
};

using Clock = std::chrono::steady_clock;
using Duration = std::chrono::milliseconds;

class Stream {
 public:
  Stream();
  Stream(Stream&&) noexcept;
  Stream& operator=(Stream&&) noexcept;
  Stream(const Stream&) = delete;
  Stream& operator=(const Stream&) = delete;
  ~Stream();

  void write_all(std::span<const std::uint8_t> bytes);
  /// Fills `out` completely or throws; a zero timeout waits indefinitely.
  void read_exact(std::span<std::uint8_t> out, Duration timeout);
  void close();
  bool is_open() const;
  bool is_tls() const;

 private:
  struct Impl;
  explicit Stream(std::unique_ptr<Impl> impl);
  friend class Listener;
  friend Stream connect(const std::string&, std::uint16_t, const TlsConfig&, int, Duration);
  std::unique_ptr<Impl> impl_;
};

class Listener {
 public:
  /// Binds and listens; port 0 picks an ephemeral port.
  Listener(const std::string& host, std::uint16_t port, const TlsConfig& tls);
  Listener(Listener&&) noexcept;
  Listener& operator=(Listener&&) noexcept;
  ~Listener();

  std::uint16_t port() const;
  /// Accepts one connection (and completes the TLS handshake) before `deadline`.
  Stream accept(Clock::time_point deadline);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Connects with `attempts` tries spaced by `retry_delay`.
Stream connect(const std::string& host, std::uint16_t port, const TlsConfig& tls, int attempts = 5,
               Duration retry_delay = std::chrono::seconds(2));

void send_message(Stream& stream, const wire::Message& msg);
/// Reads one frame; the header is validated before the payload is read.
wire::Message receive_message(Stream& stream, Duration timeout = Duration::zero());

}  // namespace transfed::transport
