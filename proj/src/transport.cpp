#include "transfed/transport.hpp"

#include <openssl/err.h>
#include <openssl/ssl.h>

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <cerrno>
#include <csignal>
#include <cstring>
#include <mutex>
#include <thread>

namespace transfed::transport {

namespace {

void ignore_sigpipe() {
  static std::once_flag once;
  std::call_once(once, [] { std::signal(SIGPIPE, SIG_IGN); });
}

std::string ssl_error_text() {
  std::string out;
  while (unsigned long e = ERR_get_error()) {
    char buf[256];
    ERR_error_string_n(e, buf, sizeof buf);
    if (!out.empty()) out += "; ";
    out += buf;
  }
  return out.empty() ? "unknown TLS error" : out;
}

struct CtxDeleter {
  void operator()(SSL_CTX* c) const { SSL_CTX_free(c); }
};
using CtxPtr = std::unique_ptr<SSL_CTX, CtxDeleter>;

CtxPtr make_context(const TlsConfig& tls, bool server) {
  CtxPtr ctx(SSL_CTX_new(server ? TLS_server_method() : TLS_client_method()));
  if (!ctx) throw TransportError("TLS context: " + ssl_error_text());
  SSL_CTX_set_min_proto_version(ctx.get(), TLS1_2_VERSION);
  if (!tls.cert.empty()) {
    if (SSL_CTX_use_certificate_chain_file(ctx.get(), tls.cert.c_str()) != 1)
      throw TransportError("TLS certificate " + tls.cert + ": " + ssl_error_text());
    if (SSL_CTX_use_PrivateKey_file(ctx.get(), (tls.key.empty() ? tls.cert : tls.key).c_str(), SSL_FILETYPE_PEM) != 1)
      throw TransportError("TLS key " + tls.key + ": " + ssl_error_text());
  } else if (server) {
    throw TransportError("TLS server needs a certificate (--tls-cert)");
  }
  const bool verify = server ? tls.require_peer_cert : true;
  if (verify) {
    if (tls.ca.empty()) throw TransportError("TLS peer verification needs a CA file (--tls-ca)");
    if (SSL_CTX_load_verify_locations(ctx.get(), tls.ca.c_str(), nullptr) != 1)
      throw TransportError("TLS CA " + tls.ca + ": " + ssl_error_text());
    SSL_CTX_set_verify(ctx.get(), SSL_VERIFY_PEER | (server ? SSL_VERIFY_FAIL_IF_NO_PEER_CERT : 0), nullptr);
  }
  return ctx;
}

int wait_fd(int fd, short events, Clock::time_point deadline, bool bounded) {
  while (true) {
    int timeout_ms = -1;
    if (bounded) {
      const auto left = std::chrono::duration_cast<Duration>(deadline - Clock::now()).count();
      if (left <= 0) return 0;
      timeout_ms = static_cast<int>(std::min<long long>(left, 1 << 30));
    }
    pollfd p{fd, events, 0};
    const int rc = ::poll(&p, 1, timeout_ms);
    if (rc < 0 && errno == EINTR) continue;
    if (rc < 0) throw TransportError(std::string("poll: ") + std::strerror(errno));
    return rc;
  }
}

}  // namespace

struct Stream::Impl {
  int fd = -1;
  SSL* ssl = nullptr;
  CtxPtr ctx;  // client streams own their context

  ~Impl() { shutdown(); }

  void shutdown() {
    if (ssl) {
      SSL_shutdown(ssl);
      SSL_free(ssl);
      ssl = nullptr;
    }
    if (fd >= 0) {
      ::close(fd);
      fd = -1;
    }
  }
};

Stream::Stream() = default;
Stream::Stream(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
Stream::Stream(Stream&&) noexcept = default;
Stream& Stream::operator=(Stream&&) noexcept = default;
Stream::~Stream() = default;

bool Stream::is_open() const { return impl_ && impl_->fd >= 0; }
bool Stream::is_tls() const { return impl_ && impl_->ssl; }

void Stream::close() {
  if (impl_) impl_->shutdown();
}

void Stream::write_all(std::span<const std::uint8_t> bytes) {
  if (!is_open()) throw ClosedError("write on closed stream");
  std::size_t sent = 0;
  while (sent < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - sent, 1 << 20);
    if (impl_->ssl) {
      const int rc = SSL_write(impl_->ssl, bytes.data() + sent, static_cast<int>(n));
      if (rc <= 0) throw ClosedError("TLS write failed: " + ssl_error_text());
      sent += static_cast<std::size_t>(rc);
    } else {
      const ssize_t rc = ::send(impl_->fd, bytes.data() + sent, n, MSG_NOSIGNAL);
      if (rc < 0 && errno == EINTR) continue;
      if (rc <= 0) throw ClosedError(std::string("send: ") + std::strerror(errno));
      sent += static_cast<std::size_t>(rc);
    }
  }
}

void Stream::read_exact(std::span<std::uint8_t> out, Duration timeout) {
  if (!is_open()) throw ClosedError("read on closed stream");
  const bool bounded = timeout > Duration::zero();
  const auto deadline = Clock::now() + timeout;
  std::size_t got = 0;
  while (got < out.size()) {
    const bool buffered = impl_->ssl && SSL_pending(impl_->ssl) > 0;
    if (!buffered && wait_fd(impl_->fd, POLLIN, deadline, bounded) == 0)
      throw TimeoutError("timed out after " + std::to_string(timeout.count()) + " ms waiting for data");
    if (impl_->ssl) {
      const int rc = SSL_read(impl_->ssl, out.data() + got, static_cast<int>(out.size() - got));
      if (rc <= 0) {
        const int err = SSL_get_error(impl_->ssl, rc);
        if (err == SSL_ERROR_WANT_READ || err == SSL_ERROR_WANT_WRITE) continue;
        if (err == SSL_ERROR_ZERO_RETURN) throw ClosedError("peer closed the TLS stream");
        throw ClosedError("TLS read failed: " + ssl_error_text());
      }
      got += static_cast<std::size_t>(rc);
    } else {
      const ssize_t rc = ::recv(impl_->fd, out.data() + got, out.size() - got, 0);
      if (rc < 0 && errno == EINTR) continue;
      if (rc == 0) throw ClosedError("peer closed the connection");
      if (rc < 0) throw ClosedError(std::string("recv: ") + std::strerror(errno));
      got += static_cast<std::size_t>(rc);
    }
  }
}

struct Listener::Impl {
  int fd = -1;
  std::uint16_t port = 0;
  bool tls = false;
  CtxPtr ctx;

  ~Impl() {
    if (fd >= 0) ::close(fd);
  }
};

Listener::Listener(const std::string& host, std::uint16_t port, const TlsConfig& tls)
    : impl_(std::make_unique<Impl>()) {
  ignore_sigpipe();
  if (tls.enabled) {
    impl_->tls = true;
    impl_->ctx = make_context(tls, true);
  }
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const std::string service = std::to_string(port);
  if (const int rc = ::getaddrinfo(host.empty() ? nullptr : host.c_str(), service.c_str(), &hints, &res); rc != 0)
    throw TransportError("resolve " + host + ": " + ::gai_strerror(rc));
  std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, ::freeaddrinfo);
  impl_->fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (impl_->fd < 0) throw TransportError(std::string("socket: ") + std::strerror(errno));
  const int one = 1;
  ::setsockopt(impl_->fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(impl_->fd, res->ai_addr, res->ai_addrlen) != 0)
    throw TransportError("bind " + host + ":" + service + ": " + std::strerror(errno));
  if (::listen(impl_->fd, 64) != 0) throw TransportError(std::string("listen: ") + std::strerror(errno));
  sockaddr_in bound{};
  socklen_t len = sizeof bound;
  ::getsockname(impl_->fd, reinterpret_cast<sockaddr*>(&bound), &len);
  impl_->port = ntohs(bound.sin_port);
}

Listener::Listener(Listener&&) noexcept = default;
Listener& Listener::operator=(Listener&&) noexcept = default;
Listener::~Listener() = default;

std::uint16_t Listener::port() const { return impl_->port; }

Stream Listener::accept(Clock::time_point deadline) {
  if (wait_fd(impl_->fd, POLLIN, deadline, true) == 0) throw TimeoutError("timed out waiting for a client connection");
  const int fd = ::accept(impl_->fd, nullptr, nullptr);
  if (fd < 0) throw TransportError(std::string("accept: ") + std::strerror(errno));
  auto impl = std::make_unique<Stream::Impl>();
  impl->fd = fd;
  const int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  if (impl_->tls) {
    impl->ssl = SSL_new(impl_->ctx.get());
    if (!impl->ssl) throw TransportError("TLS session: " + ssl_error_text());
    SSL_set_fd(impl->ssl, fd);
    // Bound the handshake by the accept deadline; a silent peer cannot stall it.
    const auto left = std::chrono::duration_cast<std::chrono::microseconds>(deadline - Clock::now());
    timeval tv{};
    const auto us = std::max<long long>(left.count(), 1000);
    tv.tv_sec = static_cast<time_t>(us / 1000000);
    tv.tv_usec = static_cast<suseconds_t>(us % 1000000);
    ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    const int ok = SSL_accept(impl->ssl);
    timeval none{};
    ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &none, sizeof none);
    if (ok != 1) throw TransportError("TLS handshake failed: " + ssl_error_text());
  }
  return Stream(std::move(impl));
}

Stream connect(const std::string& host, std::uint16_t port, const TlsConfig& tls, int attempts, Duration retry_delay) {
  ignore_sigpipe();
  std::string last_error;
  for (int attempt = 1; attempt <= std::max(1, attempts); ++attempt) {
    if (attempt > 1) std::this_thread::sleep_for(retry_delay);
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const std::string service = std::to_string(port);
    if (const int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &res); rc != 0) {
      last_error = std::string("resolve: ") + ::gai_strerror(rc);
      continue;
    }
    std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, ::freeaddrinfo);
    const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (fd < 0) throw TransportError(std::string("socket: ") + std::strerror(errno));
    if (::connect(fd, res->ai_addr, res->ai_addrlen) != 0) {
      last_error = std::strerror(errno);
      ::close(fd);
      continue;
    }
    auto impl = std::make_unique<Stream::Impl>();
    impl->fd = fd;
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    if (tls.enabled) {
      impl->ctx = make_context(tls, false);
      impl->ssl = SSL_new(impl->ctx.get());
      if (!impl->ssl) throw TransportError("TLS session: " + ssl_error_text());
      SSL_set_fd(impl->ssl, fd);
      if (SSL_connect(impl->ssl) != 1) throw TransportError("TLS handshake failed: " + ssl_error_text());
    }
    return Stream(std::move(impl));
  }
  throw TransportError("cannot reach " + host + ":" + std::to_string(port) + " after " + std::to_string(attempts) +
                       " attempts: " + last_error);
}

void send_message(Stream& stream, const wire::Message& msg) { stream.write_all(wire::encode(msg)); }

wire::Message receive_message(Stream& stream, Duration timeout) {
  std::array<std::uint8_t, wire::kHeaderSize> header{};
  stream.read_exact(header, timeout);
  const wire::FrameHeader h = wire::decode_header(header);
  wire::Message m;
  m.type = h.type;
  m.round = h.round;
  m.client_id = h.client_id;
  m.payload.resize(h.payload_len);
  stream.read_exact(m.payload, timeout);
  return m;
}

}  // namespace transfed::transport
