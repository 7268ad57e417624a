#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>

#include "fybrr/bytes.hpp"

namespace fybrr {

struct Endpoint {
    std::string host;
    std::uint16_t port = 0;

    auto operator<=>(const Endpoint&) const = default;
    std::string str() const { return host + ":" + std::to_string(port); }
    /// "host:port"; throws Error(kInvalidArgument) when unparseable.
    static Endpoint parse(std::string_view text);
};

/// Owning TCP socket handle.
class Socket {
public:
    Socket() = default;
    explicit Socket(int fd) : fd_(fd) {}
    ~Socket();
    Socket(Socket&& other) noexcept : fd_(std::exchange(other.fd_, -1)) {}
    Socket& operator=(Socket&& other) noexcept;
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;

    static Socket connect(const Endpoint& ep, std::chrono::milliseconds timeout);

    bool valid() const { return fd_ >= 0; }
    int fd() const { return fd_; }

    void send_all(ByteView data);
    /// Returns false on EOF before any byte of this read; throws on timeout,
    /// on EOF mid-read, or on socket error.
    bool recv_exact(std::span<std::uint8_t> out, std::optional<std::chrono::milliseconds> timeout);

    /// Unblocks readers on other threads; the fd stays owned.
    void shutdown();
    void close();
    std::optional<std::string> peer_address() const;

private:
    int fd_ = -1;
};

class Listener {
public:
    /// Binds host:port; port 0 picks an ephemeral port.
    explicit Listener(const Endpoint& bind);
    ~Listener();
    Listener(const Listener&) = delete;
    Listener& operator=(const Listener&) = delete;

    /// Waits up to `timeout` for a connection.
    std::optional<Socket> accept(std::chrono::milliseconds timeout);
    Endpoint local() const { return local_; }
    void close();

private:
    int fd_ = -1;
    Endpoint local_;
};

}  // namespace fybrr
