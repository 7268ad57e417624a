#include "fybrr/net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

namespace fybrr {
namespace {

[[noreturn]] void throw_errno(const std::string& what) {
    throw Error(ErrorCode::kIo, what + ": " + std::strerror(errno));
}

sockaddr_in resolve(const Endpoint& ep) {
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(ep.port);
    std::string host = ep.host == "localhost" ? "127.0.0.1" : ep.host;
    if (host.empty() || host == "*") host = "0.0.0.0";
    if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) == 1) return addr;

    addrinfo hints{};
    hints.ai_family = AF_INET;
    addrinfo* res = nullptr;
    if (getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
        throw Error(ErrorCode::kConnectivity, "cannot resolve host " + ep.host);
    }
    addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
    freeaddrinfo(res);
    return addr;
}

bool wait_fd(int fd, short events, std::optional<std::chrono::milliseconds> timeout) {
    pollfd p{fd, events, 0};
    int ms = timeout ? static_cast<int>(timeout->count()) : -1;
    for (;;) {
        int rc = ::poll(&p, 1, ms);
        if (rc > 0) return true;
        if (rc == 0) return false;
        if (errno != EINTR) throw_errno("poll");
    }
}

void set_nodelay(int fd) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

}  // namespace

Endpoint Endpoint::parse(std::string_view text) {
    auto colon = text.rfind(':');
    if (colon == std::string_view::npos || colon == 0 || colon + 1 == text.size()) {
        throw Error(ErrorCode::kInvalidArgument, "endpoint must be host:port, got '" + std::string(text) + "'");
    }
    Endpoint ep;
    ep.host = std::string(text.substr(0, colon));
    unsigned long port = 0;
    for (char c : text.substr(colon + 1)) {
        if (c < '0' || c > '9') throw Error(ErrorCode::kInvalidArgument, "bad port in '" + std::string(text) + "'");
        port = port * 10 + static_cast<unsigned long>(c - '0');
        if (port > 65535) throw Error(ErrorCode::kInvalidArgument, "port out of range in '" + std::string(text) + "'");
    }
    ep.port = static_cast<std::uint16_t>(port);
    return ep;
}

Socket::~Socket() { close(); }

Socket& Socket::operator=(Socket&& other) noexcept {
    if (this != &other) {
        close();
        fd_ = std::exchange(other.fd_, -1);
    }
    return *this;
}

Socket Socket::connect(const Endpoint& ep, std::chrono::milliseconds timeout) {
    sockaddr_in addr = resolve(ep);
    int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd < 0) throw_errno("socket");
    Socket sock(fd);
    int flags = ::fcntl(fd, F_GETFL, 0);
    ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
    int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
    if (rc != 0) {
        if (errno != EINPROGRESS) {
            throw Error(ErrorCode::kConnectivity, "connect " + ep.str() + ": " + std::strerror(errno));
        }
        if (!wait_fd(fd, POLLOUT, timeout)) throw Error(ErrorCode::kTimeout, "connect " + ep.str() + ": timed out");
        int err = 0;
        socklen_t len = sizeof err;
        ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
        if (err != 0) throw Error(ErrorCode::kConnectivity, "connect " + ep.str() + ": " + std::strerror(err));
    }
    ::fcntl(fd, F_SETFL, flags);
    set_nodelay(fd);
    return sock;
}

void Socket::send_all(ByteView data) {
    std::size_t sent = 0;
    while (sent < data.size()) {
        ssize_t n = ::send(fd_, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw Error(ErrorCode::kIo, std::string("send: ") + std::strerror(errno));
        }
        sent += static_cast<std::size_t>(n);
    }
}

bool Socket::recv_exact(std::span<std::uint8_t> out, std::optional<std::chrono::milliseconds> timeout) {
    auto deadline = timeout ? std::optional(std::chrono::steady_clock::now() + *timeout) : std::nullopt;
    std::size_t got = 0;
    while (got < out.size()) {
        std::optional<std::chrono::milliseconds> left;
        if (deadline) {
            left = std::chrono::duration_cast<std::chrono::milliseconds>(*deadline - std::chrono::steady_clock::now());
            if (left->count() < 0) left = std::chrono::milliseconds(0);
        }
        if (!wait_fd(fd_, POLLIN, left)) throw Error(ErrorCode::kTimeout, "recv timed out");
        ssize_t n = ::recv(fd_, out.data() + got, out.size() - got, 0);
        if (n == 0) {
            if (got == 0) return false;
            throw Error(ErrorCode::kIo, "connection closed mid-frame");
        }
        if (n < 0) {
            if (errno == EINTR || errno == EAGAIN) continue;
            throw Error(ErrorCode::kIo, std::string("recv: ") + std::strerror(errno));
        }
        got += static_cast<std::size_t>(n);
    }
    return true;
}

void Socket::shutdown() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void Socket::close() {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

std::optional<std::string> Socket::peer_address() const {
    sockaddr_in addr{};
    socklen_t len = sizeof addr;
    if (::getpeername(fd_, reinterpret_cast<sockaddr*>(&addr), &len) != 0) return std::nullopt;
    char buf[INET_ADDRSTRLEN] = {};
    ::inet_ntop(AF_INET, &addr.sin_addr, buf, sizeof buf);
    return std::string(buf);
}

Listener::Listener(const Endpoint& bind) {
    sockaddr_in addr = resolve(bind);
    fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd_ < 0) throw_errno("socket");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
        int err = errno;
        ::close(fd_);
        fd_ = -1;
        throw Error(ErrorCode::kIo, "bind " + bind.str() + ": " + std::strerror(err));
    }
    if (::listen(fd_, 512) != 0) throw_errno("listen");
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    char buf[INET_ADDRSTRLEN] = {};
    ::inet_ntop(AF_INET, &addr.sin_addr, buf, sizeof buf);
    local_.host = buf;
    local_.port = ntohs(addr.sin_port);
}

Listener::~Listener() { close(); }

std::optional<Socket> Listener::accept(std::chrono::milliseconds timeout) {
    if (fd_ < 0) return std::nullopt;
    if (!wait_fd(fd_, POLLIN, timeout)) return std::nullopt;
    int fd = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) return std::nullopt;
    set_nodelay(fd);
    return Socket(fd);
}

void Listener::close() {
    if (fd_ >= 0) {
        ::shutdown(fd_, SHUT_RDWR);
        ::close(fd_);
        fd_ = -1;
    }
}

}  // namespace fybrr
