#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "fybrr/net.hpp"
#include "fybrr/wire.hpp"

namespace fybrr {

using namespace std::chrono_literals;

/// A socket shared between one reader thread and any number of writers.
class Connection {
public:
    explicit Connection(Socket sock) : sock_(std::move(sock)) {}

    std::optional<Frame> read(std::optional<std::chrono::milliseconds> timeout = std::nullopt) {
        return read_frame(sock_, timeout);
    }
    void write(const Frame& frame) {
        std::lock_guard lock(write_mu_);
        write_frame(sock_, frame);
    }
    /// Unblocks a reader parked in read().
    void shutdown() { sock_.shutdown(); }
    std::optional<std::string> remote_host() const { return sock_.peer_address(); }

private:
    Socket sock_;
    std::mutex write_mu_;
};

using ConnectionHandler = std::function<void(std::shared_ptr<Connection>)>;

/// Accepts TCP connections and runs `handler` on a dedicated thread per
/// connection. stop() closes the listener, shuts every live connection and
/// waits for all handler threads to return.
class TcpServer {
public:
    TcpServer(const Endpoint& bind, ConnectionHandler handler, std::size_t max_connections = 1024);
    ~TcpServer();
    TcpServer(const TcpServer&) = delete;
    TcpServer& operator=(const TcpServer&) = delete;

    Endpoint local() const { return local_; }
    void stop();

private:
    void accept_loop();

    Listener listener_;
    Endpoint local_;
    ConnectionHandler handler_;
    std::size_t max_connections_;
    std::atomic<bool> stopping_{false};
    std::mutex mu_;
    std::condition_variable cv_;
    std::set<std::shared_ptr<Connection>> live_;
    std::size_t active_threads_ = 0;
    std::thread acceptor_;
};

using FrameHandler = std::function<std::optional<Frame>(const Frame&)>;
/// Takes over a connection whose first frame is `first`; returns when done.
using StreamHandler = std::function<void(std::shared_ptr<Connection>, Frame first)>;

/// Request/response loop: each inbound frame gets handler's reply. A
/// nullopt reply drops the request and closes the connection. Frames of
/// type kHello are handed to `stream` when one is provided.
ConnectionHandler serve_frames(FrameHandler handler, StreamHandler stream = {});

/// Request/response client abstraction shared by the TCP and in-process
/// networks. Endpoints are "host:port" strings.
class Transport {
public:
    virtual ~Transport() = default;
    /// nullopt when the peer is unreachable, dropped the request, or timed out.
    virtual std::optional<Frame> call(const std::string& endpoint, const Frame& request,
                                      std::chrono::milliseconds timeout) = 0;
};

/// Keeps a small pool of idle connections per endpoint.
class TcpTransport final : public Transport {
public:
    explicit TcpTransport(std::size_t max_idle_per_endpoint = 2) : max_idle_(max_idle_per_endpoint) {}
    std::optional<Frame> call(const std::string& endpoint, const Frame& request,
                              std::chrono::milliseconds timeout) override;
    void clear();

private:
    std::optional<Socket> take_idle(const std::string& endpoint);
    void put_idle(const std::string& endpoint, Socket sock);

    std::size_t max_idle_;
    std::mutex mu_;
    std::map<std::string, std::vector<Socket>> idle_;
};

/// Synchronous in-memory "network" for simulated swarms: endpoints map to
/// frame handlers invoked on the caller's thread.
class InProcNetwork {
public:
    void attach(const std::string& endpoint, FrameHandler handler);
    void detach(const std::string& endpoint);
    bool attached(const std::string& endpoint) const;
    std::optional<Frame> deliver(const std::string& endpoint, const Frame& request);
    std::uint64_t calls() const { return calls_.load(); }

private:
    mutable std::mutex mu_;
    std::map<std::string, std::shared_ptr<FrameHandler>> handlers_;
    std::atomic<std::uint64_t> calls_{0};
};

class InProcTransport final : public Transport {
public:
    explicit InProcTransport(std::shared_ptr<InProcNetwork> net) : net_(std::move(net)) {}
    std::optional<Frame> call(const std::string& endpoint, const Frame& request,
                              std::chrono::milliseconds) override {
        return net_->deliver(endpoint, request);
    }

private:
    std::shared_ptr<InProcNetwork> net_;
};

}  // namespace fybrr
