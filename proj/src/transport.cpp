#include "fybrr/transport.hpp"

#include <spdlog/spdlog.h>

namespace fybrr {

TcpServer::TcpServer(const Endpoint& bind, ConnectionHandler handler, std::size_t max_connections)
    : listener_(bind), local_(listener_.local()), handler_(std::move(handler)), max_connections_(max_connections) {
    if (bind.host != "0.0.0.0" && !bind.host.empty()) local_.host = bind.host == "localhost" ? "127.0.0.1" : bind.host;
    acceptor_ = std::thread([this] { accept_loop(); });
}

TcpServer::~TcpServer() { stop(); }

void TcpServer::accept_loop() {
    while (!stopping_) {
        std::optional<Socket> sock;
        try {
            sock = listener_.accept(100ms);
        } catch (const Error&) {
            if (stopping_) break;
            continue;
        }
        if (!sock) continue;
        auto conn = std::make_shared<Connection>(std::move(*sock));
        {
            std::lock_guard lock(mu_);
            if (stopping_) break;
            if (live_.size() >= max_connections_) {
                spdlog::warn("{}: connection cap reached, refusing", local_.str());
                continue;
            }
            live_.insert(conn);
            ++active_threads_;
        }
        std::thread([this, conn] {
            try {
                handler_(conn);
            } catch (const std::exception& e) {
                spdlog::debug("{}: connection handler ended: {}", local_.str(), e.what());
            }
            conn->shutdown();
            std::lock_guard lock(mu_);
            live_.erase(conn);
            --active_threads_;
            cv_.notify_all();
        }).detach();
    }
}

void TcpServer::stop() {
    if (stopping_.exchange(true)) {
        if (acceptor_.joinable()) acceptor_.join();
        return;
    }
    listener_.close();
    if (acceptor_.joinable()) acceptor_.join();
    std::unique_lock lock(mu_);
    for (const auto& c : live_) c->shutdown();
    cv_.wait(lock, [this] { return active_threads_ == 0; });
}

ConnectionHandler serve_frames(FrameHandler handler, StreamHandler stream) {
    return [handler = std::move(handler), stream = std::move(stream)](std::shared_ptr<Connection> conn) {
        for (;;) {
            std::optional<Frame> req = conn->read();
            if (!req) return;
            if (req->type == MsgType::kHello && stream) {
                stream(conn, std::move(*req));
                return;
            }
            std::optional<Frame> resp = handler(*req);
            if (!resp) return;
            conn->write(*resp);
        }
    };
}

std::optional<Socket> TcpTransport::take_idle(const std::string& endpoint) {
    std::lock_guard lock(mu_);
    auto it = idle_.find(endpoint);
    if (it == idle_.end() || it->second.empty()) return std::nullopt;
    Socket s = std::move(it->second.back());
    it->second.pop_back();
    return s;
}

void TcpTransport::put_idle(const std::string& endpoint, Socket sock) {
    std::lock_guard lock(mu_);
    auto& pool = idle_[endpoint];
    if (pool.size() < max_idle_) pool.push_back(std::move(sock));
}

void TcpTransport::clear() {
    std::lock_guard lock(mu_);
    idle_.clear();
}

std::optional<Frame> TcpTransport::call(const std::string& endpoint, const Frame& request,
                                        std::chrono::milliseconds timeout) {
    for (int attempt = 0; attempt < 2; ++attempt) {
        std::optional<Socket> pooled = attempt == 0 ? take_idle(endpoint) : std::nullopt;
        bool reused = pooled.has_value();
        Socket sock;
        try {
            sock = reused ? std::move(*pooled) : Socket::connect(Endpoint::parse(endpoint), timeout);
            write_frame(sock, request);
            std::optional<Frame> resp = read_frame(sock, timeout);
            if (!resp) {
                if (reused) continue;  // stale pooled connection
                return std::nullopt;
            }
            put_idle(endpoint, std::move(sock));
            return resp;
        } catch (const Error& e) {
            if (reused && e.code() != ErrorCode::kTimeout) continue;
            spdlog::debug("call {} {}: {}", endpoint, msg_type_name(request.type), e.what());
            return std::nullopt;
        }
    }
    return std::nullopt;
}

void InProcNetwork::attach(const std::string& endpoint, FrameHandler handler) {
    std::lock_guard lock(mu_);
    handlers_[endpoint] = std::make_shared<FrameHandler>(std::move(handler));
}

void InProcNetwork::detach(const std::string& endpoint) {
    std::lock_guard lock(mu_);
    handlers_.erase(endpoint);
}

bool InProcNetwork::attached(const std::string& endpoint) const {
    std::lock_guard lock(mu_);
    return handlers_.count(endpoint) != 0;
}

std::optional<Frame> InProcNetwork::deliver(const std::string& endpoint, const Frame& request) {
    std::shared_ptr<FrameHandler> h;
    {
        std::lock_guard lock(mu_);
        auto it = handlers_.find(endpoint);
        if (it == handlers_.end()) return std::nullopt;
        h = it->second;
    }
    ++calls_;
    // Round-trip through the codec so simulated traffic exercises the same framing.
    Frame wire_req = decode_frame(encode_frame(request));
    std::optional<Frame> resp = (*h)(wire_req);
    if (!resp) return std::nullopt;
    return decode_frame(encode_frame(*resp));
}

}  // namespace fybrr
