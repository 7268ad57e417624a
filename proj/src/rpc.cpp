#include "fybrr/rpc.hpp"

#include <spdlog/spdlog.h>

#include "fybrr/crypto.hpp"

namespace fybrr {

void encode(ByteWriter& w, const NodeInfo& n) {
    w.raw(n.peer_id).str(n.endpoint);
}

NodeInfo decode_node_info(ByteReader& r) {
    NodeInfo n;
    n.peer_id = r.array<32>();
    n.endpoint = r.str(256);
    return n;
}

Hash32 swarm_digest(std::string_view swarm_key) {
    ByteWriter w;
    w.raw(as_bytes("fybrr/swarm/v1")).raw(as_bytes(swarm_key));
    return sha256(w.bytes());
}

void RpcRouter::on(MsgType type, Handler handler) {
    std::unique_lock lock(mu_);
    handlers_[type] = std::move(handler);
}

void RpcRouter::set_contact_observer(std::function<void(const NodeInfo&)> observer) {
    std::unique_lock lock(mu_);
    observer_ = std::move(observer);
}

std::optional<Frame> RpcRouter::handle(const Frame& frame) {
    RpcRequest req;
    Handler handler;
    std::function<void(const NodeInfo&)> observer;
    try {
        ByteReader r(frame.payload);
        Hash32 digest = r.array<32>();
        if (digest != swarm_digest_) {
            spdlog::debug("dropping {} with foreign swarm digest", msg_type_name(frame.type));
            return std::nullopt;
        }
        req.type = frame.type;
        req.sender = decode_node_info(r);
        ByteView body = r.rest();
        req.body.assign(body.begin(), body.end());
    } catch (const Error&) {
        return std::nullopt;
    }
    {
        std::shared_lock lock(mu_);
        auto it = handlers_.find(frame.type);
        if (it == handlers_.end()) return error_frame("unsupported request type");
        handler = it->second;
        observer = observer_;
    }
    if (observer && !req.sender.endpoint.empty()) observer(req.sender);
    try {
        return handler(req);
    } catch (const Error& e) {
        return error_frame(e.what());
    }
}

std::optional<Frame> RpcClient::call(const std::string& endpoint, MsgType type, ByteView body,
                                     std::optional<std::chrono::milliseconds> timeout) const {
    ByteWriter w;
    w.raw(swarm_digest_);
    encode(w, self_);
    w.raw(body);
    return transport_->call(endpoint, Frame{type, std::move(w).take()}, timeout.value_or(default_timeout_));
}

}  // namespace fybrr
