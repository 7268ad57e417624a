#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>

#include "fybrr/bytes.hpp"
#include "fybrr/clock.hpp"
#include "fybrr/transport.hpp"

namespace fybrr {

struct NodeInfo {
    PeerId peer_id{};
    std::string endpoint;
    UnixMs last_seen = 0;

    bool operator==(const NodeInfo&) const = default;
};

void encode(ByteWriter& w, const NodeInfo& n);
NodeInfo decode_node_info(ByteReader& r);

/// Digest carried in every node RPC; peers holding a different swarm key
/// have their requests dropped.
Hash32 swarm_digest(std::string_view swarm_key);

struct RpcRequest {
    MsgType type{};
    NodeInfo sender;
    Bytes body;
};

/// Parses the common request header (swarm digest, sender) and dispatches
/// the body by message type.
class RpcRouter {
public:
    using Handler = std::function<std::optional<Frame>(const RpcRequest&)>;

    explicit RpcRouter(const Hash32& swarm_digest) : swarm_digest_(swarm_digest) {}

    void on(MsgType type, Handler handler);
    void set_contact_observer(std::function<void(const NodeInfo&)> observer);
    std::optional<Frame> handle(const Frame& frame);

private:
    Hash32 swarm_digest_;
    mutable std::shared_mutex mu_;
    std::map<MsgType, Handler> handlers_;
    std::function<void(const NodeInfo&)> observer_;
};

class RpcClient {
public:
    RpcClient(std::shared_ptr<Transport> transport, const Hash32& swarm_digest, NodeInfo self,
              std::chrono::milliseconds default_timeout = 2000ms)
        : transport_(std::move(transport)), swarm_digest_(swarm_digest), self_(std::move(self)),
          default_timeout_(default_timeout) {}

    /// nullopt on unreachable/dropped peers. kError replies are returned as-is.
    std::optional<Frame> call(const std::string& endpoint, MsgType type, ByteView body,
                              std::optional<std::chrono::milliseconds> timeout = std::nullopt) const;

    const NodeInfo& self() const { return self_; }
    Transport& transport() const { return *transport_; }

private:
    std::shared_ptr<Transport> transport_;
    Hash32 swarm_digest_;
    NodeInfo self_;
    std::chrono::milliseconds default_timeout_;
};

}  // namespace fybrr
