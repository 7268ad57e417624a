#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "fybrr/node.hpp"

namespace fybrr {

/// JSON over a WebSocket on 127.0.0.1. Each command is an object with an
/// "op" and an optional "id" that is echoed in the reply. Commands:
///   send {to, text, filename?}   to may be one peer or a list (fan-out)
///   history {peer?}  inbox  sync  contacts  contacts_add {peer, name}
///   presence  proposals  propose {kind, subject?, name?, value?, ttl_ms?}
///   vote {proposal, choice: "yes"|"no"}  status  outbound {msg_id}
/// Replies reuse the op name; failures are {"op":"error","error":...}.
/// Pushed events: inbound, status (delivery confirmations), proposal.
class LocalApi {
public:
    /// Binds 127.0.0.1:`port` (0 picks a free port). Throws Error(kIo).
    LocalApi(Node& node, std::uint16_t port);
    ~LocalApi();
    LocalApi(const LocalApi&) = delete;
    LocalApi& operator=(const LocalApi&) = delete;

    std::uint16_t port() const;
    void stop();

    struct Impl;

private:
    std::unique_ptr<Impl> impl_;
};

/// Browser origins allowed to open a session: loopback hosts only. A
/// missing Origin header (non-browser clients) is allowed.
bool origin_allowed(std::string_view origin);

/// Executes one command against the node and returns the reply object.
nlohmann::json dispatch_command(Node& node, const nlohmann::json& command);

nlohmann::json to_json(const InboundMessage& m);
nlohmann::json to_json(const OutboundMessage& m);
nlohmann::json to_json(const HistoryEntry& e);
nlohmann::json to_json(const ProposalView& v);
/// Never throws on message bodies that are not UTF-8.
std::string dump_json(const nlohmann::json& j);

/// Blocking client for one API session (CLI and tests).
class ApiClient {
public:
    /// Throws Error(kConnectivity) when nothing listens or the handshake is refused.
    explicit ApiClient(std::uint16_t port, std::string origin = {});
    ~ApiClient();
    ApiClient(const ApiClient&) = delete;
    ApiClient& operator=(const ApiClient&) = delete;

    /// Sends a command tagged with a fresh id and returns its replies until
    /// one arrives for that id; pushed events read meanwhile are kept.
    nlohmann::json request(nlohmann::json command, std::chrono::milliseconds timeout = std::chrono::seconds(30));
    void send_raw(const std::string& text);
    /// Next message of any kind, or nullopt on timeout.
    std::optional<nlohmann::json> next(std::chrono::milliseconds timeout);

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace fybrr
