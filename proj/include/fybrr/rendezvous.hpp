#pragma once

#include <condition_variable>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>

#include "fybrr/clock.hpp"
#include "fybrr/consensus.hpp"
#include "fybrr/crypto.hpp"
#include "fybrr/transport.hpp"

namespace fybrr {

inline constexpr UnixMs kPresenceTtlMs = 60'000;
inline constexpr auto kRegisterHeartbeat = 20s;

struct Registration {
    PeerId peer_id{};
    std::string endpoint;
    PeerKeys keys;
    UnixMs expires_at = 0;

    bool operator==(const Registration&) const = default;
};

struct RendezvousConfig {
    /// Clients presenting another swarm key's digest are refused.
    std::string swarm_key;
    /// Set for private swarms: only current members may register.
    std::optional<Genesis> genesis;
    UnixMs presence_ttl_ms = kPresenceTtlMs;
    std::size_t max_connections = 1024;
    std::shared_ptr<Clock> clock = system_clock();
};

/// Signalling server. Holds presence and the membership log in memory only;
/// relayed payloads are forwarded without inspection and never stored.
class RendezvousServer {
public:
    RendezvousServer(const Endpoint& bind, RendezvousConfig config);
    ~RendezvousServer();

    Endpoint local() const { return server_->local(); }
    void stop();

    bool private_mode() const { return config_.genesis.has_value(); }
    std::size_t online_count() const;
    MembershipState membership() const;
    /// Everything the server holds, for custody audits: presence records and
    /// the membership log. There is nothing else.
    std::string describe_state() const;

private:
    struct Presence {
        Registration reg;
        std::weak_ptr<Connection> conn;
    };

    void serve(std::shared_ptr<Connection> conn);
    std::optional<Frame> handle(const Frame& f, const std::shared_ptr<Connection>& conn, std::optional<PeerId>& bound);
    Frame on_register(ByteReader& r, const std::shared_ptr<Connection>& conn, std::optional<PeerId>& bound);
    Frame on_lookup(ByteReader& r) const;
    Frame on_relay(ByteReader& r, const std::optional<PeerId>& bound);
    Frame on_directory(ByteReader& r) const;
    Frame on_membership_push(ByteReader& r);
    Frame on_state_req() const;
    bool member(const PeerId& p) const;
    std::optional<Presence> live(const PeerId& p) const;

    RendezvousConfig config_;
    Hash32 digest_;
    mutable std::shared_mutex mu_;
    std::map<PeerId, Presence> presence_;
    MembershipState membership_;
    std::vector<LogEntry> log_;
    std::unique_ptr<TcpServer> server_;
};

/// Persistent client connection to the rendezvous server. Requests are
/// serialised; RELAY_DELIVER pushes go to the relay handler on a worker
/// thread so handlers may issue requests of their own.
class RendezvousClient {
public:
    using RelayHandler = std::function<void(const PeerId& from, Bytes payload)>;

    RendezvousClient(Endpoint server, const PeerIdentity& identity, std::string_view swarm_key,
                     std::shared_ptr<Clock> clock = system_clock());
    ~RendezvousClient();

    void set_relay_handler(RelayHandler handler);
    /// Registers `endpoint` and keeps re-registering every heartbeat
    /// (reconnecting if the server restarted). Throws on refusal, and an
    /// unreachable server is only logged; both are retried in the background
    /// with backoff.
    void start(const std::string& endpoint);
    void stop();

    /// One registration round trip; returns the server-clamped expiry.
    UnixMs register_now();
    std::optional<Registration> lookup(const PeerId& peer);
    /// Keys are checked against the peer id; a mismatching answer is dropped.
    std::optional<PeerKeys> directory(const PeerId& peer);
    bool relay(const PeerId& to, ByteView payload);
    std::uint64_t push_membership(const std::vector<LogEntry>& log);
    std::vector<LogEntry> fetch_membership();

    bool connected() const;
    const PeerIdentity& identity() const { return identity_; }

private:
    std::optional<Frame> request(const Frame& f, std::chrono::milliseconds timeout = 5s);
    void ensure_connected();
    void reader_loop(std::shared_ptr<Connection> conn);
    void heartbeat_loop(bool registered);
    void dispatch_loop();
    void drop_connection();

    Endpoint server_;
    PeerIdentity identity_;
    Hash32 digest_;
    std::shared_ptr<Clock> clock_;
    std::string endpoint_;

    std::mutex request_mu_;  // one outstanding request
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::shared_ptr<Connection> conn_;
    std::thread reader_;
    std::optional<Frame> reply_;
    bool reply_ready_ = false;
    std::uint64_t generation_ = 0;

    RelayHandler relay_handler_;
    std::vector<std::pair<PeerId, Bytes>> pushes_;
    std::condition_variable push_cv_;
    std::thread dispatcher_;
    std::thread heartbeat_;
    std::condition_variable hb_cv_;
    bool heartbeat_wake_ = false;
    bool stopping_ = false;
};

}  // namespace fybrr
