#pragma once

#include <atomic>
#include <condition_variable>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "fybrr/crypto.hpp"
#include "fybrr/rendezvous.hpp"
#include "fybrr/transport.hpp"

namespace fybrr {

using SessionId = ByteArray<16>;

/// Offer/answer exchanged through the rendezvous relay before a direct
/// connection is opened. Signed by the sender's long-term key.
struct Signal {
    enum class Kind : std::uint8_t { kOffer = 1, kAnswer = 2, kReject = 3 };

    Kind kind = Kind::kOffer;
    PeerId from{};
    PeerId to{};
    SessionId session{};
    std::string listen_endpoint;
    PublicKey ephemeral{};
    UnixMs sent_at = 0;
    PeerKeys from_keys;
    Signature signature{};

    bool operator==(const Signal&) const = default;
    Bytes signing_bytes() const;
    bool authentic() const;
    Bytes encode() const;
    static Signal decode(ByteView data);
};

struct ChannelOptions {
    std::chrono::milliseconds dial_timeout = 5000ms;
    std::chrono::milliseconds ping_interval = 3000ms;
    int missed_pings = 3;
    /// Signals older or newer than this (by the sender's clock) are ignored.
    UnixMs signal_window_ms = 10LL * 60 * 1000;
};

/// One authenticated, encrypted session with a peer. Frames carry
/// nonce || secretbox(type || seq || body) under the session key; every DATA
/// frame is answered with a PONG holding the highest contiguous seq seen.
class Channel : public std::enable_shared_from_this<Channel> {
public:
    using MessageHandler = std::function<void(const PeerId& from, Bytes body)>;
    using CloseHandler = std::function<void(Channel&)>;

    Channel(std::shared_ptr<Connection> conn, const PeerId& peer, const PeerKeys& peer_keys, const SecretKey& key,
            bool initiator);
    ~Channel();
    Channel(const Channel&) = delete;
    Channel& operator=(const Channel&) = delete;

    void set_handlers(MessageHandler on_message, CloseHandler on_close);
    /// Reads until the connection ends. Runs on the caller's thread.
    void run();
    /// Spawns run() on an owned thread.
    void start();

    /// Queues one message; returns its sequence number. Throws kChannelClosed.
    std::uint64_t send(ByteView body);
    /// Blocks until the peer acknowledged `seq` or the timeout passes.
    bool wait_acked(std::uint64_t seq, std::chrono::milliseconds timeout);
    /// Sent but never acknowledged, in send order.
    std::vector<Bytes> unacked() const;
    /// Stops tracking `seq` (the caller took over its delivery).
    void forget(std::uint64_t seq);

    void ping();
    void close();
    bool open() const { return open_.load(); }
    const PeerId& peer() const { return peer_; }
    const PeerKeys& peer_keys() const { return peer_keys_; }
    bool initiator() const { return initiator_; }
    std::chrono::steady_clock::time_point last_received() const;
    std::chrono::steady_clock::time_point last_ping() const;

    /// Test hook: silently discard every inbound frame, as a dead link would.
    void set_blackhole(bool on) { blackhole_ = on; }

private:
    void write_sealed(MsgType type, std::uint64_t seq, ByteView body);
    void handle(const Frame& f);
    void finish();

    std::shared_ptr<Connection> conn_;
    PeerId peer_;
    PeerKeys peer_keys_;
    SecretKey key_;
    bool initiator_;

    std::atomic<bool> open_{true};
    std::atomic<bool> blackhole_{false};
    std::thread reader_;

    std::mutex send_mu_;  // seq order on the wire matches allocation order
    mutable std::mutex mu_;
    std::condition_variable ack_cv_;
    std::uint64_t next_seq_ = 1;
    std::uint64_t acked_ = 0;
    std::map<std::uint64_t, Bytes> unacked_;
    std::uint64_t last_in_seq_ = 0;
    std::uint64_t delivered_ = 0;
    std::chrono::steady_clock::time_point last_rx_;
    std::chrono::steady_clock::time_point last_ping_;
    MessageHandler on_message_;
    CloseHandler on_close_;
    bool closed_notified_ = false;
};

/// Opens and accepts direct channels for one node. The node routes relay
/// pushes to on_signal() and kHello connections to accept_stream().
class DirectHub {
public:
    using Authorizer = std::function<bool(const PeerId&)>;
    using MessageHandler = Channel::MessageHandler;

    DirectHub(const PeerIdentity& identity, std::shared_ptr<RendezvousClient> rendezvous, std::string listen_endpoint,
              std::shared_ptr<Clock> clock = system_clock(), ChannelOptions options = {});
    ~DirectHub();
    DirectHub(const DirectHub&) = delete;
    DirectHub& operator=(const DirectHub&) = delete;

    void set_authorizer(Authorizer a);
    void set_message_handler(MessageHandler h);

    /// Existing open channel or a fresh dial. Throws kPeerOffline when the
    /// peer is not registered or never answers, kUnauthorized on rejection,
    /// kTimeout when the connection cannot be completed in time.
    std::shared_ptr<Channel> connect(const PeerId& peer);
    std::shared_ptr<Channel> find(const PeerId& peer) const;
    /// Sends and waits for the peer's ack. False when the message may not
    /// have arrived; the caller owns the fallback. A missed ack also closes
    /// the channel, since the link can no longer be trusted.
    bool send(const PeerId& peer, ByteView body, std::chrono::milliseconds ack_timeout = 2000ms);

    void on_signal(const PeerId& relayed_from, Bytes payload);
    /// Runs an accepted channel on the caller's thread until it closes.
    void accept_stream(std::shared_ptr<Connection> conn, Frame hello);

    std::size_t open_channels() const;
    /// Closes every channel. Stop the server feeding accept_stream() first.
    void stop();

private:
    struct Pending {
        SecretKey ephemeral_secret{};
        PeerId peer{};
        bool answered = false;
        std::optional<Signal> answer;
    };
    struct Expected {
        PeerId peer{};
        PeerKeys keys;
        SecretKey key{};
        std::chrono::steady_clock::time_point deadline;
    };

    Signal make_signal(Signal::Kind kind, const PeerId& to, const SessionId& session, const PublicKey& eph) const;
    void adopt(const std::shared_ptr<Channel>& ch);
    void sweep_loop();
    bool allowed(const PeerId& p) const;

    PeerIdentity identity_;
    std::shared_ptr<RendezvousClient> rendezvous_;
    std::string listen_endpoint_;
    std::shared_ptr<Clock> clock_;
    ChannelOptions options_;

    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::map<SessionId, Pending> pending_;
    std::map<SessionId, Expected> expected_;
    // Newest last. Crossing dials can leave two live channels to one peer.
    std::map<PeerId, std::vector<std::shared_ptr<Channel>>> channels_;
    std::map<PeerId, std::shared_ptr<std::mutex>> dial_locks_;
    Authorizer authorizer_;
    MessageHandler on_message_;
    bool stopping_ = false;
    std::thread sweeper_;
};

}  // namespace fybrr
