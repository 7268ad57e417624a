#pragma once

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <vector>

#include "fybrr/clock.hpp"
#include "fybrr/crypto.hpp"
#include "fybrr/dht.hpp"
#include "fybrr/rpc.hpp"

namespace fybrr {

inline constexpr std::size_t kQueueEntryBytes = 32 + 32 + 32 + 8 + 64;
/// Entries per queue page. A page carries each entry with its sender's
/// 64 bytes of public keys and must fit a 4096-byte DHT value.
inline constexpr std::size_t kQueuePageEntries = 17;
inline constexpr std::size_t kQueuePageLimit = 4096;

/// SHA-256("fybrr/dmq/v1" || recipient).
Hash32 queue_key(const PeerId& recipient);

struct QueueEntry {
    PeerId recipient{};
    ContentId msg_cid;
    PeerId sender{};
    UnixMs timestamp = 0;
    Signature signature{};

    bool operator==(const QueueEntry&) const = default;

    /// The 104 signed bytes (everything before the signature).
    Bytes signing_bytes() const;
    /// recipient || msg_cid || sender || u64 BE timestamp || signature; always 168 bytes.
    Bytes canonical() const;
    static QueueEntry decode(ByteView bytes);
    static QueueEntry make(const PeerId& recipient, const ContentId& msg_cid, const PeerIdentity& sender,
                           UnixMs timestamp);
    /// keys hash to `sender` and the signature verifies under them.
    bool verify(const PeerKeys& sender_keys) const;
};

/// Ascending (timestamp, msg_cid).
bool queue_order(const QueueEntry& a, const QueueEntry& b);

struct SignedEntry {
    QueueEntry entry;
    PeerKeys sender_keys;

    bool operator==(const SignedEntry&) const = default;
};

struct QueueHead {
    PeerId recipient{};
    std::vector<SignedEntry> entries;  // sorted by queue_order
    std::uint64_t version = 0;
};

/// Serialises a head as a chain of pages; page i ends with SHA-256 of page
/// i+1 (zeros on the last page). Every page fits kQueuePageLimit.
std::vector<Bytes> encode_queue_pages(const QueueHead& head);
/// Verifies the hash links and page headers. Throws Error(kDecode) or
/// Error(kHashMismatch).
QueueHead decode_queue_pages(const std::vector<Bytes>& pages);

enum class DeliveryState : std::uint8_t { kUnknown = 0, kPending = 1, kDelivered = 2 };

struct DmqConfig {
    std::chrono::milliseconds rpc_timeout = 2000ms;
    /// How long acked cids are remembered so stale replicas cannot resurrect them.
    UnixMs tombstone_ttl_ms = 7LL * 24 * 3600 * 1000;
    /// Accepted skew for signed drain/ack requests.
    UnixMs request_window_ms = 10LL * 60 * 1000;
};

/// Queue custody and client operations. The k DHT-closest nodes to
/// queue_key(recipient) hold the recipient's QueueHead; every mutation bumps
/// its version and replicas only move forward.
class Dmq {
public:
    using MemberCheck = std::function<bool(const PeerId&)>;

    Dmq(const PeerIdentity& identity, Dht& dht, std::shared_ptr<RpcClient> client, std::shared_ptr<Clock> clock,
        DmqConfig config = {});

    void attach(RpcRouter& router);
    void set_member_check(MemberCheck check) { member_check_ = std::move(check); }

    /// Sends the entry to every custodian. Returns how many accepted it;
    /// throws Error(kAuthentication) if the entry is not ours or is badly signed.
    std::size_t enqueue(const QueueEntry& entry);
    /// Union of our pending entries across custodians, acked ones removed,
    /// every signature checked, sorted by queue_order.
    std::vector<SignedEntry> drain();
    /// Removes msg_cid from our queue on every custodian; returns acks.
    std::size_t ack(const ContentId& msg_cid);
    /// Sender-side delivery poll.
    DeliveryState status(const PeerId& recipient, const ContentId& msg_cid);

    /// Pushes every held head to the current custodians of its key.
    std::size_t replicate();
    /// Forgets tombstones older than the TTL; returns how many.
    std::size_t expire();

    /// Custodian-side views (tests, audits).
    std::optional<QueueHead> held(const PeerId& recipient) const;
    std::size_t held_entry_count() const;
    /// Local accept path for a replicated head; false if it would not move forward.
    bool accept_replica(const QueueHead& head, const std::map<ContentId, UnixMs>& tombstones);

private:
    struct Held {
        std::map<std::pair<PeerId, ContentId>, SignedEntry> entries;
        std::map<ContentId, UnixMs> tombstones;
        std::uint64_t version = 0;
    };

    std::optional<Frame> on_enqueue(const RpcRequest& req);
    std::optional<Frame> on_drain(const RpcRequest& req);
    std::optional<Frame> on_ack(const RpcRequest& req);
    std::optional<Frame> on_replicate(const RpcRequest& req);
    std::optional<Frame> on_status(const RpcRequest& req);

    bool accept_entry(const SignedEntry& e);
    bool apply_ack(const PeerId& recipient, const ContentId& cid);
    Bytes signed_request(std::string_view label, ByteView extra) const;
    bool check_request(ByteReader& r, std::string_view label, ByteView extra, PeerId& who) const;
    Bytes drain_response(const PeerId& recipient) const;
    Bytes replica_body(const PeerId& recipient) const;
    QueueHead head_of(const PeerId& recipient, const Held& h) const;
    std::optional<Frame> call_or_self(const NodeInfo& node, MsgType type, ByteView body);

    PeerIdentity identity_;
    Dht& dht_;
    std::shared_ptr<RpcClient> client_;
    std::shared_ptr<Clock> clock_;
    DmqConfig config_;
    MemberCheck member_check_;
    std::map<MsgType, RpcRouter::Handler> local_;

    mutable std::mutex mu_;
    std::map<PeerId, Held> held_;
};

}  // namespace fybrr
