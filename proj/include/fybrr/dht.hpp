#pragma once

#include <array>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <vector>

#include "fybrr/clock.hpp"
#include "fybrr/crypto.hpp"
#include "fybrr/rpc.hpp"

namespace fybrr {

/// 256-bit XOR distance; std::array ordering is lexicographic, which is the
/// big-endian integer ordering.
using Distance = Hash32;

Distance xor_distance(const Hash32& a, const Hash32& b);
/// Checked overload for untyped input; throws Error(kInvalidArgument) unless both are 32 bytes.
Distance xor_distance(ByteView a, ByteView b);

/// floor(log2(d)) for d > 0, i.e. the Kademlia bucket index; -1 for d == 0.
int log2_floor(const Distance& d);

struct DhtConfig {
    std::size_t k = 20;
    std::size_t alpha = 3;
    UnixMs record_ttl_ms = 24LL * 3600 * 1000;
    UnixMs republish_interval_ms = 3600LL * 1000;
    std::size_t max_value_bytes = 4096;
    std::chrono::milliseconds rpc_timeout = 2000ms;
};

/// 256 buckets of at most k entries, least-recently-seen first.
class RoutingTable {
public:
    RoutingTable(const PeerId& self, std::size_t k) : self_(self), k_(k) {}

    enum class Outcome { kInserted, kRefreshed, kBucketFull, kSelf };
    struct Observation {
        Outcome outcome;
        /// Least-recently-seen entry of a full bucket; ping it before evicting.
        std::optional<NodeInfo> eviction_candidate;
    };

    Observation observe(const NodeInfo& node, UnixMs now);
    /// Moves `alive` to the most-recently-seen end (after a successful ping).
    void touch(const PeerId& alive, UnixMs now);
    /// Replaces a dead entry with a newcomer in the same bucket.
    bool replace(const PeerId& dead, const NodeInfo& newcomer, UnixMs now);
    bool remove(const PeerId& id);
    bool contains(const PeerId& id) const;

    std::vector<NodeInfo> closest(const Hash32& target, std::size_t n) const;
    std::vector<NodeInfo> all() const;
    std::size_t size() const;
    std::vector<NodeInfo> bucket(int index) const;
    const PeerId& self() const { return self_; }
    std::size_t k() const { return k_; }

private:
    PeerId self_;
    std::size_t k_;
    mutable std::mutex mu_;
    std::array<std::vector<NodeInfo>, 256> buckets_;
};

/// kPeerKeys: an empty record whose publisher_keys let anyone resolve a peer
/// id to its public keys while that peer is offline.
enum class RecordKind : std::uint8_t { kProvider = 1, kQueueHead = 2, kPeerKeys = 3 };

struct DhtRecord {
    Hash32 key{};
    RecordKind kind = RecordKind::kProvider;
    Bytes value;
    PeerId publisher{};
    PeerKeys publisher_keys;
    UnixMs expires_at = 0;
    Signature signature{};

    bool operator==(const DhtRecord&) const = default;

    Bytes signing_bytes() const;
    /// Signature valid under publisher_keys and publisher_keys hash to publisher.
    bool authentic() const;
    static DhtRecord make(const Hash32& key, RecordKind kind, Bytes value, const PeerIdentity& publisher,
                          UnixMs expires_at);
};

void encode(ByteWriter& w, const DhtRecord& rec);
DhtRecord decode_dht_record(ByteReader& r);

/// Kademlia node: routing table, local record store, iterative lookups and
/// the PING / FIND_NODE / FIND_VALUE / STORE handlers.
class Dht {
public:
    Dht(const PeerIdentity& identity, std::shared_ptr<RpcClient> client, std::shared_ptr<Clock> clock,
        DhtConfig config = {});

    /// Registers the RPC handlers and the contact observer on `router`.
    void attach(RpcRouter& router);

    NodeInfo self() const { return client_->self(); }
    const DhtConfig& config() const { return config_; }
    RoutingTable& table() { return table_; }
    const RoutingTable& table() const { return table_; }

    /// Iterative lookup. Returns up to k live nodes (self included) sorted
    /// ascending by distance to target.
    std::vector<NodeInfo> find_node(const Hash32& target);
    /// Writes the record to the k closest live nodes; returns replicas accepted.
    std::size_t store_record(const DhtRecord& record);
    /// Union of the non-expired, authentic records of `kind` found on the lookup path.
    std::vector<DhtRecord> find_value(const Hash32& key, RecordKind kind);
    /// Pings the seeds and looks up our own id. Throws Error(kConnectivity)
    /// when no seed answers; returns the number of peers learned.
    std::size_t bootstrap(const std::vector<std::string>& seeds);
    /// Publishes (and remembers for republish) a record signed by this node.
    std::size_t publish(const Hash32& key, RecordKind kind, Bytes value);
    /// Adds a record to the republish set without storing it now (the caller
    /// already distributed a signed copy).
    void track_published(const Hash32& key, RecordKind kind, Bytes value);
    void forget_published(const Hash32& key, RecordKind kind);

    bool ping(const NodeInfo& node);
    std::optional<NodeInfo> ping_endpoint(const std::string& endpoint);
    /// Routing-table update with ping-before-evict.
    void observe(const NodeInfo& node);

    /// Drops expired records; returns how many.
    std::size_t expire();
    /// Re-stores our own records whose last publish is older than the interval.
    std::size_t republish(bool force = false);
    /// Refreshes the neighbourhood by looking up self and a random id.
    void refresh();

    /// Local record store view (tests and audits).
    std::vector<DhtRecord> local_records(const Hash32& key) const;
    std::size_t local_record_count() const;
    /// Local accept path shared by STORE and self-replicas.
    bool accept_record(const DhtRecord& record);

private:
    struct Lookup;
    std::vector<NodeInfo> lookup(const Hash32& target, std::optional<RecordKind> value_kind,
                                 std::vector<DhtRecord>* found);
    std::optional<Frame> on_find_node(const RpcRequest& req);
    std::optional<Frame> on_find_value(const RpcRequest& req);
    std::optional<Frame> on_store(const RpcRequest& req);
    std::vector<DhtRecord> local_lookup(const Hash32& key, RecordKind kind) const;

    PeerIdentity identity_;
    std::shared_ptr<RpcClient> client_;
    std::shared_ptr<Clock> clock_;
    DhtConfig config_;
    RoutingTable table_;

    mutable std::mutex records_mu_;
    // key -> (kind, publisher) -> record
    std::map<Hash32, std::map<std::pair<RecordKind, PeerId>, DhtRecord>> records_;

    struct Published {
        Hash32 key;
        RecordKind kind;
        Bytes value;
        UnixMs last_published;
    };
    std::mutex published_mu_;
    std::vector<Published> published_;
};

Bytes encode_nodes(const std::vector<NodeInfo>& nodes);
std::vector<NodeInfo> decode_nodes(ByteReader& r);

}  // namespace fybrr
