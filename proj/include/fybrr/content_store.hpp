#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <vector>

#include "fybrr/clock.hpp"
#include "fybrr/crypto.hpp"
#include "fybrr/dht.hpp"
#include "fybrr/rpc.hpp"

namespace fybrr {

inline constexpr std::size_t kDefaultChunkSize = 64 * 1024;
inline constexpr std::size_t kMinChunkSize = 1024;
inline constexpr UnixMs kDefaultPinTtlMs = 30LL * 24 * 3600 * 1000;

struct Chunk {
    ContentId cid;
    Bytes data;

    bool operator==(const Chunk&) const = default;
    static Chunk of(Bytes data) {
        ContentId cid = content_id(data);
        return {cid, std::move(data)};
    }
};

/// Index of one chunked, sealed message. message_cid is the content id of
/// the canonical encoding of every other field, and that encoding is also
/// the manifest block's bytes.
struct Manifest {
    ContentId message_cid;
    PublicKey sender_public{};
    PeerId recipient_peer_id{};
    Nonce nonce{};
    std::uint64_t total_len = 0;
    std::vector<ContentId> chunk_cids;

    bool operator==(const Manifest&) const = default;

    Bytes canonical() const;
    /// Parses a manifest block and recomputes message_cid from its bytes.
    static Manifest decode(ByteView block);
    Chunk block() const { return {message_cid, canonical()}; }
};

struct ManifestHeader {
    PublicKey sender_public{};
    PeerId recipient_peer_id{};
    Nonce nonce{};
};

struct ChunkedPayload {
    Manifest manifest;
    std::vector<Chunk> chunks;
};

/// Splits payload into chunk_size pieces (the last may be short). Throws
/// Error(kInvalidArgument) for an empty payload or chunk_size < 1024.
ChunkedPayload chunk_payload(ByteView payload, const ManifestHeader& header,
                             std::size_t chunk_size = kDefaultChunkSize);

/// Verifies every chunk against the manifest and concatenates them.
/// Throws Error(kHashMismatch) or Error(kDecode).
Bytes reassemble(const Manifest& manifest, const std::vector<Chunk>& chunks);

enum class PinState { kPinned, kReleased };

struct PinRecord {
    ContentId cid;
    std::set<PeerId> holders;
    UnixMs created_at = 0;
    PinState state = PinState::kPinned;
    bool degraded = false;
};

/// Local content-addressed block store. In-memory, or persisted as
/// `<dir>/blocks/<hex cid>` plus an append-only `<dir>/pins.log` journal
/// with lines `<hex cid> <pinned|released> <unix-ms>`.
class BlockStore {
public:
    explicit BlockStore(std::shared_ptr<Clock> clock, std::optional<std::filesystem::path> dir = std::nullopt,
                        UnixMs pin_ttl_ms = kDefaultPinTtlMs);

    /// Rejects with Error(kHashMismatch) when chunk.cid != content_id(chunk.data).
    ContentId put(const Chunk& chunk);
    std::optional<Chunk> get(const ContentId& cid) const;
    /// Throws Error(kNotFound).
    Chunk get_block(const ContentId& cid) const;
    bool has(const ContentId& cid) const;

    /// `releasers` may release the pin remotely; empty means any swarm member.
    void mark_pinned(const ContentId& cid, UnixMs at, std::set<PeerId> releasers = {});
    void mark_released(const ContentId& cid, UnixMs at);
    std::optional<PinState> pin_state(const ContentId& cid) const;
    bool may_release(const ContentId& cid, const PeerId& who) const;

    /// Removes released blocks, blocks pinned longer than the TTL and blocks
    /// with no pin at all. Returns the cids removed.
    std::vector<ContentId> gc(UnixMs now);
    /// Full-scan self-validation; returns every cid whose bytes do not hash to it.
    std::vector<ContentId> audit() const;

    std::vector<ContentId> list() const;
    std::size_t size() const;
    UnixMs pin_ttl_ms() const { return pin_ttl_ms_; }

    /// Fault injection: XORs one byte of a stored block with `mask` in place.
    /// Applying the same call twice restores the block.
    bool corrupt_for_test(const ContentId& cid, std::size_t offset = 0, std::uint8_t mask = 0x5A);

private:
    struct PinEntry {
        PinState state;
        UnixMs at;
        std::set<PeerId> releasers;
    };
    void journal(const ContentId& cid, PinState state, UnixMs at);
    void load();
    std::filesystem::path block_path(const ContentId& cid) const;

    std::shared_ptr<Clock> clock_;
    std::optional<std::filesystem::path> dir_;
    UnixMs pin_ttl_ms_;
    mutable std::shared_mutex mu_;
    std::map<ContentId, Bytes> blocks_;
    std::map<ContentId, PinEntry> pins_;
    std::ofstream journal_;
};

struct PinConfig {
    std::size_t replication = 3;
    UnixMs provider_ttl_ms = 24LL * 3600 * 1000;
    std::chrono::milliseconds rpc_timeout = 2000ms;
};

struct FetchResult {
    std::optional<Chunk> chunk;
    std::size_t hash_mismatches = 0;
    std::size_t providers_tried = 0;
};

/// Replicated pinning on top of the DHT: pushes blocks to the DHT-closest
/// peers, publishes provider records, serves GET_BLOCK and honours signed
/// RELEASE notices.
class PinService {
public:
    using MemberCheck = std::function<bool(const PeerId&)>;

    PinService(const PeerIdentity& identity, std::shared_ptr<BlockStore> store, Dht& dht,
               std::shared_ptr<RpcClient> client, std::shared_ptr<Clock> clock, PinConfig config = {});

    void attach(RpcRouter& router);
    /// Private swarms: PIN_PUT and RELEASE are honoured only from members.
    void set_member_check(MemberCheck check) { member_check_ = std::move(check); }
    /// Bootstrap peers win ties between equally distant holder candidates.
    void set_bootstrap_check(MemberCheck check) { bootstrap_check_ = std::move(check); }

    /// Pins a locally present block on up to `replication` peers.
    /// `releaser` may also release the pin (the message recipient).
    PinRecord pin(const ContentId& cid, std::optional<std::size_t> replication = std::nullopt,
                  std::optional<PeerId> releaser = std::nullopt);
    /// Sends release notices to all recorded holders and releases locally.
    void unpin(const ContentId& cid);
    /// Releases every provider found in the DHT (used by the recipient).
    std::size_t release_everywhere(const ContentId& cid);
    /// Local store first, then each provider until a block verifies.
    FetchResult fetch(const ContentId& cid);
    std::optional<PinRecord> pin_record(const ContentId& cid) const;
    /// Local GC plus dropping provider republish for removed blocks.
    std::size_t gc(UnixMs now);

    BlockStore& store() { return *store_; }

private:
    std::optional<Frame> on_pin_put(const RpcRequest& req);
    std::optional<Frame> on_get_block(const RpcRequest& req);
    std::optional<Frame> on_release(const RpcRequest& req);
    bool send_release(const std::string& endpoint, const ContentId& cid);
    Bytes self_endpoint() const;
    std::mutex& cid_lock(const ContentId& cid) { return cid_locks_[cid.digest[0] % cid_locks_.size()]; }

    PeerIdentity identity_;
    std::shared_ptr<BlockStore> store_;
    Dht& dht_;
    std::shared_ptr<RpcClient> client_;
    std::shared_ptr<Clock> clock_;
    PinConfig config_;
    MemberCheck member_check_;
    MemberCheck bootstrap_check_;

    std::array<std::mutex, 64> cid_locks_;
    mutable std::mutex records_mu_;
    struct LocalPin {
        PinRecord record;
        std::map<PeerId, std::string> endpoints;
    };
    std::map<ContentId, LocalPin> records_;
};

}  // namespace fybrr
