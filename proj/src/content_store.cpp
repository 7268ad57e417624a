#include "fybrr/content_store.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <sstream>

namespace fybrr {
namespace fs = std::filesystem;

namespace {

constexpr std::string_view kPinLabel = "fybrr/pin/v1";
constexpr std::string_view kReleaseLabel = "fybrr/release/v1";
constexpr std::size_t kMaxChunksPerManifest = 1u << 16;

Bytes pin_signing_bytes(const ContentId& cid, const PeerId& releaser) {
    ByteWriter w;
    w.raw(as_bytes(kPinLabel)).raw(cid.digest).raw(releaser);
    return std::move(w).take();
}

Bytes release_signing_bytes(const ContentId& cid, UnixMs ts) {
    ByteWriter w;
    w.raw(as_bytes(kReleaseLabel)).raw(cid.digest).i64(ts);
    return std::move(w).take();
}

}  // namespace

// ---------------------------------------------------------------- manifest / chunking

Bytes Manifest::canonical() const {
    ByteWriter w;
    w.raw(sender_public).raw(recipient_peer_id).raw(nonce).u64(total_len);
    w.u32(static_cast<std::uint32_t>(chunk_cids.size()));
    for (const auto& c : chunk_cids) w.raw(c.digest);
    return std::move(w).take();
}

Manifest Manifest::decode(ByteView block) {
    ByteReader r(block);
    Manifest m;
    m.sender_public = r.array<32>();
    m.recipient_peer_id = r.array<32>();
    m.nonce = r.array<24>();
    m.total_len = r.u64();
    std::uint32_t n = r.u32();
    if (n == 0 || n > kMaxChunksPerManifest) throw Error(ErrorCode::kDecode, "manifest: bad chunk count");
    m.chunk_cids.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) m.chunk_cids.push_back({r.array<32>()});
    r.expect_done();
    m.message_cid = content_id(block);
    return m;
}

ChunkedPayload chunk_payload(ByteView payload, const ManifestHeader& header, std::size_t chunk_size) {
    if (payload.empty()) throw Error(ErrorCode::kInvalidArgument, "cannot chunk an empty payload");
    if (chunk_size < kMinChunkSize) {
        throw Error(ErrorCode::kInvalidArgument, "chunk_size must be at least " + std::to_string(kMinChunkSize));
    }
    ChunkedPayload out;
    for (std::size_t off = 0; off < payload.size(); off += chunk_size) {
        std::size_t n = std::min(chunk_size, payload.size() - off);
        auto piece = payload.subspan(off, n);
        out.chunks.push_back(Chunk::of(Bytes(piece.begin(), piece.end())));
    }
    Manifest& m = out.manifest;
    m.sender_public = header.sender_public;
    m.recipient_peer_id = header.recipient_peer_id;
    m.nonce = header.nonce;
    m.total_len = payload.size();
    for (const auto& c : out.chunks) m.chunk_cids.push_back(c.cid);
    m.message_cid = content_id(m.canonical());
    return out;
}

Bytes reassemble(const Manifest& manifest, const std::vector<Chunk>& chunks) {
    if (chunks.size() != manifest.chunk_cids.size()) {
        throw Error(ErrorCode::kDecode, "chunk count does not match manifest");
    }
    Bytes out;
    out.reserve(manifest.total_len);
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        if (chunks[i].cid != manifest.chunk_cids[i] || content_id(chunks[i].data) != manifest.chunk_cids[i]) {
            throw Error(ErrorCode::kHashMismatch, "chunk " + std::to_string(i) + " failed verification");
        }
        out.insert(out.end(), chunks[i].data.begin(), chunks[i].data.end());
    }
    if (out.size() != manifest.total_len) throw Error(ErrorCode::kDecode, "reassembled length mismatch");
    return out;
}

// ---------------------------------------------------------------- block store

BlockStore::BlockStore(std::shared_ptr<Clock> clock, std::optional<fs::path> dir, UnixMs pin_ttl_ms)
    : clock_(std::move(clock)), dir_(std::move(dir)), pin_ttl_ms_(pin_ttl_ms) {
    if (dir_) load();
}

fs::path BlockStore::block_path(const ContentId& cid) const { return *dir_ / "blocks" / cid.hex(); }

void BlockStore::load() {
    fs::create_directories(*dir_ / "blocks");
    for (const auto& entry : fs::directory_iterator(*dir_ / "blocks")) {
        if (!entry.is_regular_file()) continue;
        ContentId cid;
        try {
            cid = ContentId::from_hex(entry.path().filename().string());
        } catch (const Error&) {
            continue;
        }
        std::ifstream in(entry.path(), std::ios::binary);
        Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        blocks_[cid] = std::move(data);
    }
    std::ifstream log(*dir_ / "pins.log");
    std::string line;
    while (std::getline(log, line)) {
        std::istringstream ls(line);
        std::string hex, state;
        UnixMs at = 0;
        if (!(ls >> hex >> state >> at)) continue;
        try {
            ContentId cid = ContentId::from_hex(hex);
            if (state == "pinned") {
                pins_[cid] = PinEntry{PinState::kPinned, at, {}};
            } else if (state == "released") {
                auto& e = pins_[cid];
                e.state = PinState::kReleased;
                e.at = at;
            }
        } catch (const Error&) {
            spdlog::warn("pins.log: skipping malformed line");
        }
    }
    journal_.open(*dir_ / "pins.log", std::ios::app);
}

void BlockStore::journal(const ContentId& cid, PinState state, UnixMs at) {
    if (!dir_) return;
    journal_ << cid.hex() << ' ' << (state == PinState::kPinned ? "pinned" : "released") << ' ' << at << '\n';
    journal_.flush();
}

ContentId BlockStore::put(const Chunk& chunk) {
    if (content_id(chunk.data) != chunk.cid) {
        throw Error(ErrorCode::kHashMismatch, "block content does not match cid " + chunk.cid.hex());
    }
    std::unique_lock lock(mu_);
    if (blocks_.count(chunk.cid)) return chunk.cid;
    if (dir_) {
        fs::path tmp = block_path(chunk.cid);
        tmp += ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            out.write(reinterpret_cast<const char*>(chunk.data.data()), static_cast<std::streamsize>(chunk.data.size()));
            if (!out) throw Error(ErrorCode::kIo, "cannot write block " + chunk.cid.hex());
        }
        fs::rename(tmp, block_path(chunk.cid));
    }
    blocks_[chunk.cid] = chunk.data;
    return chunk.cid;
}

std::optional<Chunk> BlockStore::get(const ContentId& cid) const {
    std::shared_lock lock(mu_);
    auto it = blocks_.find(cid);
    if (it == blocks_.end()) return std::nullopt;
    return Chunk{cid, it->second};
}

Chunk BlockStore::get_block(const ContentId& cid) const {
    auto c = get(cid);
    if (!c) throw Error(ErrorCode::kNotFound, "block not found: " + cid.hex());
    return *c;
}

bool BlockStore::has(const ContentId& cid) const {
    std::shared_lock lock(mu_);
    return blocks_.count(cid) != 0;
}

void BlockStore::mark_pinned(const ContentId& cid, UnixMs at, std::set<PeerId> releasers) {
    std::unique_lock lock(mu_);
    auto& e = pins_[cid];
    e.state = PinState::kPinned;
    e.at = at;
    e.releasers.insert(releasers.begin(), releasers.end());
    journal(cid, PinState::kPinned, at);
}

void BlockStore::mark_released(const ContentId& cid, UnixMs at) {
    std::unique_lock lock(mu_);
    auto it = pins_.find(cid);
    if (it == pins_.end() || it->second.state == PinState::kReleased) return;
    it->second.state = PinState::kReleased;
    it->second.at = at;
    journal(cid, PinState::kReleased, at);
}

std::optional<PinState> BlockStore::pin_state(const ContentId& cid) const {
    std::shared_lock lock(mu_);
    auto it = pins_.find(cid);
    if (it == pins_.end()) return std::nullopt;
    return it->second.state;
}

bool BlockStore::may_release(const ContentId& cid, const PeerId& who) const {
    std::shared_lock lock(mu_);
    auto it = pins_.find(cid);
    if (it == pins_.end()) return false;
    return it->second.releasers.empty() || it->second.releasers.count(who) != 0;
}

std::vector<ContentId> BlockStore::gc(UnixMs now) {
    std::unique_lock lock(mu_);
    std::vector<ContentId> removed;
    for (auto it = blocks_.begin(); it != blocks_.end();) {
        auto pin = pins_.find(it->first);
        bool drop = pin == pins_.end() || pin->second.state == PinState::kReleased ||
                    now - pin->second.at > pin_ttl_ms_;
        if (!drop) {
            ++it;
            continue;
        }
        removed.push_back(it->first);
        if (dir_) {
            std::error_code ec;
            fs::remove(block_path(it->first), ec);
        }
        if (pin != pins_.end()) pins_.erase(pin);
        it = blocks_.erase(it);
    }
    return removed;
}

std::vector<ContentId> BlockStore::audit() const {
    std::shared_lock lock(mu_);
    std::vector<ContentId> bad;
    for (const auto& [cid, data] : blocks_) {
        if (content_id(data) != cid) bad.push_back(cid);
    }
    return bad;
}

std::vector<ContentId> BlockStore::list() const {
    std::shared_lock lock(mu_);
    std::vector<ContentId> out;
    for (const auto& [cid, data] : blocks_) out.push_back(cid);
    return out;
}

std::size_t BlockStore::size() const {
    std::shared_lock lock(mu_);
    return blocks_.size();
}

bool BlockStore::corrupt_for_test(const ContentId& cid, std::size_t offset, std::uint8_t mask) {
    std::unique_lock lock(mu_);
    auto it = blocks_.find(cid);
    if (it == blocks_.end() || it->second.empty()) return false;
    it->second[offset % it->second.size()] ^= mask;
    return true;
}

// ---------------------------------------------------------------- pin service

PinService::PinService(const PeerIdentity& identity, std::shared_ptr<BlockStore> store, Dht& dht,
                       std::shared_ptr<RpcClient> client, std::shared_ptr<Clock> clock, PinConfig config)
    : identity_(identity), store_(std::move(store)), dht_(dht), client_(std::move(client)),
      clock_(std::move(clock)), config_(config) {}

void PinService::attach(RpcRouter& router) {
    router.on(MsgType::kPinPut, [this](const RpcRequest& r) { return on_pin_put(r); });
    router.on(MsgType::kGetBlock, [this](const RpcRequest& r) { return on_get_block(r); });
    router.on(MsgType::kRelease, [this](const RpcRequest& r) { return on_release(r); });
}

Bytes PinService::self_endpoint() const {
    std::string ep = dht_.self().endpoint;
    return Bytes(ep.begin(), ep.end());
}

std::optional<Frame> PinService::on_pin_put(const RpcRequest& req) {
    ByteReader r(req.body);
    ContentId cid{r.array<32>()};
    Bytes data = r.blob(kMaxFrameBytes);
    PeerKeys pinner = decode_peer_keys(r);
    PeerId releaser = r.array<32>();
    Signature sig = r.array<64>();
    PeerId pinner_id = pinner.peer_id();
    if (!verify(pin_signing_bytes(cid, releaser), sig, pinner.sig_public)) {
        return error_frame("pin request signature invalid");
    }
    if (member_check_ && !member_check_(pinner_id)) return error_frame("pinner is not a swarm member");
    store_->put({cid, std::move(data)});
    std::set<PeerId> releasers{pinner_id};
    if (releaser != PeerId{}) releasers.insert(releaser);
    UnixMs now = clock_->now();
    store_->mark_pinned(cid, now, std::move(releasers));

    Bytes endpoint = self_endpoint();
    dht_.track_published(cid.digest, RecordKind::kProvider, endpoint);
    auto rec = DhtRecord::make(cid.digest, RecordKind::kProvider, endpoint, identity_, now + config_.provider_ttl_ms);
    ByteWriter w;
    encode(w, rec);
    return Frame{MsgType::kPinAck, std::move(w).take()};
}

std::optional<Frame> PinService::on_get_block(const RpcRequest& req) {
    ByteReader r(req.body);
    ContentId cid{r.array<32>()};
    ByteWriter w;
    if (auto c = store_->get(cid)) {
        w.u8(1).blob(c->data);
    } else {
        w.u8(0);
    }
    return Frame{MsgType::kBlockResp, std::move(w).take()};
}

std::optional<Frame> PinService::on_release(const RpcRequest& req) {
    ByteReader r(req.body);
    ContentId cid{r.array<32>()};
    PeerKeys who = decode_peer_keys(r);
    UnixMs ts = r.i64();
    Signature sig = r.array<64>();
    ByteWriter w;
    PeerId who_id = who.peer_id();
    bool ok = verify(release_signing_bytes(cid, ts), sig, who.sig_public) &&
              (!member_check_ || member_check_(who_id)) && store_->may_release(cid, who_id);
    if (ok) {
        std::lock_guard lock(cid_lock(cid));
        store_->mark_released(cid, clock_->now());
        dht_.forget_published(cid.digest, RecordKind::kProvider);
    }
    w.u8(ok ? 1 : 0);
    return Frame{MsgType::kReleaseAck, std::move(w).take()};
}

PinRecord PinService::pin(const ContentId& cid, std::optional<std::size_t> replication,
                          std::optional<PeerId> releaser) {
    std::lock_guard cid_guard(cid_lock(cid));
    auto block = store_->get(cid);
    if (!block) throw Error(ErrorCode::kNotFound, "pin: block not present locally: " + cid.hex());
    std::size_t want = replication.value_or(config_.replication);
    const PeerId& me = identity_.peer_id();

    auto closest = dht_.find_node(cid.digest);
    std::vector<NodeInfo> candidates;
    for (auto& n : closest) {
        if (n.peer_id != me) candidates.push_back(n);
    }
    std::stable_sort(candidates.begin(), candidates.end(), [&](const NodeInfo& a, const NodeInfo& b) {
        auto da = xor_distance(a.peer_id, cid.digest), db = xor_distance(b.peer_id, cid.digest);
        if (da != db) return da < db;
        bool ba = bootstrap_check_ && bootstrap_check_(a.peer_id);
        bool bb = bootstrap_check_ && bootstrap_check_(b.peer_id);
        return ba && !bb;
    });

    PeerId releaser_id = releaser.value_or(PeerId{});
    ByteWriter body;
    body.raw(cid.digest).blob(block->data);
    encode(body, identity_.keys());
    body.raw(releaser_id).raw(sign(pin_signing_bytes(cid, releaser_id), identity_));

    LocalPin local;
    std::vector<DhtRecord> provider_records;
    for (const auto& c : candidates) {
        if (local.record.holders.size() >= want) break;
        auto resp = client_->call(c.endpoint, MsgType::kPinPut, body.bytes(), config_.rpc_timeout);
        if (!resp || resp->type != MsgType::kPinAck) continue;
        try {
            ByteReader r(resp->payload);
            DhtRecord rec = decode_dht_record(r);
            if (rec.publisher != c.peer_id || rec.key != cid.digest || !rec.authentic()) continue;
            provider_records.push_back(std::move(rec));
        } catch (const Error&) {
            continue;
        }
        local.record.holders.insert(c.peer_id);
        local.endpoints[c.peer_id] = c.endpoint;
    }

    UnixMs now = clock_->now();
    std::set<PeerId> releasers{me};
    if (releaser) releasers.insert(*releaser);
    store_->mark_pinned(cid, now, releasers);

    for (const auto& rec : provider_records) dht_.store_record(rec);
    dht_.publish(cid.digest, RecordKind::kProvider, self_endpoint());

    local.record.cid = cid;
    local.record.created_at = now;
    local.record.state = PinState::kPinned;
    local.record.degraded = local.record.holders.size() < want;
    if (local.record.holders.empty()) local.record.holders.insert(me);
    {
        std::lock_guard lock(records_mu_);
        records_[cid] = local;
    }
    return local.record;
}

bool PinService::send_release(const std::string& endpoint, const ContentId& cid) {
    UnixMs ts = clock_->now();
    ByteWriter w;
    w.raw(cid.digest);
    encode(w, identity_.keys());
    w.i64(ts).raw(sign(release_signing_bytes(cid, ts), identity_));
    auto resp = client_->call(endpoint, MsgType::kRelease, w.bytes(), config_.rpc_timeout);
    return resp && resp->type == MsgType::kReleaseAck && !resp->payload.empty() && resp->payload[0] == 1;
}

void PinService::unpin(const ContentId& cid) {
    std::lock_guard cid_guard(cid_lock(cid));
    std::map<PeerId, std::string> endpoints;
    {
        std::lock_guard lock(records_mu_);
        auto it = records_.find(cid);
        if (it == records_.end()) return;
        if (it->second.record.state == PinState::kReleased) return;
        it->second.record.state = PinState::kReleased;
        endpoints = it->second.endpoints;
    }
    for (const auto& [id, ep] : endpoints) {
        if (!send_release(ep, cid)) spdlog::debug("unpin {}: holder {} did not acknowledge", cid.hex(), ep);
    }
    store_->mark_released(cid, clock_->now());
    dht_.forget_published(cid.digest, RecordKind::kProvider);
}

std::size_t PinService::release_everywhere(const ContentId& cid) {
    std::size_t acked = 0;
    for (const auto& rec : dht_.find_value(cid.digest, RecordKind::kProvider)) {
        if (rec.publisher == identity_.peer_id()) {
            std::lock_guard cid_guard(cid_lock(cid));
            store_->mark_released(cid, clock_->now());
            dht_.forget_published(cid.digest, RecordKind::kProvider);
            ++acked;
            continue;
        }
        acked += send_release(to_string(rec.value), cid) ? 1 : 0;
    }
    return acked;
}

FetchResult PinService::fetch(const ContentId& cid) {
    FetchResult result;
    if (auto local = store_->get(cid); local && content_id(local->data) == cid) {
        result.chunk = std::move(local);
        return result;
    }
    ByteWriter w;
    w.raw(cid.digest);
    for (const auto& rec : dht_.find_value(cid.digest, RecordKind::kProvider)) {
        if (rec.publisher == identity_.peer_id()) continue;
        ++result.providers_tried;
        auto resp = client_->call(to_string(rec.value), MsgType::kGetBlock, w.bytes(), config_.rpc_timeout);
        if (!resp || resp->type != MsgType::kBlockResp) continue;
        try {
            ByteReader r(resp->payload);
            if (r.u8() != 1) continue;
            Bytes data = r.blob(kMaxFrameBytes);
            if (content_id(data) != cid) {
                ++result.hash_mismatches;
                spdlog::warn("block {} from {} failed hash verification", cid.hex().substr(0, 12),
                             to_string(rec.value));
                continue;
            }
            result.chunk = Chunk{cid, std::move(data)};
            return result;
        } catch (const Error&) {
            continue;
        }
    }
    return result;
}

std::optional<PinRecord> PinService::pin_record(const ContentId& cid) const {
    std::lock_guard lock(records_mu_);
    auto it = records_.find(cid);
    if (it == records_.end()) return std::nullopt;
    return it->second.record;
}

std::size_t PinService::gc(UnixMs now) {
    auto removed = store_->gc(now);
    for (const auto& cid : removed) dht_.forget_published(cid.digest, RecordKind::kProvider);
    return removed.size();
}

}  // namespace fybrr
