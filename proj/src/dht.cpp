#include "fybrr/dht.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <future>
#include <set>

namespace fybrr {

Distance xor_distance(const Hash32& a, const Hash32& b) {
    Distance d{};
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a[i] ^ b[i];
    return d;
}

Distance xor_distance(ByteView a, ByteView b) {
    if (a.size() != 32 || b.size() != 32) {
        throw Error(ErrorCode::kInvalidArgument, "xor_distance needs two 32-byte ids");
    }
    return xor_distance(array_from<32>(a), array_from<32>(b));
}

int log2_floor(const Distance& d) {
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d[i] == 0) continue;
        int bit = 7;
        while (!(d[i] & (1u << bit))) --bit;
        return static_cast<int>((d.size() - 1 - i) * 8) + bit;
    }
    return -1;
}

// ---------------------------------------------------------------- routing table

RoutingTable::Observation RoutingTable::observe(const NodeInfo& node, UnixMs now) {
    int idx = log2_floor(xor_distance(self_, node.peer_id));
    if (idx < 0) return {Outcome::kSelf, std::nullopt};
    std::lock_guard lock(mu_);
    auto& b = buckets_[static_cast<std::size_t>(idx)];
    auto it = std::find_if(b.begin(), b.end(), [&](const NodeInfo& n) { return n.peer_id == node.peer_id; });
    if (it != b.end()) {
        NodeInfo updated = *it;
        updated.endpoint = node.endpoint;
        updated.last_seen = std::max(updated.last_seen, now);
        b.erase(it);
        b.push_back(std::move(updated));
        return {Outcome::kRefreshed, std::nullopt};
    }
    if (b.size() < k_) {
        NodeInfo fresh = node;
        fresh.last_seen = now;
        b.push_back(std::move(fresh));
        return {Outcome::kInserted, std::nullopt};
    }
    return {Outcome::kBucketFull, b.front()};
}

void RoutingTable::touch(const PeerId& alive, UnixMs now) {
    int idx = log2_floor(xor_distance(self_, alive));
    if (idx < 0) return;
    std::lock_guard lock(mu_);
    auto& b = buckets_[static_cast<std::size_t>(idx)];
    auto it = std::find_if(b.begin(), b.end(), [&](const NodeInfo& n) { return n.peer_id == alive; });
    if (it == b.end()) return;
    NodeInfo n = *it;
    n.last_seen = std::max(n.last_seen, now);
    b.erase(it);
    b.push_back(std::move(n));
}

bool RoutingTable::replace(const PeerId& dead, const NodeInfo& newcomer, UnixMs now) {
    int idx = log2_floor(xor_distance(self_, dead));
    if (idx < 0 || idx != log2_floor(xor_distance(self_, newcomer.peer_id))) return false;
    std::lock_guard lock(mu_);
    auto& b = buckets_[static_cast<std::size_t>(idx)];
    auto it = std::find_if(b.begin(), b.end(), [&](const NodeInfo& n) { return n.peer_id == dead; });
    if (it == b.end()) return false;
    if (std::any_of(b.begin(), b.end(), [&](const NodeInfo& n) { return n.peer_id == newcomer.peer_id; })) {
        return false;
    }
    b.erase(it);
    NodeInfo fresh = newcomer;
    fresh.last_seen = now;
    b.push_back(std::move(fresh));
    return true;
}

bool RoutingTable::remove(const PeerId& id) {
    int idx = log2_floor(xor_distance(self_, id));
    if (idx < 0) return false;
    std::lock_guard lock(mu_);
    auto& b = buckets_[static_cast<std::size_t>(idx)];
    auto it = std::find_if(b.begin(), b.end(), [&](const NodeInfo& n) { return n.peer_id == id; });
    if (it == b.end()) return false;
    b.erase(it);
    return true;
}

bool RoutingTable::contains(const PeerId& id) const {
    int idx = log2_floor(xor_distance(self_, id));
    if (idx < 0) return false;
    std::lock_guard lock(mu_);
    const auto& b = buckets_[static_cast<std::size_t>(idx)];
    return std::any_of(b.begin(), b.end(), [&](const NodeInfo& n) { return n.peer_id == id; });
}

std::vector<NodeInfo> RoutingTable::closest(const Hash32& target, std::size_t n) const {
    std::vector<NodeInfo> out = all();
    std::sort(out.begin(), out.end(), [&](const NodeInfo& a, const NodeInfo& b) {
        return xor_distance(a.peer_id, target) < xor_distance(b.peer_id, target);
    });
    if (out.size() > n) out.resize(n);
    return out;
}

std::vector<NodeInfo> RoutingTable::all() const {
    std::lock_guard lock(mu_);
    std::vector<NodeInfo> out;
    for (const auto& b : buckets_) out.insert(out.end(), b.begin(), b.end());
    return out;
}

std::size_t RoutingTable::size() const {
    std::lock_guard lock(mu_);
    std::size_t n = 0;
    for (const auto& b : buckets_) n += b.size();
    return n;
}

std::vector<NodeInfo> RoutingTable::bucket(int index) const {
    std::lock_guard lock(mu_);
    return buckets_.at(static_cast<std::size_t>(index));
}

// ---------------------------------------------------------------- records

Bytes DhtRecord::signing_bytes() const {
    ByteWriter w;
    w.raw(as_bytes("fybrr/dht/record/v1"))
        .raw(key)
        .u8(static_cast<std::uint8_t>(kind))
        .blob(value)
        .raw(publisher)
        .i64(expires_at);
    return std::move(w).take();
}

bool DhtRecord::authentic() const {
    if (!publisher_keys.certifies(publisher)) return false;
    return verify(signing_bytes(), signature, publisher_keys.sig_public);
}

DhtRecord DhtRecord::make(const Hash32& key, RecordKind kind, Bytes value, const PeerIdentity& publisher,
                          UnixMs expires_at) {
    DhtRecord r;
    r.key = key;
    r.kind = kind;
    r.value = std::move(value);
    r.publisher = publisher.peer_id();
    r.publisher_keys = publisher.keys();
    r.expires_at = expires_at;
    r.signature = sign(r.signing_bytes(), publisher);
    return r;
}

void encode(ByteWriter& w, const DhtRecord& rec) {
    w.raw(rec.key).u8(static_cast<std::uint8_t>(rec.kind)).blob(rec.value).raw(rec.publisher);
    encode(w, rec.publisher_keys);
    w.i64(rec.expires_at).raw(rec.signature);
}

DhtRecord decode_dht_record(ByteReader& r) {
    DhtRecord rec;
    rec.key = r.array<32>();
    std::uint8_t kind = r.u8();
    if (kind < 1 || kind > 3) throw Error(ErrorCode::kDecode, "unknown record kind");
    rec.kind = static_cast<RecordKind>(kind);
    rec.value = r.blob(1u << 20);
    rec.publisher = r.array<32>();
    rec.publisher_keys = decode_peer_keys(r);
    rec.expires_at = r.i64();
    rec.signature = r.array<64>();
    return rec;
}

Bytes encode_nodes(const std::vector<NodeInfo>& nodes) {
    ByteWriter w;
    w.u16(static_cast<std::uint16_t>(nodes.size()));
    for (const auto& n : nodes) encode(w, n);
    return std::move(w).take();
}

std::vector<NodeInfo> decode_nodes(ByteReader& r) {
    std::uint16_t n = r.u16();
    std::vector<NodeInfo> out;
    out.reserve(n);
    for (std::uint16_t i = 0; i < n; ++i) out.push_back(decode_node_info(r));
    return out;
}

// ---------------------------------------------------------------- node

Dht::Dht(const PeerIdentity& identity, std::shared_ptr<RpcClient> client, std::shared_ptr<Clock> clock,
         DhtConfig config)
    : identity_(identity), client_(std::move(client)), clock_(std::move(clock)), config_(config),
      table_(identity.peer_id(), config.k) {}

void Dht::attach(RpcRouter& router) {
    router.set_contact_observer([this](const NodeInfo& n) { observe(n); });
    router.on(MsgType::kDhtPing, [this](const RpcRequest&) -> std::optional<Frame> {
        ByteWriter w;
        encode(w, self());
        return Frame{MsgType::kDhtPong, std::move(w).take()};
    });
    router.on(MsgType::kFindNode, [this](const RpcRequest& r) { return on_find_node(r); });
    router.on(MsgType::kFindValue, [this](const RpcRequest& r) { return on_find_value(r); });
    router.on(MsgType::kStore, [this](const RpcRequest& r) { return on_store(r); });
}

std::optional<Frame> Dht::on_find_node(const RpcRequest& req) {
    ByteReader r(req.body);
    Hash32 target = r.array<32>();
    return Frame{MsgType::kFindNodeResp, encode_nodes(table_.closest(target, config_.k))};
}

std::optional<Frame> Dht::on_find_value(const RpcRequest& req) {
    ByteReader r(req.body);
    Hash32 key = r.array<32>();
    auto kind = static_cast<RecordKind>(r.u8());
    ByteWriter w;
    w.raw(encode_nodes(table_.closest(key, config_.k)));
    auto recs = local_lookup(key, kind);
    w.u16(static_cast<std::uint16_t>(recs.size()));
    for (const auto& rec : recs) encode(w, rec);
    return Frame{MsgType::kFindValueResp, std::move(w).take()};
}

std::optional<Frame> Dht::on_store(const RpcRequest& req) {
    ByteReader r(req.body);
    DhtRecord rec = decode_dht_record(r);
    bool ok = accept_record(rec);
    ByteWriter w;
    w.u8(ok ? 1 : 0);
    return Frame{MsgType::kStoreResp, std::move(w).take()};
}

bool Dht::accept_record(const DhtRecord& rec) {
    if (rec.value.size() > config_.max_value_bytes) return false;
    if (rec.expires_at <= clock_->now()) return false;
    if (!rec.authentic()) return false;
    std::lock_guard lock(records_mu_);
    auto& slot = records_[rec.key];
    auto id = std::make_pair(rec.kind, rec.publisher);
    auto it = slot.find(id);
    if (it != slot.end()) {
        bool newer = rec.kind == RecordKind::kQueueHead ? rec.expires_at > it->second.expires_at
                                                          : rec.expires_at >= it->second.expires_at;
        if (!newer) return rec == it->second;
        it->second = rec;
        return true;
    }
    slot.emplace(id, rec);
    return true;
}

std::vector<DhtRecord> Dht::local_lookup(const Hash32& key, RecordKind kind) const {
    UnixMs now = clock_->now();
    std::lock_guard lock(records_mu_);
    std::vector<DhtRecord> out;
    auto it = records_.find(key);
    if (it == records_.end()) return out;
    for (const auto& [id, rec] : it->second) {
        if (id.first == kind && rec.expires_at > now) out.push_back(rec);
    }
    return out;
}

std::vector<DhtRecord> Dht::local_records(const Hash32& key) const {
    std::lock_guard lock(records_mu_);
    std::vector<DhtRecord> out;
    auto it = records_.find(key);
    if (it == records_.end()) return out;
    for (const auto& [id, rec] : it->second) out.push_back(rec);
    return out;
}

std::size_t Dht::local_record_count() const {
    std::lock_guard lock(records_mu_);
    std::size_t n = 0;
    for (const auto& [k, slot] : records_) n += slot.size();
    return n;
}

std::size_t Dht::expire() {
    UnixMs now = clock_->now();
    std::lock_guard lock(records_mu_);
    std::size_t removed = 0;
    for (auto it = records_.begin(); it != records_.end();) {
        auto& slot = it->second;
        removed += std::erase_if(slot, [&](const auto& kv) { return kv.second.expires_at <= now; });
        it = slot.empty() ? records_.erase(it) : std::next(it);
    }
    return removed;
}

bool Dht::ping(const NodeInfo& node) {
    auto got = ping_endpoint(node.endpoint);
    return got && got->peer_id == node.peer_id;
}

std::optional<NodeInfo> Dht::ping_endpoint(const std::string& endpoint) {
    auto resp = client_->call(endpoint, MsgType::kDhtPing, {}, config_.rpc_timeout);
    if (!resp || resp->type != MsgType::kDhtPong) return std::nullopt;
    try {
        ByteReader r(resp->payload);
        NodeInfo n = decode_node_info(r);
        n.endpoint = endpoint;
        return n;
    } catch (const Error&) {
        return std::nullopt;
    }
}

void Dht::observe(const NodeInfo& node) {
    if (node.peer_id == identity_.peer_id()) return;
    auto obs = table_.observe(node, clock_->now());
    if (obs.outcome != RoutingTable::Outcome::kBucketFull) return;
    const NodeInfo& lrs = *obs.eviction_candidate;
    if (ping(lrs)) {
        table_.touch(lrs.peer_id, clock_->now());
    } else {
        table_.replace(lrs.peer_id, node, clock_->now());
    }
}

std::vector<NodeInfo> Dht::lookup(const Hash32& target, std::optional<RecordKind> value_kind,
                                  std::vector<DhtRecord>* found) {
    struct Entry {
        NodeInfo node;
        bool queried = false;
    };
    std::map<Distance, Entry> shortlist;
    std::set<PeerId> failed;
    std::map<std::pair<RecordKind, PeerId>, DhtRecord> records;
    const PeerId& me = identity_.peer_id();

    auto add_records = [&](std::vector<DhtRecord> recs) {
        UnixMs now = clock_->now();
        for (auto& rec : recs) {
            if (rec.key != target || rec.expires_at <= now || !rec.authentic()) continue;
            auto id = std::make_pair(rec.kind, rec.publisher);
            auto it = records.find(id);
            if (it == records.end() || it->second.expires_at < rec.expires_at) records[id] = std::move(rec);
        }
    };
    auto add = [&](const NodeInfo& n) {
        if (failed.count(n.peer_id) || n.endpoint.empty()) return;
        shortlist.try_emplace(xor_distance(n.peer_id, target), Entry{n});
    };

    shortlist.emplace(xor_distance(me, target), Entry{self(), true});
    if (value_kind) add_records(local_lookup(target, *value_kind));
    for (const auto& n : table_.closest(target, config_.k)) add(n);

    for (;;) {
        std::vector<NodeInfo> batch;
        std::size_t rank = 0;
        for (auto& [d, e] : shortlist) {
            if (rank++ >= config_.k) break;
            if (!e.queried && batch.size() < config_.alpha) {
                e.queried = true;
                batch.push_back(e.node);
            }
        }
        if (batch.empty()) break;

        ByteWriter req;
        req.raw(target);
        if (value_kind) req.u8(static_cast<std::uint8_t>(*value_kind));
        MsgType type = value_kind ? MsgType::kFindValue : MsgType::kFindNode;
        Bytes body = std::move(req).take();

        std::vector<std::future<std::optional<Frame>>> pending;
        pending.reserve(batch.size());
        for (const auto& n : batch) {
            pending.push_back(std::async(std::launch::async, [this, &n, type, &body] {
                return client_->call(n.endpoint, type, body, config_.rpc_timeout);
            }));
        }
        for (std::size_t i = 0; i < batch.size(); ++i) {
            std::optional<Frame> resp = pending[i].get();
            const NodeInfo& n = batch[i];
            MsgType want = value_kind ? MsgType::kFindValueResp : MsgType::kFindNodeResp;
            bool ok = resp && resp->type == want;
            std::vector<NodeInfo> learned;
            if (ok) {
                try {
                    ByteReader r(resp->payload);
                    learned = decode_nodes(r);
                    if (value_kind) {
                        std::uint16_t nrec = r.u16();
                        std::vector<DhtRecord> recs;
                        for (std::uint16_t j = 0; j < nrec; ++j) recs.push_back(decode_dht_record(r));
                        add_records(std::move(recs));
                    }
                } catch (const Error&) {
                    ok = false;
                }
            }
            if (!ok) {
                failed.insert(n.peer_id);
                shortlist.erase(xor_distance(n.peer_id, target));
                table_.remove(n.peer_id);
                continue;
            }
            observe(n);
            for (const auto& l : learned) add(l);
        }
    }

    std::vector<NodeInfo> out;
    for (auto& [d, e] : shortlist) {
        if (out.size() >= config_.k) break;
        out.push_back(e.node);
    }
    if (found) {
        for (auto& [id, rec] : records) found->push_back(std::move(rec));
    }
    return out;
}

std::vector<NodeInfo> Dht::find_node(const Hash32& target) { return lookup(target, std::nullopt, nullptr); }

std::vector<DhtRecord> Dht::find_value(const Hash32& key, RecordKind kind) {
    std::vector<DhtRecord> found;
    lookup(key, kind, &found);
    return found;
}

std::size_t Dht::store_record(const DhtRecord& record) {
    if (record.expires_at <= clock_->now() || !record.authentic() ||
        record.value.size() > config_.max_value_bytes) {
        return 0;
    }
    ByteWriter w;
    encode(w, record);
    Bytes body = std::move(w).take();
    std::size_t written = 0;
    for (const auto& n : find_node(record.key)) {
        if (n.peer_id == identity_.peer_id()) {
            written += accept_record(record) ? 1 : 0;
            continue;
        }
        auto resp = client_->call(n.endpoint, MsgType::kStore, body, config_.rpc_timeout);
        if (resp && resp->type == MsgType::kStoreResp && !resp->payload.empty() && resp->payload[0] == 1) {
            ++written;
        }
    }
    return written;
}

std::size_t Dht::publish(const Hash32& key, RecordKind kind, Bytes value) {
    UnixMs now = clock_->now();
    {
        std::lock_guard lock(published_mu_);
        auto it = std::find_if(published_.begin(), published_.end(),
                               [&](const Published& p) { return p.key == key && p.kind == kind; });
        if (it != published_.end()) {
            it->value = value;
            it->last_published = now;
        } else {
            published_.push_back({key, kind, value, now});
        }
    }
    return store_record(DhtRecord::make(key, kind, std::move(value), identity_, now + config_.record_ttl_ms));
}

void Dht::track_published(const Hash32& key, RecordKind kind, Bytes value) {
    std::lock_guard lock(published_mu_);
    auto it = std::find_if(published_.begin(), published_.end(),
                           [&](const Published& p) { return p.key == key && p.kind == kind; });
    if (it != published_.end()) {
        it->value = std::move(value);
        it->last_published = clock_->now();
    } else {
        published_.push_back({key, kind, std::move(value), clock_->now()});
    }
}

void Dht::forget_published(const Hash32& key, RecordKind kind) {
    std::lock_guard lock(published_mu_);
    std::erase_if(published_, [&](const Published& p) { return p.key == key && p.kind == kind; });
}

std::size_t Dht::republish(bool force) {
    UnixMs now = clock_->now();
    std::vector<Published> due;
    {
        std::lock_guard lock(published_mu_);
        for (auto& p : published_) {
            if (force || now - p.last_published >= config_.republish_interval_ms) {
                p.last_published = now;
                due.push_back(p);
            }
        }
    }
    std::size_t n = 0;
    for (auto& p : due) {
        n += store_record(DhtRecord::make(p.key, p.kind, p.value, identity_, now + config_.record_ttl_ms)) > 0;
    }
    return n;
}

std::size_t Dht::bootstrap(const std::vector<std::string>& seeds) {
    std::size_t before = table_.size();
    bool any = false;
    for (const auto& seed : seeds) {
        if (seed == self().endpoint) continue;
        if (auto info = ping_endpoint(seed)) {
            observe(*info);
            any = true;
        }
    }
    if (!any) throw Error(ErrorCode::kConnectivity, "bootstrap: no seed reachable");
    find_node(identity_.peer_id());
    std::size_t after = table_.size();
    return after > before ? after - before : 0;
}

void Dht::refresh() {
    find_node(identity_.peer_id());
    find_node(random_array<32>());
}

}  // namespace fybrr
