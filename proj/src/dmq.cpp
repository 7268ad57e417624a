#include "fybrr/dmq.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>

namespace fybrr {

namespace {

constexpr std::string_view kQueueLabel = "fybrr/dmq/v1";
constexpr std::string_view kDrainLabel = "fybrr/dmq/drain/v1";
constexpr std::string_view kAckLabel = "fybrr/dmq/ack/v1";
constexpr std::size_t kMaxPages = 4096;

void write_tombstones(ByteWriter& w, const std::map<ContentId, UnixMs>& tombstones) {
    w.u32(static_cast<std::uint32_t>(tombstones.size()));
    for (const auto& [cid, at] : tombstones) w.raw(cid.digest).i64(at);
}

std::map<ContentId, UnixMs> read_tombstones(ByteReader& r) {
    std::uint32_t n = r.u32();
    if (n > r.remaining() / 40) throw Error(ErrorCode::kDecode, "tombstone count exceeds body");
    std::map<ContentId, UnixMs> out;
    for (std::uint32_t i = 0; i < n; ++i) {
        ContentId cid{r.array<32>()};
        out[cid] = r.i64();
    }
    return out;
}

void write_pages(ByteWriter& w, const std::vector<Bytes>& pages) {
    w.u16(static_cast<std::uint16_t>(pages.size()));
    for (const auto& p : pages) w.blob(p);
}

std::vector<Bytes> read_pages(ByteReader& r) {
    std::uint16_t n = r.u16();
    if (n == 0 || n > kMaxPages) throw Error(ErrorCode::kDecode, "bad page count");
    std::vector<Bytes> pages;
    for (std::uint16_t i = 0; i < n; ++i) pages.push_back(r.blob(kQueuePageLimit));
    return pages;
}

}  // namespace

Hash32 queue_key(const PeerId& recipient) {
    ByteWriter w;
    w.raw(as_bytes(kQueueLabel)).raw(recipient);
    return sha256(w.bytes());
}

// ---------------------------------------------------------------- entries

Bytes QueueEntry::signing_bytes() const {
    ByteWriter w;
    w.raw(recipient).raw(msg_cid.digest).raw(sender).u64(static_cast<std::uint64_t>(timestamp));
    return std::move(w).take();
}

Bytes QueueEntry::canonical() const {
    Bytes b = signing_bytes();
    b.insert(b.end(), signature.begin(), signature.end());
    return b;
}

QueueEntry QueueEntry::decode(ByteView bytes) {
    if (bytes.size() != kQueueEntryBytes) throw Error(ErrorCode::kDecode, "queue entry must be 168 bytes");
    ByteReader r(bytes);
    QueueEntry e;
    e.recipient = r.array<32>();
    e.msg_cid.digest = r.array<32>();
    e.sender = r.array<32>();
    e.timestamp = static_cast<UnixMs>(r.u64());
    e.signature = r.array<64>();
    return e;
}

QueueEntry QueueEntry::make(const PeerId& recipient, const ContentId& msg_cid, const PeerIdentity& sender,
                            UnixMs timestamp) {
    QueueEntry e{recipient, msg_cid, sender.peer_id(), timestamp, {}};
    e.signature = sign(e.signing_bytes(), sender);
    return e;
}

bool QueueEntry::verify(const PeerKeys& sender_keys) const {
    return sender_keys.peer_id() == sender && fybrr::verify(signing_bytes(), signature, sender_keys.sig_public);
}

bool queue_order(const QueueEntry& a, const QueueEntry& b) {
    if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
    return a.msg_cid < b.msg_cid;
}

// ---------------------------------------------------------------- pages

std::vector<Bytes> encode_queue_pages(const QueueHead& head) {
    std::size_t n_pages = std::max<std::size_t>(1, (head.entries.size() + kQueuePageEntries - 1) / kQueuePageEntries);
    if (n_pages > kMaxPages) throw Error(ErrorCode::kInvalidArgument, "queue too long to encode");
    std::vector<Bytes> pages(n_pages);
    Hash32 next{};
    for (std::size_t i = n_pages; i-- > 0;) {
        std::size_t begin = i * kQueuePageEntries;
        std::size_t end = std::min(head.entries.size(), begin + kQueuePageEntries);
        ByteWriter w;
        w.raw(head.recipient).u64(head.version).u16(static_cast<std::uint16_t>(i));
        w.u8(static_cast<std::uint8_t>(end - begin));
        for (std::size_t j = begin; j < end; ++j) {
            w.raw(head.entries[j].entry.canonical());
            encode(w, head.entries[j].sender_keys);
        }
        w.raw(next);
        pages[i] = std::move(w).take();
        next = sha256(pages[i]);
    }
    return pages;
}

QueueHead decode_queue_pages(const std::vector<Bytes>& pages) {
    if (pages.empty()) throw Error(ErrorCode::kDecode, "no queue pages");
    QueueHead head;
    for (std::size_t i = 0; i < pages.size(); ++i) {
        if (pages[i].size() > kQueuePageLimit) throw Error(ErrorCode::kDecode, "queue page too large");
        ByteReader r(pages[i]);
        PeerId recipient = r.array<32>();
        std::uint64_t version = r.u64();
        std::uint16_t index = r.u16();
        std::uint8_t count = r.u8();
        if (i == 0) {
            head.recipient = recipient;
            head.version = version;
        } else if (recipient != head.recipient || version != head.version) {
            throw Error(ErrorCode::kDecode, "queue page header mismatch");
        }
        if (index != i || count > kQueuePageEntries) throw Error(ErrorCode::kDecode, "queue page out of order");
        for (std::uint8_t j = 0; j < count; ++j) {
            QueueEntry e = QueueEntry::decode(r.raw(kQueueEntryBytes));
            head.entries.push_back({e, decode_peer_keys(r)});
        }
        Hash32 next = r.array<32>();
        r.expect_done();
        bool last = i + 1 == pages.size();
        if (last ? next != Hash32{} : next != sha256(pages[i + 1])) {
            throw Error(ErrorCode::kHashMismatch, "queue page chain broken at page " + std::to_string(i));
        }
    }
    return head;
}

// ---------------------------------------------------------------- service

Dmq::Dmq(const PeerIdentity& identity, Dht& dht, std::shared_ptr<RpcClient> client, std::shared_ptr<Clock> clock,
         DmqConfig config)
    : identity_(identity), dht_(dht), client_(std::move(client)), clock_(std::move(clock)), config_(config) {}

void Dmq::attach(RpcRouter& router) {
    local_[MsgType::kDmqEnqueue] = [this](const RpcRequest& r) { return on_enqueue(r); };
    local_[MsgType::kDmqDrain] = [this](const RpcRequest& r) { return on_drain(r); };
    local_[MsgType::kDmqAck] = [this](const RpcRequest& r) { return on_ack(r); };
    local_[MsgType::kDmqReplicate] = [this](const RpcRequest& r) { return on_replicate(r); };
    local_[MsgType::kDmqStatus] = [this](const RpcRequest& r) { return on_status(r); };
    for (const auto& [type, handler] : local_) router.on(type, handler);
}

std::optional<Frame> Dmq::call_or_self(const NodeInfo& node, MsgType type, ByteView body) {
    if (node.peer_id == identity_.peer_id()) {
        auto it = local_.find(type);
        if (it == local_.end()) return std::nullopt;
        RpcRequest req{type, client_->self(), Bytes(body.begin(), body.end())};
        try {
            return it->second(req);
        } catch (const Error& e) {
            return error_frame(e.what());
        }
    }
    return client_->call(node.endpoint, type, body, config_.rpc_timeout);
}

bool Dmq::accept_entry(const SignedEntry& e) {
    if (!e.entry.verify(e.sender_keys)) return false;
    if (member_check_ && !member_check_(e.entry.sender)) return false;
    std::lock_guard lock(mu_);
    Held& h = held_[e.entry.recipient];
    if (h.tombstones.count(e.entry.msg_cid)) return true;
    auto [it, inserted] = h.entries.try_emplace({e.entry.sender, e.entry.msg_cid}, e);
    if (inserted) ++h.version;
    return true;
}

bool Dmq::apply_ack(const PeerId& recipient, const ContentId& cid) {
    std::lock_guard lock(mu_);
    auto hit = held_.find(recipient);
    if (hit == held_.end()) return false;
    Held& h = hit->second;
    bool removed = false;
    for (auto it = h.entries.begin(); it != h.entries.end();) {
        if (it->first.second == cid) {
            it = h.entries.erase(it);
            removed = true;
        } else {
            ++it;
        }
    }
    h.tombstones.emplace(cid, clock_->now());
    if (removed) ++h.version;
    return removed;
}

QueueHead Dmq::head_of(const PeerId& recipient, const Held& h) const {
    QueueHead head;
    head.recipient = recipient;
    head.version = h.version;
    for (const auto& [k, e] : h.entries) head.entries.push_back(e);
    std::sort(head.entries.begin(), head.entries.end(),
              [](const SignedEntry& a, const SignedEntry& b) { return queue_order(a.entry, b.entry); });
    return head;
}

Bytes Dmq::drain_response(const PeerId& recipient) const {
    std::lock_guard lock(mu_);
    ByteWriter w;
    auto it = held_.find(recipient);
    if (it == held_.end()) {
        QueueHead empty;
        empty.recipient = recipient;
        write_pages(w, encode_queue_pages(empty));
        write_tombstones(w, {});
    } else {
        write_pages(w, encode_queue_pages(head_of(recipient, it->second)));
        write_tombstones(w, it->second.tombstones);
    }
    return std::move(w).take();
}

Bytes Dmq::replica_body(const PeerId& recipient) const { return drain_response(recipient); }

Bytes Dmq::signed_request(std::string_view label, ByteView extra) const {
    UnixMs ts = clock_->now();
    ByteWriter msg;
    msg.raw(as_bytes(label)).raw(identity_.peer_id()).raw(extra).i64(ts);
    ByteWriter w;
    encode(w, identity_.keys());
    w.i64(ts).raw(sign(msg.bytes(), identity_)).raw(extra);
    return std::move(w).take();
}

bool Dmq::check_request(ByteReader& r, std::string_view label, ByteView extra, PeerId& who) const {
    PeerKeys keys = decode_peer_keys(r);
    UnixMs ts = r.i64();
    Signature sig = r.array<64>();
    who = keys.peer_id();
    UnixMs now = clock_->now();
    if (ts > now + config_.request_window_ms || ts < now - config_.request_window_ms) return false;
    ByteWriter msg;
    msg.raw(as_bytes(label)).raw(who).raw(extra).i64(ts);
    return verify(msg.bytes(), sig, keys.sig_public);
}

std::optional<Frame> Dmq::on_enqueue(const RpcRequest& req) {
    ByteReader r(req.body);
    QueueEntry e = QueueEntry::decode(r.raw(kQueueEntryBytes));
    PeerKeys keys = decode_peer_keys(r);
    r.expect_done();
    ByteWriter w;
    w.u8(accept_entry({e, keys}) ? 1 : 0);
    return Frame{MsgType::kDmqOk, std::move(w).take()};
}

std::optional<Frame> Dmq::on_drain(const RpcRequest& req) {
    ByteReader r(req.body);
    PeerId who{};
    if (!check_request(r, kDrainLabel, {}, who)) return error_frame("drain request not signed by the recipient");
    return Frame{MsgType::kDmqDrainResp, drain_response(who)};
}

std::optional<Frame> Dmq::on_ack(const RpcRequest& req) {
    // The cid trails the signed header; peek at it before verifying.
    if (req.body.size() < 64 + 8 + 64 + 32) return error_frame("short ack");
    ByteView cid_bytes = ByteView(req.body).last(32);
    ByteReader r(req.body);
    PeerId who{};
    if (!check_request(r, kAckLabel, cid_bytes, who)) return error_frame("ack not signed by the recipient");
    ContentId cid{array_from<32>(cid_bytes)};
    apply_ack(who, cid);
    ByteWriter w;
    w.u8(1);
    return Frame{MsgType::kDmqOk, std::move(w).take()};
}

std::optional<Frame> Dmq::on_replicate(const RpcRequest& req) {
    ByteReader r(req.body);
    QueueHead head = decode_queue_pages(read_pages(r));
    auto tombstones = read_tombstones(r);
    ByteWriter w;
    w.u8(accept_replica(head, tombstones) ? 1 : 0);
    return Frame{MsgType::kDmqOk, std::move(w).take()};
}

std::optional<Frame> Dmq::on_status(const RpcRequest& req) {
    ByteReader r(req.body);
    PeerId recipient = r.array<32>();
    ContentId cid{r.array<32>()};
    DeliveryState state = DeliveryState::kUnknown;
    {
        std::lock_guard lock(mu_);
        if (auto it = held_.find(recipient); it != held_.end()) {
            if (it->second.tombstones.count(cid)) {
                state = DeliveryState::kDelivered;
            } else {
                for (const auto& [k, e] : it->second.entries) {
                    if (k.second == cid) state = DeliveryState::kPending;
                }
            }
        }
    }
    ByteWriter w;
    w.u8(static_cast<std::uint8_t>(state));
    return Frame{MsgType::kDmqStatusResp, std::move(w).take()};
}

bool Dmq::accept_replica(const QueueHead& head, const std::map<ContentId, UnixMs>& tombstones) {
    std::vector<SignedEntry> valid;
    for (const auto& e : head.entries) {
        if (e.entry.recipient != head.recipient || !e.entry.verify(e.sender_keys)) return false;
        if (member_check_ && !member_check_(e.entry.sender)) continue;
        valid.push_back(e);
    }
    std::lock_guard lock(mu_);
    Held& h = held_[head.recipient];
    if (head.version <= h.version) return false;
    for (const auto& [cid, at] : tombstones) h.tombstones.emplace(cid, at);
    for (const auto& e : valid) h.entries.try_emplace({e.entry.sender, e.entry.msg_cid}, e);
    for (auto it = h.entries.begin(); it != h.entries.end();) {
        it = h.tombstones.count(it->first.second) ? h.entries.erase(it) : std::next(it);
    }
    h.version = head.version;
    return true;
}

std::size_t Dmq::enqueue(const QueueEntry& entry) {
    if (entry.sender != identity_.peer_id() || !entry.verify(identity_.keys())) {
        throw Error(ErrorCode::kAuthentication, "queue entry is not signed by this node");
    }
    ByteWriter w;
    w.raw(entry.canonical());
    encode(w, identity_.keys());
    std::size_t accepted = 0;
    for (const auto& node : dht_.find_node(queue_key(entry.recipient))) {
        auto resp = call_or_self(node, MsgType::kDmqEnqueue, w.bytes());
        if (resp && resp->type == MsgType::kDmqOk && !resp->payload.empty() && resp->payload[0] == 1) ++accepted;
    }
    return accepted;
}

std::vector<SignedEntry> Dmq::drain() {
    const PeerId& me = identity_.peer_id();
    Bytes body = signed_request(kDrainLabel, {});
    std::map<std::pair<PeerId, ContentId>, SignedEntry> merged;
    std::set<ContentId> acked;
    for (const auto& node : dht_.find_node(queue_key(me))) {
        auto resp = call_or_self(node, MsgType::kDmqDrain, body);
        if (!resp || resp->type != MsgType::kDmqDrainResp) continue;
        try {
            ByteReader r(resp->payload);
            QueueHead head = decode_queue_pages(read_pages(r));
            for (const auto& [cid, at] : read_tombstones(r)) acked.insert(cid);
            if (head.recipient != me) continue;
            for (const auto& e : head.entries) {
                if (e.entry.recipient != me || !e.entry.verify(e.sender_keys)) {
                    spdlog::warn("custodian {} returned a forged queue entry", node.endpoint);
                    continue;
                }
                merged.try_emplace({e.entry.sender, e.entry.msg_cid}, e);
            }
        } catch (const Error& e) {
            spdlog::warn("malformed drain response from {}: {}", node.endpoint, e.what());
        }
    }
    std::vector<SignedEntry> out;
    for (auto& [k, e] : merged) {
        if (!acked.count(k.second)) out.push_back(std::move(e));
    }
    std::sort(out.begin(), out.end(),
              [](const SignedEntry& a, const SignedEntry& b) { return queue_order(a.entry, b.entry); });
    return out;
}

std::size_t Dmq::ack(const ContentId& msg_cid) {
    Bytes body = signed_request(kAckLabel, msg_cid.digest);
    std::size_t acks = 0;
    for (const auto& node : dht_.find_node(queue_key(identity_.peer_id()))) {
        auto resp = call_or_self(node, MsgType::kDmqAck, body);
        if (resp && resp->type == MsgType::kDmqOk) ++acks;
    }
    return acks;
}

DeliveryState Dmq::status(const PeerId& recipient, const ContentId& msg_cid) {
    ByteWriter w;
    w.raw(recipient).raw(msg_cid.digest);
    DeliveryState best = DeliveryState::kUnknown;
    for (const auto& node : dht_.find_node(queue_key(recipient))) {
        auto resp = call_or_self(node, MsgType::kDmqStatus, w.bytes());
        if (!resp || resp->type != MsgType::kDmqStatusResp || resp->payload.empty()) continue;
        auto s = static_cast<DeliveryState>(resp->payload[0]);
        if (s == DeliveryState::kDelivered) return s;
        if (s == DeliveryState::kPending) best = s;
    }
    return best;
}

std::size_t Dmq::replicate() {
    std::vector<PeerId> recipients;
    {
        std::lock_guard lock(mu_);
        for (const auto& [r, h] : held_) recipients.push_back(r);
    }
    std::size_t pushed = 0;
    for (const auto& recipient : recipients) {
        Bytes body = replica_body(recipient);
        for (const auto& node : dht_.find_node(queue_key(recipient))) {
            if (node.peer_id == identity_.peer_id()) continue;
            auto resp = client_->call(node.endpoint, MsgType::kDmqReplicate, body, config_.rpc_timeout);
            if (resp && resp->type == MsgType::kDmqOk && !resp->payload.empty() && resp->payload[0] == 1) ++pushed;
        }
    }
    return pushed;
}

std::size_t Dmq::expire() {
    UnixMs cutoff = clock_->now() - config_.tombstone_ttl_ms;
    std::lock_guard lock(mu_);
    std::size_t n = 0;
    for (auto& [r, h] : held_) {
        for (auto it = h.tombstones.begin(); it != h.tombstones.end();) {
            if (it->second < cutoff) {
                it = h.tombstones.erase(it);
                ++n;
            } else {
                ++it;
            }
        }
    }
    return n;
}

std::optional<QueueHead> Dmq::held(const PeerId& recipient) const {
    std::lock_guard lock(mu_);
    auto it = held_.find(recipient);
    if (it == held_.end()) return std::nullopt;
    return head_of(recipient, it->second);
}

std::size_t Dmq::held_entry_count() const {
    std::lock_guard lock(mu_);
    std::size_t n = 0;
    for (const auto& [r, h] : held_) n += h.entries.size();
    return n;
}

}  // namespace fybrr
