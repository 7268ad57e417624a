#include "fybrr/rendezvous.hpp"

#include <spdlog/spdlog.h>

#include <sstream>

#include "fybrr/rpc.hpp"

namespace fybrr {

namespace {

constexpr std::string_view kRegisterLabel = "fybrr/rdv/register/v1";
constexpr UnixMs kRequestWindowMs = 10LL * 60 * 1000;
constexpr std::size_t kMaxRelayPayload = 64 * 1024;

Bytes register_signing_bytes(const Hash32& digest, const PeerKeys& keys, std::string_view endpoint,
                             UnixMs expires_at, UnixMs ts) {
    ByteWriter w;
    w.raw(as_bytes(kRegisterLabel)).raw(digest);
    encode(w, keys);
    w.str(endpoint).i64(expires_at).i64(ts);
    return std::move(w).take();
}

Frame reply(MsgType t, ByteWriter& w) { return Frame{t, std::move(w).take()}; }

}  // namespace

// ---------------------------------------------------------------- server

RendezvousServer::RendezvousServer(const Endpoint& bind, RendezvousConfig config)
    : config_(std::move(config)), digest_(swarm_digest(config_.swarm_key)) {
    if (config_.genesis) {
        if (!config_.genesis->authentic()) throw Error(ErrorCode::kAuthentication, "genesis signature invalid");
        membership_ = config_.genesis->state();
    }
    server_ = std::make_unique<TcpServer>(
        bind, [this](std::shared_ptr<Connection> c) { serve(std::move(c)); }, config_.max_connections);
}

RendezvousServer::~RendezvousServer() { stop(); }

void RendezvousServer::stop() {
    if (server_) server_->stop();
}

bool RendezvousServer::member(const PeerId& p) const { return !config_.genesis || membership_.is_member(p); }

std::optional<RendezvousServer::Presence> RendezvousServer::live(const PeerId& p) const {
    auto it = presence_.find(p);
    if (it == presence_.end() || it->second.reg.expires_at <= config_.clock->now()) return std::nullopt;
    return it->second;
}

std::size_t RendezvousServer::online_count() const {
    std::shared_lock lock(mu_);
    std::size_t n = 0;
    UnixMs now = config_.clock->now();
    for (const auto& [id, p] : presence_) n += p.reg.expires_at > now ? 1 : 0;
    return n;
}

MembershipState RendezvousServer::membership() const {
    std::shared_lock lock(mu_);
    return membership_;
}

std::string RendezvousServer::describe_state() const {
    std::shared_lock lock(mu_);
    std::ostringstream out;
    out << "presence " << presence_.size() << "\n";
    for (const auto& [id, p] : presence_) {
        out << to_hex(id) << " " << p.reg.endpoint << " " << p.reg.expires_at << "\n";
    }
    out << "membership_log " << log_.size() << " epoch " << membership_.epoch << "\n";
    return out.str();
}

void RendezvousServer::serve(std::shared_ptr<Connection> conn) {
    std::optional<PeerId> bound;
    try {
        for (;;) {
            auto f = conn->read();
            if (!f) break;
            auto resp = handle(*f, conn, bound);
            if (!resp) break;
            conn->write(*resp);
        }
    } catch (const std::exception& e) {
        spdlog::debug("rendezvous connection ended: {}", e.what());
    }
    if (bound) {
        std::unique_lock lock(mu_);
        auto it = presence_.find(*bound);
        if (it != presence_.end() && it->second.conn.lock() == conn) presence_.erase(it);
    }
}

std::optional<Frame> RendezvousServer::handle(const Frame& f, const std::shared_ptr<Connection>& conn,
                                              std::optional<PeerId>& bound) {
    try {
        ByteReader r(f.payload);
        switch (f.type) {
            case MsgType::kRegister: return on_register(r, conn, bound);
            case MsgType::kLookup: return on_lookup(r);
            case MsgType::kRelay: return on_relay(r, bound);
            case MsgType::kDirectory: return on_directory(r);
            case MsgType::kMembershipPush: return on_membership_push(r);
            case MsgType::kStateReq: return on_state_req();
            default: return error_frame("unsupported request type");
        }
    } catch (const Error& e) {
        return error_frame(e.what());
    }
}

Frame RendezvousServer::on_register(ByteReader& r, const std::shared_ptr<Connection>& conn,
                                    std::optional<PeerId>& bound) {
    Hash32 digest = r.array<32>();
    PeerKeys keys = decode_peer_keys(r);
    std::string endpoint = r.str(256);
    UnixMs expires_at = r.i64();
    UnixMs ts = r.i64();
    Signature sig = r.array<64>();
    r.expect_done();
    if (digest != digest_) return error_frame("swarm key mismatch");
    if (!verify(register_signing_bytes(digest, keys, endpoint, expires_at, ts), sig, keys.sig_public)) {
        return error_frame("registration signature invalid");
    }
    UnixMs now = config_.clock->now();
    if (ts < now - kRequestWindowMs || ts > now + kRequestWindowMs) return error_frame("registration timestamp stale");
    Endpoint::parse(endpoint);
    PeerId id = keys.peer_id();
    if (bound && *bound != id) return error_frame("connection already bound to another peer");
    std::unique_lock lock(mu_);
    if (!member(id)) return error_frame("not a member of this swarm");
    expires_at = std::min(expires_at, now + config_.presence_ttl_ms);
    if (expires_at <= now) return error_frame("registration already expired");
    presence_[id] = Presence{Registration{id, endpoint, keys, expires_at}, conn};
    bound = id;
    ByteWriter w;
    w.i64(expires_at);
    return reply(MsgType::kRegisterOk, w);
}

Frame RendezvousServer::on_lookup(ByteReader& r) const {
    PeerId id = r.array<32>();
    std::shared_lock lock(mu_);
    ByteWriter w;
    auto p = live(id);
    if (!p) {
        w.u8(0);
    } else {
        w.u8(1);
        encode(w, p->reg.keys);
        w.str(p->reg.endpoint).i64(p->reg.expires_at);
    }
    return reply(MsgType::kLookupResp, w);
}

Frame RendezvousServer::on_relay(ByteReader& r, const std::optional<PeerId>& bound) {
    PeerId to = r.array<32>();
    Bytes payload = r.blob(kMaxRelayPayload);
    r.expect_done();
    if (!bound) return error_frame("register before relaying");
    std::shared_ptr<Connection> target;
    {
        std::shared_lock lock(mu_);
        if (auto p = live(to)) target = p->conn.lock();
    }
    bool delivered = false;
    if (target) {
        ByteWriter push;
        push.raw(*bound).blob(payload);
        try {
            target->write(Frame{MsgType::kRelayDeliver, std::move(push).take()});
            delivered = true;
        } catch (const Error& e) {
            spdlog::debug("relay to {} failed: {}", to_hex(to).substr(0, 12), e.what());
        }
    }
    ByteWriter w;
    w.u8(delivered ? 1 : 0);
    return reply(MsgType::kRelayResult, w);
}

Frame RendezvousServer::on_directory(ByteReader& r) const {
    PeerId id = r.array<32>();
    std::shared_lock lock(mu_);
    ByteWriter w;
    auto it = presence_.find(id);
    if (it == presence_.end()) {
        w.u8(0);
    } else {
        w.u8(1);
        encode(w, it->second.reg.keys);
    }
    return reply(MsgType::kDirectoryResp, w);
}

Frame RendezvousServer::on_membership_push(ByteReader& r) {
    if (!config_.genesis) return error_frame("public swarm has no membership log");
    auto log = decode_log(r);
    MembershipState s = replay(*config_.genesis, log);
    std::unique_lock lock(mu_);
    if (log.size() > log_.size()) {
        log_ = std::move(log);
        membership_ = std::move(s);
        for (auto it = presence_.begin(); it != presence_.end();) {
            if (!membership_.is_member(it->first)) {
                if (auto c = it->second.conn.lock()) c->shutdown();
                it = presence_.erase(it);
            } else {
                ++it;
            }
        }
    }
    ByteWriter w;
    w.u64(membership_.epoch);
    return reply(MsgType::kMembershipOk, w);
}

Frame RendezvousServer::on_state_req() const {
    std::shared_lock lock(mu_);
    ByteWriter w;
    encode(w, log_);
    return reply(MsgType::kStateResp, w);
}

// ---------------------------------------------------------------- client

RendezvousClient::RendezvousClient(Endpoint server, const PeerIdentity& identity, std::string_view swarm_key,
                                   std::shared_ptr<Clock> clock)
    : server_(std::move(server)), identity_(identity), digest_(swarm_digest(swarm_key)), clock_(std::move(clock)) {
    dispatcher_ = std::thread([this] { dispatch_loop(); });
}

RendezvousClient::~RendezvousClient() { stop(); }

void RendezvousClient::set_relay_handler(RelayHandler handler) {
    std::lock_guard lock(mu_);
    relay_handler_ = std::move(handler);
}

void RendezvousClient::start(const std::string& endpoint) {
    {
        std::lock_guard lock(mu_);
        endpoint_ = endpoint;
    }
    bool registered = false;
    std::optional<Error> refused;
    try {
        register_now();
        registered = true;
    } catch (const Error& e) {
        if (e.code() != ErrorCode::kConnectivity) {
            refused = e;
        } else {
            spdlog::warn("{}; will keep retrying", e.what());
        }
    }
    // Refusals are retried too: a vote may admit this peer later.
    if (!heartbeat_.joinable()) heartbeat_ = std::thread([this, registered] { heartbeat_loop(registered); });
    if (refused) throw *refused;
}

void RendezvousClient::stop() {
    {
        std::lock_guard lock(mu_);
        if (stopping_ && !dispatcher_.joinable()) return;
        stopping_ = true;
        if (conn_) conn_->shutdown();
    }
    cv_.notify_all();
    push_cv_.notify_all();
    hb_cv_.notify_all();
    if (heartbeat_.joinable()) heartbeat_.join();
    if (dispatcher_.joinable()) dispatcher_.join();
    std::lock_guard req(request_mu_);
    if (reader_.joinable()) reader_.join();
}

bool RendezvousClient::connected() const {
    std::lock_guard lock(mu_);
    return conn_ != nullptr;
}

void RendezvousClient::ensure_connected() {
    {
        std::lock_guard lock(mu_);
        if (stopping_) throw Error(ErrorCode::kChannelClosed, "rendezvous client stopped");
        if (conn_) return;
    }
    if (reader_.joinable()) reader_.join();
    auto conn = std::make_shared<Connection>(Socket::connect(server_, 3s));
    {
        std::lock_guard lock(mu_);
        conn_ = conn;
        ++generation_;
    }
    reader_ = std::thread([this, conn] { reader_loop(conn); });
}

void RendezvousClient::drop_connection() {
    std::lock_guard lock(mu_);
    if (conn_) conn_->shutdown();
}

void RendezvousClient::reader_loop(std::shared_ptr<Connection> conn) {
    try {
        for (;;) {
            auto f = conn->read();
            if (!f) break;
            if (f->type == MsgType::kRelayDeliver) {
                ByteReader r(f->payload);
                PeerId from = r.array<32>();
                Bytes payload = r.blob(kMaxRelayPayload);
                std::lock_guard lock(mu_);
                pushes_.emplace_back(from, std::move(payload));
                push_cv_.notify_one();
                continue;
            }
            std::lock_guard lock(mu_);
            reply_ = std::move(f);
            reply_ready_ = true;
            cv_.notify_all();
        }
    } catch (const std::exception& e) {
        spdlog::debug("rendezvous reader stopped: {}", e.what());
    }
    std::lock_guard lock(mu_);
    if (conn_ == conn) conn_.reset();
    heartbeat_wake_ = true;
    cv_.notify_all();
    hb_cv_.notify_all();
}

std::optional<Frame> RendezvousClient::request(const Frame& f, std::chrono::milliseconds timeout) {
    std::lock_guard serial(request_mu_);
    try {
        ensure_connected();
    } catch (const Error& e) {
        spdlog::debug("rendezvous connect failed: {}", e.what());
        return std::nullopt;
    }
    std::shared_ptr<Connection> conn;
    {
        std::lock_guard lock(mu_);
        reply_.reset();
        reply_ready_ = false;
        conn = conn_;
    }
    if (!conn) return std::nullopt;
    try {
        conn->write(f);
    } catch (const Error&) {
        conn->shutdown();
        return std::nullopt;
    }
    std::unique_lock lock(mu_);
    cv_.wait_for(lock, timeout, [&] { return reply_ready_ || conn_ != conn || stopping_; });
    if (!reply_ready_) {
        // A reply that arrives later would be mistaken for the next one; resync by reconnecting.
        conn->shutdown();
        return std::nullopt;
    }
    reply_ready_ = false;
    return std::move(reply_);
}

void RendezvousClient::heartbeat_loop(bool ok) {
    // After a successful start() the first refresh waits a full interval.
    // Failed attempts back off from 1 s up to the heartbeat interval.
    int failures = ok ? 0 : 1;
    for (;;) {
        {
            std::unique_lock lock(mu_);
            auto backoff = std::chrono::milliseconds(1000) * (1 << std::min(failures - 1, 5));
            auto wait = failures == 0 ? std::chrono::milliseconds(kRegisterHeartbeat)
                                      : std::min<std::chrono::milliseconds>(backoff, kRegisterHeartbeat);
            hb_cv_.wait_for(lock, wait, [&] { return stopping_ || heartbeat_wake_; });
            if (stopping_) return;
            if (heartbeat_wake_) {
                // Connection dropped: give the server a moment before redialling.
                heartbeat_wake_ = false;
                failures = std::min(failures, 1);
                hb_cv_.wait_for(lock, 200ms, [&] { return stopping_; });
                if (stopping_) return;
            }
        }
        try {
            register_now();
            failures = 0;
        } catch (const Error& e) {
            ++failures;
            std::lock_guard lock(mu_);
            if (stopping_) return;
            if (failures == 2) {
                spdlog::warn("rendezvous registration failed: {}; retrying quietly", e.what());
            } else {
                spdlog::debug("rendezvous registration failed: {}", e.what());
            }
        }
    }
}

void RendezvousClient::dispatch_loop() {
    for (;;) {
        std::pair<PeerId, Bytes> push;
        RelayHandler handler;
        {
            std::unique_lock lock(mu_);
            push_cv_.wait(lock, [&] { return stopping_ || !pushes_.empty(); });
            if (stopping_) return;
            push = std::move(pushes_.front());
            pushes_.erase(pushes_.begin());
            handler = relay_handler_;
        }
        if (!handler) continue;
        try {
            handler(push.first, std::move(push.second));
        } catch (const std::exception& e) {
            spdlog::warn("relay handler failed: {}", e.what());
        }
    }
}

UnixMs RendezvousClient::register_now() {
    std::string endpoint;
    {
        std::lock_guard lock(mu_);
        endpoint = endpoint_;
    }
    if (endpoint.empty()) throw Error(ErrorCode::kState, "no endpoint to register");
    UnixMs ts = clock_->now();
    UnixMs expires_at = ts + kPresenceTtlMs;
    ByteWriter w;
    w.raw(digest_);
    encode(w, identity_.keys());
    w.str(endpoint).i64(expires_at).i64(ts);
    w.raw(sign(register_signing_bytes(digest_, identity_.keys(), endpoint, expires_at, ts), identity_));
    auto resp = request(Frame{MsgType::kRegister, std::move(w).take()});
    if (!resp) throw Error(ErrorCode::kConnectivity, "rendezvous server unreachable at " + server_.str());
    if (resp->type != MsgType::kRegisterOk) {
        throw Error(ErrorCode::kUnauthorized, "registration refused: " + to_string(resp->payload));
    }
    ByteReader r(resp->payload);
    return r.i64();
}

std::optional<Registration> RendezvousClient::lookup(const PeerId& peer) {
    ByteWriter w;
    w.raw(peer);
    auto resp = request(Frame{MsgType::kLookup, std::move(w).take()});
    if (!resp) throw Error(ErrorCode::kConnectivity, "rendezvous server unreachable");
    if (resp->type != MsgType::kLookupResp) return std::nullopt;
    ByteReader r(resp->payload);
    if (r.u8() == 0) return std::nullopt;
    Registration reg;
    reg.keys = decode_peer_keys(r);
    reg.endpoint = r.str(256);
    reg.expires_at = r.i64();
    reg.peer_id = reg.keys.peer_id();
    if (reg.peer_id != peer) {
        spdlog::warn("rendezvous returned keys that do not match {}", to_hex(peer).substr(0, 12));
        return std::nullopt;
    }
    return reg;
}

std::optional<PeerKeys> RendezvousClient::directory(const PeerId& peer) {
    ByteWriter w;
    w.raw(peer);
    auto resp = request(Frame{MsgType::kDirectory, std::move(w).take()});
    if (!resp) throw Error(ErrorCode::kConnectivity, "rendezvous server unreachable");
    if (resp->type != MsgType::kDirectoryResp) return std::nullopt;
    ByteReader r(resp->payload);
    if (r.u8() == 0) return std::nullopt;
    PeerKeys keys = decode_peer_keys(r);
    if (!keys.certifies(peer)) {
        spdlog::warn("directory keys for {} fail the hash check", to_hex(peer).substr(0, 12));
        return std::nullopt;
    }
    return keys;
}

bool RendezvousClient::relay(const PeerId& to, ByteView payload) {
    ByteWriter w;
    w.raw(to).blob(payload);
    auto resp = request(Frame{MsgType::kRelay, std::move(w).take()});
    return resp && resp->type == MsgType::kRelayResult && !resp->payload.empty() && resp->payload[0] == 1;
}

std::uint64_t RendezvousClient::push_membership(const std::vector<LogEntry>& log) {
    ByteWriter w;
    encode(w, log);
    auto resp = request(Frame{MsgType::kMembershipPush, std::move(w).take()});
    if (!resp) throw Error(ErrorCode::kConnectivity, "rendezvous server unreachable");
    if (resp->type != MsgType::kMembershipOk) {
        throw Error(ErrorCode::kState, "membership push refused: " + to_string(resp->payload));
    }
    ByteReader r(resp->payload);
    return r.u64();
}

std::vector<LogEntry> RendezvousClient::fetch_membership() {
    auto resp = request(Frame{MsgType::kStateReq, {}});
    if (!resp) throw Error(ErrorCode::kConnectivity, "rendezvous server unreachable");
    if (resp->type != MsgType::kStateResp) throw Error(ErrorCode::kState, "membership fetch refused");
    ByteReader r(resp->payload);
    return decode_log(r);
}

}  // namespace fybrr
