#include "fybrr/direct_channel.hpp"

#include <spdlog/spdlog.h>

namespace fybrr {

namespace {

constexpr std::string_view kSignalLabel = "fybrr/signal/v1";
constexpr std::string_view kHelloLabel = "fybrr/hello/v1";
constexpr std::string_view kHelloAckLabel = "fybrr/hello-ack/v1";

using SteadyClock = std::chrono::steady_clock;

Bytes hello_proof(std::string_view label, const SessionId& session) {
    ByteWriter w;
    w.raw(as_bytes(label)).raw(session);
    return std::move(w).take();
}

Frame hello_frame(std::string_view label, const SessionId& session, const SecretKey& key) {
    Nonce nonce = random_nonce();
    ByteWriter w;
    w.raw(session).raw(nonce).raw(secretbox_seal(hello_proof(label, session), key, nonce));
    return Frame{MsgType::kHello, std::move(w).take()};
}

/// True when the frame names `session` and carries the label sealed under `key`.
bool hello_valid(const Frame& f, std::string_view label, const SessionId& session, const SecretKey& key) {
    try {
        ByteReader r(f.payload);
        if (r.array<16>() != session) return false;
        Nonce nonce = r.array<kNonceBytes>();
        return secretbox_open(r.rest(), key, nonce) == hello_proof(label, session);
    } catch (const Error&) {
        return false;
    }
}

std::chrono::milliseconds remaining(SteadyClock::time_point deadline) {
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - SteadyClock::now());
    return std::max(left, std::chrono::milliseconds(1));
}

}  // namespace

// ---------------------------------------------------------------- Signal

Bytes Signal::signing_bytes() const {
    ByteWriter w;
    w.raw(as_bytes(kSignalLabel)).u8(static_cast<std::uint8_t>(kind)).raw(from).raw(to).raw(session);
    w.str(listen_endpoint).raw(ephemeral).i64(sent_at);
    return std::move(w).take();
}

bool Signal::authentic() const {
    return from_keys.certifies(from) && verify(signing_bytes(), signature, from_keys.sig_public);
}

Bytes Signal::encode() const {
    ByteWriter w;
    w.u8(static_cast<std::uint8_t>(kind)).raw(from).raw(to).raw(session);
    w.str(listen_endpoint).raw(ephemeral).i64(sent_at);
    fybrr::encode(w, from_keys);
    w.raw(signature);
    return std::move(w).take();
}

Signal Signal::decode(ByteView data) {
    ByteReader r(data);
    Signal s;
    std::uint8_t kind = r.u8();
    if (kind < 1 || kind > 3) throw Error(ErrorCode::kDecode, "unknown signal kind");
    s.kind = static_cast<Kind>(kind);
    s.from = r.array<32>();
    s.to = r.array<32>();
    s.session = r.array<16>();
    s.listen_endpoint = r.str(256);
    s.ephemeral = r.array<32>();
    s.sent_at = r.i64();
    s.from_keys = decode_peer_keys(r);
    s.signature = r.array<64>();
    r.expect_done();
    return s;
}

// ---------------------------------------------------------------- Channel

Channel::Channel(std::shared_ptr<Connection> conn, const PeerId& peer, const PeerKeys& peer_keys,
                 const SecretKey& key, bool initiator)
    : conn_(std::move(conn)), peer_(peer), peer_keys_(peer_keys), key_(key), initiator_(initiator),
      last_rx_(SteadyClock::now()), last_ping_(SteadyClock::now()) {}

Channel::~Channel() {
    close();
    if (reader_.joinable()) {
        if (reader_.get_id() == std::this_thread::get_id()) {
            reader_.detach();
        } else {
            reader_.join();
        }
    }
}

void Channel::set_handlers(MessageHandler on_message, CloseHandler on_close) {
    std::lock_guard lock(mu_);
    on_message_ = std::move(on_message);
    on_close_ = std::move(on_close);
}

void Channel::start() {
    reader_ = std::thread([this] { run(); });
}

void Channel::run() {
    try {
        while (open_) {
            auto f = conn_->read();
            if (!f) break;
            if (blackhole_) continue;
            handle(*f);
        }
    } catch (const std::exception& e) {
        spdlog::debug("channel to {} ended: {}", to_hex(peer_).substr(0, 12), e.what());
    }
    finish();
}

void Channel::write_sealed(MsgType type, std::uint64_t seq, ByteView body) {
    ByteWriter plain;
    plain.u8(static_cast<std::uint8_t>(type)).u64(seq).raw(body);
    Nonce nonce = random_nonce();
    ByteWriter w;
    w.raw(nonce).raw(secretbox_seal(plain.bytes(), key_, nonce));
    conn_->write(Frame{type, std::move(w).take()});
}

void Channel::handle(const Frame& f) {
    ByteReader outer(f.payload);
    Nonce nonce = outer.array<kNonceBytes>();
    Bytes plain = secretbox_open(outer.rest(), key_, nonce);
    ByteReader r(plain);
    auto type = static_cast<MsgType>(r.u8());
    if (type != f.type) throw Error(ErrorCode::kAuthentication, "frame type does not match sealed type");
    std::uint64_t seq = r.u64();
    ByteView body = r.rest();
    {
        std::lock_guard lock(mu_);
        last_rx_ = SteadyClock::now();
    }
    switch (type) {
        case MsgType::kData: {
            MessageHandler handler;
            {
                std::lock_guard lock(mu_);
                if (seq != last_in_seq_ + 1) throw Error(ErrorCode::kState, "data frame out of sequence");
                last_in_seq_ = seq;
                handler = on_message_;
            }
            // Ack only after the application took the message.
            if (handler) handler(peer_, Bytes(body.begin(), body.end()));
            std::uint64_t ack;
            {
                std::lock_guard lock(mu_);
                delivered_ = seq;
                ack = delivered_;
            }
            ByteWriter w;
            w.u64(ack);
            write_sealed(MsgType::kPong, 0, w.bytes());
            break;
        }
        case MsgType::kPing: {
            std::uint64_t ack;
            {
                std::lock_guard lock(mu_);
                ack = delivered_;
            }
            ByteWriter w;
            w.u64(ack);
            write_sealed(MsgType::kPong, 0, w.bytes());
            break;
        }
        case MsgType::kPong: {
            ByteReader br(body);
            std::uint64_t ack = br.u64();
            std::lock_guard lock(mu_);
            if (ack >= next_seq_) throw Error(ErrorCode::kState, "ack for a message never sent");
            if (ack > acked_) {
                acked_ = ack;
                unacked_.erase(unacked_.begin(), unacked_.upper_bound(ack));
            }
            ack_cv_.notify_all();
            break;
        }
        case MsgType::kClose:
            open_ = false;
            break;
        default:
            throw Error(ErrorCode::kDecode, "unexpected channel frame");
    }
}

std::uint64_t Channel::send(ByteView body) {
    std::lock_guard order(send_mu_);
    if (!open_) throw Error(ErrorCode::kChannelClosed, "channel closed");
    std::uint64_t seq;
    {
        std::lock_guard lock(mu_);
        seq = next_seq_++;
        unacked_.emplace(seq, Bytes(body.begin(), body.end()));
    }
    try {
        write_sealed(MsgType::kData, seq, body);
    } catch (const Error& e) {
        close();
        throw Error(ErrorCode::kChannelClosed, std::string("channel write failed: ") + e.what());
    }
    return seq;
}

bool Channel::wait_acked(std::uint64_t seq, std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    return ack_cv_.wait_for(lock, timeout, [&] { return acked_ >= seq || !open_; }) && acked_ >= seq;
}

std::vector<Bytes> Channel::unacked() const {
    std::lock_guard lock(mu_);
    std::vector<Bytes> out;
    for (const auto& [seq, body] : unacked_) out.push_back(body);
    return out;
}

void Channel::forget(std::uint64_t seq) {
    std::lock_guard lock(mu_);
    unacked_.erase(seq);
}

void Channel::ping() {
    {
        std::lock_guard lock(mu_);
        last_ping_ = SteadyClock::now();
    }
    try {
        write_sealed(MsgType::kPing, 0, {});
    } catch (const Error&) {
        close();
    }
}

void Channel::close() {
    if (open_.exchange(false)) {
        try {
            write_sealed(MsgType::kClose, 0, {});
        } catch (const Error&) {
        }
    }
    conn_->shutdown();
    std::lock_guard lock(mu_);
    ack_cv_.notify_all();
}

void Channel::finish() {
    open_ = false;
    conn_->shutdown();
    CloseHandler handler;
    {
        std::lock_guard lock(mu_);
        ack_cv_.notify_all();
        if (closed_notified_) return;
        closed_notified_ = true;
        handler = on_close_;
    }
    if (handler) handler(*this);
}

SteadyClock::time_point Channel::last_received() const {
    std::lock_guard lock(mu_);
    return last_rx_;
}

SteadyClock::time_point Channel::last_ping() const {
    std::lock_guard lock(mu_);
    return last_ping_;
}

// ---------------------------------------------------------------- DirectHub

DirectHub::DirectHub(const PeerIdentity& identity, std::shared_ptr<RendezvousClient> rendezvous,
                     std::string listen_endpoint, std::shared_ptr<Clock> clock, ChannelOptions options)
    : identity_(identity), rendezvous_(std::move(rendezvous)), listen_endpoint_(std::move(listen_endpoint)),
      clock_(std::move(clock)), options_(options) {
    sweeper_ = std::thread([this] { sweep_loop(); });
}

DirectHub::~DirectHub() { stop(); }

void DirectHub::stop() {
    std::vector<std::shared_ptr<Channel>> all;
    {
        std::lock_guard lock(mu_);
        stopping_ = true;
        for (auto& [peer, list] : channels_) all.insert(all.end(), list.begin(), list.end());
        channels_.clear();
    }
    cv_.notify_all();
    if (sweeper_.joinable()) sweeper_.join();
    for (auto& ch : all) {
        ch->set_handlers({}, {});
        ch->close();
    }
    all.clear();
}

void DirectHub::set_authorizer(Authorizer a) {
    std::lock_guard lock(mu_);
    authorizer_ = std::move(a);
}

void DirectHub::set_message_handler(MessageHandler h) {
    std::lock_guard lock(mu_);
    on_message_ = std::move(h);
}

bool DirectHub::allowed(const PeerId& p) const {
    std::lock_guard lock(mu_);
    return !authorizer_ || authorizer_(p);
}

std::size_t DirectHub::open_channels() const {
    std::lock_guard lock(mu_);
    std::size_t n = 0;
    for (const auto& [peer, list] : channels_) {
        for (const auto& ch : list) n += ch->open() ? 1 : 0;
    }
    return n;
}

std::shared_ptr<Channel> DirectHub::find(const PeerId& peer) const {
    std::lock_guard lock(mu_);
    auto it = channels_.find(peer);
    if (it == channels_.end()) return nullptr;
    for (auto ch = it->second.rbegin(); ch != it->second.rend(); ++ch) {
        if ((*ch)->open()) return *ch;
    }
    return nullptr;
}

Signal DirectHub::make_signal(Signal::Kind kind, const PeerId& to, const SessionId& session,
                              const PublicKey& eph) const {
    Signal s;
    s.kind = kind;
    s.from = identity_.peer_id();
    s.to = to;
    s.session = session;
    s.listen_endpoint = kind == Signal::Kind::kReject ? "" : listen_endpoint_;
    s.ephemeral = eph;
    s.sent_at = clock_->now();
    s.from_keys = identity_.keys();
    s.signature = sign(s.signing_bytes(), identity_);
    return s;
}

void DirectHub::adopt(const std::shared_ptr<Channel>& ch) {
    {
        std::lock_guard lock(mu_);
        if (stopping_) throw Error(ErrorCode::kChannelClosed, "hub stopping");
        channels_[ch->peer()].push_back(ch);
    }
    ch->set_handlers(
        [this](const PeerId& from, Bytes body) {
            MessageHandler h;
            {
                std::lock_guard lock(mu_);
                h = on_message_;
            }
            if (h) h(from, std::move(body));
        },
        [this](Channel&) { cv_.notify_all(); });
}

std::shared_ptr<Channel> DirectHub::connect(const PeerId& peer) {
    if (peer == identity_.peer_id()) throw Error(ErrorCode::kInvalidArgument, "cannot open a channel to self");
    std::shared_ptr<std::mutex> dial_lock;
    {
        std::lock_guard lock(mu_);
        auto& slot = dial_locks_[peer];
        if (!slot) slot = std::make_shared<std::mutex>();
        dial_lock = slot;
    }
    std::lock_guard dialing(*dial_lock);
    if (auto ch = find(peer)) return ch;

    auto deadline = SteadyClock::now() + options_.dial_timeout;
    if (!rendezvous_->lookup(peer)) throw Error(ErrorCode::kPeerOffline, "peer is not registered");

    SessionId session = random_array<16>();
    SecretKey eph_secret = random_array<32>();
    {
        std::lock_guard lock(mu_);
        pending_[session] = Pending{eph_secret, peer, false, std::nullopt};
    }
    auto forget = [&] {
        std::lock_guard lock(mu_);
        pending_.erase(session);
    };
    Signal offer = make_signal(Signal::Kind::kOffer, peer, session, x25519_public(eph_secret));
    if (!rendezvous_->relay(peer, offer.encode())) {
        forget();
        throw Error(ErrorCode::kPeerOffline, "offer could not be relayed");
    }

    Signal answer;
    {
        std::unique_lock lock(mu_);
        bool got = cv_.wait_until(lock, deadline, [&] { return stopping_ || pending_[session].answered; });
        auto p = pending_[session];
        pending_.erase(session);
        if (!got || !p.answer) throw Error(ErrorCode::kPeerOffline, "peer did not answer the offer");
        answer = *p.answer;
    }
    if (answer.kind == Signal::Kind::kReject) throw Error(ErrorCode::kUnauthorized, "peer refused the channel");

    SecretKey key = derive_session_key(eph_secret, answer.ephemeral, session);
    std::shared_ptr<Connection> conn;
    try {
        conn = std::make_shared<Connection>(
            Socket::connect(Endpoint::parse(answer.listen_endpoint), remaining(deadline)));
        conn->write(hello_frame(kHelloLabel, session, key));
        auto reply = conn->read(remaining(deadline));
        if (!reply || reply->type != MsgType::kHello || !hello_valid(*reply, kHelloAckLabel, session, key)) {
            throw Error(ErrorCode::kAuthentication, "peer failed the session handshake");
        }
    } catch (const Error& e) {
        if (conn) conn->shutdown();
        if (e.code() == ErrorCode::kAuthentication) throw;
        throw Error(ErrorCode::kTimeout, std::string("direct connection failed: ") + e.what());
    }
    auto ch = std::make_shared<Channel>(conn, peer, answer.from_keys, key, true);
    adopt(ch);
    ch->start();
    return ch;
}

bool DirectHub::send(const PeerId& peer, ByteView body, std::chrono::milliseconds ack_timeout) {
    auto ch = connect(peer);
    std::uint64_t seq;
    try {
        seq = ch->send(body);
    } catch (const Error&) {
        return false;
    }
    if (ch->wait_acked(seq, ack_timeout)) return true;
    ch->forget(seq);
    ch->close();
    return false;
}

void DirectHub::on_signal(const PeerId& relayed_from, Bytes payload) {
    Signal s;
    try {
        s = Signal::decode(payload);
    } catch (const Error& e) {
        spdlog::debug("dropping malformed signal: {}", e.what());
        return;
    }
    UnixMs now = clock_->now();
    if (!s.authentic() || s.from != relayed_from || s.to != identity_.peer_id() ||
        s.sent_at < now - options_.signal_window_ms || s.sent_at > now + options_.signal_window_ms) {
        spdlog::debug("dropping signal that fails authentication");
        return;
    }
    if (s.kind == Signal::Kind::kOffer) {
        if (!allowed(s.from)) {
            rendezvous_->relay(s.from, make_signal(Signal::Kind::kReject, s.from, s.session, {}).encode());
            return;
        }
        SecretKey eph_secret = random_array<32>();
        SecretKey key;
        try {
            key = derive_session_key(eph_secret, s.ephemeral, s.session);
        } catch (const Error&) {
            return;
        }
        {
            std::lock_guard lock(mu_);
            if (stopping_) return;
            expected_[s.session] =
                Expected{s.from, s.from_keys, key, SteadyClock::now() + options_.dial_timeout};
        }
        rendezvous_->relay(s.from, make_signal(Signal::Kind::kAnswer, s.from, s.session, x25519_public(eph_secret))
                                       .encode());
        return;
    }
    std::lock_guard lock(mu_);
    auto it = pending_.find(s.session);
    if (it == pending_.end() || it->second.peer != s.from || it->second.answered) return;
    it->second.answered = true;
    it->second.answer = s;
    cv_.notify_all();
}

void DirectHub::accept_stream(std::shared_ptr<Connection> conn, Frame hello) {
    SessionId session{};
    try {
        ByteReader r(hello.payload);
        session = r.array<16>();
    } catch (const Error&) {
        return;
    }
    Expected ex;
    {
        std::lock_guard lock(mu_);
        auto it = expected_.find(session);
        if (it == expected_.end()) return;
        ex = it->second;
        expected_.erase(it);
    }
    if (SteadyClock::now() > ex.deadline || !hello_valid(hello, kHelloLabel, session, ex.key)) return;
    conn->write(hello_frame(kHelloAckLabel, session, ex.key));
    auto ch = std::make_shared<Channel>(conn, ex.peer, ex.keys, ex.key, false);
    try {
        adopt(ch);
    } catch (const Error&) {
        return;
    }
    ch->run();
}

void DirectHub::sweep_loop() {
    auto tick = std::max(options_.ping_interval / 4, std::chrono::milliseconds(10));
    auto dead_after = options_.ping_interval * options_.missed_pings;
    for (;;) {
        std::vector<std::shared_ptr<Channel>> to_ping, to_close, released;
        {
            std::unique_lock lock(mu_);
            cv_.wait_for(lock, tick, [&] { return stopping_; });
            if (stopping_) return;
            auto now = SteadyClock::now();
            for (auto it = channels_.begin(); it != channels_.end();) {
                auto& list = it->second;
                for (auto c = list.begin(); c != list.end();) {
                    if (!(*c)->open()) {
                        released.push_back(std::move(*c));
                        c = list.erase(c);
                        continue;
                    }
                    if (now - (*c)->last_received() > dead_after) {
                        to_close.push_back(*c);
                    } else if (now - (*c)->last_ping() >= options_.ping_interval) {
                        to_ping.push_back(*c);
                    }
                    ++c;
                }
                it = list.empty() ? channels_.erase(it) : std::next(it);
            }
            for (auto it = expected_.begin(); it != expected_.end();) {
                it = now > it->second.deadline ? expected_.erase(it) : std::next(it);
            }
        }
        for (auto& ch : to_close) {
            spdlog::info("channel to {} missed {} heartbeats, closing", to_hex(ch->peer()).substr(0, 12),
                         options_.missed_pings);
            ch->close();
        }
        for (auto& ch : to_ping) ch->ping();
        // Dropping the last reference joins the reader thread of outbound channels.
        released.clear();
    }
}

}  // namespace fybrr
