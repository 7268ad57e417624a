#include "fybrr/direct_channel.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <future>

using namespace fybrr;

namespace {

const Endpoint kAny{"127.0.0.1", 0};
constexpr std::string_view kSwarm = "channel-swarm";

PeerIdentity ident(std::uint8_t n) {
    Bytes seed(32, n);
    return generate_identity(seed);
}

template <class Pred>
bool eventually(Pred p, std::chrono::milliseconds limit = 5s) {
    auto until = std::chrono::steady_clock::now() + limit;
    while (std::chrono::steady_clock::now() < until) {
        if (p()) return true;
        std::this_thread::sleep_for(5ms);
    }
    return p();
}

/// Everything one peer needs for direct messaging, torn down in dependency order.
struct Peer {
    PeerIdentity id;
    DirectHub* hub_ptr = nullptr;
    std::unique_ptr<TcpServer> server;
    std::shared_ptr<RendezvousClient> rdv;
    std::unique_ptr<DirectHub> hub;

    std::mutex mu;
    std::condition_variable cv;
    std::vector<std::pair<PeerId, Bytes>> inbox;

    Peer(std::uint8_t n, const Endpoint& rendezvous, ChannelOptions opts = {}, std::string advertise = {})
        : id(ident(n)) {
        server = std::make_unique<TcpServer>(
            kAny, serve_frames([](const Frame&) { return std::optional<Frame>(error_frame("no rpc here")); },
                               [this](std::shared_ptr<Connection> c, Frame hello) {
                                   hub_ptr->accept_stream(std::move(c), std::move(hello));
                               }));
        std::string listen = advertise.empty() ? server->local().str() : advertise;
        rdv = std::make_shared<RendezvousClient>(rendezvous, id, kSwarm);
        hub = std::make_unique<DirectHub>(id, rdv, listen, system_clock(), opts);
        hub_ptr = hub.get();
        hub->set_message_handler([this](const PeerId& from, Bytes body) {
            std::lock_guard lock(mu);
            inbox.emplace_back(from, std::move(body));
            cv.notify_all();
        });
        rdv->set_relay_handler([this](const PeerId& from, Bytes p) { hub_ptr->on_signal(from, std::move(p)); });
        rdv->start(listen);
    }
    ~Peer() {
        server->stop();
        hub->stop();
        rdv->stop();
    }

    bool wait_inbox(std::size_t n, std::chrono::milliseconds limit = 5s) {
        std::unique_lock lock(mu);
        return cv.wait_for(lock, limit, [&] { return inbox.size() >= n; });
    }
};

RendezvousConfig rdv_config() {
    RendezvousConfig c;
    c.swarm_key = std::string(kSwarm);
    return c;
}

/// A connected socket pair over loopback.
std::pair<std::shared_ptr<Connection>, std::shared_ptr<Connection>> socket_pair() {
    Listener l(kAny);
    auto a = Socket::connect(l.local(), 2s);
    auto b = l.accept(2s);
    return {std::make_shared<Connection>(std::move(a)), std::make_shared<Connection>(std::move(*b))};
}

}  // namespace

TEST(Signal, EncodeRoundTripAndTamper) {
    auto a = ident(1), b = ident(2);
    Signal s;
    s.kind = Signal::Kind::kOffer;
    s.from = a.peer_id();
    s.to = b.peer_id();
    s.session = random_array<16>();
    s.listen_endpoint = "127.0.0.1:9000";
    s.ephemeral = x25519_public(random_array<32>());
    s.sent_at = 1'700'000'000'000;
    s.from_keys = a.keys();
    s.signature = sign(s.signing_bytes(), a);
    ASSERT_TRUE(s.authentic());
    Signal back = Signal::decode(s.encode());
    EXPECT_EQ(back, s);

    Signal redirected = s;
    redirected.listen_endpoint = "10.0.0.66:9000";
    EXPECT_FALSE(redirected.authentic());
    Signal swapped = s;
    swapped.from_keys = b.keys();
    EXPECT_FALSE(swapped.authentic());
    Bytes truncated = s.encode();
    truncated.pop_back();
    EXPECT_THROW(Signal::decode(truncated), Error);
}

TEST(Channel, FramesAreSealedAndOrdered) {
    auto [ca, cb] = socket_pair();
    auto alice = ident(1), bob = ident(2);
    SecretKey key = random_array<32>();
    auto ch = std::make_shared<Channel>(ca, bob.peer_id(), bob.keys(), key, true);
    ch->start();

    const std::string secret = "plaintext that must never be on the wire";
    std::uint64_t s1 = ch->send(as_bytes(secret));
    std::uint64_t s2 = ch->send(as_bytes(secret + "!"));
    EXPECT_EQ(s1, 1u);
    EXPECT_EQ(s2, 2u);
    for (std::uint64_t expect = 1; expect <= 2; ++expect) {
        auto f = cb->read(2s);
        ASSERT_TRUE(f);
        EXPECT_EQ(f->type, MsgType::kData);
        std::string wire = to_string(f->payload);
        EXPECT_EQ(wire.find("plaintext"), std::string::npos);
        ByteReader r(f->payload);
        Nonce n = r.array<kNonceBytes>();
        Bytes plain = secretbox_open(r.rest(), key, n);
        ByteReader pr(plain);
        EXPECT_EQ(pr.u8(), static_cast<std::uint8_t>(MsgType::kData));
        EXPECT_EQ(pr.u64(), expect);
    }
    EXPECT_EQ(ch->unacked().size(), 2u);
    EXPECT_FALSE(ch->wait_acked(1, 50ms));
    ch->close();
}

TEST(Channel, CumulativeAckClearsUnacked) {
    auto [ca, cb] = socket_pair();
    auto alice = ident(1), bob = ident(2);
    SecretKey key = random_array<32>();
    auto a = std::make_shared<Channel>(ca, bob.peer_id(), bob.keys(), key, true);
    auto b = std::make_shared<Channel>(cb, alice.peer_id(), alice.keys(), key, false);
    std::atomic<int> got{0};
    b->set_handlers([&](const PeerId& from, Bytes) {
        EXPECT_EQ(from, alice.peer_id());
        ++got;
    }, {});
    a->start();
    b->start();
    std::uint64_t last = 0;
    for (int i = 0; i < 50; ++i) last = a->send(as_bytes("m" + std::to_string(i)));
    EXPECT_TRUE(a->wait_acked(last, 2s));
    EXPECT_EQ(got.load(), 50);
    EXPECT_TRUE(a->unacked().empty());
}

TEST(Channel, TamperedFrameClosesTheChannel) {
    auto [ca, cb] = socket_pair();
    auto alice = ident(1);
    SecretKey key = random_array<32>();
    auto b = std::make_shared<Channel>(cb, alice.peer_id(), alice.keys(), key, false);
    std::atomic<int> got{0};
    std::promise<void> closed;
    b->set_handlers([&](const PeerId&, Bytes) { ++got; }, [&](Channel&) { closed.set_value(); });
    b->start();

    ByteWriter plain;
    plain.u8(static_cast<std::uint8_t>(MsgType::kData)).u64(1).raw(as_bytes("hello"));
    Nonce n = random_nonce();
    Bytes ct = secretbox_seal(plain.bytes(), key, n);
    ct[ct.size() / 2] ^= 0x01;
    ByteWriter w;
    w.raw(n).raw(ct);
    ca->write(Frame{MsgType::kData, std::move(w).take()});
    EXPECT_EQ(closed.get_future().wait_for(2s), std::future_status::ready);
    EXPECT_EQ(got.load(), 0);
    EXPECT_FALSE(b->open());
}

TEST(Channel, ReplayedDataFrameClosesTheChannel) {
    auto [ca, cb] = socket_pair();
    auto alice = ident(1);
    SecretKey key = random_array<32>();
    auto b = std::make_shared<Channel>(cb, alice.peer_id(), alice.keys(), key, false);
    std::atomic<int> got{0};
    b->set_handlers([&](const PeerId&, Bytes) { ++got; }, {});
    b->start();
    ByteWriter plain;
    plain.u8(static_cast<std::uint8_t>(MsgType::kData)).u64(1).raw(as_bytes("once"));
    Nonce n = random_nonce();
    ByteWriter w;
    w.raw(n).raw(secretbox_seal(plain.bytes(), key, n));
    Frame f{MsgType::kData, std::move(w).take()};
    ca->write(f);
    ca->write(f);
    EXPECT_TRUE(eventually([&] { return !b->open(); }, 2s));
    EXPECT_EQ(got.load(), 1);
}

TEST(DirectHub, ExchangesMessagesBothWays) {
    RendezvousServer server(kAny, rdv_config());
    Peer alice(1, server.local()), bob(2, server.local());

    std::vector<Bytes> sent;
    for (int i = 0; i < 100; ++i) {
        Bytes m(static_cast<std::size_t>(1 + i * 37));
        for (std::size_t j = 0; j < m.size(); ++j) m[j] = static_cast<std::uint8_t>(i + j * 13);
        sent.push_back(m);
        ASSERT_TRUE(alice.hub->send(bob.id.peer_id(), m));
    }
    ASSERT_TRUE(bob.wait_inbox(100));
    for (std::size_t i = 0; i < sent.size(); ++i) {
        EXPECT_EQ(bob.inbox[i].first, alice.id.peer_id());
        EXPECT_EQ(bob.inbox[i].second, sent[i]);
    }
    EXPECT_EQ(alice.hub->open_channels(), 1u);
    EXPECT_TRUE(eventually([&] { return bob.hub->open_channels() == 1; }));

    // Bob answers on the channel alice opened rather than dialling again.
    ASSERT_TRUE(bob.hub->send(alice.id.peer_id(), as_bytes("reply")));
    ASSERT_TRUE(alice.wait_inbox(1));
    EXPECT_EQ(to_string(alice.inbox[0].second), "reply");
    EXPECT_EQ(alice.hub->open_channels(), 1u);
}

TEST(DirectHub, OfflinePeerFailsFast) {
    RendezvousServer server(kAny, rdv_config());
    Peer alice(1, server.local());
    auto start = std::chrono::steady_clock::now();
    try {
        alice.hub->connect(ident(9).peer_id());
        FAIL() << "expected PeerOffline";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kPeerOffline);
    }
    EXPECT_LT(std::chrono::steady_clock::now() - start, 1s);
}

TEST(DirectHub, AuthorizerRejectsStrangers) {
    RendezvousServer server(kAny, rdv_config());
    Peer alice(1, server.local()), bob(2, server.local());
    bob.hub->set_authorizer([](const PeerId&) { return false; });
    try {
        alice.hub->connect(bob.id.peer_id());
        FAIL() << "expected Unauthorized";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kUnauthorized);
    }
    EXPECT_EQ(bob.hub->open_channels(), 0u);
}

TEST(DirectHub, UnreachableListenerTimesOut) {
    RendezvousServer server(kAny, rdv_config());
    ChannelOptions opts;
    opts.dial_timeout = 500ms;
    // Bob advertises a port nobody listens on.
    Listener placeholder(kAny);
    std::string dead = placeholder.local().str();
    placeholder.close();
    Peer alice(1, server.local(), opts), bob(2, server.local(), opts, dead);
    try {
        alice.hub->connect(bob.id.peer_id());
        FAIL() << "expected a connection failure";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kTimeout);
    }
}

TEST(DirectHub, UnknownHelloIsDropped) {
    RendezvousServer server(kAny, rdv_config());
    Peer bob(2, server.local());
    auto conn = std::make_shared<Connection>(Socket::connect(bob.server->local(), 2s));
    ByteWriter w;
    w.raw(random_array<16>()).raw(random_nonce()).raw(Bytes(40, 0));
    conn->write(Frame{MsgType::kHello, std::move(w).take()});
    EXPECT_FALSE(conn->read(2s));
    EXPECT_EQ(bob.hub->open_channels(), 0u);
}

TEST(DirectHub, HeartbeatClosesDeadLink) {
    RendezvousServer server(kAny, rdv_config());
    ChannelOptions opts;
    opts.ping_interval = 40ms;
    Peer alice(1, server.local(), opts), bob(2, server.local(), opts);
    auto ch = alice.hub->connect(bob.id.peer_id());
    // Pings keep a healthy link open well past three intervals.
    std::this_thread::sleep_for(300ms);
    ASSERT_TRUE(ch->open());
    ch->set_blackhole(true);
    auto start = std::chrono::steady_clock::now();
    EXPECT_TRUE(eventually([&] { return !ch->open(); }, 2s));
    auto took = std::chrono::steady_clock::now() - start;
    EXPECT_GE(took, 100ms);  // no earlier than the third missed interval
    EXPECT_TRUE(eventually([&] { return alice.hub->open_channels() == 0; }, 2s));
}

TEST(DirectHub, MissingAckReportsFailure) {
    RendezvousServer server(kAny, rdv_config());
    Peer alice(1, server.local()), bob(2, server.local());
    auto ch = alice.hub->connect(bob.id.peer_id());
    ch->set_blackhole(true);  // bob's acks never reach alice
    EXPECT_FALSE(alice.hub->send(bob.id.peer_id(), as_bytes("lost?"), 200ms));
    EXPECT_FALSE(ch->open());
    EXPECT_TRUE(ch->unacked().empty());  // handed back to the caller, not retried here
    // The next send dials a fresh channel.
    EXPECT_TRUE(alice.hub->send(bob.id.peer_id(), as_bytes("again")));
    ASSERT_TRUE(bob.wait_inbox(2));
    EXPECT_EQ(to_string(bob.inbox[1].second), "again");
}
