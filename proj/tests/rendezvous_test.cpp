#include "fybrr/rendezvous.hpp"

#include <gtest/gtest.h>

#include <future>

using namespace fybrr;

namespace {

const Endpoint kAny{"127.0.0.1", 0};
constexpr std::string_view kSwarm = "test-swarm";

PeerIdentity ident(std::uint8_t n) {
    Bytes seed(32, n);
    return generate_identity(seed);
}

template <class Pred>
bool eventually(Pred p, std::chrono::milliseconds limit = 5s) {
    auto until = std::chrono::steady_clock::now() + limit;
    while (std::chrono::steady_clock::now() < until) {
        if (p()) return true;
        std::this_thread::sleep_for(10ms);
    }
    return p();
}

RendezvousConfig config(std::shared_ptr<Clock> clock = system_clock()) {
    RendezvousConfig c;
    c.swarm_key = std::string(kSwarm);
    c.clock = std::move(clock);
    return c;
}

}  // namespace

TEST(Rendezvous, RegisterThenLookup) {
    RendezvousServer server(kAny, config());
    auto alice = ident(1), bob = ident(2);
    RendezvousClient a(server.local(), alice, kSwarm), b(server.local(), bob, kSwarm);
    a.start("127.0.0.1:4001");
    auto reg = b.lookup(alice.peer_id());
    ASSERT_TRUE(reg);
    EXPECT_EQ(reg->endpoint, "127.0.0.1:4001");
    EXPECT_EQ(reg->keys, alice.keys());
    EXPECT_FALSE(b.lookup(bob.peer_id()));
    EXPECT_EQ(server.online_count(), 1u);
}

TEST(Rendezvous, RegisterNeedsAnEndpoint) {
    RendezvousServer server(kAny, config());
    RendezvousClient a(server.local(), ident(1), kSwarm);
    EXPECT_THROW(a.register_now(), Error);
}

TEST(Rendezvous, TtlBoundary) {
    auto clock = std::make_shared<ManualClock>();
    RendezvousServer server(kAny, config(clock));
    auto alice = ident(1), bob = ident(2);
    RendezvousClient a(server.local(), alice, kSwarm, clock), b(server.local(), bob, kSwarm, clock);
    a.start("127.0.0.1:4001");
    a.stop();
    ASSERT_FALSE(b.lookup(alice.peer_id()));  // dropped on disconnect

    RendezvousClient a2(server.local(), alice, kSwarm, clock);
    a2.start("127.0.0.1:4002");
    clock->advance(59'999);
    EXPECT_TRUE(b.lookup(alice.peer_id()));
    clock->advance(1);
    EXPECT_FALSE(b.lookup(alice.peer_id()));
    clock->advance(1'000);
    EXPECT_FALSE(b.lookup(alice.peer_id()));
    EXPECT_EQ(a2.register_now(), clock->now() + kPresenceTtlMs);
    EXPECT_TRUE(b.lookup(alice.peer_id()));
}

TEST(Rendezvous, LatestEndpointWins) {
    RendezvousServer server(kAny, config());
    auto alice = ident(1), bob = ident(2);
    RendezvousClient b(server.local(), bob, kSwarm);
    {
        RendezvousClient a(server.local(), alice, kSwarm);
        a.start("127.0.0.1:4001");
        RendezvousClient a_new(server.local(), alice, kSwarm);
        a_new.start("127.0.0.1:4009");
        EXPECT_EQ(b.lookup(alice.peer_id())->endpoint, "127.0.0.1:4009");
        a.stop();  // the old connection closing must not evict the new presence
        EXPECT_EQ(b.lookup(alice.peer_id())->endpoint, "127.0.0.1:4009");
    }
}

TEST(Rendezvous, WrongSwarmKeyRefused) {
    RendezvousServer server(kAny, config());
    RendezvousClient a(server.local(), ident(1), "other-swarm");
    EXPECT_THROW(a.start("127.0.0.1:4001"), Error);
    EXPECT_EQ(server.online_count(), 0u);
}

TEST(Rendezvous, PrivateSwarmRefusesNonMembers) {
    auto founder = ident(1), outsider = ident(2);
    auto cfg = config();
    cfg.genesis = Genesis::make(founder, system_clock()->now());
    RendezvousServer server(kAny, cfg);
    ASSERT_TRUE(server.private_mode());
    RendezvousClient f(server.local(), founder, kSwarm), o(server.local(), outsider, kSwarm);
    EXPECT_NO_THROW(f.start("127.0.0.1:4001"));
    EXPECT_THROW(o.start("127.0.0.1:4002"), Error);
    EXPECT_EQ(server.online_count(), 1u);
}

TEST(Rendezvous, RelayIsByteIdentical) {
    RendezvousServer server(kAny, config());
    auto alice = ident(1), bob = ident(2);
    RendezvousClient a(server.local(), alice, kSwarm), b(server.local(), bob, kSwarm);
    std::promise<std::pair<PeerId, Bytes>> got;
    b.set_relay_handler([&](const PeerId& from, Bytes payload) { got.set_value({from, std::move(payload)}); });
    a.start("127.0.0.1:4001");
    b.start("127.0.0.1:4002");
    Bytes payload(5000);
    for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<std::uint8_t>(i * 31 + 7);
    ASSERT_TRUE(a.relay(bob.peer_id(), payload));
    auto f = got.get_future();
    ASSERT_EQ(f.wait_for(5s), std::future_status::ready);
    auto [from, data] = f.get();
    EXPECT_EQ(from, alice.peer_id());
    EXPECT_EQ(data, payload);
}

TEST(Rendezvous, RelayToOfflinePeerIsUndeliverable) {
    RendezvousServer server(kAny, config());
    auto alice = ident(1), bob = ident(2);
    RendezvousClient a(server.local(), alice, kSwarm);
    a.start("127.0.0.1:4001");
    EXPECT_FALSE(a.relay(bob.peer_id(), as_bytes("hello")));
}

TEST(Rendezvous, RelayRequiresRegistration) {
    RendezvousServer server(kAny, config());
    auto alice = ident(1), bob = ident(2);
    RendezvousClient a(server.local(), alice, kSwarm), b(server.local(), bob, kSwarm);
    b.start("127.0.0.1:4002");
    EXPECT_FALSE(a.relay(bob.peer_id(), as_bytes("hello")));
}

TEST(Rendezvous, HandlerMayIssueRequests) {
    RendezvousServer server(kAny, config());
    auto alice = ident(1), bob = ident(2);
    RendezvousClient a(server.local(), alice, kSwarm), b(server.local(), bob, kSwarm);
    std::promise<Bytes> echoed;
    a.set_relay_handler([&](const PeerId&, Bytes p) { echoed.set_value(std::move(p)); });
    b.set_relay_handler([&](const PeerId& from, Bytes p) { b.relay(from, p); });
    a.start("127.0.0.1:4001");
    b.start("127.0.0.1:4002");
    ASSERT_TRUE(a.relay(bob.peer_id(), as_bytes("ping")));
    auto f = echoed.get_future();
    ASSERT_EQ(f.wait_for(5s), std::future_status::ready);
    EXPECT_EQ(to_string(f.get()), "ping");
}

TEST(Rendezvous, DirectoryKeysAreSelfCertifying) {
    RendezvousServer server(kAny, config());
    auto alice = ident(1), bob = ident(2);
    RendezvousClient a(server.local(), alice, kSwarm), b(server.local(), bob, kSwarm);
    a.start("127.0.0.1:4001");
    auto keys = b.directory(alice.peer_id());
    ASSERT_TRUE(keys);
    EXPECT_TRUE(keys->certifies(alice.peer_id()));
}

TEST(Rendezvous, TamperedDirectoryAnswerIsDropped) {
    // A lying server returns someone else's keys for alice's id.
    auto alice = ident(1), mallory = ident(3);
    TcpServer liar(kAny, serve_frames([&](const Frame& f) -> std::optional<Frame> {
        ByteWriter w;
        if (f.type == MsgType::kDirectory) {
            w.u8(1);
            encode(w, mallory.keys());
            return Frame{MsgType::kDirectoryResp, std::move(w).take()};
        }
        if (f.type == MsgType::kLookup) {
            w.u8(1);
            encode(w, mallory.keys());
            w.str("127.0.0.1:6666").i64(system_clock()->now() + 1000);
            return Frame{MsgType::kLookupResp, std::move(w).take()};
        }
        return error_frame("no");
    }));
    RendezvousClient b(liar.local(), ident(2), kSwarm);
    EXPECT_FALSE(b.directory(alice.peer_id()));
    EXPECT_FALSE(b.lookup(alice.peer_id()));
}

TEST(Rendezvous, MembershipPushEvictsRemovedPeers) {
    auto ids = std::vector{ident(1), ident(2), ident(3)};
    UnixMs t0 = system_clock()->now();
    auto genesis = Genesis::make(ids[0], t0);
    Consensus c(genesis);
    auto add = [&](const PeerIdentity& who) {
        auto sp = c.propose(ProposalKind::kAddMember, {who.peer_id(), "", ""}, ids[0], t0);
        for (const auto& id : ids) {
            if (c.state().is_member(id.peer_id()) && c.tally(sp.proposal.id(), t0) == Outcome::kPending) {
                c.cast_vote(sp.proposal.id(), Choice::kYes, id, t0);
            }
        }
        c.settle(t0);
    };
    add(ids[1]);
    add(ids[2]);

    auto cfg = config();
    cfg.genesis = genesis;
    RendezvousServer server(kAny, cfg);
    RendezvousClient a(server.local(), ids[0], kSwarm), b(server.local(), ids[1], kSwarm);
    a.start("127.0.0.1:4001");
    EXPECT_THROW(b.start("127.0.0.1:4002"), Error);  // server has not seen the log yet
    EXPECT_EQ(a.push_membership(c.log()), 2u);
    EXPECT_EQ(server.membership(), c.state());
    EXPECT_NO_THROW(b.register_now());
    EXPECT_EQ(a.fetch_membership(), c.log());

    auto rm = c.propose(ProposalKind::kRemoveMember, {ids[1].peer_id(), "", ""}, ids[0], t0);
    c.cast_vote(rm.proposal.id(), Choice::kYes, ids[0], t0);
    c.cast_vote(rm.proposal.id(), Choice::kYes, ids[2], t0);
    c.settle(t0);
    EXPECT_EQ(a.push_membership(c.log()), 3u);
    EXPECT_FALSE(a.lookup(ids[1].peer_id()));
    EXPECT_TRUE(a.lookup(ids[0].peer_id()));
}

TEST(Rendezvous, ForgedMembershipLogRejected) {
    auto founder = ident(1), outsider = ident(2);
    UnixMs t0 = system_clock()->now();
    auto cfg = config();
    cfg.genesis = Genesis::make(founder, t0);
    RendezvousServer server(kAny, cfg);

    // The outsider runs its own genesis and tries to pass its log off.
    Consensus fake(Genesis::make(outsider, t0));
    auto sp = fake.propose(ProposalKind::kSetPolicy, {{}, "k", "v"}, outsider, t0);
    fake.cast_vote(sp.proposal.id(), Choice::kYes, outsider, t0);
    fake.settle(t0);

    RendezvousClient f(server.local(), founder, kSwarm);
    EXPECT_THROW(f.push_membership(fake.log()), Error);
    EXPECT_EQ(server.membership().epoch, 0u);
}

TEST(Rendezvous, ServerHoldsNoMessageContent) {
    RendezvousServer server(kAny, config());
    auto alice = ident(1), bob = ident(2);
    RendezvousClient a(server.local(), alice, kSwarm), b(server.local(), bob, kSwarm);
    std::promise<void> done;
    b.set_relay_handler([&](const PeerId&, Bytes) { done.set_value(); });
    a.start("127.0.0.1:4001");
    b.start("127.0.0.1:4002");
    const std::string secret = "relay-payload-marker-0123456789";
    ASSERT_TRUE(a.relay(bob.peer_id(), as_bytes(secret)));
    done.get_future().wait_for(5s);
    std::string state = server.describe_state();
    EXPECT_EQ(state.find(secret), std::string::npos);
    EXPECT_NE(state.find(to_hex(alice.peer_id())), std::string::npos);
    EXPECT_NE(state.find("presence 2"), std::string::npos);
}

TEST(Rendezvous, ClientReconnectsAfterServerRestart) {
    auto alice = ident(1), bob = ident(2);
    auto server = std::make_unique<RendezvousServer>(kAny, config());
    Endpoint at = server->local();
    RendezvousClient a(at, alice, kSwarm), b(at, bob, kSwarm);
    a.start("127.0.0.1:4001");
    ASSERT_TRUE(b.lookup(alice.peer_id()));
    server.reset();
    ASSERT_TRUE(eventually([&] { return !a.connected(); }));

    server = std::make_unique<RendezvousServer>(at, config());
    // the heartbeat retries about once a second after a drop
    EXPECT_TRUE(eventually([&] { return server->online_count() == 1; }, 10s));
    EXPECT_TRUE(b.lookup(alice.peer_id()));
}
