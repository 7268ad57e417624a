#include <gtest/gtest.h>

#include <fstream>
#include <thread>

#include "fybrr/node.hpp"
#include "fybrr/sim.hpp"

using namespace fybrr;
using namespace fybrr::sim;

namespace {

Bytes text(std::string_view s) { return Bytes(s.begin(), s.end()); }

std::optional<InboundMessage> find(const Node& n, const MessageId& id) {
    for (const auto& m : n.inbox()) {
        if (m.msg_id == id) return m;
    }
    return std::nullopt;
}

}  // namespace

TEST(NodeConfig, ParsesKeysAndResolvesRelativePaths) {
    auto c = NodeConfig::parse(
        "# node\n"
        "key_file = id.key\n"
        "listen=127.0.0.1:9000\n"
        "rendezvous=127.0.0.1:9100\n"
        "swarm_key=team\n"
        "bootstrap=127.0.0.1:9001, 127.0.0.1:9002\n"
        "replication=5\n"
        "api_port=7999\n"
        "data_dir=data\n",
        "/etc/fybrr");
    EXPECT_EQ(c.key_file, std::filesystem::path("/etc/fybrr/id.key"));
    EXPECT_EQ(c.listen, "127.0.0.1:9000");
    EXPECT_EQ(c.bootstrap.size(), 2u);
    EXPECT_EQ(c.replication, 5u);
    EXPECT_EQ(c.api_port, 7999);
    EXPECT_EQ(*c.data_dir, std::filesystem::path("/etc/fybrr/data"));
}

TEST(NodeConfig, RejectsUnknownKeysAndBadValues) {
    EXPECT_THROW(NodeConfig::parse("key_file=a\ncolour=blue\n"), Error);
    EXPECT_THROW(NodeConfig::parse("key_file=a\nreplication=0\n"), Error);
    EXPECT_THROW(NodeConfig::parse("key_file=a\nlisten=nowhere\n"), Error);
    EXPECT_THROW(NodeConfig::parse("listen=127.0.0.1:1\n"), Error);  // key_file missing
}

TEST(Node, MalformedKeyFileIsRefused) {
    auto dir = std::filesystem::temp_directory_path() / ("fybrr-node-" + to_hex(random_array<6>()));
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "bad.key") << "not a key\n";
    NodeConfig c;
    c.key_file = dir / "bad.key";
    EXPECT_THROW(Node::from_config(c), Error);
    std::filesystem::remove_all(dir);
}

TEST(Node, EnvelopeRoundTrips) {
    Envelope e{random_array<16>(), 1234, "notes.txt", text("hello")};
    EXPECT_EQ(Envelope::decode(e.encode()), e);
    Bytes b = e.encode();
    b.push_back(0);
    EXPECT_THROW(Envelope::decode(b), Error);
}

TEST(Node, DirectExchangeBothWays) {
    Swarm swarm({.nodes = 2, .seed = 11, .replication = 1});
    auto a = swarm.node(0).send_message(swarm.peer(1), text("hi bob"));
    EXPECT_EQ(a.status, OutboundStatus::kSentDirect);
    auto b = swarm.node(1).send_message(swarm.peer(0), text("hi alice"), "reply.txt");
    EXPECT_EQ(b.status, OutboundStatus::kSentDirect);

    auto got_a = find(swarm.node(1), a.msg_id);
    ASSERT_TRUE(got_a);
    EXPECT_EQ(got_a->plaintext, text("hi bob"));
    EXPECT_EQ(got_a->from, swarm.peer(0));
    EXPECT_EQ(got_a->path, MessagePath::kDirect);
    auto got_b = find(swarm.node(0), b.msg_id);
    ASSERT_TRUE(got_b);
    EXPECT_EQ(got_b->filename, "reply.txt");
    EXPECT_EQ(swarm.node(0).history(swarm.peer(1)).size(), 2u);
}

TEST(Node, OfflineRecipientQueuesAndSyncsOnRestart) {
    Swarm swarm({.nodes = 4, .seed = 12, .replication = 2});
    swarm.stop(1);
    std::vector<MessageId> ids;
    for (int i = 0; i < 5; ++i) {
        auto m = swarm.node(0).send_message(swarm.peer(1), text("queued " + std::to_string(i)));
        ASSERT_EQ(m.status, OutboundStatus::kQueued) << m.error;
        ids.push_back(m.msg_id);
    }
    swarm.restart(1);  // start() runs an inbox sync
    auto inbox = swarm.node(1).inbox();
    ASSERT_EQ(inbox.size(), 5u);
    for (int i = 0; i < 5; ++i) {
        EXPECT_EQ(inbox[i].msg_id, ids[i]) << "entry order";
        EXPECT_EQ(inbox[i].plaintext, text("queued " + std::to_string(i)));
        EXPECT_EQ(inbox[i].path, MessagePath::kDmq);
    }
    EXPECT_EQ(swarm.node(0).refresh_delivery(), 5u);
    EXPECT_EQ(swarm.node(0).outbound(ids[0])->status, OutboundStatus::kDelivered);

    // A second sync finds nothing new.
    auto again = swarm.node(1).sync_inbox();
    EXPECT_TRUE(again.delivered.empty());
    swarm.gc_all();
    EXPECT_EQ(swarm.total_blocks(), 0u);
}

TEST(Node, CorruptHolderFallsBackToAnotherCopy) {
    Swarm swarm({.nodes = 5, .seed = 13, .replication = 3});
    swarm.stop(1);
    auto m = swarm.node(0).send_message(swarm.peer(1), text(std::string(5000, 'x')));
    ASSERT_EQ(m.status, OutboundStatus::kQueued);
    // Damage the manifest on every holder but one.
    std::size_t damaged = 0;
    for (std::size_t i = 0; i < swarm.size(); ++i) {
        if (i == 1 || !swarm.alive(i)) continue;
        if (swarm.node(i).store().has(*m.manifest) && damaged + 1 < swarm.holders_of(*m.manifest)) {
            swarm.node(i).store().corrupt_for_test(*m.manifest, 3);
            ++damaged;
        }
    }
    ASSERT_GE(damaged, 1u);
    swarm.restart(1);
    auto got = find(swarm.node(1), m.msg_id);
    ASSERT_TRUE(got);
    EXPECT_EQ(got->plaintext, text(std::string(5000, 'x')));
}

TEST(Node, EveryCopyCorruptLeavesMessagePending) {
    Swarm swarm({.nodes = 3, .seed = 14, .replication = 2});
    swarm.stop(1);
    auto m = swarm.node(0).send_message(swarm.peer(1), text("fragile"));
    ASSERT_EQ(m.status, OutboundStatus::kQueued);
    for (std::size_t i : {0, 2}) {
        if (swarm.node(i).store().has(*m.manifest)) swarm.node(i).store().corrupt_for_test(*m.manifest, 1);
    }
    swarm.restart(1);
    EXPECT_TRUE(swarm.node(1).inbox().empty());
    auto r = swarm.node(1).sync_inbox();
    EXPECT_EQ(r.pending, 1u);
    EXPECT_TRUE(r.delivered.empty());
}

TEST(Node, NoPeersMeansFailed) {
    Swarm swarm({.nodes = 1, .seed = 15, .replication = 1});
    auto stranger = generate_identity().peer_id();
    auto m = swarm.node(0).send_message(stranger, text("anyone?"));
    EXPECT_EQ(m.status, OutboundStatus::kFailed);
    EXPECT_FALSE(m.error.empty());
}

TEST(Node, FounderWithoutBootstrapIsReachableOffline) {
    // The first node has nobody to publish its keys to at start; maintenance
    // re-announces once later peers fill its routing table.
    auto config = [](std::vector<std::string> bootstrap) {
        NodeConfig c;
        c.key_file = "unused";
        c.bootstrap = std::move(bootstrap);
        c.replication = 1;
        c.maintenance_interval = std::chrono::milliseconds(50);
        return c;
    };
    Node founder(generate_identity(), config({}));
    founder.start();
    Node a(generate_identity(), config({founder.endpoint()}));
    a.start();
    Node b(generate_identity(), config({founder.endpoint()}));
    b.start();
    const PeerId founder_id = founder.identity().peer_id();
    std::this_thread::sleep_for(std::chrono::milliseconds(400));
    founder.stop();

    auto m = b.send_message(founder_id, text("while you were out"));
    EXPECT_EQ(m.status, OutboundStatus::kQueued) << m.error;
    a.stop();
    b.stop();
}

TEST(Node, RejectsBadSends) {
    Swarm swarm({.nodes = 2, .seed = 16, .replication = 1});
    EXPECT_THROW(swarm.node(0).send_message(swarm.peer(0), text("me")), Error);
    EXPECT_THROW(swarm.node(0).send_message(swarm.peer(1), {}), Error);
    Bytes big(kMaxMessageBytes + 1, 'a');
    EXPECT_THROW(swarm.node(0).send_message(swarm.peer(1), big), Error);
}

TEST(Node, ContactsPersistAcrossRestart) {
    Swarm swarm({.nodes = 2, .seed = 17, .replication = 1});
    swarm.node(0).add_contact(swarm.peer(1), "bob");
    ASSERT_TRUE(swarm.node(0).resolve_keys(swarm.peer(1)));
    swarm.stop(0);
    swarm.restart(0);
    auto cs = swarm.node(0).contacts();
    ASSERT_EQ(cs.size(), 1u);
    EXPECT_EQ(cs[0].name, "bob");
    EXPECT_TRUE(cs[0].keys);
    auto presence = swarm.node(0).presence();
    ASSERT_EQ(presence.size(), 1u);
    EXPECT_TRUE(presence[0].second);
}

TEST(Node, PublicSwarmHasNoGovernance) {
    Swarm swarm({.nodes = 1, .seed = 18, .replication = 1});
    EXPECT_FALSE(swarm.node(0).private_mode());
    EXPECT_THROW(swarm.node(0).propose(ProposalKind::kAddMember, Subject{swarm.peer(0)}), Error);
}

TEST(Node, PrivateSwarmAdmitsMembersByVote) {
    Swarm swarm({.nodes = 3, .seed = 19, .replication = 1, .private_swarm = true});
    Node& founder = swarm.node(0);
    ASSERT_TRUE(founder.private_mode());
    EXPECT_FALSE(founder.is_member(swarm.peer(1)));

    auto p1 = founder.propose(ProposalKind::kAddMember, Subject{swarm.peer(1)});
    founder.vote(p1.proposal.id(), Choice::kYes);  // 1 of 1
    EXPECT_TRUE(founder.is_member(swarm.peer(1)));

    // The new member catches up from the next gossip it sees.
    auto p2 = founder.propose(ProposalKind::kAddMember, Subject{swarm.peer(2)});
    EXPECT_TRUE(swarm.node(1).is_member(swarm.peer(1)));
    founder.vote(p2.proposal.id(), Choice::kYes);
    EXPECT_FALSE(founder.is_member(swarm.peer(2))) << "1 of 2 is not a strict majority";
    swarm.node(1).vote(p2.proposal.id(), Choice::kYes);
    EXPECT_TRUE(founder.is_member(swarm.peer(2)));
    EXPECT_EQ(founder.membership(), swarm.node(1).membership());
}

TEST(Sim, MessageLengthsAreLinear) {
    EXPECT_EQ(message_length(0, 500, 50, 500), 50u);
    EXPECT_EQ(message_length(499, 500, 50, 500), 500u);
    EXPECT_EQ(message_length(1, 500, 50, 500), 51u);  // 50.9 rounds up
    std::mt19937_64 a(3), b(3);
    EXPECT_EQ(message_text(a, 80), message_text(b, 80));
}

TEST(Sim, SummaryUsesNearestRank) {
    std::vector<LatencySample> s;
    for (int i = 1; i <= 100; ++i) s.push_back({static_cast<std::size_t>(i), 1, MessagePath::kDirect, 0, i * 1000});
    auto sum = summarize(s, 123);
    EXPECT_DOUBLE_EQ(sum.mean_ms, 50.5);
    EXPECT_DOUBLE_EQ(sum.p50_ms, 50);
    EXPECT_DOUBLE_EQ(sum.p99_ms, 99);
    EXPECT_EQ(samples_csv(s).substr(0, 55), "msg_index,length_chars,path,send_ts,recv_ts,latency_ms\n");
}

TEST(Sim, SmallBenchmarkDeliversEverything) {
    auto r = run_benchmark({.messages = 20, .seed = 5});
    EXPECT_EQ(r.undelivered, 0u);
    EXPECT_TRUE(r.errors.empty());
    ASSERT_EQ(r.samples.size(), 20u);
    for (const auto& s : r.samples) {
        EXPECT_GE(s.latency_ms(), 0.0);
        EXPECT_EQ(s.path, MessagePath::kDirect);
    }
    auto q = run_benchmark({.messages = 5, .path = MessagePath::kDmq, .seed = 5});
    EXPECT_EQ(q.undelivered, 0u);
    for (const auto& s : q.samples) EXPECT_EQ(s.path, MessagePath::kDmq);
}

TEST(Sim, ScenarioParsing) {
    auto sc = Scenario::parse(
        "nodes=4\nseed=9\n[schedule]\n"
        "20 sync 1\n"
        "0 stop 1\n"
        "10 send 0 1 64\n"
        "15 corrupt_chunk\n");
    EXPECT_EQ(sc.nodes, 4u);
    ASSERT_EQ(sc.events.size(), 4u);
    EXPECT_EQ(sc.events[0].kind, ScenarioEvent::Kind::kStop);
    EXPECT_EQ(sc.events[3].kind, ScenarioEvent::Kind::kSync);
    EXPECT_THROW(Scenario::parse("nodes=2\n[schedule]\n0 send 0 5 10\n"), Error);
    EXPECT_THROW(Scenario::parse("nodes=2\n[schedule]\n0 teleport 1\n"), Error);
    EXPECT_THROW(Scenario::parse("planets=2\n"), Error);
    auto commented = Scenario::parse("# two peers\nnodes=2 # small\n[schedule]\n0 send 0 1 10  # hello\n");
    ASSERT_EQ(commented.events.size(), 1u);
    EXPECT_EQ(commented.events[0].length, 10u);
}

TEST(Sim, ScenarioConservesMessages) {
    auto sc = Scenario::parse(
        "nodes=4\nseed=21\nreplication=2\n[schedule]\n"
        "0 send 0 1 40\n"
        "1 stop 1\n"
        "2 send 0 1 300\n"
        "3 send 2 1 5000\n"
        "4 start 1\n"
        "5 send 3 2 10\n"
        "6 stop 2\n"
        "7 send 0 2 99\n");
    auto r = run_scenario(sc);
    for (const auto& f : r.failures) ADD_FAILURE() << f;
    EXPECT_EQ(r.sent, 5u);
    EXPECT_EQ(r.delivered, 4u);
    EXPECT_EQ(r.queued, 1u);
    EXPECT_EQ(r.duplicates, 0u);
    EXPECT_FALSE(r.log.empty());
}

// Random online/offline schedules: whatever path each message takes, it is
// delivered exactly once after everyone is back online.
TEST(Sim, RandomSchedulesDeliverExactlyOnce) {
    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
        SCOPED_TRACE("seed " + std::to_string(seed));
        std::mt19937_64 rng(seed);
        const std::size_t n = 5;
        std::vector<bool> up(n, true);
        std::ostringstream text;
        text << "nodes=" << n << "\nseed=" << seed << "\nreplication=2\n[schedule]\n";
        std::int64_t t = 0;
        for (int step = 0; step < 24; ++step, ++t) {
            std::size_t a = rng() % n;
            std::size_t b = (a + 1 + rng() % (n - 1)) % n;
            std::size_t down = std::count(up.begin(), up.end(), false);
            switch (rng() % 4) {
                case 0:
                    if (up[a] && down < 2) {
                        text << t << " stop " << a << "\n";
                        up[a] = false;
                        break;
                    }
                    [[fallthrough]];
                case 1:
                    if (!up[a]) {
                        text << t << " start " << a << "\n";
                        up[a] = true;
                        break;
                    }
                    [[fallthrough]];
                default:
                    if (up[a]) text << t << " send " << a << " " << b << " " << 1 + rng() % 3000 << "\n";
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (!up[i]) text << t++ << " start " << i << "\n";
        }
        for (std::size_t i = 0; i < n; ++i) text << t++ << " sync " << i << "\n";

        auto r = run_scenario(Scenario::parse(text.str()));
        for (const auto& f : r.failures) ADD_FAILURE() << f;
        EXPECT_GT(r.sent, 0u);
        EXPECT_EQ(r.delivered, r.sent);
        EXPECT_EQ(r.queued, 0u);
        EXPECT_EQ(r.duplicates, 0u);
    }
}
