#include <gtest/gtest.h>

#include "fybrr/local_api.hpp"
#include "fybrr/sim.hpp"

using namespace fybrr;
using json = nlohmann::json;

TEST(Origin, OnlyLoopbackPages) {
    EXPECT_TRUE(origin_allowed(""));
    EXPECT_TRUE(origin_allowed("http://localhost:5173"));
    EXPECT_TRUE(origin_allowed("http://127.0.0.1"));
    EXPECT_TRUE(origin_allowed("https://[::1]:8080"));
    EXPECT_FALSE(origin_allowed("http://evil.example"));
    EXPECT_FALSE(origin_allowed("http://localhost.evil.example"));
    EXPECT_FALSE(origin_allowed("http://127.0.0.1.nip.io:80"));
    EXPECT_FALSE(origin_allowed("http://localhost:80/path"));
    EXPECT_FALSE(origin_allowed("null"));
    EXPECT_FALSE(origin_allowed("file://localhost"));
}

class LocalApiTest : public ::testing::Test {
protected:
    LocalApiTest()
        : swarm({.nodes = 2, .seed = 31, .replication = 1}),
          api_a(swarm.node(0), 0),
          api_b(swarm.node(1), 0) {}

    sim::Swarm swarm;
    LocalApi api_a;
    LocalApi api_b;
};

TEST_F(LocalApiTest, SendEchoesStatusAndPeerGetsInboundEvent) {
    ApiClient alice(api_a.port());
    ApiClient bob(api_b.port());
    json reply = alice.request({{"op", "send"}, {"to", to_hex(swarm.peer(1))}, {"text", "hi"}});
    EXPECT_EQ(reply["op"], "status");
    EXPECT_EQ(reply["state"], "sent_direct");
    EXPECT_EQ(reply["msg_id"].get<std::string>().size(), 32u);

    auto ev = bob.next(std::chrono::seconds(5));
    ASSERT_TRUE(ev);
    EXPECT_EQ((*ev)["op"], "inbound");
    EXPECT_EQ((*ev)["text"], "hi");
    EXPECT_EQ((*ev)["from"], to_hex(swarm.peer(0)));
    EXPECT_EQ((*ev)["msg_id"], reply["msg_id"]);

    json history = bob.request({{"op", "history"}});
    ASSERT_EQ(history["entries"].size(), 1u);
    EXPECT_EQ(history["entries"][0]["direction"], "in");
}

TEST_F(LocalApiTest, MalformedJsonKeepsSessionOpen) {
    ApiClient c(api_a.port());
    c.send_raw("{not json");
    auto err = c.next(std::chrono::seconds(5));
    ASSERT_TRUE(err);
    EXPECT_EQ((*err)["op"], "error");
    json status = c.request({{"op", "status"}});
    EXPECT_EQ(status["peer_id"], to_hex(swarm.peer(0)));
    EXPECT_EQ(status["private"], false);
}

TEST_F(LocalApiTest, BadCommandsReturnErrors) {
    ApiClient c(api_a.port());
    EXPECT_EQ(c.request({{"op", "teleport"}})["op"], "error");
    EXPECT_EQ(c.request({{"op", "send"}, {"to", "abc"}, {"text", "x"}})["op"], "error");
    json r = c.request({{"op", "propose"}, {"kind", "add_member"}, {"subject", to_hex(swarm.peer(1))}});
    EXPECT_EQ(r["op"], "error");
    EXPECT_EQ(r["code"], "state");  // public swarm
}

TEST_F(LocalApiTest, ContactsAndPresence) {
    ApiClient c(api_a.port());
    c.request({{"op", "contacts_add"}, {"peer", to_hex(swarm.peer(1))}, {"name", "bob"}});
    json contacts = c.request({{"op", "contacts"}});
    ASSERT_EQ(contacts["contacts"].size(), 1u);
    EXPECT_EQ(contacts["contacts"][0]["name"], "bob");
    json presence = c.request({{"op", "presence"}});
    EXPECT_EQ(presence["contacts"][0]["online"], true);
}

TEST_F(LocalApiTest, ForeignOriginRefused) {
    EXPECT_THROW(ApiClient(api_a.port(), "http://evil.example"), Error);
    ApiClient ok(api_a.port(), "http://localhost:5173");
    EXPECT_EQ(ok.request({{"op", "status"}})["op"], "status");
}

TEST_F(LocalApiTest, GroupSendFansOut) {
    ApiClient c(api_b.port());
    auto stranger = generate_identity().peer_id();
    json r = c.request({{"op", "send"}, {"to", {to_hex(swarm.peer(0)), to_hex(stranger)}}, {"text", "all"}});
    ASSERT_EQ(r["results"].size(), 2u);
    EXPECT_EQ(r["results"][0]["state"], "sent_direct");
    EXPECT_EQ(r["results"][1]["state"], "failed");  // no keys for a stranger
}
