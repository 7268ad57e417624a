#include <gtest/gtest.h>
#include <openssl/sha.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "fybrr/content_store.hpp"
#include "fybrr/sim_dht.hpp"

using namespace fybrr;
namespace fs = std::filesystem;

namespace {

Bytes random_bytes(std::mt19937_64& rng, std::size_t n) {
    Bytes b(n);
    for (auto& x : b) x = static_cast<std::uint8_t>(rng());
    return b;
}

Hash32 openssl_sha256(ByteView data) {
    Hash32 h{};
    SHA256(data.data(), data.size(), h.data());
    return h;
}

fs::path temp_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("fybrr-cs-" + tag + "-" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

ManifestHeader header() {
    ManifestHeader h;
    h.sender_public.fill(0x11);
    h.recipient_peer_id.fill(0x22);
    h.nonce.fill(0x33);
    return h;
}

}  // namespace

TEST(Chunking, SmallPayloadIsOneChunk) {
    std::mt19937_64 rng(1);
    Bytes p = random_bytes(rng, 100);
    auto out = chunk_payload(p, header());
    ASSERT_EQ(out.chunks.size(), 1u);
    EXPECT_EQ(out.chunks[0].data, p);
    EXPECT_EQ(out.chunks[0].cid.digest, openssl_sha256(p));
    EXPECT_EQ(out.manifest.total_len, 100u);
}

TEST(Chunking, ExactSplitSizesAndRoundTrip) {
    std::mt19937_64 rng(2);
    Bytes p = random_bytes(rng, 153600);
    auto out = chunk_payload(p, header());
    ASSERT_EQ(out.chunks.size(), 3u);
    EXPECT_EQ(out.chunks[0].data.size(), 65536u);
    EXPECT_EQ(out.chunks[1].data.size(), 65536u);
    EXPECT_EQ(out.chunks[2].data.size(), 22528u);
    EXPECT_EQ(reassemble(out.manifest, out.chunks), p);
}

TEST(Chunking, CountMatchesCeilingOracle) {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 40; ++i) {
        std::size_t n = 1 + rng() % 300000;
        std::size_t cs = 1024 + rng() % 70000;
        Bytes p = random_bytes(rng, n);
        auto out = chunk_payload(p, header(), cs);
        EXPECT_EQ(out.chunks.size(), (n + cs - 1) / cs);
        for (std::size_t j = 0; j + 1 < out.chunks.size(); ++j) EXPECT_EQ(out.chunks[j].data.size(), cs);
        EXPECT_EQ(reassemble(out.manifest, out.chunks), p);
    }
}

TEST(Chunking, RejectsEmptyAndTinyChunkSize) {
    Bytes p(10, 1);
    try {
        chunk_payload(Bytes{}, header());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kInvalidArgument);
    }
    try {
        chunk_payload(p, header(), 1023);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kInvalidArgument);
    }
}

TEST(ManifestTest, CidIsHashOfCanonicalBytes) {
    std::mt19937_64 rng(4);
    auto out = chunk_payload(random_bytes(rng, 5000), header(), 1024);
    Bytes canon = out.manifest.canonical();
    // Layout oracle: 32 + 32 + 24 + 8 + 4 + 32 per chunk.
    EXPECT_EQ(canon.size(), 100u + 32u * out.chunks.size());
    EXPECT_EQ(out.manifest.message_cid.digest, openssl_sha256(canon));
    Manifest back = Manifest::decode(canon);
    EXPECT_EQ(back, out.manifest);
}

TEST(ManifestTest, DecodeRejectsTrailingBytesAndZeroChunks) {
    std::mt19937_64 rng(5);
    auto out = chunk_payload(random_bytes(rng, 2000), header());
    Bytes canon = out.manifest.canonical();
    canon.push_back(0);
    EXPECT_THROW(Manifest::decode(canon), Error);
    Manifest empty = out.manifest;
    empty.chunk_cids.clear();
    EXPECT_THROW(Manifest::decode(empty.canonical()), Error);
}

TEST(ManifestTest, ReassembleDetectsSwappedOrCorruptChunks) {
    std::mt19937_64 rng(6);
    auto out = chunk_payload(random_bytes(rng, 4096), header(), 1024);
    auto swapped = out.chunks;
    std::swap(swapped[0], swapped[1]);
    EXPECT_THROW(reassemble(out.manifest, swapped), Error);
    auto corrupt = out.chunks;
    corrupt[2].data[0] ^= 1;
    try {
        reassemble(out.manifest, corrupt);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kHashMismatch);
    }
    auto missing = out.chunks;
    missing.pop_back();
    EXPECT_THROW(reassemble(out.manifest, missing), Error);
}

TEST(BlockStoreTest, PutGetAndMismatch) {
    auto clock = std::make_shared<ManualClock>(1000);
    BlockStore store(clock);
    Chunk c = Chunk::of(Bytes{1, 2, 3});
    EXPECT_EQ(store.put(c), c.cid);
    EXPECT_EQ(store.get_block(c.cid), c);
    Chunk bad{c.cid, Bytes{1, 2, 4}};
    try {
        store.put(bad);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kHashMismatch);
    }
    ContentId unknown = content_id(Bytes{9});
    EXPECT_FALSE(store.get(unknown));
    try {
        store.get_block(unknown);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kNotFound);
    }
}

TEST(BlockStoreTest, GcRules) {
    auto clock = std::make_shared<ManualClock>(0);
    const UnixMs ttl = 10'000;
    BlockStore store(clock, std::nullopt, ttl);
    Chunk pinned = Chunk::of(Bytes{1});
    Chunk released = Chunk::of(Bytes{2});
    Chunk loose = Chunk::of(Bytes{3});
    for (auto* c : {&pinned, &released, &loose}) store.put(*c);
    store.mark_pinned(pinned.cid, 0);
    store.mark_pinned(released.cid, 0);
    store.mark_released(released.cid, 5);

    auto removed = store.gc(ttl);
    std::sort(removed.begin(), removed.end());
    std::vector<ContentId> expect{released.cid, loose.cid};
    std::sort(expect.begin(), expect.end());
    EXPECT_EQ(removed, expect);
    EXPECT_TRUE(store.has(pinned.cid));
    // Exactly at the TTL the pin survives; one millisecond later it does not.
    EXPECT_TRUE(store.gc(ttl).empty());
    EXPECT_EQ(store.gc(ttl + 1), std::vector<ContentId>{pinned.cid});
    EXPECT_EQ(store.size(), 0u);
}

TEST(BlockStoreTest, AuditFindsCorruption) {
    auto clock = std::make_shared<ManualClock>(0);
    BlockStore store(clock);
    Chunk a = Chunk::of(Bytes(100, 7)), b = Chunk::of(Bytes(100, 8));
    store.put(a);
    store.put(b);
    EXPECT_TRUE(store.audit().empty());
    ASSERT_TRUE(store.corrupt_for_test(b.cid, 3));
    EXPECT_EQ(store.audit(), std::vector<ContentId>{b.cid});
}

TEST(BlockStoreTest, DiskLayoutAndJournalSurviveReload) {
    auto dir = temp_dir("disk");
    auto clock = std::make_shared<ManualClock>(42);
    Chunk a = Chunk::of(Bytes{4, 5, 6});
    Chunk b = Chunk::of(Bytes{7, 8});
    {
        BlockStore store(clock, dir);
        store.put(a);
        store.put(b);
        store.mark_pinned(a.cid, 42);
        store.mark_pinned(b.cid, 43);
        store.mark_released(b.cid, 50);
    }
    EXPECT_TRUE(fs::exists(dir / "blocks" / a.cid.hex()));
    std::ifstream log(dir / "pins.log");
    std::string l1, l2, l3;
    std::getline(log, l1);
    std::getline(log, l2);
    std::getline(log, l3);
    EXPECT_EQ(l1, a.cid.hex() + " pinned 42");
    EXPECT_EQ(l3, b.cid.hex() + " released 50");

    BlockStore reloaded(clock, dir);
    EXPECT_EQ(reloaded.size(), 2u);
    EXPECT_EQ(reloaded.get_block(a.cid), a);
    EXPECT_EQ(reloaded.pin_state(a.cid), PinState::kPinned);
    EXPECT_EQ(reloaded.pin_state(b.cid), PinState::kReleased);
    reloaded.gc(60);
    EXPECT_FALSE(fs::exists(dir / "blocks" / b.cid.hex()));
    EXPECT_TRUE(fs::exists(dir / "blocks" / a.cid.hex()));
    fs::remove_all(dir);
}

namespace {

// Pin services over an in-process DHT swarm.
struct PinSwarm {
    std::shared_ptr<ManualClock> clock = std::make_shared<ManualClock>(1'700'000'000'000);
    sim::DhtSwarm swarm;
    std::vector<std::unique_ptr<PinService>> pins;

    PinSwarm(std::size_t n, std::uint64_t seed) : swarm(n, seed, DhtConfig{}, clock) {
        for (std::size_t i = 0; i < n; ++i) {
            auto& m = swarm.member(i);
            auto store = std::make_shared<BlockStore>(clock);
            pins.push_back(std::make_unique<PinService>(m.identity, store, *m.dht, m.client, clock));
            pins.back()->attach(*m.router);
        }
    }
    std::size_t index_of(const PeerId& id) {
        for (std::size_t i = 0; i < swarm.size(); ++i) {
            if (swarm.member(i).identity.peer_id() == id) return i;
        }
        return SIZE_MAX;
    }
};

// Oracle: the n closest ids excluding `self`, compared by raw XOR bytes.
std::set<PeerId> oracle_holders(PinSwarm& s, std::size_t self, const ContentId& cid, std::size_t n) {
    std::vector<PeerId> ids;
    for (std::size_t i = 0; i < s.swarm.size(); ++i) {
        if (i != self && s.swarm.member(i).alive) ids.push_back(s.swarm.member(i).identity.peer_id());
    }
    auto dist = [&](const PeerId& p) {
        Hash32 d{};
        for (int i = 0; i < 32; ++i) d[i] = p[i] ^ cid.digest[i];
        return d;
    };
    std::sort(ids.begin(), ids.end(), [&](const PeerId& a, const PeerId& b) { return dist(a) < dist(b); });
    ids.resize(std::min(n, ids.size()));
    return {ids.begin(), ids.end()};
}

}  // namespace

TEST(PinServiceTest, PinsOnTheThreeClosestPeers) {
    PinSwarm s(10, 77);
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 5; ++trial) {
        Chunk c = Chunk::of(random_bytes(rng, 2000));
        std::size_t origin = trial % 10;
        s.pins[origin]->store().put(c);
        PinRecord rec = s.pins[origin]->pin(c.cid);
        EXPECT_FALSE(rec.degraded);
        EXPECT_EQ(rec.holders.size(), 3u);
        EXPECT_EQ(rec.holders, oracle_holders(s, origin, c.cid, 3));
        for (const auto& h : rec.holders) {
            auto& store = s.pins[s.index_of(h)]->store();
            EXPECT_TRUE(store.has(c.cid));
            EXPECT_EQ(store.pin_state(c.cid), PinState::kPinned);
        }
        // Providers: origin plus the three holders.
        auto providers = s.swarm.dht((origin + 5) % 10).find_value(c.cid.digest, RecordKind::kProvider);
        EXPECT_EQ(providers.size(), 4u);
    }
}

TEST(PinServiceTest, LoneNodeIsDegraded) {
    PinSwarm s(1, 3);
    Chunk c = Chunk::of(Bytes(50, 1));
    s.pins[0]->store().put(c);
    PinRecord rec = s.pins[0]->pin(c.cid);
    EXPECT_TRUE(rec.degraded);
    EXPECT_EQ(rec.holders, std::set<PeerId>{s.swarm.member(0).identity.peer_id()});
}

TEST(PinServiceTest, PinRequiresLocalBlock) {
    PinSwarm s(3, 4);
    try {
        s.pins[0]->pin(content_id(Bytes{1}));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kNotFound);
    }
}

TEST(PinServiceTest, FetchSurvivesLosingOriginAndTwoHolders) {
    PinSwarm s(10, 91);
    std::mt19937_64 rng(9);
    Chunk c = Chunk::of(random_bytes(rng, 30000));
    s.pins[0]->store().put(c);
    PinRecord rec = s.pins[0]->pin(c.cid);
    ASSERT_EQ(rec.holders.size(), 3u);
    s.swarm.stop(0);
    auto it = rec.holders.begin();
    s.swarm.stop(s.index_of(*it++));
    s.swarm.stop(s.index_of(*it++));
    std::size_t reader = SIZE_MAX;
    for (std::size_t i = 1; i < 10; ++i) {
        if (s.swarm.member(i).alive && !rec.holders.count(s.swarm.member(i).identity.peer_id())) {
            reader = i;
            break;
        }
    }
    ASSERT_NE(reader, SIZE_MAX);
    auto got = s.pins[reader]->fetch(c.cid);
    ASSERT_TRUE(got.chunk);
    EXPECT_EQ(got.chunk->data, c.data);
}

TEST(PinServiceTest, FetchSkipsCorruptProvider) {
    PinSwarm s(8, 12);
    Chunk c = Chunk::of(Bytes(4000, 0xAB));
    s.pins[0]->store().put(c);
    PinRecord rec = s.pins[0]->pin(c.cid);
    ASSERT_EQ(rec.holders.size(), 3u);
    // Corrupt every copy except one holder.
    s.pins[0]->store().corrupt_for_test(c.cid);
    auto it = rec.holders.begin();
    s.pins[s.index_of(*it++)]->store().corrupt_for_test(c.cid);
    s.pins[s.index_of(*it++)]->store().corrupt_for_test(c.cid);
    std::size_t reader = 0;
    for (std::size_t i = 1; i < 8; ++i) {
        if (!rec.holders.count(s.swarm.member(i).identity.peer_id())) reader = i;
    }
    auto got = s.pins[reader]->fetch(c.cid);
    ASSERT_TRUE(got.chunk);
    EXPECT_EQ(got.chunk->data, c.data);
    EXPECT_GE(got.hash_mismatches, 1u);
}

TEST(PinServiceTest, UnpinReleasesHoldersAndIsIdempotent) {
    PinSwarm s(6, 21);
    Chunk c = Chunk::of(Bytes(3000, 3));
    s.pins[2]->store().put(c);
    PinRecord rec = s.pins[2]->pin(c.cid);
    s.pins[2]->unpin(c.cid);
    s.pins[2]->unpin(c.cid);
    s.pins[2]->unpin(content_id(Bytes{0}));
    for (const auto& h : rec.holders) {
        auto& store = s.pins[s.index_of(h)]->store();
        EXPECT_EQ(store.pin_state(c.cid), PinState::kReleased);
        EXPECT_EQ(s.pins[s.index_of(h)]->gc(s.clock->now()), 1u);
        EXPECT_FALSE(store.has(c.cid));
    }
    EXPECT_EQ(s.pins[2]->pin_record(c.cid)->state, PinState::kReleased);
}

TEST(PinServiceTest, OnlyAuthorisedPeersMayRelease) {
    PinSwarm s(6, 33);
    Chunk c = Chunk::of(Bytes(3000, 4));
    PeerId recipient = s.swarm.member(5).identity.peer_id();
    s.pins[1]->store().put(c);
    PinRecord rec = s.pins[1]->pin(c.cid, 3, recipient);
    std::size_t bystander = SIZE_MAX;
    for (std::size_t i = 0; i < 5; ++i) {
        if (i != 1 && !rec.holders.count(s.swarm.member(i).identity.peer_id())) bystander = i;
    }
    ASSERT_NE(bystander, SIZE_MAX);
    EXPECT_EQ(s.pins[bystander]->release_everywhere(c.cid), 0u);
    for (const auto& h : rec.holders) {
        EXPECT_EQ(s.pins[s.index_of(h)]->store().pin_state(c.cid), PinState::kPinned);
    }

    // The recipient's release reaches the pinner and every holder.
    EXPECT_EQ(s.pins[5]->release_everywhere(c.cid), 4u);
    for (const auto& h : rec.holders) {
        EXPECT_EQ(s.pins[s.index_of(h)]->store().pin_state(c.cid), PinState::kReleased);
    }
    EXPECT_EQ(s.pins[1]->store().pin_state(c.cid), PinState::kReleased);
}

TEST(PinServiceTest, HoldersSeeOnlyCiphertextBytesTheyWereGiven) {
    // Holders store exactly the pushed bytes; nothing about their content is
    // derivable beyond its hash, so a sealed payload stays opaque.
    PinSwarm s(5, 44);
    auto alice = generate_identity(Bytes(32, 1));
    auto bob = generate_identity(Bytes(32, 2));
    std::string_view text = "the quick brown fox";
    Bytes plaintext(text.begin(), text.end());
    auto box = seal(plaintext, alice, bob.enc_public());
    Chunk c = Chunk::of(box.ciphertext);
    s.pins[0]->store().put(c);
    PinRecord rec = s.pins[0]->pin(c.cid);
    for (const auto& h : rec.holders) {
        Bytes stored = s.pins[s.index_of(h)]->store().get_block(c.cid).data;
        EXPECT_EQ(stored, box.ciphertext);
        auto pos = std::search(stored.begin(), stored.end(), plaintext.begin(), plaintext.end());
        EXPECT_EQ(pos, stored.end());
    }
}
