#include "fybrr/sim_dht.hpp"

#include <algorithm>

namespace fybrr::sim {

DhtSwarm::DhtSwarm(std::size_t n, std::uint64_t seed, DhtConfig config, std::shared_ptr<Clock> clock)
    : net_(std::make_shared<InProcNetwork>()), clock_(std::move(clock)) {
    std::mt19937_64 rng(seed);
    auto transport = std::make_shared<InProcTransport>(net_);
    Hash32 digest = swarm_digest("");
    for (std::size_t i = 0; i < n; ++i) {
        Bytes s(32);
        for (auto& b : s) b = static_cast<std::uint8_t>(rng());
        auto m = std::make_unique<Member>(Member{generate_identity(ByteView(s)), "sim-" + std::to_string(i) + ":1",
                                                 nullptr, nullptr, nullptr, true});
        m->router = std::make_unique<RpcRouter>(digest);
        m->client = std::make_shared<RpcClient>(transport, digest, NodeInfo{m->identity.peer_id(), m->endpoint, 0});
        m->dht = std::make_unique<Dht>(m->identity, m->client, clock_, config);
        m->dht->attach(*m->router);
        RpcRouter* router = m->router.get();
        net_->attach(m->endpoint, [router](const Frame& f) { return router->handle(f); });
        members_.push_back(std::move(m));
    }
    for (std::size_t i = 1; i < n; ++i) members_[i]->dht->bootstrap({members_[0]->endpoint});
    for (auto& m : members_) m->dht->refresh();
}

void DhtSwarm::stop(std::size_t i) {
    auto& m = *members_.at(i);
    net_->detach(m.endpoint);
    m.alive = false;
}

void DhtSwarm::restart(std::size_t i) {
    auto& m = *members_.at(i);
    RpcRouter* router = m.router.get();
    net_->attach(m.endpoint, [router](const Frame& f) { return router->handle(f); });
    m.alive = true;
}

std::vector<PeerId> DhtSwarm::brute_force_closest(const Hash32& target, std::size_t k) const {
    std::vector<PeerId> ids;
    for (const auto& m : members_) {
        if (m->alive) ids.push_back(m->identity.peer_id());
    }
    std::sort(ids.begin(), ids.end(), [&](const PeerId& a, const PeerId& b) {
        // Independent of xor_distance(): compare byte by byte on the fly.
        for (std::size_t i = 0; i < 32; ++i) {
            std::uint8_t da = a[i] ^ target[i];
            std::uint8_t db = b[i] ^ target[i];
            if (da != db) return da < db;
        }
        return false;
    });
    if (ids.size() > k) ids.resize(k);
    return ids;
}

}  // namespace fybrr::sim
