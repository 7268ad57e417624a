#pragma once

#include <memory>
#include <random>
#include <vector>

#include "fybrr/dht.hpp"

namespace fybrr::sim {

/// N Kademlia nodes wired through an InProcNetwork. Nodes join one after
/// another through node 0 and then refresh, mirroring a real bootstrap.
class DhtSwarm {
public:
    struct Member {
        PeerIdentity identity;
        std::string endpoint;
        std::unique_ptr<RpcRouter> router;
        std::shared_ptr<RpcClient> client;
        std::unique_ptr<Dht> dht;
        bool alive = true;
    };

    DhtSwarm(std::size_t n, std::uint64_t seed, DhtConfig config = {},
             std::shared_ptr<Clock> clock = system_clock());

    std::size_t size() const { return members_.size(); }
    Member& member(std::size_t i) { return *members_.at(i); }
    Dht& dht(std::size_t i) { return *members_.at(i)->dht; }

    void stop(std::size_t i);
    void restart(std::size_t i);

    /// Brute-force oracle: the k live node ids closest to target.
    std::vector<PeerId> brute_force_closest(const Hash32& target, std::size_t k) const;
    std::shared_ptr<InProcNetwork> network() const { return net_; }

private:
    std::shared_ptr<InProcNetwork> net_;
    std::shared_ptr<Clock> clock_;
    std::vector<std::unique_ptr<Member>> members_;
};

}  // namespace fybrr::sim
