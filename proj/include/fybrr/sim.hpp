#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fybrr/node.hpp"
#include "fybrr/rendezvous.hpp"

namespace fybrr::sim {

struct SwarmOptions {
    std::size_t nodes = 2;
    std::uint64_t seed = 1;
    std::size_t replication = 3;
    bool rendezvous = true;
    std::string swarm_key = "fybrr-sim";
    /// Background loops at production cadence; off means the harness drives
    /// sync and GC explicitly.
    bool background = false;
    /// Node 0 founds a private swarm; everyone else starts as a non-member.
    bool private_swarm = false;
};

/// N real nodes plus a rendezvous server on loopback sockets, each with its
/// own data directory under a temporary root that is removed on destruction.
class Swarm {
public:
    explicit Swarm(SwarmOptions options);
    ~Swarm();
    Swarm(const Swarm&) = delete;
    Swarm& operator=(const Swarm&) = delete;

    std::size_t size() const { return slots_.size(); }
    Node& node(std::size_t i);
    const PeerIdentity& identity(std::size_t i) const { return slots_.at(i).identity; }
    PeerId peer(std::size_t i) const { return identity(i).peer_id(); }
    bool alive(std::size_t i) const { return slots_.at(i).node != nullptr; }

    /// Stops a node; its data directory survives for restart().
    void stop(std::size_t i);
    /// Starts a stopped node again on its previous port and data directory.
    void restart(std::size_t i);

    /// Receives every event of every node, including those raised while a
    /// node starts. Set before stopping or restarting nodes.
    void set_observer(std::function<void(std::size_t node, const NodeEvent&)> observer);

    RendezvousServer* rendezvous() { return rendezvous_.get(); }
    void kill_rendezvous();
    void restart_rendezvous();

    /// One garbage-collection pass on every live node.
    void gc_all();
    /// Sum of stored blocks over live nodes.
    std::size_t total_blocks();
    /// How many live nodes store `cid`.
    std::size_t holders_of(const ContentId& cid);
    const std::filesystem::path& root() const { return root_; }
    const SwarmOptions& options() const { return options_; }

private:
    struct Slot {
        PeerIdentity identity;
        NodeConfig config;
        std::unique_ptr<Node> node;
    };
    NodeConfig config_for(std::size_t i) const;

    SwarmOptions options_;
    std::filesystem::path root_;
    Endpoint rendezvous_at_;
    std::optional<Genesis> genesis_;
    std::unique_ptr<RendezvousServer> rendezvous_;
    std::vector<Slot> slots_;
    std::function<void(std::size_t, const NodeEvent&)> observer_;
};

/// Deterministic pseudo-random printable text of `length` characters.
std::string message_text(std::mt19937_64& rng, std::size_t length);

/// Length of message i: round(from + i * (to - from) / (n - 1)).
std::size_t message_length(std::size_t i, std::size_t n, std::size_t from, std::size_t to);

struct LatencySample {
    std::size_t msg_index = 0;
    std::size_t length_chars = 0;
    MessagePath path = MessagePath::kDirect;
    std::int64_t send_us = 0;  // unix time, microseconds
    std::int64_t recv_us = 0;

    double send_ts_ms() const { return static_cast<double>(send_us) / 1000.0; }
    double recv_ts_ms() const { return static_cast<double>(recv_us) / 1000.0; }
    double latency_ms() const { return static_cast<double>(recv_us - send_us) / 1000.0; }
};

struct BenchSummary {
    std::size_t count = 0;
    double mean_ms = 0;
    double p50_ms = 0;
    double p99_ms = 0;
    double total_ms = 0;  // first send to last receipt
};

struct BenchOptions {
    std::size_t messages = 500;
    std::size_t min_len = 50;
    std::size_t max_len = 500;
    MessagePath path = MessagePath::kDirect;
    std::uint64_t seed = 1;
};

struct BenchResult {
    std::vector<LatencySample> samples;
    BenchSummary summary;
    std::size_t undelivered = 0;
    std::vector<std::string> errors;
};

BenchSummary summarize(const std::vector<LatencySample>& samples, double total_ms);
/// Two nodes and a rendezvous server on loopback; every message is checked
/// byte-for-byte on arrival. Lost or altered messages are reported in
/// `undelivered` and `errors` rather than thrown.
BenchResult run_benchmark(const BenchOptions& options);

/// Header plus one row per sample, ordered by msg_index.
std::string samples_csv(const std::vector<LatencySample>& samples);
void export_csv(const std::vector<LatencySample>& samples, const std::filesystem::path& path);

struct ScenarioEvent {
    enum class Kind { kStart, kStop, kSend, kSync, kCorruptChunk, kDropHolder, kKillRendezvous };
    std::int64_t time = 0;
    Kind kind = Kind::kSync;
    std::size_t node = 0;
    std::size_t to = 0;
    std::size_t length = 0;
};

/// Scenario file: key=value header (nodes, seed, replication) followed by a
/// `[schedule]` block of "<time> start|stop|sync <node>",
/// "<time> send <from> <to> <length>" and fault lines
/// "<time> corrupt_chunk|drop_holder|kill_rendezvous". '#' starts a comment.
struct Scenario {
    std::size_t nodes = 3;
    std::uint64_t seed = 1;
    std::size_t replication = 3;
    std::vector<ScenarioEvent> events;  // sorted by time, stable

    static Scenario parse(std::string_view text);
};

struct ScenarioReport {
    std::vector<std::string> log;  // one JSON object per line
    std::size_t sent = 0;
    std::size_t delivered = 0;
    std::size_t queued = 0;
    std::size_t failed = 0;
    std::size_t duplicates = 0;
    std::size_t corrupted_surfaced = 0;
    std::vector<std::string> failures;
    bool ok() const { return failures.empty(); }
};

/// Runs the schedule in order against a fresh Swarm, then checks
/// conservation, byte-exact delivery and that nothing arrived twice.
ScenarioReport run_scenario(const Scenario& scenario);

}  // namespace fybrr::sim
