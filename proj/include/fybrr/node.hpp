#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "fybrr/consensus.hpp"
#include "fybrr/content_store.hpp"
#include "fybrr/dht.hpp"
#include "fybrr/direct_channel.hpp"
#include "fybrr/dmq.hpp"
#include "fybrr/rendezvous.hpp"

namespace fybrr {

inline constexpr std::uint16_t kDefaultApiPort = 7480;
inline constexpr std::size_t kMaxMessageBytes = 1u << 20;

/// Line-oriented key=value node configuration. Blank lines and lines
/// starting with '#' are ignored; unknown keys are an error.
struct NodeConfig {
    std::filesystem::path key_file;
    std::string listen = "127.0.0.1:0";
    /// Address registered with the rendezvous server; defaults to the bound listen address.
    std::string advertise;
    std::string rendezvous;
    std::string swarm_key;
    std::vector<std::string> bootstrap;
    std::size_t replication = 3;
    std::uint16_t api_port = kDefaultApiPort;
    std::optional<std::filesystem::path> data_dir;
    std::optional<std::filesystem::path> genesis;
    std::chrono::milliseconds sync_interval = 10s;
    std::chrono::milliseconds maintenance_interval = 5s;

    /// Relative paths resolve against `base`. Throws Error(kInvalidArgument).
    static NodeConfig parse(std::string_view text, const std::filesystem::path& base = {});
    static NodeConfig load(const std::filesystem::path& file);
};

enum class MessagePath : std::uint8_t { kDirect = 1, kDmq = 2 };
enum class OutboundStatus : std::uint8_t { kPending = 0, kSentDirect = 1, kQueued = 2, kDelivered = 3, kFailed = 4 };

const char* path_name(MessagePath p);
const char* status_name(OutboundStatus s);

using MessageId = ByteArray<16>;

/// What travels inside the sealed box (or the direct channel).
struct Envelope {
    MessageId msg_id{};
    UnixMs created_at = 0;
    std::string filename;  // empty for text
    Bytes body;

    bool operator==(const Envelope&) const = default;
    Bytes encode() const;
    static Envelope decode(ByteView data);
};

struct OutboundMessage {
    MessageId msg_id{};
    PeerId to{};
    Bytes plaintext;
    std::string filename;
    UnixMs created_at = 0;
    OutboundStatus status = OutboundStatus::kPending;
    std::optional<ContentId> manifest;  // set once queued
    std::string error;
};

struct InboundMessage {
    MessageId msg_id{};
    PeerId from{};
    Bytes plaintext;
    std::string filename;
    UnixMs created_at = 0;
    UnixMs received_at = 0;
    MessagePath path = MessagePath::kDirect;
};

struct Contact {
    PeerId peer{};
    std::string name;
    std::optional<PeerKeys> keys;
};

/// One entry of the local conversation log.
struct HistoryEntry {
    bool outbound = false;
    MessageId msg_id{};
    PeerId peer{};
    Bytes body;
    std::string filename;
    UnixMs at = 0;
    MessagePath path = MessagePath::kDirect;
    OutboundStatus status = OutboundStatus::kPending;
};

/// Append-only conversation log sealed at rest to the owner's own key.
/// Later records for the same message id supersede earlier ones.
class History {
public:
    History(const PeerIdentity& owner, std::optional<std::filesystem::path> file);

    void append(const HistoryEntry& e);
    std::vector<HistoryEntry> entries(std::optional<PeerId> peer = std::nullopt) const;
    bool seen_inbound(const MessageId& id) const;

private:
    PeerIdentity owner_;
    std::optional<std::filesystem::path> file_;
    mutable std::mutex mu_;
    std::vector<HistoryEntry> order_;
    std::map<std::pair<bool, MessageId>, std::size_t> index_;  // (outbound, id)
};

struct SyncReport {
    std::vector<InboundMessage> delivered;
    std::size_t pending = 0;      // left for a later run (fetch failed)
    std::size_t quarantined = 0;  // failed verification or decryption
    std::size_t duplicates = 0;   // already received on the direct path
};

/// Events pushed to local API subscribers.
struct NodeEvent {
    enum class Kind { kInbound, kStatus, kProposal, kPresence };
    Kind kind = Kind::kInbound;
    std::optional<InboundMessage> inbound;
    std::optional<OutboundMessage> status;
    std::optional<ProposalView> proposal;
    std::optional<std::pair<PeerId, bool>> presence;
};

/// A swarm peer: serves node RPC and inbound channels on one port, keeps its
/// rendezvous presence, holds pins and queue custody for others, and runs
/// the send and receive pipelines.
class Node {
public:
    using Subscriber = std::function<void(const NodeEvent&)>;

    Node(PeerIdentity identity, NodeConfig config, std::shared_ptr<Clock> clock = system_clock());
    /// Reads the key file named in the config; a malformed file throws.
    static std::unique_ptr<Node> from_config(const NodeConfig& config);
    ~Node();
    Node(const Node&) = delete;
    Node& operator=(const Node&) = delete;

    /// Binds, registers, bootstraps, runs an initial inbox sync and starts
    /// the background loops. Throws on bind failure.
    void start();
    void stop();
    bool running() const;

    /// `allow_direct = false` skips the direct attempt (benchmarks of the
    /// store-and-forward path).
    OutboundMessage send_message(const PeerId& to, ByteView plaintext, std::string filename = {},
                                 bool allow_direct = true);
    /// Non-overlapping: a concurrent call waits for the running one.
    SyncReport sync_inbox();
    /// One local maintenance and garbage-collection pass.
    void gc_cycle();
    /// Polls the queue custodians for queued messages and marks delivered ones.
    std::size_t refresh_delivery();

    std::optional<OutboundMessage> outbound(const MessageId& id) const;
    std::vector<HistoryEntry> history(std::optional<PeerId> peer = std::nullopt) const;
    std::vector<InboundMessage> inbox() const;

    void add_contact(const PeerId& peer, const std::string& name);
    std::vector<Contact> contacts() const;
    /// Contacts and their rendezvous presence.
    std::vector<std::pair<Contact, bool>> presence();
    std::optional<PeerKeys> resolve_keys(const PeerId& peer);
    /// Stores this node's key record on the current k closest nodes. Also run
    /// by maintenance whenever the routing table has changed size since the
    /// last announcement, so peers that joined later can seal to us.
    void announce();

    // swarm governance
    bool private_mode() const { return consensus_ != nullptr; }
    SignedProposal propose(ProposalKind kind, Subject subject, UnixMs ttl_ms = kDefaultProposalTtlMs);
    Ballot vote(const Hash32& proposal_id, Choice choice);
    std::vector<ProposalView> proposals() const;
    MembershipState membership() const;
    bool is_member(const PeerId& p) const;

    std::size_t subscribe(Subscriber s);
    void unsubscribe(std::size_t id);

    const PeerIdentity& identity() const { return identity_; }
    const NodeConfig& config() const { return config_; }
    std::string endpoint() const;
    Dht& dht() { return *dht_; }
    BlockStore& store() { return *store_; }
    PinService& pins() { return *pins_; }
    Dmq& dmq() { return *dmq_; }
    DirectHub* hub() { return hub_.get(); }

private:
    bool try_direct(const PeerId& to, const Envelope& env);
    void queue_fallback(OutboundMessage& msg, const Envelope& env);
    std::optional<InboundMessage> take_entry(const SignedEntry& e, SyncReport& report);
    void on_direct(const PeerId& from, Bytes body);
    void deliver(const InboundMessage& m);
    void set_status(OutboundMessage& m, OutboundStatus s);
    void emit(const NodeEvent& e);
    void remember_keys(const PeerId& peer, const PeerKeys& keys);
    void maintenance_loop();
    void maintain();
    std::atomic<std::size_t> announced_table_size_{0};
    void gossip(MsgType type, ByteView body);
    void after_consensus_change();
    std::optional<Frame> on_propose(const RpcRequest& req);
    std::optional<Frame> on_ballot(const RpcRequest& req);
    std::optional<Frame> on_state_req(const RpcRequest& req);
    void pull_state(const std::vector<std::string>& endpoints);
    std::optional<std::string> endpoint_of(const PeerId& peer);
    void load_contacts();
    void save_contacts() const;
    UnixMs next_queue_timestamp();

    PeerIdentity identity_;
    NodeConfig config_;
    std::shared_ptr<Clock> clock_;
    Hash32 digest_;

    std::unique_ptr<Consensus> consensus_;
    std::unique_ptr<RpcRouter> router_;
    std::shared_ptr<RpcClient> client_;
    std::unique_ptr<Dht> dht_;
    std::shared_ptr<BlockStore> store_;
    std::unique_ptr<PinService> pins_;
    std::unique_ptr<Dmq> dmq_;
    std::shared_ptr<RendezvousClient> rendezvous_;
    std::unique_ptr<DirectHub> hub_;
    std::unique_ptr<TcpServer> server_;
    std::unique_ptr<History> history_;
    std::string endpoint_;

    mutable std::mutex mu_;
    std::map<MessageId, OutboundMessage> outbound_;
    std::vector<InboundMessage> inbox_;
    std::map<PeerId, Contact> contacts_;
    std::set<ContentId> quarantined_;
    UnixMs last_queue_ts_ = 0;
    std::map<std::size_t, Subscriber> subscribers_;
    std::size_t next_subscriber_ = 1;

    std::mutex sync_mu_;
    std::mutex send_mu_;  // per-node send order is queue order

    mutable std::mutex loop_mu_;
    std::condition_variable loop_cv_;
    bool running_ = false;
    bool stopping_ = false;
    std::thread loop_;
};

}  // namespace fybrr
