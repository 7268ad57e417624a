#include "fybrr/node.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <fstream>
#include <sstream>

namespace fybrr {

namespace {

constexpr std::string_view kKeysLabel = "fybrr/keys/v1";
constexpr std::chrono::milliseconds kDirectAckTimeout = 2000ms;
constexpr std::chrono::milliseconds kDirectDialTimeout = 3000ms;

Hash32 peer_keys_key(const PeerId& peer) {
    ByteWriter w;
    w.raw(as_bytes(kKeysLabel)).raw(peer);
    return sha256(w.bytes());
}

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    std::filesystem::path path(p);
    return path.is_relative() && !base.empty() ? base / path : path;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error(ErrorCode::kIo, "cannot read " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

// ---------------------------------------------------------------- config

NodeConfig NodeConfig::parse(std::string_view text, const std::filesystem::path& base) {
    NodeConfig c;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw Error(ErrorCode::kInvalidArgument, "config line " + std::to_string(lineno) + ": expected key=value");
        }
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        auto number = [&](unsigned long max) {
            try {
                std::size_t used = 0;
                unsigned long v = std::stoul(value, &used);
                if (used != value.size() || v > max) throw std::out_of_range(key);
                return v;
            } catch (const std::exception&) {
                throw Error(ErrorCode::kInvalidArgument, "config line " + std::to_string(lineno) + ": bad " + key);
            }
        };
        if (key == "key_file") {
            c.key_file = resolve(base, value);
        } else if (key == "listen") {
            Endpoint::parse(value);
            c.listen = value;
        } else if (key == "advertise") {
            Endpoint::parse(value);
            c.advertise = value;
        } else if (key == "rendezvous") {
            if (!value.empty()) Endpoint::parse(value);
            c.rendezvous = value;
        } else if (key == "swarm_key") {
            c.swarm_key = value;
        } else if (key == "bootstrap") {
            c.bootstrap.clear();
            std::istringstream parts(value);
            std::string part;
            while (std::getline(parts, part, ',')) {
                part = trim(part);
                if (part.empty()) continue;
                Endpoint::parse(part);
                c.bootstrap.push_back(part);
            }
        } else if (key == "replication") {
            c.replication = number(64);
            if (c.replication == 0) throw Error(ErrorCode::kInvalidArgument, "replication must be at least 1");
        } else if (key == "api_port") {
            c.api_port = static_cast<std::uint16_t>(number(65535));
        } else if (key == "data_dir") {
            c.data_dir = resolve(base, value);
        } else if (key == "genesis") {
            c.genesis = resolve(base, value);
        } else if (key == "sync_interval_ms") {
            c.sync_interval = std::chrono::milliseconds(number(24UL * 3600 * 1000));
        } else {
            throw Error(ErrorCode::kInvalidArgument,
                        "config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        }
    }
    if (c.key_file.empty()) throw Error(ErrorCode::kInvalidArgument, "config: key_file is required");
    return c;
}

NodeConfig NodeConfig::load(const std::filesystem::path& file) {
    return parse(read_file(file), file.parent_path());
}

const char* path_name(MessagePath p) { return p == MessagePath::kDirect ? "direct" : "dmq"; }

const char* status_name(OutboundStatus s) {
    switch (s) {
        case OutboundStatus::kPending: return "pending";
        case OutboundStatus::kSentDirect: return "sent_direct";
        case OutboundStatus::kQueued: return "queued";
        case OutboundStatus::kDelivered: return "delivered";
        case OutboundStatus::kFailed: return "failed";
    }
    return "unknown";
}

// ---------------------------------------------------------------- envelope

Bytes Envelope::encode() const {
    ByteWriter w;
    w.raw(msg_id).i64(created_at).str(filename).blob(body);
    return std::move(w).take();
}

Envelope Envelope::decode(ByteView data) {
    ByteReader r(data);
    Envelope e;
    e.msg_id = r.array<16>();
    e.created_at = r.i64();
    e.filename = r.str(255);
    e.body = r.blob(kMaxMessageBytes);
    r.expect_done();
    return e;
}

// ---------------------------------------------------------------- history

namespace {

Bytes encode_history(const HistoryEntry& e) {
    ByteWriter w;
    w.u8(e.outbound ? 1 : 0).raw(e.msg_id).raw(e.peer).blob(e.body).str(e.filename).i64(e.at);
    w.u8(static_cast<std::uint8_t>(e.path)).u8(static_cast<std::uint8_t>(e.status));
    return std::move(w).take();
}

HistoryEntry decode_history(ByteView data) {
    ByteReader r(data);
    HistoryEntry e;
    e.outbound = r.u8() == 1;
    e.msg_id = r.array<16>();
    e.peer = r.array<32>();
    e.body = r.blob(kMaxMessageBytes);
    e.filename = r.str(255);
    e.at = r.i64();
    e.path = static_cast<MessagePath>(r.u8());
    e.status = static_cast<OutboundStatus>(r.u8());
    r.expect_done();
    return e;
}

}  // namespace

History::History(const PeerIdentity& owner, std::optional<std::filesystem::path> file)
    : owner_(owner), file_(std::move(file)) {
    if (!file_ || !std::filesystem::exists(*file_)) return;
    std::ifstream in(*file_);
    std::string line;
    std::size_t bad = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            Bytes raw = from_hex(line);
            if (raw.size() < kNonceBytes) throw Error(ErrorCode::kDecode, "short record");
            SealedBox box{array_from<kNonceBytes>(ByteView(raw).first(kNonceBytes)),
                          Bytes(raw.begin() + kNonceBytes, raw.end())};
            HistoryEntry e = decode_history(open(box, owner_, owner_.enc_public()));
            auto key = std::make_pair(e.outbound, e.msg_id);
            if (auto it = index_.find(key); it != index_.end()) {
                order_[it->second] = std::move(e);
            } else {
                index_[key] = order_.size();
                order_.push_back(std::move(e));
            }
        } catch (const Error&) {
            ++bad;
        }
    }
    if (bad) spdlog::warn("history: skipped {} unreadable records", bad);
}

void History::append(const HistoryEntry& e) {
    std::lock_guard lock(mu_);
    auto key = std::make_pair(e.outbound, e.msg_id);
    if (auto it = index_.find(key); it != index_.end()) {
        order_[it->second] = e;
    } else {
        index_[key] = order_.size();
        order_.push_back(e);
    }
    if (!file_) return;
    SealedBox box = seal(encode_history(e), owner_, owner_.enc_public());
    ByteWriter w;
    w.raw(box.nonce).raw(box.ciphertext);
    std::ofstream out(*file_, std::ios::app);
    out << to_hex(w.bytes()) << "\n";
    out.flush();
    if (!out) throw Error(ErrorCode::kIo, "cannot append to " + file_->string());
}

std::vector<HistoryEntry> History::entries(std::optional<PeerId> peer) const {
    std::lock_guard lock(mu_);
    std::vector<HistoryEntry> out;
    for (const auto& e : order_) {
        if (!peer || e.peer == *peer) out.push_back(e);
    }
    return out;
}

bool History::seen_inbound(const MessageId& id) const {
    std::lock_guard lock(mu_);
    return index_.count({false, id}) != 0;
}

// ---------------------------------------------------------------- node

Node::Node(PeerIdentity identity, NodeConfig config, std::shared_ptr<Clock> clock)
    : identity_(std::move(identity)), config_(std::move(config)), clock_(std::move(clock)),
      digest_(swarm_digest(config_.swarm_key)) {
    if (config_.genesis) {
        Genesis g = decode_genesis_file(read_file(*config_.genesis));
        consensus_ = std::make_unique<Consensus>(g);
    }
    if (config_.data_dir) std::filesystem::create_directories(*config_.data_dir);
    history_ = std::make_unique<History>(
        identity_, config_.data_dir ? std::optional(*config_.data_dir / "history.log") : std::nullopt);
    load_contacts();
}

std::unique_ptr<Node> Node::from_config(const NodeConfig& config) {
    return std::make_unique<Node>(read_key_file(config.key_file), config);
}

Node::~Node() { stop(); }

bool Node::running() const {
    std::lock_guard lock(loop_mu_);
    return running_;
}

std::string Node::endpoint() const { return endpoint_; }

bool Node::is_member(const PeerId& p) const { return !consensus_ || consensus_->state().is_member(p); }

MembershipState Node::membership() const {
    if (!consensus_) return {};
    return consensus_->state();
}

void Node::start() {
    {
        std::lock_guard lock(loop_mu_);
        if (running_) return;
    }
    router_ = std::make_unique<RpcRouter>(digest_);
    server_ = std::make_unique<TcpServer>(
        Endpoint::parse(config_.listen),
        serve_frames([this](const Frame& f) { return router_->handle(f); },
                     [this](std::shared_ptr<Connection> c, Frame hello) {
                         if (hub_) hub_->accept_stream(std::move(c), std::move(hello));
                     }));
    endpoint_ = config_.advertise.empty() ? server_->local().str() : config_.advertise;

    auto transport = std::make_shared<TcpTransport>();
    client_ = std::make_shared<RpcClient>(transport, digest_, NodeInfo{identity_.peer_id(), endpoint_, 0});
    dht_ = std::make_unique<Dht>(identity_, client_, clock_);
    std::optional<std::filesystem::path> store_dir;
    if (config_.data_dir) store_dir = *config_.data_dir / "store";
    store_ = std::make_shared<BlockStore>(clock_, store_dir);
    PinConfig pin_config;
    pin_config.replication = config_.replication;
    pins_ = std::make_unique<PinService>(identity_, store_, *dht_, client_, clock_, pin_config);
    dmq_ = std::make_unique<Dmq>(identity_, *dht_, client_, clock_);
    if (consensus_) {
        auto member = [this](const PeerId& p) { return is_member(p); };
        pins_->set_member_check(member);
        dmq_->set_member_check(member);
        pins_->set_bootstrap_check([this](const PeerId& p) { return membership().bootstrap.count(p) != 0; });
    }
    dht_->attach(*router_);
    pins_->attach(*router_);
    dmq_->attach(*router_);
    router_->on(MsgType::kPropose, [this](const RpcRequest& r) { return on_propose(r); });
    router_->on(MsgType::kBallot, [this](const RpcRequest& r) { return on_ballot(r); });
    router_->on(MsgType::kStateReq, [this](const RpcRequest& r) { return on_state_req(r); });

    if (!config_.rendezvous.empty()) {
        rendezvous_ = std::make_shared<RendezvousClient>(Endpoint::parse(config_.rendezvous), identity_,
                                                         config_.swarm_key, clock_);
        ChannelOptions opts;
        opts.dial_timeout = kDirectDialTimeout;
        hub_ = std::make_unique<DirectHub>(identity_, rendezvous_, endpoint_, clock_, opts);
        hub_->set_message_handler([this](const PeerId& from, Bytes body) { on_direct(from, std::move(body)); });
        if (consensus_) hub_->set_authorizer([this](const PeerId& p) { return is_member(p); });
        rendezvous_->set_relay_handler([this](const PeerId& from, Bytes p) { hub_->on_signal(from, std::move(p)); });
        if (consensus_) {
            try {
                consensus_->sync(rendezvous_->fetch_membership());
            } catch (const Error& e) {
                spdlog::warn("membership fetch from rendezvous failed: {}", e.what());
            }
        }
        try {
            rendezvous_->start(endpoint_);
        } catch (const Error& e) {
            spdlog::warn("rendezvous refused registration: {}; direct messaging is unavailable", e.what());
        }
    }

    if (!config_.bootstrap.empty()) {
        try {
            dht_->bootstrap(config_.bootstrap);
        } catch (const Error& e) {
            spdlog::warn("{}; will retry", e.what());
        }
        if (consensus_) pull_state(config_.bootstrap);
    }
    announce();

    {
        std::lock_guard lock(loop_mu_);
        running_ = true;
        stopping_ = false;
    }
    try {
        sync_inbox();
    } catch (const Error& e) {
        spdlog::warn("initial inbox sync failed: {}", e.what());
    }
    loop_ = std::thread([this] { maintenance_loop(); });
    spdlog::info("node {} listening on {}", to_hex(identity_.peer_id()).substr(0, 12), endpoint_);
}

void Node::stop() {
    {
        std::lock_guard lock(loop_mu_);
        if (!running_) return;
        stopping_ = true;
    }
    loop_cv_.notify_all();
    if (loop_.joinable()) loop_.join();
    if (rendezvous_) rendezvous_->stop();
    if (server_) server_->stop();
    if (hub_) hub_->stop();
    std::lock_guard lock(loop_mu_);
    running_ = false;
}

// ---------------------------------------------------------------- send

UnixMs Node::next_queue_timestamp() {
    std::lock_guard lock(mu_);
    last_queue_ts_ = std::max(clock_->now(), last_queue_ts_ + 1);
    return last_queue_ts_;
}

void Node::set_status(OutboundMessage& m, OutboundStatus s) {
    m.status = s;
    {
        std::lock_guard lock(mu_);
        outbound_[m.msg_id] = m;
    }
    HistoryEntry h;
    h.outbound = true;
    h.msg_id = m.msg_id;
    h.peer = m.to;
    h.body = m.plaintext;
    h.filename = m.filename;
    h.at = m.created_at;
    h.path = m.manifest ? MessagePath::kDmq : MessagePath::kDirect;
    h.status = s;
    history_->append(h);
    NodeEvent ev;
    ev.kind = NodeEvent::Kind::kStatus;
    ev.status = m;
    emit(ev);
}

OutboundMessage Node::send_message(const PeerId& to, ByteView plaintext, std::string filename, bool allow_direct) {
    if (plaintext.size() > kMaxMessageBytes) throw Error(ErrorCode::kInvalidArgument, "message exceeds 1 MiB");
    if (plaintext.empty() && filename.empty()) throw Error(ErrorCode::kInvalidArgument, "empty message");
    if (to == identity_.peer_id()) throw Error(ErrorCode::kInvalidArgument, "cannot message self");
    if (!running()) throw Error(ErrorCode::kState, "node is not running");

    std::lock_guard order(send_mu_);
    OutboundMessage m;
    m.msg_id = random_array<16>();
    m.to = to;
    m.plaintext.assign(plaintext.begin(), plaintext.end());
    m.filename = std::move(filename);
    m.created_at = clock_->now();
    set_status(m, OutboundStatus::kPending);

    Envelope env{m.msg_id, m.created_at, m.filename, m.plaintext};
    if (allow_direct && try_direct(to, env)) {
        set_status(m, OutboundStatus::kSentDirect);
        return m;
    }
    try {
        queue_fallback(m, env);
        set_status(m, OutboundStatus::kQueued);
    } catch (const Error& e) {
        spdlog::warn("message {} failed: {}", to_hex(m.msg_id), e.what());
        m.error = e.what();
        set_status(m, OutboundStatus::kFailed);
    }
    return m;
}

bool Node::try_direct(const PeerId& to, const Envelope& env) {
    if (!hub_) return false;
    try {
        return hub_->send(to, env.encode(), kDirectAckTimeout);
    } catch (const Error& e) {
        spdlog::debug("direct path to {} unavailable: {}", to_hex(to).substr(0, 12), e.what());
        return false;
    }
}

void Node::queue_fallback(OutboundMessage& m, const Envelope& env) {
    if (dht_->table().size() == 0) throw Error(ErrorCode::kConnectivity, "no swarm peers reachable");
    auto keys = resolve_keys(m.to);
    if (!keys) throw Error(ErrorCode::kNotFound, "recipient public keys are unknown");

    SealedBox box = seal(env.encode(), identity_, keys->enc_public);
    ChunkedPayload chunked = chunk_payload(box.ciphertext, {identity_.enc_public(), m.to, box.nonce});
    std::vector<Chunk> blocks = chunked.chunks;
    blocks.push_back(chunked.manifest.block());
    for (const auto& b : blocks) {
        store_->put(b);
        PinRecord rec = pins_->pin(b.cid, config_.replication, m.to);
        if (rec.degraded) {
            std::size_t remote = rec.holders.size() - rec.holders.count(identity_.peer_id());
            spdlog::warn("block {} has {} remote holders of {} wanted; this node keeps serving it",
                         b.cid.hex().substr(0, 12), remote, config_.replication);
        }
    }
    QueueEntry entry = QueueEntry::make(m.to, chunked.manifest.message_cid, identity_, next_queue_timestamp());
    if (dmq_->enqueue(entry) == 0) throw Error(ErrorCode::kConnectivity, "no queue custodian accepted the entry");
    m.manifest = chunked.manifest.message_cid;
}

// ---------------------------------------------------------------- receive

void Node::deliver(const InboundMessage& m) {
    {
        std::lock_guard lock(mu_);
        inbox_.push_back(m);
    }
    HistoryEntry h;
    h.outbound = false;
    h.msg_id = m.msg_id;
    h.peer = m.from;
    h.body = m.plaintext;
    h.filename = m.filename;
    h.at = m.received_at;
    h.path = m.path;
    h.status = OutboundStatus::kDelivered;
    history_->append(h);
    NodeEvent ev;
    ev.kind = NodeEvent::Kind::kInbound;
    ev.inbound = m;
    emit(ev);
}

void Node::on_direct(const PeerId& from, Bytes body) {
    Envelope env;
    try {
        env = Envelope::decode(body);
    } catch (const Error& e) {
        spdlog::warn("malformed direct message from {}: {}", to_hex(from).substr(0, 12), e.what());
        return;
    }
    std::lock_guard serial(sync_mu_);
    if (history_->seen_inbound(env.msg_id)) return;
    deliver(InboundMessage{env.msg_id, from, std::move(env.body), env.filename, env.created_at, clock_->now(),
                           MessagePath::kDirect});
}

SyncReport Node::sync_inbox() {
    std::lock_guard serial(sync_mu_);
    SyncReport report;
    if (!dmq_) return report;
    for (const auto& e : dmq_->drain()) {
        if (auto m = take_entry(e, report)) {
            deliver(*m);
            report.delivered.push_back(std::move(*m));
        }
    }
    return report;
}

std::optional<InboundMessage> Node::take_entry(const SignedEntry& e, SyncReport& report) {
    const ContentId cid = e.entry.msg_cid;
    auto quarantine = [&](const std::string& why) -> std::optional<InboundMessage> {
        bool first;
        {
            std::lock_guard lock(mu_);
            first = quarantined_.insert(cid).second;
        }
        if (first) spdlog::error("quarantined message {}: {}", cid.hex().substr(0, 12), why);
        ++report.quarantined;
        return std::nullopt;
    };
    {
        std::lock_guard lock(mu_);
        if (quarantined_.count(cid)) {
            ++report.quarantined;
            return std::nullopt;
        }
    }
    auto pending = [&](const std::string& why) -> std::optional<InboundMessage> {
        spdlog::info("message {} left pending: {}", cid.hex().substr(0, 12), why);
        ++report.pending;
        return std::nullopt;
    };

    FetchResult mf = pins_->fetch(cid);
    if (!mf.chunk) return pending("manifest unavailable");
    Manifest man;
    try {
        man = Manifest::decode(mf.chunk->data);
    } catch (const Error& err) {
        return quarantine(std::string("bad manifest: ") + err.what());
    }
    if (man.recipient_peer_id != identity_.peer_id()) return quarantine("manifest names another recipient");
    if (man.sender_public != e.sender_keys.enc_public) return quarantine("manifest sender key does not match entry");

    std::vector<Chunk> chunks;
    for (const auto& c : man.chunk_cids) {
        FetchResult fr = pins_->fetch(c);
        if (!fr.chunk) return pending("chunk " + c.hex().substr(0, 12) + " unavailable");
        chunks.push_back(std::move(*fr.chunk));
    }
    Bytes ciphertext;
    try {
        ciphertext = reassemble(man, chunks);
    } catch (const Error& err) {
        return pending(err.what());
    }
    Envelope env;
    try {
        env = Envelope::decode(open(SealedBox{man.nonce, std::move(ciphertext)}, identity_, man.sender_public));
    } catch (const Error& err) {
        return quarantine(std::string("cannot open sealed box: ") + err.what());
    }
    remember_keys(e.entry.sender, e.sender_keys);

    bool duplicate = history_->seen_inbound(env.msg_id);
    dmq_->ack(cid);
    for (const auto& c : man.chunk_cids) pins_->release_everywhere(c);
    pins_->release_everywhere(cid);
    if (duplicate) {
        ++report.duplicates;
        return std::nullopt;
    }
    return InboundMessage{env.msg_id, e.entry.sender, std::move(env.body), env.filename, env.created_at,
                          clock_->now(), MessagePath::kDmq};
}

std::size_t Node::refresh_delivery() {
    std::vector<OutboundMessage> queued;
    {
        std::lock_guard lock(mu_);
        for (const auto& [id, m] : outbound_) {
            if (m.status == OutboundStatus::kQueued) queued.push_back(m);
        }
    }
    std::size_t n = 0;
    for (auto& m : queued) {
        if (dmq_->status(m.to, *m.manifest) == DeliveryState::kDelivered) {
            set_status(m, OutboundStatus::kDelivered);
            ++n;
        }
    }
    return n;
}

void Node::gc_cycle() {
    UnixMs now = clock_->now();
    pins_->gc(now);
    dht_->expire();
    dmq_->expire();
}

std::optional<OutboundMessage> Node::outbound(const MessageId& id) const {
    std::lock_guard lock(mu_);
    auto it = outbound_.find(id);
    if (it == outbound_.end()) return std::nullopt;
    return it->second;
}

std::vector<HistoryEntry> Node::history(std::optional<PeerId> peer) const { return history_->entries(peer); }

std::vector<InboundMessage> Node::inbox() const {
    std::lock_guard lock(mu_);
    return inbox_;
}

// ---------------------------------------------------------------- contacts

void Node::load_contacts() {
    if (!config_.data_dir) return;
    auto file = *config_.data_dir / "contacts.txt";
    if (!std::filesystem::exists(file)) return;
    std::ifstream in(file);
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string peer_hex, keys_hex, name;
        if (!(ls >> peer_hex >> keys_hex)) continue;
        std::getline(ls, name);
        try {
            Contact c;
            c.peer = array_from_hex<32>(peer_hex);
            c.name = trim(name);
            if (keys_hex != "-") {
                Bytes raw = from_hex(keys_hex);
                ByteReader r(raw);
                PeerKeys k = decode_peer_keys(r);
                if (k.certifies(c.peer)) c.keys = k;
            }
            contacts_[c.peer] = c;
        } catch (const Error&) {
            spdlog::warn("contacts: skipping unreadable line");
        }
    }
}

void Node::save_contacts() const {
    if (!config_.data_dir) return;
    auto file = *config_.data_dir / "contacts.txt";
    auto tmp = file;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        for (const auto& [peer, c] : contacts_) {
            std::string keys = "-";
            if (c.keys) {
                ByteWriter w;
                encode(w, *c.keys);
                keys = to_hex(w.bytes());
            }
            out << to_hex(peer) << " " << keys << " " << c.name << "\n";
        }
    }
    std::filesystem::rename(tmp, file);
}

void Node::add_contact(const PeerId& peer, const std::string& name) {
    std::lock_guard lock(mu_);
    auto& c = contacts_[peer];
    c.peer = peer;
    c.name = name;
    save_contacts();
}

std::vector<Contact> Node::contacts() const {
    std::lock_guard lock(mu_);
    std::vector<Contact> out;
    for (const auto& [peer, c] : contacts_) out.push_back(c);
    return out;
}

void Node::remember_keys(const PeerId& peer, const PeerKeys& keys) {
    if (!keys.certifies(peer)) return;
    std::lock_guard lock(mu_);
    auto it = contacts_.find(peer);
    if (it == contacts_.end()) return;  // only named contacts are persisted
    if (it->second.keys == keys) return;
    it->second.keys = keys;
    save_contacts();
}

std::optional<PeerKeys> Node::resolve_keys(const PeerId& peer) {
    {
        std::lock_guard lock(mu_);
        auto it = contacts_.find(peer);
        if (it != contacts_.end() && it->second.keys) return it->second.keys;
    }
    std::optional<PeerKeys> keys;
    if (rendezvous_) {
        try {
            keys = rendezvous_->directory(peer);
        } catch (const Error& e) {
            spdlog::debug("directory lookup failed: {}", e.what());
        }
    }
    if (!keys && dht_) {
        for (const auto& rec : dht_->find_value(peer_keys_key(peer), RecordKind::kPeerKeys)) {
            if (rec.publisher == peer) {
                keys = rec.publisher_keys;
                break;
            }
        }
    }
    if (keys) remember_keys(peer, *keys);
    return keys;
}

std::vector<std::pair<Contact, bool>> Node::presence() {
    std::vector<std::pair<Contact, bool>> out;
    for (const auto& c : contacts()) {
        bool online = false;
        if (rendezvous_) {
            try {
                online = rendezvous_->lookup(c.peer).has_value();
            } catch (const Error&) {
            }
        }
        out.emplace_back(c, online);
    }
    return out;
}

// ---------------------------------------------------------------- events

std::size_t Node::subscribe(Subscriber s) {
    std::lock_guard lock(mu_);
    std::size_t id = next_subscriber_++;
    subscribers_[id] = std::move(s);
    return id;
}

void Node::unsubscribe(std::size_t id) {
    std::lock_guard lock(mu_);
    subscribers_.erase(id);
}

void Node::emit(const NodeEvent& e) {
    std::vector<Subscriber> subs;
    {
        std::lock_guard lock(mu_);
        for (const auto& [id, s] : subscribers_) subs.push_back(s);
    }
    for (auto& s : subs) {
        try {
            s(e);
        } catch (const std::exception& ex) {
            spdlog::warn("event subscriber failed: {}", ex.what());
        }
    }
}

// ---------------------------------------------------------------- governance

namespace {

Error public_swarm() {
    return Error(ErrorCode::kState, "this swarm has no genesis record, so there is no membership to vote on");
}

}  // namespace

std::vector<ProposalView> Node::proposals() const {
    if (!consensus_) return {};
    return consensus_->proposals(clock_->now());
}

SignedProposal Node::propose(ProposalKind kind, Subject subject, UnixMs ttl_ms) {
    if (!consensus_) throw public_swarm();
    auto sp = consensus_->propose(kind, std::move(subject), identity_, clock_->now(), ttl_ms);
    ByteWriter w;
    encode(w, sp);
    gossip(MsgType::kPropose, w.bytes());
    if (auto v = consensus_->proposal(sp.proposal.id(), clock_->now())) {
        NodeEvent ev;
        ev.kind = NodeEvent::Kind::kProposal;
        ev.proposal = v;
        emit(ev);
    }
    return sp;
}

Ballot Node::vote(const Hash32& proposal_id, Choice choice) {
    if (!consensus_) throw public_swarm();
    Ballot b = consensus_->cast_vote(proposal_id, choice, identity_, clock_->now());
    ByteWriter w;
    encode(w, b);
    gossip(MsgType::kBallot, w.bytes());
    after_consensus_change();
    if (auto v = consensus_->proposal(proposal_id, clock_->now())) {
        NodeEvent ev;
        ev.kind = NodeEvent::Kind::kProposal;
        ev.proposal = v;
        emit(ev);
    }
    return b;
}

std::optional<std::string> Node::endpoint_of(const PeerId& peer) {
    for (const auto& n : dht_->table().all()) {
        if (n.peer_id == peer) return n.endpoint;
    }
    if (rendezvous_) {
        try {
            if (auto reg = rendezvous_->lookup(peer)) return reg->endpoint;
        } catch (const Error&) {
        }
    }
    return std::nullopt;
}

void Node::gossip(MsgType type, ByteView body) {
    if (!consensus_) return;
    for (const auto& peer : consensus_->state().members) {
        if (peer == identity_.peer_id()) continue;
        auto ep = endpoint_of(peer);
        if (!ep) continue;
        client_->call(*ep, type, body, 1000ms);
    }
}

void Node::after_consensus_change() {
    if (!consensus_) return;
    auto applied = consensus_->settle(clock_->now());
    if (applied.empty()) return;
    spdlog::info("membership advanced to epoch {}", consensus_->state().epoch);
    if (rendezvous_) {
        try {
            rendezvous_->push_membership(consensus_->log());
        } catch (const Error& e) {
            spdlog::warn("membership push to rendezvous failed: {}", e.what());
        }
    }
    for (const auto& id : applied) {
        if (auto v = consensus_->proposal(id, clock_->now())) {
            NodeEvent ev;
            ev.kind = NodeEvent::Kind::kProposal;
            ev.proposal = v;
            emit(ev);
        }
    }
}

std::optional<Frame> Node::on_propose(const RpcRequest& req) {
    if (!consensus_) return error_frame("public swarm");
    ByteReader r(req.body);
    SignedProposal sp = decode_signed_proposal(r);
    bool fresh = consensus_->receive_proposal(sp, clock_->now());
    if (!fresh && sp.proposal.epoch > consensus_->state().epoch) {
        pull_state({req.sender.endpoint});
        fresh = consensus_->receive_proposal(sp, clock_->now());
    }
    if (fresh) {
        if (auto v = consensus_->proposal(sp.proposal.id(), clock_->now())) {
            NodeEvent ev;
            ev.kind = NodeEvent::Kind::kProposal;
            ev.proposal = v;
            emit(ev);
        }
    }
    ByteWriter w;
    w.u8(fresh ? 1 : 0);
    return Frame{MsgType::kGossipOk, std::move(w).take()};
}

std::optional<Frame> Node::on_ballot(const RpcRequest& req) {
    if (!consensus_) return error_frame("public swarm");
    ByteReader r(req.body);
    Ballot b = decode_ballot(r);
    BallotResult res = consensus_->receive_ballot(b, clock_->now());
    if (res == BallotResult::kRejected && b.epoch > consensus_->state().epoch) {
        pull_state({req.sender.endpoint});
        res = consensus_->receive_ballot(b, clock_->now());
    }
    if (res == BallotResult::kCounted) {
        after_consensus_change();
        if (auto v = consensus_->proposal(b.proposal_id, clock_->now())) {
            NodeEvent ev;
            ev.kind = NodeEvent::Kind::kProposal;
            ev.proposal = v;
            emit(ev);
        }
    }
    ByteWriter w;
    w.u8(res == BallotResult::kCounted ? 1 : 0);
    return Frame{MsgType::kGossipOk, std::move(w).take()};
}

std::optional<Frame> Node::on_state_req(const RpcRequest&) {
    if (!consensus_) return error_frame("public swarm");
    ByteWriter w;
    encode(w, consensus_->log());
    return Frame{MsgType::kStateResp, std::move(w).take()};
}

void Node::pull_state(const std::vector<std::string>& endpoints) {
    if (!consensus_) return;
    for (const auto& ep : endpoints) {
        if (ep == endpoint_) continue;
        auto resp = client_->call(ep, MsgType::kStateReq, {}, 2000ms);
        if (!resp || resp->type != MsgType::kStateResp) continue;
        try {
            ByteReader r(resp->payload);
            if (consensus_->sync(decode_log(r))) {
                spdlog::info("adopted membership log at epoch {}", consensus_->state().epoch);
            }
        } catch (const Error& e) {
            spdlog::warn("rejected membership log from {}: {}", ep, e.what());
        }
    }
}

// ---------------------------------------------------------------- maintenance

void Node::maintenance_loop() {
    using Steady = std::chrono::steady_clock;
    auto last_sync = Steady::now();
    auto last_maintenance = Steady::now();
    auto tick = std::min(config_.sync_interval, config_.maintenance_interval);
    for (;;) {
        {
            std::unique_lock lock(loop_mu_);
            loop_cv_.wait_for(lock, tick, [&] { return stopping_; });
            if (stopping_) return;
        }
        try {
            if (Steady::now() - last_maintenance >= config_.maintenance_interval) {
                last_maintenance = Steady::now();
                maintain();
            }
            if (Steady::now() - last_sync >= config_.sync_interval) {
                last_sync = Steady::now();
                sync_inbox();
            }
        } catch (const std::exception& e) {
            spdlog::warn("maintenance pass failed: {}", e.what());
        }
    }
}

void Node::announce() {
    announced_table_size_ = dht_->table().size();
    dht_->publish(peer_keys_key(identity_.peer_id()), RecordKind::kPeerKeys, {});
}

void Node::maintain() {
    if (dht_->table().size() == 0 && !config_.bootstrap.empty()) {
        dht_->bootstrap(config_.bootstrap);
    }
    if (dht_->table().size() != announced_table_size_.load()) announce();
    dht_->republish();
    dmq_->replicate();
    gc_cycle();
    if (consensus_) {
        // Anti-entropy: re-offer what is still open so late joiners catch up.
        for (const auto& v : consensus_->proposals(clock_->now())) {
            if (v.outcome != Outcome::kPending) continue;
            ByteWriter w;
            encode(w, v.proposal);
            gossip(MsgType::kPropose, w.bytes());
            for (const auto& b : consensus_->ballots(v.id)) {
                ByteWriter bw;
                encode(bw, b);
                gossip(MsgType::kBallot, bw.bytes());
            }
        }
        after_consensus_change();
    }
    refresh_delivery();
}

}  // namespace fybrr
