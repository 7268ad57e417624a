#include "fybrr/sim.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace fybrr::sim {

namespace {

constexpr auto kManualInterval = std::chrono::hours(1);

PeerIdentity sim_identity(std::uint64_t seed, std::size_t index) {
    ByteWriter w;
    w.raw(as_bytes(std::string_view("fybrr/sim-identity"))).u64(seed).u64(index);
    Hash32 h = sha256(w.bytes());
    return generate_identity(ByteView(h));
}

std::int64_t unix_us() {
    return std::chrono::duration_cast<std::chrono::microseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

}  // namespace

// ---------------------------------------------------------------- swarm

Swarm::Swarm(SwarmOptions options) : options_(std::move(options)) {
    if (options_.nodes == 0) throw Error(ErrorCode::kInvalidArgument, "a swarm needs at least one node");
    root_ = std::filesystem::temp_directory_path() / ("fybrr-sim-" + to_hex(random_array<6>()));
    std::filesystem::create_directories(root_);

    for (std::size_t i = 0; i < options_.nodes; ++i) {
        Slot s{sim_identity(options_.seed, i), {}, nullptr};
        slots_.push_back(std::move(s));
    }
    if (options_.private_swarm) {
        genesis_ = Genesis::make(slots_[0].identity, system_clock()->now());
        std::ofstream(root_ / "genesis.txt") << encode_genesis_file(*genesis_);
    }
    if (options_.rendezvous) restart_rendezvous();

    for (std::size_t i = 0; i < options_.nodes; ++i) {
        slots_[i].config = config_for(i);
        restart(i);
    }
    // Later joiners are unknown to earlier nodes until they are contacted.
    for (auto& s : slots_) s.node->dht().refresh();
    // Background maintenance is off by default, so announce keys once the
    // tables are full.
    for (auto& s : slots_) s.node->announce();
}

Swarm::~Swarm() {
    for (auto& s : slots_) s.node.reset();
    rendezvous_.reset();
    std::error_code ec;
    std::filesystem::remove_all(root_, ec);
}

NodeConfig Swarm::config_for(std::size_t i) const {
    NodeConfig c;
    auto dir = root_ / ("node" + std::to_string(i));
    c.key_file = dir / "identity.key";
    c.data_dir = dir;
    c.swarm_key = options_.swarm_key;
    c.replication = options_.replication;
    if (options_.rendezvous) c.rendezvous = rendezvous_at_.str();
    if (genesis_) c.genesis = root_ / "genesis.txt";
    if (!options_.background) {
        c.sync_interval = kManualInterval;
        c.maintenance_interval = kManualInterval;
    }
    return c;
}

Node& Swarm::node(std::size_t i) {
    auto& s = slots_.at(i);
    if (!s.node) throw Error(ErrorCode::kState, "sim node " + std::to_string(i) + " is stopped");
    return *s.node;
}

void Swarm::stop(std::size_t i) { slots_.at(i).node.reset(); }

void Swarm::restart(std::size_t i) {
    auto& s = slots_.at(i);
    if (s.node) return;
    s.config.bootstrap.clear();
    for (std::size_t j = 0; j < slots_.size(); ++j) {
        if (j != i && slots_[j].node) {
            s.config.bootstrap.push_back(slots_[j].node->endpoint());
            break;
        }
    }
    s.node = std::make_unique<Node>(s.identity, s.config);
    s.node->subscribe([this, i](const NodeEvent& ev) {
        if (observer_) observer_(i, ev);
    });
    s.node->start();
    // Pin the port so a later restart comes back at the same address.
    s.config.listen = s.node->endpoint();
}

void Swarm::set_observer(std::function<void(std::size_t, const NodeEvent&)> observer) {
    observer_ = std::move(observer);
}

void Swarm::kill_rendezvous() { rendezvous_.reset(); }

void Swarm::restart_rendezvous() {
    if (rendezvous_) return;
    RendezvousConfig rc;
    rc.swarm_key = options_.swarm_key;
    rc.genesis = genesis_;
    Endpoint bind = rendezvous_at_.port ? rendezvous_at_ : Endpoint::parse("127.0.0.1:0");
    rendezvous_ = std::make_unique<RendezvousServer>(bind, rc);
    rendezvous_at_ = rendezvous_->local();
}

void Swarm::gc_all() {
    for (auto& s : slots_) {
        if (s.node) s.node->gc_cycle();
    }
}

std::size_t Swarm::total_blocks() {
    std::size_t n = 0;
    for (auto& s : slots_) {
        if (s.node) n += s.node->store().size();
    }
    return n;
}

std::size_t Swarm::holders_of(const ContentId& cid) {
    std::size_t n = 0;
    for (auto& s : slots_) {
        if (s.node && s.node->store().has(cid)) ++n;
    }
    return n;
}

// ---------------------------------------------------------------- benchmark

std::string message_text(std::mt19937_64& rng, std::size_t length) {
    static constexpr std::string_view kAlphabet =
        "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .,;:!?-";
    std::uniform_int_distribution<std::size_t> pick(0, kAlphabet.size() - 1);
    std::string s(length, ' ');
    for (auto& c : s) c = kAlphabet[pick(rng)];
    return s;
}

std::size_t message_length(std::size_t i, std::size_t n, std::size_t from, std::size_t to) {
    if (n <= 1) return from;
    double step = (static_cast<double>(to) - static_cast<double>(from)) / static_cast<double>(n - 1);
    return static_cast<std::size_t>(std::llround(static_cast<double>(from) + step * static_cast<double>(i)));
}

BenchSummary summarize(const std::vector<LatencySample>& samples, double total_ms) {
    BenchSummary s;
    s.count = samples.size();
    s.total_ms = total_ms;
    if (samples.empty()) return s;
    std::vector<double> lat;
    for (const auto& x : samples) lat.push_back(x.latency_ms());
    std::sort(lat.begin(), lat.end());
    double sum = 0;
    for (double v : lat) sum += v;
    s.mean_ms = sum / static_cast<double>(lat.size());
    // Nearest-rank percentiles.
    auto rank = [&](double p) {
        auto r = static_cast<std::size_t>(std::ceil(p * static_cast<double>(lat.size())));
        return lat[std::clamp<std::size_t>(r, 1, lat.size()) - 1];
    };
    s.p50_ms = rank(0.50);
    s.p99_ms = rank(0.99);
    return s;
}

BenchResult run_benchmark(const BenchOptions& options) {
    SwarmOptions so;
    so.nodes = 2;
    so.seed = options.seed;
    so.replication = 1;
    Swarm swarm(so);
    Node& sender = swarm.node(0);
    Node& receiver = swarm.node(1);

    std::mutex mu;
    std::condition_variable cv;
    std::map<MessageId, std::pair<std::int64_t, Bytes>> arrived;
    auto sub = receiver.subscribe([&](const NodeEvent& ev) {
        if (ev.kind != NodeEvent::Kind::kInbound || !ev.inbound) return;
        std::int64_t at = unix_us();
        std::lock_guard lock(mu);
        arrived.emplace(ev.inbound->msg_id, std::make_pair(at, ev.inbound->plaintext));
        cv.notify_all();
    });

    BenchResult result;
    std::mt19937_64 rng(options.seed);
    const bool direct = options.path == MessagePath::kDirect;
    std::int64_t first_send = 0;
    std::int64_t last_recv = 0;
    for (std::size_t i = 0; i < options.messages; ++i) {
        std::size_t len = message_length(i, options.messages, options.min_len, options.max_len);
        std::string text = message_text(rng, len);
        std::int64_t sent_at = unix_us();
        if (i == 0) first_send = sent_at;
        OutboundMessage out = sender.send_message(swarm.peer(1), as_bytes(text), {}, direct);
        if (!direct && out.status == OutboundStatus::kQueued) receiver.sync_inbox();

        std::unique_lock lock(mu);
        bool got = cv.wait_for(lock, 5s, [&] { return arrived.count(out.msg_id) != 0; });
        if (!got) {
            ++result.undelivered;
            result.errors.push_back("message " + std::to_string(i) + " not received (status " +
                                    status_name(out.status) + ")");
            continue;
        }
        const auto& [recv_at, body] = arrived[out.msg_id];
        if (body != Bytes(text.begin(), text.end())) {
            result.errors.push_back("message " + std::to_string(i) + " arrived altered");
        }
        LatencySample sample;
        sample.msg_index = i;
        sample.length_chars = len;
        sample.path = out.status == OutboundStatus::kSentDirect ? MessagePath::kDirect : MessagePath::kDmq;
        sample.send_us = sent_at;
        sample.recv_us = recv_at;
        last_recv = std::max(last_recv, recv_at);
        result.samples.push_back(sample);
    }
    receiver.unsubscribe(sub);
    result.summary = summarize(result.samples, static_cast<double>(last_recv - first_send) / 1000.0);
    return result;
}

std::string samples_csv(const std::vector<LatencySample>& samples) {
    auto sorted = samples;
    std::sort(sorted.begin(), sorted.end(),
              [](const LatencySample& a, const LatencySample& b) { return a.msg_index < b.msg_index; });
    std::ostringstream out;
    out << "msg_index,length_chars,path,send_ts,recv_ts,latency_ms\n";
    out << std::fixed << std::setprecision(3);
    for (const auto& s : sorted) {
        out << s.msg_index << ',' << s.length_chars << ',' << path_name(s.path) << ',' << s.send_ts_ms() << ','
            << s.recv_ts_ms() << ',' << s.latency_ms() << '\n';
    }
    return out.str();
}

void export_csv(const std::vector<LatencySample>& samples, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
    out << samples_csv(samples);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
}

// ---------------------------------------------------------------- scenarios

namespace {

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::size_t scenario_number(const std::string& token, int lineno) {
    try {
        std::size_t used = 0;
        unsigned long long v = std::stoull(token, &used);
        if (used != token.size()) throw std::invalid_argument(token);
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw Error(ErrorCode::kInvalidArgument,
                    "scenario line " + std::to_string(lineno) + ": '" + token + "' is not a number");
    }
}

}  // namespace

Scenario Scenario::parse(std::string_view text) {
    Scenario sc;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    bool in_schedule = false;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line.substr(0, line.find('#')));
        if (t.empty()) continue;
        if (t == "[schedule]") {
            in_schedule = true;
            continue;
        }
        auto bad = [&](const std::string& why) {
            return Error(ErrorCode::kInvalidArgument, "scenario line " + std::to_string(lineno) + ": " + why);
        };
        if (!in_schedule) {
            auto eq = t.find('=');
            if (eq == std::string::npos) throw bad("expected key=value before [schedule]");
            std::string key = trim(t.substr(0, eq));
            std::size_t value = scenario_number(trim(t.substr(eq + 1)), lineno);
            if (key == "nodes") {
                if (value == 0 || value > 64) throw bad("nodes must be 1..64");
                sc.nodes = value;
            } else if (key == "seed") {
                sc.seed = value;
            } else if (key == "replication") {
                if (value == 0) throw bad("replication must be at least 1");
                sc.replication = value;
            } else {
                throw bad("unknown key '" + key + "'");
            }
            continue;
        }
        std::istringstream parts(t);
        std::vector<std::string> tok;
        for (std::string w; parts >> w;) tok.push_back(w);
        if (tok.size() < 2) throw bad("expected '<time> <action> ...'");
        ScenarioEvent ev;
        ev.time = static_cast<std::int64_t>(scenario_number(tok[0], lineno));
        const std::string& action = tok[1];
        auto args = [&](std::size_t n) {
            if (tok.size() != n + 2) throw bad(action + " takes " + std::to_string(n) + " argument(s)");
        };
        auto node_arg = [&](std::size_t at) {
            std::size_t v = scenario_number(tok[at], lineno);
            if (v >= sc.nodes) throw bad("node " + tok[at] + " is out of range");
            return v;
        };
        if (action == "start" || action == "stop" || action == "sync") {
            args(1);
            ev.kind = action == "start"  ? ScenarioEvent::Kind::kStart
                      : action == "stop" ? ScenarioEvent::Kind::kStop
                                         : ScenarioEvent::Kind::kSync;
            ev.node = node_arg(2);
        } else if (action == "send") {
            args(3);
            ev.kind = ScenarioEvent::Kind::kSend;
            ev.node = node_arg(2);
            ev.to = node_arg(3);
            ev.length = scenario_number(tok[4], lineno);
            if (ev.node == ev.to) throw bad("a node cannot message itself");
            if (ev.length == 0 || ev.length > kMaxMessageBytes) throw bad("length must be 1..1048576");
        } else if (action == "corrupt_chunk") {
            args(0);
            ev.kind = ScenarioEvent::Kind::kCorruptChunk;
        } else if (action == "drop_holder") {
            args(0);
            ev.kind = ScenarioEvent::Kind::kDropHolder;
        } else if (action == "kill_rendezvous") {
            args(0);
            ev.kind = ScenarioEvent::Kind::kKillRendezvous;
        } else {
            throw bad("unknown action '" + action + "'");
        }
        sc.events.push_back(ev);
    }
    std::stable_sort(sc.events.begin(), sc.events.end(),
                     [](const ScenarioEvent& a, const ScenarioEvent& b) { return a.time < b.time; });
    return sc;
}

ScenarioReport run_scenario(const Scenario& scenario) {
    struct Sent {
        std::size_t from = 0;
        std::size_t to = 0;
        Bytes plaintext;
        OutboundStatus status = OutboundStatus::kPending;
    };
    ScenarioReport report;
    std::map<MessageId, Sent> sent;
    std::mutex mu;
    std::map<MessageId, std::size_t> arrivals;
    std::map<MessageId, std::pair<std::size_t, Bytes>> received;  // first arrival: node, body

    SwarmOptions so;
    so.nodes = scenario.nodes;
    so.seed = scenario.seed;
    so.replication = scenario.replication;
    Swarm swarm(so);
    std::mt19937_64 rng(scenario.seed);

    swarm.set_observer([&](std::size_t i, const NodeEvent& ev) {
        if (ev.kind != NodeEvent::Kind::kInbound || !ev.inbound) return;
        std::lock_guard lock(mu);
        if (arrivals[ev.inbound->msg_id]++ == 0) received[ev.inbound->msg_id] = {i, ev.inbound->plaintext};
    });

    auto log = [&](const ScenarioEvent& ev, nlohmann::json j) {
        j["t"] = ev.time;
        report.log.push_back(j.dump());
    };
    bool faults = false;

    for (const auto& ev : scenario.events) {
        switch (ev.kind) {
            case ScenarioEvent::Kind::kStart:
                swarm.restart(ev.node);
                log(ev, {{"event", "start"}, {"node", ev.node}});
                break;
            case ScenarioEvent::Kind::kStop:
                swarm.stop(ev.node);
                log(ev, {{"event", "stop"}, {"node", ev.node}});
                break;
            case ScenarioEvent::Kind::kSync: {
                if (!swarm.alive(ev.node)) {
                    log(ev, {{"event", "sync"}, {"node", ev.node}, {"skipped", "node stopped"}});
                    break;
                }
                SyncReport r = swarm.node(ev.node).sync_inbox();
                log(ev, {{"event", "sync"},
                         {"node", ev.node},
                         {"delivered", r.delivered.size()},
                         {"pending", r.pending},
                         {"quarantined", r.quarantined},
                         {"duplicates", r.duplicates}});
                break;
            }
            case ScenarioEvent::Kind::kSend: {
                if (!swarm.alive(ev.node)) {
                    log(ev, {{"event", "send"}, {"from", ev.node}, {"skipped", "sender stopped"}});
                    break;
                }
                std::string text = message_text(rng, ev.length);
                OutboundMessage out = swarm.node(ev.node).send_message(swarm.peer(ev.to), as_bytes(text));
                sent[out.msg_id] = Sent{ev.node, ev.to, out.plaintext, out.status};
                ++report.sent;
                log(ev, {{"event", "send"},
                         {"from", ev.node},
                         {"to", ev.to},
                         {"length", ev.length},
                         {"msg_id", to_hex(out.msg_id)},
                         {"status", status_name(out.status)}});
                break;
            }
            case ScenarioEvent::Kind::kCorruptChunk: {
                faults = true;
                std::vector<std::pair<std::size_t, ContentId>> blocks;
                for (std::size_t i = 0; i < swarm.size(); ++i) {
                    if (!swarm.alive(i)) continue;
                    for (const auto& cid : swarm.node(i).store().list()) blocks.emplace_back(i, cid);
                }
                if (blocks.empty()) {
                    log(ev, {{"event", "corrupt_chunk"}, {"skipped", "no stored blocks"}});
                    break;
                }
                auto [holder, cid] = blocks[std::uniform_int_distribution<std::size_t>(0, blocks.size() - 1)(rng)];
                swarm.node(holder).store().corrupt_for_test(cid);
                log(ev, {{"event", "corrupt_chunk"}, {"node", holder}, {"cid", cid.hex()}});
                break;
            }
            case ScenarioEvent::Kind::kDropHolder: {
                faults = true;
                std::vector<std::size_t> holders;
                for (std::size_t i = 0; i < swarm.size(); ++i) {
                    if (swarm.alive(i) && swarm.node(i).store().size() > 0) holders.push_back(i);
                }
                if (holders.empty()) {
                    log(ev, {{"event", "drop_holder"}, {"skipped", "no holders"}});
                    break;
                }
                std::size_t victim = holders[std::uniform_int_distribution<std::size_t>(0, holders.size() - 1)(rng)];
                swarm.stop(victim);
                log(ev, {{"event", "drop_holder"}, {"node", victim}});
                break;
            }
            case ScenarioEvent::Kind::kKillRendezvous:
                faults = true;
                swarm.kill_rendezvous();
                log(ev, {{"event", "kill_rendezvous"}});
                break;
        }
    }

    std::lock_guard lock(mu);
    for (const auto& [id, s] : sent) {
        bool got = arrivals.count(id) != 0;
        if (got) {
            ++report.delivered;
            const auto& [node, body] = received[id];
            if (node != s.to || body != s.plaintext) {
                ++report.corrupted_surfaced;
                report.failures.push_back("message " + to_hex(id) + " surfaced altered or at the wrong node");
            }
            if (s.status == OutboundStatus::kFailed) {
                report.failures.push_back("message " + to_hex(id) + " reported failed but was delivered");
            }
        } else if (s.status == OutboundStatus::kSentDirect) {
            report.failures.push_back("message " + to_hex(id) + " was acknowledged but never surfaced");
        } else if (s.status == OutboundStatus::kQueued) {
            ++report.queued;
        } else {
            ++report.failed;
        }
    }
    for (const auto& [id, n] : arrivals) {
        if (n > 1) report.duplicates += n - 1;
        if (!sent.count(id)) report.failures.push_back("unknown message " + to_hex(id) + " surfaced");
    }
    if (report.delivered + report.queued + report.failed != report.sent) {
        report.failures.push_back("sent != delivered + queued + failed");
    }
    if (report.duplicates) report.failures.push_back(std::to_string(report.duplicates) + " duplicate deliveries");
    if (!faults && report.failed) {
        report.failures.push_back(std::to_string(report.failed) + " messages failed without any injected fault");
    }
    nlohmann::json summary = {{"event", "summary"},          {"sent", report.sent},
                              {"delivered", report.delivered}, {"queued", report.queued},
                              {"failed", report.failed},       {"duplicates", report.duplicates},
                              {"corrupted_surfaced", report.corrupted_surfaced}};
    report.log.push_back(summary.dump());
    return report;
}

}  // namespace fybrr::sim
