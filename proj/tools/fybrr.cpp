// fybrr: node, rendezvous server, benchmark and a command-line client for a
// running node's local API.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "fybrr/local_api.hpp"
#include "fybrr/node.hpp"
#include "fybrr/rendezvous.hpp"
#include "fybrr/sim.hpp"

using namespace fybrr;
using json = nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct Output {
    bool json_mode = false;

    void object(const json& j, const std::string& plain) const {
        if (json_mode) {
            std::cout << dump_json(j) << "\n";
        } else if (!plain.empty()) {
            std::cout << plain << "\n";
        }
    }
    int fail(const std::string& why, int code = kExitFailure) const {
        std::cerr << "fybrr: " << why << "\n";
        if (json_mode) std::cout << dump_json({{"error", why}, {"exit_code", code}}) << "\n";
        return code;
    }
};

std::uint16_t api_port(std::optional<std::uint16_t> flag) {
    if (flag) return *flag;
    if (const char* env = std::getenv("FYBRR_API_PORT")) {
        try {
            unsigned long v = std::stoul(env);
            if (v > 0 && v <= 65535) return static_cast<std::uint16_t>(v);
        } catch (const std::exception&) {
        }
        throw Error(ErrorCode::kInvalidArgument, std::string("FYBRR_API_PORT is not a port: ") + env);
    }
    return kDefaultApiPort;
}

/// Blocks the termination signals in every thread and waits for one.
class SignalWait {
public:
    SignalWait() {
        sigemptyset(&set_);
        sigaddset(&set_, SIGINT);
        sigaddset(&set_, SIGTERM);
        pthread_sigmask(SIG_BLOCK, &set_, nullptr);
    }
    int wait() {
        int sig = 0;
        sigwait(&set_, &sig);
        return sig;
    }

private:
    sigset_t set_{};
};

json call(std::uint16_t port, json command) {
    ApiClient client(port);
    json reply = client.request(std::move(command));
    if (reply.value("op", "") == "error") throw Error(ErrorCode::kState, reply.value("error", "node reported an error"));
    return reply;
}

std::string short_hex(const std::string& h) { return h.substr(0, 12); }

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::kIo, "cannot read " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
    auto log = spdlog::stderr_color_mt("fybrr");
    spdlog::set_default_logger(log);
    spdlog::set_level(spdlog::level::warn);

    CLI::App app{"fybrr: serverless peer-to-peer encrypted messaging"};
    app.require_subcommand(1);
    Output out;
    std::optional<std::uint16_t> port_flag;
    bool verbose = false;
    app.add_flag("--json", out.json_mode, "One JSON object per output line");
    app.add_option("--api-port", port_flag, "Local API port of the running node (default $FYBRR_API_PORT or 7480)");
    app.add_flag("-v,--verbose", verbose, "Log at info level");

    // keygen
    auto* keygen = app.add_subcommand("keygen", "Create a new identity key file");
    std::string key_out;
    keygen->add_option("--out", key_out, "Key file to write")->required();

    // rendezvous
    auto* rdv = app.add_subcommand("rendezvous", "Run a rendezvous (signalling) server");
    std::string rdv_listen = "127.0.0.1:7470";
    std::string rdv_key;
    std::string rdv_genesis;
    rdv->add_option("--listen", rdv_listen, "host:port to bind");
    rdv->add_option("--swarm-key", rdv_key, "Shared swarm key");
    rdv->add_option("--genesis", rdv_genesis, "Genesis file; makes the swarm private");

    // node
    auto* node_cmd = app.add_subcommand("node", "Run a swarm node with its local API");
    std::string config_path;
    node_cmd->add_option("--config", config_path, "Node configuration file")->required();

    // client commands
    auto* send = app.add_subcommand("send", "Send a message through the running node");
    std::vector<std::string> send_to;
    std::string send_text;
    std::string send_file;
    send->add_option("--to", send_to, "Recipient peer id (repeat for a group)")->required();
    send->add_option("--text", send_text, "Message text");
    send->add_option("--file", send_file, "Send a file as the message body");

    auto* inbox = app.add_subcommand("inbox", "Sync and list received messages");
    bool inbox_no_sync = false;
    inbox->add_flag("--no-sync", inbox_no_sync, "List without polling the queue first");

    auto* contacts = app.add_subcommand("contacts", "Manage contacts");
    contacts->require_subcommand(1);
    auto* contacts_add = contacts->add_subcommand("add", "Add or rename a contact");
    std::string contact_peer;
    std::string contact_name;
    contacts_add->add_option("peer", contact_peer, "Peer id (hex)")->required();
    contacts_add->add_option("name", contact_name, "Display name")->required();
    auto* contacts_list = contacts->add_subcommand("list", "List contacts with presence");

    auto* swarm = app.add_subcommand("swarm", "Private swarm governance");
    swarm->require_subcommand(1);
    auto* init = swarm->add_subcommand("init", "Write a genesis file founding a private swarm");
    std::string init_key;
    std::string init_out;
    init->add_option("--key", init_key, "Founder key file")->required();
    init->add_option("--out", init_out, "Genesis file to write")->required();
    auto* propose = swarm->add_subcommand("propose", "Open a proposal");
    std::string prop_kind;
    std::string prop_subject;
    std::string prop_name;
    std::string prop_value;
    propose->add_option("--kind", prop_kind, "add_member, remove_member, promote_bootstrap, demote_bootstrap, set_policy")
        ->required();
    propose->add_option("--subject", prop_subject, "Peer id the proposal is about");
    propose->add_option("--name", prop_name, "Policy name (set_policy)");
    propose->add_option("--value", prop_value, "Policy value (set_policy)");
    auto* vote = swarm->add_subcommand("vote", "Vote on an open proposal");
    std::string vote_id;
    bool vote_yes = false;
    bool vote_no = false;
    vote->add_option("--proposal", vote_id, "Proposal id (hex)")->required();
    auto* yes = vote->add_flag("--yes", vote_yes, "Vote yes");
    auto* no = vote->add_flag("--no", vote_no, "Vote no");
    yes->excludes(no);
    auto* status = swarm->add_subcommand("status", "Membership and open proposals");

    // bench
    auto* bench = app.add_subcommand("bench", "Loopback benchmark or scenario run");
    sim::BenchOptions bench_opts;
    std::string bench_path = "direct";
    std::string bench_csv;
    std::string bench_scenario;
    bench->add_option("--messages", bench_opts.messages, "Messages to send")->check(CLI::PositiveNumber);
    bench->add_option("--min-len", bench_opts.min_len, "Length of the first message");
    bench->add_option("--max-len", bench_opts.max_len, "Length of the last message");
    bench->add_option("--path", bench_path, "direct or dmq")->check(CLI::IsMember({"direct", "dmq"}));
    bench->add_option("--seed", bench_opts.seed, "Message text seed");
    bench->add_option("--csv", bench_csv, "Write per-message samples to this CSV file");
    bench->add_option("--scenario", bench_scenario, "Run a scenario file instead");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e);
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        app.exit(e);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        std::cerr << app.help() << "\n";
        return out.fail(e.what(), kExitUsage);
    }
    if (verbose) spdlog::set_level(spdlog::level::info);

    try {
        if (keygen->parsed()) {
            PeerIdentity id = generate_identity();
            write_key_file(key_out, id);
            std::string peer = to_hex(id.peer_id());
            out.object({{"peer_id", peer}, {"key_file", key_out}}, peer);
            return kExitOk;
        }

        if (rdv->parsed()) {
            SignalWait signals;
            RendezvousConfig rc;
            rc.swarm_key = rdv_key;
            if (!rdv_genesis.empty()) rc.genesis = decode_genesis_file(read_text(rdv_genesis));
            RendezvousServer server(Endpoint::parse(rdv_listen), rc);
            out.object({{"event", "listening"}, {"endpoint", server.local().str()}, {"private", server.private_mode()}},
                       "rendezvous listening on " + server.local().str());
            std::cout.flush();
            signals.wait();
            server.stop();
            return kExitOk;
        }

        if (node_cmd->parsed()) {
            SignalWait signals;
            NodeConfig config = NodeConfig::load(config_path);
            if (port_flag || std::getenv("FYBRR_API_PORT")) config.api_port = api_port(port_flag);
            auto node = Node::from_config(config);
            node->start();
            LocalApi api(*node, config.api_port);
            std::string peer = to_hex(node->identity().peer_id());
            out.object({{"event", "running"}, {"peer_id", peer}, {"endpoint", node->endpoint()}, {"api_port", api.port()}},
                       "node " + peer + " on " + node->endpoint() + ", local api 127.0.0.1:" +
                           std::to_string(api.port()));
            std::cout.flush();
            signals.wait();
            api.stop();
            node->stop();
            return kExitOk;
        }

        if (init->parsed()) {
            PeerIdentity id = read_key_file(init_key);
            Genesis g = Genesis::make(id, system_clock()->now());
            std::ofstream f(init_out, std::ios::trunc);
            f << encode_genesis_file(g);
            if (!f) throw Error(ErrorCode::kIo, "cannot write " + init_out);
            std::string peer = to_hex(id.peer_id());
            out.object({{"genesis", init_out}, {"founder", peer}}, "genesis written to " + init_out);
            return kExitOk;
        }

        if (bench->parsed()) {
            if (!bench_scenario.empty()) {
                auto report = sim::run_scenario(sim::Scenario::parse(read_text(bench_scenario)));
                for (const auto& line : report.log) std::cout << line << "\n";
                for (const auto& f : report.failures) std::cerr << "fybrr: scenario check failed: " << f << "\n";
                return report.ok() ? kExitOk : kExitFailure;
            }
            bench_opts.path = bench_path == "dmq" ? MessagePath::kDmq : MessagePath::kDirect;
            auto r = sim::run_benchmark(bench_opts);
            if (!bench_csv.empty()) sim::export_csv(r.samples, bench_csv);
            const auto& s = r.summary;
            std::ostringstream plain;
            plain << std::fixed << std::setprecision(3) << "messages " << s.count << "  total " << s.total_ms / 1000.0
                  << " s  mean " << s.mean_ms << " ms  p50 " << s.p50_ms << " ms  p99 " << s.p99_ms << " ms";
            out.object({{"messages", s.count},
                        {"undelivered", r.undelivered},
                        {"total_ms", s.total_ms},
                        {"mean_ms", s.mean_ms},
                        {"p50_ms", s.p50_ms},
                        {"p99_ms", s.p99_ms}},
                       plain.str());
            for (const auto& e : r.errors) std::cerr << "fybrr: " << e << "\n";
            return r.undelivered == 0 && r.errors.empty() ? kExitOk : kExitFailure;
        }

        const std::uint16_t port = api_port(port_flag);

        if (send->parsed()) {
            json cmd = {{"op", "send"}, {"text", send_text}};
            if (!send_file.empty()) {
                cmd["text"] = read_text(send_file);
                cmd["filename"] = std::filesystem::path(send_file).filename().string();
            } else if (send_text.empty()) {
                return out.fail("send needs --text or --file", kExitUsage);
            }
            cmd["to"] = send_to.size() == 1 ? json(send_to[0]) : json(send_to);
            json reply = call(port, cmd);
            json results = reply.contains("results") ? reply["results"] : json::array({reply});
            bool any_failed = false;
            for (auto& r : results) {
                r.erase("op");
                r.erase("id");
                any_failed |= r["state"] == "failed";
                std::string plain = r["msg_id"].get<std::string>() + " " + r["state"].get<std::string>();
                if (r.contains("error")) plain += " (" + r["error"].get<std::string>() + ")";
                out.object(r, plain);
            }
            return any_failed ? kExitFailure : kExitOk;
        }

        if (inbox->parsed()) {
            ApiClient client(port);
            if (!inbox_no_sync) client.request({{"op", "sync"}});
            json reply = client.request({{"op", "inbox"}});
            for (auto& m : reply["messages"]) {
                std::string plain = short_hex(m["from"]) + " [" + m["path"].get<std::string>() + "] " +
                                    (m["filename"].get<std::string>().empty() ? "" : "<" + m["filename"].get<std::string>() + "> ") +
                                    m["text"].get<std::string>();
                out.object(m, plain);
            }
            return kExitOk;
        }

        if (contacts_add->parsed()) {
            json reply = call(port, {{"op", "contacts_add"}, {"peer", contact_peer}, {"name", contact_name}});
            reply.erase("op");
            reply.erase("id");
            out.object(reply, "added " + contact_name);
            return kExitOk;
        }

        if (contacts_list->parsed()) {
            json reply = call(port, {{"op", "presence"}});
            for (auto& c : reply["contacts"]) {
                out.object(c, c["peer"].get<std::string>() + " " + (c["online"].get<bool>() ? "online " : "offline") +
                                  " " + c["name"].get<std::string>());
            }
            return kExitOk;
        }

        if (propose->parsed()) {
            json cmd = {{"op", "propose"}, {"kind", prop_kind}};
            if (prop_kind == "set_policy") {
                cmd["name"] = prop_name;
                cmd["value"] = prop_value;
            } else {
                if (prop_subject.empty()) return out.fail("--subject is required for " + prop_kind, kExitUsage);
                cmd["subject"] = prop_subject;
            }
            json reply = call(port, cmd);
            reply.erase("op");
            reply.erase("id");
            out.object(reply, reply["proposal_id"].get<std::string>() + " " + reply.value("outcome", "pending"));
            return kExitOk;
        }

        if (vote->parsed()) {
            if (!vote_yes && !vote_no) return out.fail("vote needs --yes or --no", kExitUsage);
            json reply = call(port, {{"op", "vote"}, {"proposal", vote_id}, {"choice", vote_yes ? "yes" : "no"}});
            reply.erase("op");
            reply.erase("id");
            out.object(reply, reply["proposal_id"].get<std::string>() + " " + reply.value("outcome", "pending") +
                                  " yes=" + std::to_string(reply.value("yes", 0)) +
                                  " no=" + std::to_string(reply.value("no", 0)));
            return kExitOk;
        }

        if (status->parsed()) {
            ApiClient client(port);
            json st = client.request({{"op", "status"}});
            json props = client.request({{"op", "proposals"}});
            st.erase("op");
            st.erase("id");
            st["proposals"] = props["proposals"];
            std::ostringstream plain;
            plain << "peer " << st["peer_id"].get<std::string>() << "\n"
                  << (st["private"].get<bool>() ? "private" : "public") << " swarm, epoch " << st["epoch"]
                  << ", " << st["members"].size() << " members";
            for (const auto& m : st["members"]) plain << "\n  member " << m.get<std::string>();
            for (const auto& p : st["proposals"]) {
                plain << "\n  proposal " << p["proposal_id"].get<std::string>() << " " << p["kind"].get<std::string>()
                      << " " << p["outcome"].get<std::string>() << " yes=" << p["yes"] << " no=" << p["no"];
            }
            out.object(st, plain.str());
            return kExitOk;
        }
    } catch (const Error& e) {
        return out.fail(e.what());
    } catch (const std::exception& e) {
        return out.fail(e.what());
    }
    std::cerr << app.help() << "\n";
    return out.fail("no command given", kExitUsage);
}
