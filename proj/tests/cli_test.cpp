#include <gtest/gtest.h>

#include <array>
#include <fstream>
#include <cstdio>
#include <sys/wait.h>
#include <thread>

#include "fybrr/local_api.hpp"
#include "fybrr/sim.hpp"

using namespace fybrr;
using json = nlohmann::json;

namespace {

struct CliRun {
    int exit_code = -1;
    std::string out;
};

// Runs the CLI with stderr discarded; `env` is prepended to the command line.
CliRun cli(const std::string& args, const std::string& env = {}) {
    std::string cmd = env + " " + FYBRR_CLI + std::string(" ") + args + " 2>/dev/null";
    CliRun r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    std::array<char, 4096> buf{};
    while (std::size_t n = fread(buf.data(), 1, buf.size(), p)) r.out.append(buf.data(), n);
    int status = pclose(p);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::vector<json> json_lines(const std::string& out) {
    std::vector<json> lines;
    std::size_t start = 0;
    while (start < out.size()) {
        auto end = out.find('\n', start);
        if (end == std::string::npos) end = out.size();
        if (end > start) lines.push_back(json::parse(out.substr(start, end - start)));
        start = end + 1;
    }
    return lines;
}

std::filesystem::path scratch() {
    auto d = std::filesystem::temp_directory_path() / ("fybrr-cli-" + to_hex(random_array<6>()));
    std::filesystem::create_directories(d);
    return d;
}

}  // namespace

TEST(Cli, KeygenTwiceGivesDistinctIds) {
    auto d = scratch();
    auto k = (d / "k.key").string();
    CliRun a = cli("keygen --out " + k);
    CliRun b = cli("keygen --out " + k);
    EXPECT_EQ(a.exit_code, 0);
    EXPECT_EQ(b.exit_code, 0);
    EXPECT_EQ(a.out.size(), 65u);  // 64 hex + newline
    EXPECT_NE(a.out, b.out);
    EXPECT_NO_THROW(read_key_file(k));
    std::filesystem::remove_all(d);
}

TEST(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(cli("").exit_code, 2);
    EXPECT_EQ(cli("teleport").exit_code, 2);
    EXPECT_EQ(cli("keygen").exit_code, 2);
    EXPECT_EQ(cli("swarm vote --proposal 00").exit_code, 2);
    EXPECT_EQ(cli("bench --path carrier-pigeon").exit_code, 2);
}

TEST(Cli, RuntimeFailuresExitOne) {
    EXPECT_EQ(cli("inbox", "FYBRR_API_PORT=1").exit_code, 1);
    auto d = scratch();
    std::ofstream(d / "bad.key") << "garbage\n";
    std::ofstream(d / "n.conf") << "key_file=bad.key\nlisten=127.0.0.1:0\n";
    EXPECT_EQ(cli("node --config " + (d / "n.conf").string()).exit_code, 1);
    EXPECT_EQ(cli("node --config " + (d / "missing.conf").string()).exit_code, 1);
    std::filesystem::remove_all(d);
}

TEST(Cli, JsonModeParsesOnEveryPath) {
    auto d = scratch();
    std::ofstream(d / "bad.key") << "garbage\n";
    std::ofstream(d / "n.conf") << "key_file=bad.key\n";
    const std::vector<std::string> argv = {
        "",
        "teleport",
        "keygen",
        "keygen --out " + (d / "a.key").string(),
        "node --config " + (d / "n.conf").string(),
        "send --to 00 --text hi",
        "inbox",
        "contacts add 00 bob",
        "contacts list",
        "swarm status",
        "swarm propose --kind add_member",
        "swarm vote --proposal 00 --yes",
        "swarm init --key " + (d / "bad.key").string() + " --out " + (d / "g.txt").string(),
        "bench --messages 0",
    };
    for (const auto& a : argv) {
        CliRun r = cli("--json " + a, "FYBRR_API_PORT=1");
        SCOPED_TRACE(a);
        EXPECT_NE(r.exit_code, -1);
        std::vector<json> lines;
        ASSERT_NO_THROW(lines = json_lines(r.out)) << r.out;
        ASSERT_FALSE(lines.empty());
        for (const auto& l : lines) EXPECT_TRUE(l.is_object());
    }
    std::filesystem::remove_all(d);
}

TEST(Cli, TalksToARunningNode) {
    sim::Swarm swarm({.nodes = 2, .seed = 41, .replication = 1, .private_swarm = true});
    LocalApi api(swarm.node(0), 0);
    const std::string env = "FYBRR_API_PORT=" + std::to_string(api.port());

    // The peer is not a member yet, so a direct channel is refused and the
    // message is queued.
    CliRun sent = cli("send --to " + to_hex(swarm.peer(1)) + " --text hello", env);
    EXPECT_EQ(sent.exit_code, 0);
    EXPECT_NE(sent.out.find(" queued"), std::string::npos) << sent.out;

    CliRun prop = cli("--json swarm propose --kind add_member --subject " + to_hex(swarm.peer(1)), env);
    ASSERT_EQ(prop.exit_code, 0);
    json p = json_lines(prop.out).at(0);
    CliRun voted = cli("--json swarm vote --yes --proposal " + p["proposal_id"].get<std::string>(), env);
    ASSERT_EQ(voted.exit_code, 0);
    EXPECT_EQ(json_lines(voted.out).at(0)["outcome"], "accepted");

    CliRun st = cli("--json swarm status", env);
    ASSERT_EQ(st.exit_code, 0);
    EXPECT_EQ(json_lines(st.out).at(0)["members"].size(), 2u);

    // Now a member: the rendezvous accepts its next registration attempt and
    // the direct path opens.
    for (int i = 0; i < 50 && swarm.rendezvous()->online_count() < 2; ++i) {
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
    ASSERT_EQ(swarm.rendezvous()->online_count(), 2u);
    CliRun direct = cli("send --to " + to_hex(swarm.peer(1)) + " --text again", env);
    EXPECT_EQ(direct.exit_code, 0);
    EXPECT_NE(direct.out.find(" sent_direct"), std::string::npos) << direct.out;
}

TEST(Cli, VotingOnAnExpiredProposalFails) {
    sim::Swarm swarm({.nodes = 1, .seed = 42, .replication = 1, .private_swarm = true});
    LocalApi api(swarm.node(0), 0);
    ApiClient c(api.port());
    json p = c.request({{"op", "propose"}, {"kind", "set_policy"}, {"name", "motd"}, {"value", "hi"}, {"ttl_ms", 1}});
    ASSERT_EQ(p["op"], "proposal");
    std::this_thread::sleep_for(std::chrono::milliseconds(20));

    const std::string env = "FYBRR_API_PORT=" + std::to_string(api.port());
    std::string cmd = "swarm vote --yes --proposal " + p["proposal_id"].get<std::string>();
    EXPECT_EQ(cli(cmd, env).exit_code, 1);
    // The diagnostic goes to stderr; capture it separately.
    std::string with_err = env + " " + FYBRR_CLI + std::string(" ") + cmd + " 2>&1";
    FILE* f = popen(with_err.c_str(), "r");
    ASSERT_NE(f, nullptr);
    std::array<char, 1024> buf{};
    std::string text;
    while (std::size_t n = fread(buf.data(), 1, buf.size(), f)) text.append(buf.data(), n);
    pclose(f);
    EXPECT_NE(text.find("proposal expired"), std::string::npos) << text;
}
