#include "fybrr/local_api.hpp"

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <spdlog/spdlog.h>

#include <condition_variable>
#include <deque>
#include <mutex>
#include <set>
#include <thread>

namespace fybrr {

namespace net = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;
using json = nlohmann::json;

// ---------------------------------------------------------------- json shapes

std::string dump_json(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace); }

namespace {

std::string body_text(const Bytes& b) { return std::string(b.begin(), b.end()); }

PeerId peer_arg(const json& cmd, const char* field) {
    if (!cmd.contains(field) || !cmd[field].is_string()) {
        throw Error(ErrorCode::kInvalidArgument, std::string("missing string field '") + field + "'");
    }
    std::string hex = cmd[field].get<std::string>();
    if (hex.size() != 64) throw Error(ErrorCode::kInvalidArgument, std::string(field) + " must be 64 hex characters");
    return array_from_hex<32>(hex);
}

std::string string_arg(const json& cmd, const char* field, bool required = true) {
    if (!cmd.contains(field)) {
        if (required) throw Error(ErrorCode::kInvalidArgument, std::string("missing field '") + field + "'");
        return {};
    }
    if (!cmd[field].is_string()) throw Error(ErrorCode::kInvalidArgument, std::string(field) + " must be a string");
    return cmd[field].get<std::string>();
}

}  // namespace

json to_json(const InboundMessage& m) {
    return {{"msg_id", to_hex(m.msg_id)},     {"from", to_hex(m.from)},
            {"text", body_text(m.plaintext)}, {"filename", m.filename},
            {"path", path_name(m.path)},      {"created_at", m.created_at},
            {"received_at", m.received_at}};
}

json to_json(const OutboundMessage& m) {
    json j = {{"msg_id", to_hex(m.msg_id)},
              {"to", to_hex(m.to)},
              {"state", status_name(m.status)},
              {"created_at", m.created_at}};
    if (!m.error.empty()) j["error"] = m.error;
    return j;
}

json to_json(const HistoryEntry& e) {
    return {{"direction", e.outbound ? "out" : "in"},
            {"msg_id", to_hex(e.msg_id)},
            {"peer", to_hex(e.peer)},
            {"text", body_text(e.body)},
            {"filename", e.filename},
            {"at", e.at},
            {"path", path_name(e.path)},
            {"state", status_name(e.status)}};
}

json to_json(const ProposalView& v) {
    const Proposal& p = v.proposal.proposal;
    json j = {{"proposal_id", to_hex(v.id)},
              {"kind", proposal_kind_name(p.kind)},
              {"proposer", to_hex(p.proposer)},
              {"created_at", p.created_at},
              {"deadline", p.deadline},
              {"epoch", p.epoch},
              {"outcome", outcome_name(v.outcome)},
              {"yes", v.yes},
              {"no", v.no},
              {"members", v.members},
              {"applied", v.applied}};
    if (p.kind == ProposalKind::kSetPolicy) {
        j["name"] = p.subject.name;
        j["value"] = p.subject.value;
    } else {
        j["subject"] = to_hex(p.subject.peer);
    }
    return j;
}

// ---------------------------------------------------------------- commands

json dispatch_command(Node& node, const json& cmd) {
    if (!cmd.is_object()) throw Error(ErrorCode::kInvalidArgument, "command must be a JSON object");
    const std::string op = string_arg(cmd, "op");

    if (op == "send") {
        std::string text = string_arg(cmd, "text", false);
        std::string filename = string_arg(cmd, "filename", false);
        std::vector<PeerId> to;
        if (cmd.contains("to") && cmd["to"].is_array()) {
            for (const auto& t : cmd["to"]) to.push_back(peer_arg(json{{"to", t}}, "to"));
            if (to.empty()) throw Error(ErrorCode::kInvalidArgument, "empty recipient list");
        } else {
            to.push_back(peer_arg(cmd, "to"));
        }
        // Groups are client-side fan-out: one sealed copy per recipient.
        json results = json::array();
        for (const auto& peer : to) {
            results.push_back(to_json(node.send_message(peer, as_bytes(text), filename)));
        }
        if (results.size() == 1) {
            json j = results[0];
            j["op"] = "status";
            return j;
        }
        return {{"op", "status"}, {"results", results}};
    }
    if (op == "history") {
        std::optional<PeerId> peer;
        if (cmd.contains("peer")) peer = peer_arg(cmd, "peer");
        json entries = json::array();
        for (const auto& e : node.history(peer)) entries.push_back(to_json(e));
        return {{"op", "history"}, {"entries", entries}};
    }
    if (op == "inbox") {
        json messages = json::array();
        for (const auto& m : node.inbox()) messages.push_back(to_json(m));
        return {{"op", "inbox"}, {"messages", messages}};
    }
    if (op == "sync") {
        SyncReport r = node.sync_inbox();
        json messages = json::array();
        for (const auto& m : r.delivered) messages.push_back(to_json(m));
        return {{"op", "sync"},
                {"messages", messages},
                {"pending", r.pending},
                {"quarantined", r.quarantined},
                {"duplicates", r.duplicates}};
    }
    if (op == "contacts") {
        json list = json::array();
        for (const auto& c : node.contacts()) {
            list.push_back({{"peer", to_hex(c.peer)}, {"name", c.name}, {"keys_known", c.keys.has_value()}});
        }
        return {{"op", "contacts"}, {"contacts", list}};
    }
    if (op == "contacts_add") {
        PeerId peer = peer_arg(cmd, "peer");
        std::string name = string_arg(cmd, "name");
        node.add_contact(peer, name);
        return {{"op", "contacts_add"}, {"peer", to_hex(peer)}, {"name", name}};
    }
    if (op == "presence") {
        json list = json::array();
        for (const auto& [c, online] : node.presence()) {
            list.push_back({{"peer", to_hex(c.peer)}, {"name", c.name}, {"online", online}});
        }
        return {{"op", "presence"}, {"contacts", list}};
    }
    if (op == "proposals") {
        json list = json::array();
        for (const auto& v : node.proposals()) list.push_back(to_json(v));
        return {{"op", "proposals"}, {"proposals", list}};
    }
    if (op == "propose") {
        auto kind = parse_proposal_kind(string_arg(cmd, "kind"));
        if (!kind) throw Error(ErrorCode::kInvalidArgument, "unknown proposal kind");
        Subject subject;
        if (*kind == ProposalKind::kSetPolicy) {
            subject.name = string_arg(cmd, "name");
            subject.value = string_arg(cmd, "value");
        } else {
            subject.peer = peer_arg(cmd, "subject");
        }
        UnixMs ttl = kDefaultProposalTtlMs;
        if (cmd.contains("ttl_ms")) {
            if (!cmd["ttl_ms"].is_number_integer() || cmd["ttl_ms"].get<std::int64_t>() <= 0) {
                throw Error(ErrorCode::kInvalidArgument, "ttl_ms must be a positive integer");
            }
            ttl = cmd["ttl_ms"].get<std::int64_t>();
        }
        SignedProposal sp = node.propose(*kind, subject, ttl);
        for (const auto& v : node.proposals()) {
            if (v.id == sp.proposal.id()) {
                json j = to_json(v);
                j["op"] = "proposal";
                return j;
            }
        }
        return {{"op", "proposal"}, {"proposal_id", to_hex(sp.proposal.id())}};
    }
    if (op == "vote") {
        std::string hex = string_arg(cmd, "proposal");
        if (hex.size() != 64) throw Error(ErrorCode::kInvalidArgument, "proposal must be 64 hex characters");
        Hash32 id = array_from_hex<32>(hex);
        std::string choice = string_arg(cmd, "choice");
        if (choice != "yes" && choice != "no") throw Error(ErrorCode::kInvalidArgument, "choice must be yes or no");
        node.vote(id, choice == "yes" ? Choice::kYes : Choice::kNo);
        for (const auto& v : node.proposals()) {
            if (v.id == id) {
                json j = to_json(v);
                j["op"] = "proposal";
                return j;
            }
        }
        return {{"op", "proposal"}, {"proposal_id", hex}};
    }
    if (op == "status") {
        MembershipState ms = node.membership();
        json members = json::array();
        for (const auto& m : ms.members) members.push_back(to_hex(m));
        return {{"op", "status"},
                {"peer_id", to_hex(node.identity().peer_id())},
                {"endpoint", node.endpoint()},
                {"private", node.private_mode()},
                {"epoch", ms.epoch},
                {"members", members},
                {"routing_table", node.dht().table().size()},
                {"stored_blocks", node.store().size()}};
    }
    if (op == "outbound") {
        std::string hex = string_arg(cmd, "msg_id");
        if (hex.size() != 32) throw Error(ErrorCode::kInvalidArgument, "msg_id must be 32 hex characters");
        auto m = node.outbound(array_from_hex<16>(hex));
        if (!m) throw Error(ErrorCode::kNotFound, "unknown message");
        json j = to_json(*m);
        j["op"] = "status";
        return j;
    }
    throw Error(ErrorCode::kInvalidArgument, "unknown op '" + op + "'");
}

bool origin_allowed(std::string_view origin) {
    if (origin.empty()) return true;
    auto scheme = origin.find("://");
    if (scheme == std::string_view::npos) return false;
    std::string_view s = origin.substr(0, scheme);
    if (s != "http" && s != "https") return false;
    std::string_view host = origin.substr(scheme + 3);
    if (host.find('/') != std::string_view::npos) return false;
    if (host.starts_with("[::1]")) {
        host.remove_prefix(5);
    } else {
        auto colon = host.find(':');
        std::string_view name = host.substr(0, colon);
        if (name != "localhost" && name != "127.0.0.1") return false;
        host = colon == std::string_view::npos ? std::string_view{} : host.substr(colon);
    }
    if (host.empty()) return true;
    if (host[0] != ':' || host.size() < 2) return false;
    return host.substr(1).find_first_not_of("0123456789") == std::string_view::npos;
}

// ---------------------------------------------------------------- server

namespace {

class Session;

}  // namespace

struct LocalApi::Impl {
    Node& node;
    net::io_context ioc;
    tcp::acceptor acceptor{ioc};
    std::thread io;
    std::size_t subscription = 0;

    std::mutex mu;
    std::condition_variable cv;
    std::set<std::shared_ptr<Session>> sessions;
    std::size_t workers = 0;
    bool stopped = false;

    explicit Impl(Node& n) : node(n) {}
    void accept();
    void broadcast(const std::string& text);
    void on_event(const NodeEvent& ev);
};

namespace {

class Session : public std::enable_shared_from_this<Session> {
public:
    Session(tcp::socket socket, LocalApi::Impl& api) : ws_(std::move(socket)), api_(api) {}

    void start() {
        http::async_read(ws_.next_layer(), buffer_, request_,
                         [self = shared_from_this()](beast::error_code ec, std::size_t) { self->on_request(ec); });
    }

    /// Thread-safe: queues a text frame for this session.
    void push(std::string text) {
        net::post(ws_.get_executor(), [self = shared_from_this(), text = std::move(text)]() mutable {
            if (!self->open_) return;
            self->outbox_.push_back(std::move(text));
            if (self->outbox_.size() == 1) self->write_next();
        });
    }

    void close() {
        net::post(ws_.get_executor(), [self = shared_from_this()] {
            beast::error_code ec;
            beast::get_lowest_layer(self->ws_).socket().shutdown(tcp::socket::shutdown_both, ec);
            beast::get_lowest_layer(self->ws_).close();
        });
    }

private:
    void on_request(beast::error_code ec) {
        if (ec) return finish();
        if (!websocket::is_upgrade(request_)) return reject(http::status::bad_request, "websocket upgrade required");
        std::string origin(request_[http::field::origin]);
        if (!origin_allowed(origin)) {
            spdlog::warn("local api: refused session from origin '{}'", origin);
            return reject(http::status::forbidden, "origin not allowed");
        }
        ws_.text(true);
        ws_.async_accept(request_, [self = shared_from_this()](beast::error_code ec) {
            if (ec) return self->finish();
            self->open_ = true;
            self->read_next();
        });
    }

    void reject(http::status status, const std::string& why) {
        auto res = std::make_shared<http::response<http::string_body>>(status, request_.version());
        res->set(http::field::content_type, "text/plain");
        res->body() = why + "\n";
        res->keep_alive(false);
        res->prepare_payload();
        http::async_write(ws_.next_layer(), *res, [self = shared_from_this(), res](beast::error_code, std::size_t) {
            beast::error_code ignored;
            beast::get_lowest_layer(self->ws_).socket().shutdown(tcp::socket::shutdown_both, ignored);
            self->finish();
        });
    }

    void read_next() {
        ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
            if (ec) return self->finish();
            std::string text = beast::buffers_to_string(self->buffer_.data());
            self->buffer_.consume(self->buffer_.size());
            self->enqueue(std::move(text));
            self->read_next();
        });
    }

    void write_next() {
        ws_.async_write(net::buffer(outbox_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
            if (ec) return self->finish();
            self->outbox_.pop_front();
            if (!self->outbox_.empty()) self->write_next();
        });
    }

    // Commands may block (a send waits for the direct path), so they run
    // on a worker thread, one at a time per session, in arrival order.
    void enqueue(std::string text) {
        std::lock_guard lock(api_.mu);
        if (api_.stopped) return;
        commands_.push_back(std::move(text));
        if (worker_running_) return;
        worker_running_ = true;
        ++api_.workers;
        std::thread([self = shared_from_this(), api = &api_]() mutable {
            self->work();
            self.reset();  // stop() must not see zero workers while we hold the session
            std::lock_guard lock(api->mu);
            --api->workers;
            api->cv.notify_all();
        }).detach();
    }

    void work() {
        for (;;) {
            std::string text;
            {
                std::lock_guard lock(api_.mu);
                if (commands_.empty() || api_.stopped) {
                    worker_running_ = false;
                    return;
                }
                text = std::move(commands_.front());
                commands_.pop_front();
            }
            push(dump_json(run(text)));
        }
    }

    json run(const std::string& text) {
        json cmd;
        try {
            cmd = json::parse(text);
        } catch (const json::exception& e) {
            return {{"op", "error"}, {"error", std::string("malformed JSON: ") + e.what()}};
        }
        json reply;
        try {
            reply = dispatch_command(api_.node, cmd);
        } catch (const Error& e) {
            reply = {{"op", "error"}, {"code", error_code_name(e.code())}, {"error", e.what()}};
        } catch (const std::exception& e) {
            reply = {{"op", "error"}, {"error", e.what()}};
        }
        if (cmd.is_object() && cmd.contains("id")) reply["id"] = cmd["id"];
        return reply;
    }

    void finish() {
        open_ = false;
        std::lock_guard lock(api_.mu);
        api_.sessions.erase(shared_from_this());
    }

    websocket::stream<beast::tcp_stream> ws_;
    LocalApi::Impl& api_;
    beast::flat_buffer buffer_;
    http::request<http::string_body> request_;
    std::deque<std::string> outbox_;
    bool open_ = false;
    std::deque<std::string> commands_;  // guarded by api_.mu
    bool worker_running_ = false;       // guarded by api_.mu
};

}  // namespace

void LocalApi::Impl::accept() {
    acceptor.async_accept(net::make_strand(ioc), [this](beast::error_code ec, tcp::socket socket) {
        if (ec) return;  // acceptor closed
        auto session = std::make_shared<Session>(std::move(socket), *this);
        {
            std::lock_guard lock(mu);
            if (stopped) return;
            sessions.insert(session);
        }
        session->start();
        accept();
    });
}

void LocalApi::Impl::broadcast(const std::string& text) {
    std::lock_guard lock(mu);
    if (stopped) return;
    for (const auto& s : sessions) s->push(text);
}

void LocalApi::Impl::on_event(const NodeEvent& ev) {
    json j;
    switch (ev.kind) {
        case NodeEvent::Kind::kInbound:
            if (!ev.inbound) return;
            j = to_json(*ev.inbound);
            j["op"] = "inbound";
            break;
        case NodeEvent::Kind::kStatus:
            // Send outcomes are the reply to "send"; only later delivery
            // confirmations are pushed.
            if (!ev.status || ev.status->status != OutboundStatus::kDelivered) return;
            j = to_json(*ev.status);
            j["op"] = "status";
            break;
        case NodeEvent::Kind::kProposal:
            if (!ev.proposal) return;
            j = to_json(*ev.proposal);
            j["op"] = "proposal";
            break;
        case NodeEvent::Kind::kPresence:
            if (!ev.presence) return;
            j = {{"op", "presence"}, {"peer", to_hex(ev.presence->first)}, {"online", ev.presence->second}};
            break;
    }
    broadcast(dump_json(j));
}

LocalApi::LocalApi(Node& node, std::uint16_t port) : impl_(std::make_unique<Impl>(node)) {
    try {
        tcp::endpoint ep(net::ip::make_address("127.0.0.1"), port);
        impl_->acceptor.open(ep.protocol());
        impl_->acceptor.set_option(net::socket_base::reuse_address(true));
        impl_->acceptor.bind(ep);
        impl_->acceptor.listen();
    } catch (const boost::system::system_error& e) {
        throw Error(ErrorCode::kIo, "local api cannot bind 127.0.0.1:" + std::to_string(port) + ": " + e.what());
    }
    impl_->subscription = node.subscribe([impl = impl_.get()](const NodeEvent& ev) { impl->on_event(ev); });
    impl_->accept();
    impl_->io = std::thread([impl = impl_.get()] { impl->ioc.run(); });
}

LocalApi::~LocalApi() { stop(); }

std::uint16_t LocalApi::port() const { return impl_->acceptor.local_endpoint().port(); }

void LocalApi::stop() {
    std::vector<std::shared_ptr<Session>> open;
    {
        std::unique_lock lock(impl_->mu);
        if (impl_->stopped) return;
        impl_->stopped = true;
        open.assign(impl_->sessions.begin(), impl_->sessions.end());
    }
    impl_->node.unsubscribe(impl_->subscription);
    net::post(impl_->ioc, [impl = impl_.get()] {
        beast::error_code ec;
        impl->acceptor.close(ec);
    });
    for (auto& s : open) s->close();
    {
        // A worker in the middle of a command holds a session reference.
        std::unique_lock lock(impl_->mu);
        impl_->cv.wait(lock, [&] { return impl_->workers == 0; });
    }
    open.clear();
    impl_->ioc.stop();
    if (impl_->io.joinable()) impl_->io.join();
    std::lock_guard lock(impl_->mu);
    impl_->sessions.clear();
}

// ---------------------------------------------------------------- client

struct ApiClient::Impl {
    net::io_context ioc;
    websocket::stream<tcp::socket> ws{ioc};
    beast::flat_buffer buffer;
    std::deque<json> inbox;
    bool reading = false;
    beast::error_code read_error;
    std::uint64_t next_id = 1;

    void arm() {
        if (reading || read_error) return;
        reading = true;
        ws.async_read(buffer, [this](beast::error_code ec, std::size_t) {
            reading = false;
            if (ec) {
                read_error = ec;
                return;
            }
            std::string text = beast::buffers_to_string(buffer.data());
            buffer.consume(buffer.size());
            try {
                inbox.push_back(json::parse(text));
            } catch (const json::exception&) {
                inbox.push_back(json{{"op", "error"}, {"error", "server sent malformed JSON"}});
            }
        });
    }
};

ApiClient::ApiClient(std::uint16_t port, std::string origin) : impl_(std::make_unique<Impl>()) {
    try {
        tcp::endpoint ep(net::ip::make_address("127.0.0.1"), port);
        impl_->ws.next_layer().connect(ep);
        impl_->ws.set_option(websocket::stream_base::decorator([origin](websocket::request_type& req) {
            if (!origin.empty()) req.set(http::field::origin, origin);
        }));
        impl_->ws.handshake("127.0.0.1:" + std::to_string(port), "/");
        impl_->ws.text(true);
    } catch (const boost::system::system_error& e) {
        throw Error(ErrorCode::kConnectivity,
                    "cannot open a session with the node on port " + std::to_string(port) + ": " + e.what());
    }
}

ApiClient::~ApiClient() {
    beast::error_code ec;
    impl_->ws.next_layer().shutdown(tcp::socket::shutdown_both, ec);
    impl_->ws.next_layer().close(ec);
}

void ApiClient::send_raw(const std::string& text) {
    bool done = false;
    beast::error_code err;
    impl_->ws.async_write(net::buffer(text), [&](beast::error_code ec, std::size_t) {
        err = ec;
        done = true;
    });
    impl_->ioc.restart();
    while (!done) impl_->ioc.run_one();
    if (err) throw Error(ErrorCode::kConnectivity, "api session write failed: " + err.message());
}

std::optional<json> ApiClient::next(std::chrono::milliseconds timeout) {
    auto deadline = std::chrono::steady_clock::now() + timeout;
    while (impl_->inbox.empty()) {
        if (impl_->read_error) {
            throw Error(ErrorCode::kChannelClosed, "api session closed: " + impl_->read_error.message());
        }
        auto left = deadline - std::chrono::steady_clock::now();
        if (left <= std::chrono::steady_clock::duration::zero()) return std::nullopt;
        impl_->arm();
        impl_->ioc.restart();
        impl_->ioc.run_one_for(left);
    }
    json j = std::move(impl_->inbox.front());
    impl_->inbox.pop_front();
    return j;
}

json ApiClient::request(json command, std::chrono::milliseconds timeout) {
    std::uint64_t id = impl_->next_id++;
    command["id"] = id;
    send_raw(dump_json(command));
    auto deadline = std::chrono::steady_clock::now() + timeout;
    std::deque<json> skipped;
    for (;;) {
        auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        auto msg = left.count() > 0 ? next(left) : std::nullopt;
        if (!msg) {
            for (auto it = skipped.rbegin(); it != skipped.rend(); ++it) impl_->inbox.push_front(std::move(*it));
            throw Error(ErrorCode::kTimeout, "no reply from the node within " + std::to_string(timeout.count()) + " ms");
        }
        if (msg->contains("id") && (*msg)["id"] == id) {
            for (auto it = skipped.rbegin(); it != skipped.rend(); ++it) impl_->inbox.push_front(std::move(*it));
            return *msg;
        }
        skipped.push_back(std::move(*msg));
    }
}

}  // namespace fybrr
