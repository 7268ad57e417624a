#include "fybrr/consensus.hpp"

#include <algorithm>

namespace fybrr {

namespace {

constexpr std::string_view kProposalLabel = "fybrr/proposal/v1";
constexpr std::string_view kBallotLabel = "fybrr/ballot/v1";
constexpr std::string_view kGenesisLabel = "fybrr/genesis/v1";
constexpr std::string_view kGenesisFileMagic = "FYBRR-GENESIS-V1";
constexpr std::size_t kMaxPolicyName = 64;
constexpr std::size_t kMaxPolicyValue = 1024;
constexpr std::uint32_t kMaxLogEntries = 1u << 20;
constexpr std::uint32_t kMaxBallots = 1u << 16;

bool is_peer_kind(ProposalKind k) { return k != ProposalKind::kSetPolicy; }

Bytes labelled(std::string_view label, ByteView body) {
    ByteWriter w;
    w.raw(as_bytes(label)).raw(body);
    return std::move(w).take();
}

void write_ids(ByteWriter& w, const std::set<PeerId>& ids) {
    w.u32(static_cast<std::uint32_t>(ids.size()));
    for (const auto& id : ids) w.raw(id);
}

}  // namespace

const char* proposal_kind_name(ProposalKind k) {
    switch (k) {
        case ProposalKind::kAddMember: return "add_member";
        case ProposalKind::kRemoveMember: return "remove_member";
        case ProposalKind::kPromoteBootstrap: return "promote_bootstrap";
        case ProposalKind::kDemoteBootstrap: return "demote_bootstrap";
        case ProposalKind::kSetPolicy: return "set_policy";
    }
    return "unknown";
}

std::optional<ProposalKind> parse_proposal_kind(std::string_view s) {
    for (auto k : {ProposalKind::kAddMember, ProposalKind::kRemoveMember, ProposalKind::kPromoteBootstrap,
                   ProposalKind::kDemoteBootstrap, ProposalKind::kSetPolicy}) {
        if (s == proposal_kind_name(k)) return k;
    }
    return std::nullopt;
}

const char* outcome_name(Outcome o) {
    switch (o) {
        case Outcome::kPending: return "pending";
        case Outcome::kAccepted: return "accepted";
        case Outcome::kRejected: return "rejected";
    }
    return "unknown";
}

Outcome tally_votes(std::size_t members, std::size_t yes, std::size_t no, bool deadline_passed) {
    if (2 * yes > members) return Outcome::kAccepted;
    if (2 * no >= members || deadline_passed) return Outcome::kRejected;
    return Outcome::kPending;
}

Bytes MembershipState::canonical() const {
    ByteWriter w;
    w.u64(epoch);
    write_ids(w, members);
    write_ids(w, bootstrap);
    w.u32(static_cast<std::uint32_t>(policies.size()));
    for (const auto& [k, v] : policies) w.str(k).str(v);
    return std::move(w).take();
}

// ---------------------------------------------------------------- records

Bytes Proposal::canonical() const {
    ByteWriter w;
    w.u8(static_cast<std::uint8_t>(kind));
    if (is_peer_kind(kind)) {
        w.raw(subject.peer);
    } else {
        w.str(subject.name).str(subject.value);
    }
    w.raw(proposer).i64(created_at).i64(deadline).u64(epoch);
    return std::move(w).take();
}

Hash32 Proposal::id() const { return content_id(canonical()).digest; }

bool SignedProposal::authentic() const {
    return proposer_keys.peer_id() == proposal.proposer &&
           verify(labelled(kProposalLabel, proposal.canonical()), signature, proposer_keys.sig_public);
}

Bytes Ballot::signing_bytes() const {
    ByteWriter w;
    w.raw(proposal_id).raw(voter).u8(static_cast<std::uint8_t>(choice)).u64(epoch);
    return std::move(w).take();
}

bool Ballot::authentic() const {
    return voter_keys.peer_id() == voter &&
           verify(labelled(kBallotLabel, signing_bytes()), signature, voter_keys.sig_public);
}

Ballot Ballot::make(const Hash32& proposal_id, Choice choice, std::uint64_t epoch, const PeerIdentity& voter) {
    Ballot b;
    b.proposal_id = proposal_id;
    b.voter = voter.peer_id();
    b.choice = choice;
    b.epoch = epoch;
    b.voter_keys = voter.keys();
    b.signature = sign(labelled(kBallotLabel, b.signing_bytes()), voter);
    return b;
}

namespace {
Bytes genesis_signing_bytes(const PeerKeys& keys, UnixMs created_at) {
    ByteWriter w;
    w.raw(as_bytes(kGenesisLabel));
    encode(w, keys);
    w.i64(created_at);
    return std::move(w).take();
}
}  // namespace

bool Genesis::authentic() const {
    return verify(genesis_signing_bytes(creator_keys, created_at), signature, creator_keys.sig_public);
}

MembershipState Genesis::state() const {
    MembershipState s;
    s.members.insert(creator_keys.peer_id());
    return s;
}

Genesis Genesis::make(const PeerIdentity& creator, UnixMs created_at) {
    Genesis g{creator.keys(), created_at, {}};
    g.signature = sign(genesis_signing_bytes(g.creator_keys, created_at), creator);
    return g;
}

// ---------------------------------------------------------------- codecs

void encode(ByteWriter& w, const SignedProposal& p) {
    w.blob(p.proposal.canonical());
    encode(w, p.proposer_keys);
    w.raw(p.signature);
}

SignedProposal decode_signed_proposal(ByteReader& outer) {
    SignedProposal sp;
    Bytes canon = outer.blob(8192);
    ByteReader r(canon);
    Proposal& p = sp.proposal;
    std::uint8_t kind = r.u8();
    if (kind < 1 || kind > 5) throw Error(ErrorCode::kDecode, "unknown proposal kind");
    p.kind = static_cast<ProposalKind>(kind);
    if (is_peer_kind(p.kind)) {
        p.subject.peer = r.array<32>();
    } else {
        p.subject.name = r.str(kMaxPolicyName);
        p.subject.value = r.str(kMaxPolicyValue);
    }
    p.proposer = r.array<32>();
    p.created_at = r.i64();
    p.deadline = r.i64();
    p.epoch = r.u64();
    r.expect_done();
    sp.proposer_keys = decode_peer_keys(outer);
    sp.signature = outer.array<64>();
    return sp;
}

void encode(ByteWriter& w, const Ballot& b) {
    w.raw(b.signing_bytes()).raw(b.signature);
    encode(w, b.voter_keys);
}

Ballot decode_ballot(ByteReader& r) {
    Ballot b;
    b.proposal_id = r.array<32>();
    b.voter = r.array<32>();
    std::uint8_t c = r.u8();
    if (c != 1 && c != 2) throw Error(ErrorCode::kDecode, "unknown ballot choice");
    b.choice = static_cast<Choice>(c);
    b.epoch = r.u64();
    b.signature = r.array<64>();
    b.voter_keys = decode_peer_keys(r);
    return b;
}

void encode(ByteWriter& w, const Genesis& g) {
    encode(w, g.creator_keys);
    w.i64(g.created_at).raw(g.signature);
}

Genesis decode_genesis(ByteReader& r) {
    Genesis g;
    g.creator_keys = decode_peer_keys(r);
    g.created_at = r.i64();
    g.signature = r.array<64>();
    return g;
}

void encode(ByteWriter& w, const std::vector<LogEntry>& log) {
    w.u32(static_cast<std::uint32_t>(log.size()));
    for (const auto& e : log) {
        encode(w, e.proposal);
        w.u32(static_cast<std::uint32_t>(e.ballots.size()));
        for (const auto& b : e.ballots) encode(w, b);
    }
}

std::vector<LogEntry> decode_log(ByteReader& r) {
    std::uint32_t n = r.u32();
    if (n > kMaxLogEntries) throw Error(ErrorCode::kDecode, "log too long");
    std::vector<LogEntry> log;
    for (std::uint32_t i = 0; i < n; ++i) {
        LogEntry e;
        e.proposal = decode_signed_proposal(r);
        std::uint32_t nb = r.u32();
        if (nb > kMaxBallots) throw Error(ErrorCode::kDecode, "too many ballots");
        for (std::uint32_t j = 0; j < nb; ++j) e.ballots.push_back(decode_ballot(r));
        log.push_back(std::move(e));
    }
    return log;
}

std::string encode_genesis_file(const Genesis& g) {
    ByteWriter w;
    encode(w, g);
    return std::string(kGenesisFileMagic) + "\n" + to_hex(w.bytes()) + "\n";
}

Genesis decode_genesis_file(std::string_view text) {
    auto nl = text.find('\n');
    if (nl == std::string_view::npos || text.substr(0, nl) != kGenesisFileMagic) {
        throw Error(ErrorCode::kDecode, "not a genesis file");
    }
    std::string_view hex = text.substr(nl + 1);
    while (!hex.empty() && (hex.back() == '\n' || hex.back() == '\r' || hex.back() == ' ')) hex.remove_suffix(1);
    Bytes raw = from_hex(hex);
    ByteReader r(raw);
    Genesis g = decode_genesis(r);
    r.expect_done();
    if (!g.authentic()) throw Error(ErrorCode::kAuthentication, "genesis signature invalid");
    return g;
}

// ---------------------------------------------------------------- rules

void check_subject(const Proposal& p, const MembershipState& s) {
    const PeerId& x = p.subject.peer;
    auto bad = [](const std::string& why) { throw Error(ErrorCode::kInvalidArgument, why); };
    if (is_peer_kind(p.kind) && (!p.subject.name.empty() || !p.subject.value.empty())) {
        bad("membership proposals take a peer subject");
    }
    switch (p.kind) {
        case ProposalKind::kAddMember:
            if (x == PeerId{}) bad("subject peer id is empty");
            if (s.is_member(x)) bad("subject is already a member");
            break;
        case ProposalKind::kRemoveMember:
            if (!s.is_member(x)) bad("subject is not a member");
            if (s.members.size() == 1) bad("cannot remove the last member");
            break;
        case ProposalKind::kPromoteBootstrap:
            if (!s.is_member(x)) bad("only members can be bootstrap nodes");
            if (s.bootstrap.count(x)) bad("subject is already a bootstrap node");
            break;
        case ProposalKind::kDemoteBootstrap:
            if (!s.bootstrap.count(x)) bad("subject is not a bootstrap node");
            break;
        case ProposalKind::kSetPolicy:
            if (x != PeerId{}) bad("policy proposals take a name/value subject");
            if (p.subject.name.empty() || p.subject.name.size() > kMaxPolicyName) bad("policy name length");
            if (p.subject.value.size() > kMaxPolicyValue) bad("policy value too long");
            break;
    }
}

MembershipState apply_effect(const MembershipState& s, const Proposal& p) {
    MembershipState n = s;
    n.epoch = s.epoch + 1;
    const PeerId& x = p.subject.peer;
    switch (p.kind) {
        case ProposalKind::kAddMember: n.members.insert(x); break;
        case ProposalKind::kRemoveMember:
            n.members.erase(x);
            n.bootstrap.erase(x);
            break;
        case ProposalKind::kPromoteBootstrap: n.bootstrap.insert(x); break;
        case ProposalKind::kDemoteBootstrap: n.bootstrap.erase(x); break;
        case ProposalKind::kSetPolicy: n.policies[p.subject.name] = p.subject.value; break;
    }
    return n;
}

MembershipState replay(const Genesis& genesis, const std::vector<LogEntry>& log) {
    if (!genesis.authentic()) throw Error(ErrorCode::kAuthentication, "genesis signature invalid");
    MembershipState s = genesis.state();
    for (std::size_t i = 0; i < log.size(); ++i) {
        const auto& e = log[i];
        const Proposal& p = e.proposal.proposal;
        std::string where = "log entry " + std::to_string(i) + ": ";
        if (!e.proposal.authentic()) throw Error(ErrorCode::kAuthentication, where + "proposal signature invalid");
        if (p.epoch != s.epoch) throw Error(ErrorCode::kState, where + "epoch gap");
        if (!s.is_member(p.proposer)) throw Error(ErrorCode::kState, where + "proposer not a member");
        if (p.deadline <= p.created_at) throw Error(ErrorCode::kState, where + "deadline before creation");
        try {
            check_subject(p, s);
        } catch (const Error& err) {
            throw Error(ErrorCode::kState, where + err.what());
        }
        Hash32 id = p.id();
        std::set<PeerId> voters;
        std::size_t yes = 0, no = 0;
        for (const auto& b : e.ballots) {
            if (!b.authentic()) throw Error(ErrorCode::kAuthentication, where + "ballot signature invalid");
            if (b.proposal_id != id || b.epoch != p.epoch) throw Error(ErrorCode::kState, where + "foreign ballot");
            if (!s.is_member(b.voter)) throw Error(ErrorCode::kState, where + "ballot from non-member");
            if (!voters.insert(b.voter).second) throw Error(ErrorCode::kState, where + "duplicate voter");
            (b.choice == Choice::kYes ? yes : no)++;
        }
        if (tally_votes(s.members.size(), yes, no, false) != Outcome::kAccepted) {
            throw Error(ErrorCode::kState, where + "proposal lacks a majority");
        }
        s = apply_effect(s, p);
    }
    return s;
}

// ---------------------------------------------------------------- engine

Consensus::Consensus(Genesis genesis) : genesis_(std::move(genesis)) {
    if (!genesis_.authentic()) throw Error(ErrorCode::kAuthentication, "genesis signature invalid");
    state_ = genesis_.state();
}

SignedProposal Consensus::propose(ProposalKind kind, Subject subject, const PeerIdentity& proposer, UnixMs now,
                                  UnixMs ttl_ms) {
    if (ttl_ms <= 0) throw Error(ErrorCode::kInvalidArgument, "proposal ttl must be positive");
    SignedProposal sp;
    {
        std::lock_guard lock(mu_);
        if (!state_.is_member(proposer.peer_id())) throw Error(ErrorCode::kUnauthorized, "proposer is not a member");
        sp.proposal = Proposal{kind, std::move(subject), proposer.peer_id(), now, now + ttl_ms, state_.epoch};
        check_subject(sp.proposal, state_);
    }
    sp.proposer_keys = proposer.keys();
    sp.signature = sign(labelled(kProposalLabel, sp.proposal.canonical()), proposer);
    receive_proposal(sp, now);
    return sp;
}

bool Consensus::receive_proposal(const SignedProposal& sp, UnixMs now) {
    (void)now;
    if (!sp.authentic()) return false;
    const Proposal& p = sp.proposal;
    std::lock_guard lock(mu_);
    Hash32 id = p.id();
    if (proposals_.count(id)) return false;
    if (p.epoch != state_.epoch || !state_.is_member(p.proposer) || p.deadline <= p.created_at) return false;
    try {
        check_subject(p, state_);
    } catch (const Error&) {
        return false;
    }
    proposals_[id] = Tracked{sp, {}, false, false};
    return true;
}

Ballot Consensus::cast_vote(const Hash32& proposal_id, Choice choice, const PeerIdentity& voter, UnixMs now) {
    std::uint64_t epoch;
    {
        std::lock_guard lock(mu_);
        auto it = proposals_.find(proposal_id);
        if (it == proposals_.end()) throw Error(ErrorCode::kNotFound, "unknown proposal");
        const Tracked& t = it->second;
        if (auto prior = t.ballots.find(voter.peer_id()); prior != t.ballots.end()) return prior->second;
        if (now > t.proposal.proposal.deadline) throw Error(ErrorCode::kExpired, "proposal expired");
        if (t.applied || t.stale || tally_locked(t, now) != Outcome::kPending) {
            throw Error(ErrorCode::kState, "proposal is no longer pending");
        }
        if (!state_.is_member(voter.peer_id())) throw Error(ErrorCode::kUnauthorized, "voter is not a member");
        epoch = t.proposal.proposal.epoch;
    }
    Ballot b = Ballot::make(proposal_id, choice, epoch, voter);
    receive_ballot(b, now);
    return b;
}

BallotResult Consensus::receive_ballot(const Ballot& b, UnixMs now) {
    if (!b.authentic()) return BallotResult::kRejected;
    std::lock_guard lock(mu_);
    auto it = proposals_.find(b.proposal_id);
    if (it == proposals_.end()) return BallotResult::kRejected;
    Tracked& t = it->second;
    const Proposal& p = t.proposal.proposal;
    if (t.ballots.count(b.voter)) return BallotResult::kDuplicate;
    if (t.applied || t.stale || now > p.deadline || b.epoch != p.epoch) return BallotResult::kRejected;
    if (!state_.is_member(b.voter)) return BallotResult::kRejected;
    t.ballots.emplace(b.voter, b);
    return BallotResult::kCounted;
}

Outcome Consensus::tally_locked(const Tracked& t, UnixMs now) const {
    if (t.applied) return Outcome::kAccepted;
    if (t.stale) return Outcome::kRejected;
    std::size_t yes = 0, no = 0;
    for (const auto& [voter, b] : t.ballots) (b.choice == Choice::kYes ? yes : no)++;
    return tally_votes(state_.members.size(), yes, no, now > t.proposal.proposal.deadline);
}

Outcome Consensus::tally(const Hash32& proposal_id, UnixMs now) const {
    std::lock_guard lock(mu_);
    auto it = proposals_.find(proposal_id);
    if (it == proposals_.end()) throw Error(ErrorCode::kNotFound, "unknown proposal");
    return tally_locked(it->second, now);
}

void Consensus::apply_locked(const Hash32& id, Tracked& t) {
    state_ = apply_effect(state_, t.proposal.proposal);
    LogEntry entry{t.proposal, {}};
    for (const auto& [voter, b] : t.ballots) entry.ballots.push_back(b);
    log_.push_back(std::move(entry));
    t.applied = true;
    for (auto& [other_id, other] : proposals_) {
        if (other_id != id && !other.applied) other.stale = true;
    }
}

MembershipState Consensus::apply(const Hash32& proposal_id, UnixMs now) {
    std::lock_guard lock(mu_);
    auto it = proposals_.find(proposal_id);
    if (it == proposals_.end()) throw Error(ErrorCode::kNotFound, "unknown proposal");
    if (it->second.applied) return state_;
    if (tally_locked(it->second, now) != Outcome::kAccepted) {
        throw Error(ErrorCode::kState, "proposal has not been accepted");
    }
    apply_locked(proposal_id, it->second);
    return state_;
}

std::vector<Hash32> Consensus::settle(UnixMs now) {
    std::lock_guard lock(mu_);
    std::vector<std::pair<UnixMs, Hash32>> ready;
    for (const auto& [id, t] : proposals_) {
        if (!t.applied && tally_locked(t, now) == Outcome::kAccepted) ready.emplace_back(t.proposal.proposal.created_at, id);
    }
    std::sort(ready.begin(), ready.end());
    std::vector<Hash32> applied;
    for (const auto& [at, id] : ready) {
        Tracked& t = proposals_.at(id);
        if (t.stale || t.applied) continue;
        apply_locked(id, t);
        applied.push_back(id);
    }
    return applied;
}

bool Consensus::sync(const std::vector<LogEntry>& log) {
    MembershipState s = replay(genesis_, log);
    std::lock_guard lock(mu_);
    if (log.size() <= log_.size()) return false;
    state_ = std::move(s);
    log_ = log;
    std::set<Hash32> in_log;
    for (const auto& e : log_) in_log.insert(e.proposal.proposal.id());
    for (const auto& e : log_) {
        auto& t = proposals_[e.proposal.proposal.id()];
        t.proposal = e.proposal;
        for (const auto& b : e.ballots) t.ballots.emplace(b.voter, b);
        t.applied = true;
        t.stale = false;
    }
    for (auto& [id, t] : proposals_) {
        if (!in_log.count(id) && t.proposal.proposal.epoch < state_.epoch) {
            t.stale = true;
            t.applied = false;
        }
    }
    return true;
}

MembershipState Consensus::state() const {
    std::lock_guard lock(mu_);
    return state_;
}

std::vector<LogEntry> Consensus::log() const {
    std::lock_guard lock(mu_);
    return log_;
}

ProposalView Consensus::view(const Hash32& id, const Tracked& t, UnixMs now) const {
    ProposalView v;
    v.proposal = t.proposal;
    v.id = id;
    v.outcome = tally_locked(t, now);
    for (const auto& [voter, b] : t.ballots) (b.choice == Choice::kYes ? v.yes : v.no)++;
    v.members = state_.members.size();
    v.applied = t.applied;
    return v;
}

std::vector<ProposalView> Consensus::proposals(UnixMs now) const {
    std::lock_guard lock(mu_);
    std::vector<ProposalView> out;
    for (const auto& [id, t] : proposals_) out.push_back(view(id, t, now));
    std::sort(out.begin(), out.end(), [](const ProposalView& a, const ProposalView& b) {
        return std::make_pair(a.proposal.proposal.created_at, a.id) < std::make_pair(b.proposal.proposal.created_at, b.id);
    });
    return out;
}

std::optional<ProposalView> Consensus::proposal(const Hash32& id, UnixMs now) const {
    std::lock_guard lock(mu_);
    auto it = proposals_.find(id);
    if (it == proposals_.end()) return std::nullopt;
    return view(id, it->second, now);
}

std::vector<Ballot> Consensus::ballots(const Hash32& id) const {
    std::lock_guard lock(mu_);
    std::vector<Ballot> out;
    auto it = proposals_.find(id);
    if (it == proposals_.end()) return out;
    for (const auto& [voter, b] : it->second.ballots) out.push_back(b);
    return out;
}

}  // namespace fybrr
