#pragma once

#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fybrr/clock.hpp"
#include "fybrr/crypto.hpp"

namespace fybrr {

inline constexpr UnixMs kDefaultProposalTtlMs = 24LL * 3600 * 1000;

enum class ProposalKind : std::uint8_t {
    kAddMember = 1,
    kRemoveMember = 2,
    kPromoteBootstrap = 3,
    kDemoteBootstrap = 4,
    kSetPolicy = 5,
};

enum class Choice : std::uint8_t { kYes = 1, kNo = 2 };
enum class Outcome { kPending, kAccepted, kRejected };

const char* proposal_kind_name(ProposalKind k);
std::optional<ProposalKind> parse_proposal_kind(std::string_view s);
const char* outcome_name(Outcome o);

/// The decision rule on its own. Accepted iff 2*yes > members; Rejected iff
/// 2*no >= members or the deadline passed without acceptance.
Outcome tally_votes(std::size_t members, std::size_t yes, std::size_t no, bool deadline_passed);

struct MembershipState {
    std::uint64_t epoch = 0;
    std::set<PeerId> members;
    std::set<PeerId> bootstrap;
    std::map<std::string, std::string> policies;

    bool operator==(const MembershipState&) const = default;
    bool is_member(const PeerId& p) const { return members.count(p) != 0; }
    /// Byte-stable encoding used to compare replicas.
    Bytes canonical() const;
};

/// Subject of a proposal: a peer for membership/bootstrap kinds, a
/// (name, value) pair for SetPolicy.
struct Subject {
    PeerId peer{};
    std::string name;
    std::string value;

    bool operator==(const Subject&) const = default;
};

struct Proposal {
    ProposalKind kind = ProposalKind::kAddMember;
    Subject subject;
    PeerId proposer{};
    UnixMs created_at = 0;
    UnixMs deadline = 0;
    std::uint64_t epoch = 0;

    bool operator==(const Proposal&) const = default;
    Bytes canonical() const;
    Hash32 id() const;
};

struct SignedProposal {
    Proposal proposal;
    PeerKeys proposer_keys;
    Signature signature{};

    bool operator==(const SignedProposal&) const = default;
    bool authentic() const;
};

struct Ballot {
    Hash32 proposal_id{};
    PeerId voter{};
    Choice choice = Choice::kYes;
    std::uint64_t epoch = 0;
    Signature signature{};
    PeerKeys voter_keys;

    bool operator==(const Ballot&) const = default;
    /// proposal_id || voter || choice || u64 epoch: the signed bytes.
    Bytes signing_bytes() const;
    bool authentic() const;
    static Ballot make(const Hash32& proposal_id, Choice choice, std::uint64_t epoch, const PeerIdentity& voter);
};

/// Founding record: the creator is the sole initial member.
struct Genesis {
    PeerKeys creator_keys;
    UnixMs created_at = 0;
    Signature signature{};

    bool operator==(const Genesis&) const = default;
    bool authentic() const;
    MembershipState state() const;
    static Genesis make(const PeerIdentity& creator, UnixMs created_at);
};

/// One applied proposal together with the ballots that carried it.
struct LogEntry {
    SignedProposal proposal;
    std::vector<Ballot> ballots;

    bool operator==(const LogEntry&) const = default;
};

void encode(ByteWriter& w, const SignedProposal& p);
SignedProposal decode_signed_proposal(ByteReader& r);
void encode(ByteWriter& w, const Ballot& b);
Ballot decode_ballot(ByteReader& r);
void encode(ByteWriter& w, const Genesis& g);
Genesis decode_genesis(ByteReader& r);
void encode(ByteWriter& w, const std::vector<LogEntry>& log);
std::vector<LogEntry> decode_log(ByteReader& r);

std::string encode_genesis_file(const Genesis& g);
Genesis decode_genesis_file(std::string_view text);

/// Replays a log from genesis, checking every signature, membership rule
/// and majority. Throws Error(kAuthentication) or Error(kState) on the
/// first bad entry.
MembershipState replay(const Genesis& genesis, const std::vector<LogEntry>& log);

enum class BallotResult { kCounted, kDuplicate, kRejected };

struct ProposalView {
    SignedProposal proposal;
    Hash32 id{};
    Outcome outcome = Outcome::kPending;
    std::size_t yes = 0;
    std::size_t no = 0;
    std::size_t members = 0;
    bool applied = false;
};

/// Per-node consensus state machine. Thread-safe; every method is one
/// serialised step.
class Consensus {
public:
    explicit Consensus(Genesis genesis);

    SignedProposal propose(ProposalKind kind, Subject subject, const PeerIdentity& proposer, UnixMs now,
                           UnixMs ttl_ms = kDefaultProposalTtlMs);
    /// True when the proposal was new and valid for the current epoch.
    bool receive_proposal(const SignedProposal& p, UnixMs now);

    /// Signs and records a ballot. A voter who already voted gets their first
    /// ballot back unchanged. Throws kNotFound, kExpired, kUnauthorized or
    /// kState (no longer pending).
    Ballot cast_vote(const Hash32& proposal_id, Choice choice, const PeerIdentity& voter, UnixMs now);
    BallotResult receive_ballot(const Ballot& b, UnixMs now);

    Outcome tally(const Hash32& proposal_id, UnixMs now) const;
    /// Applies an accepted proposal; a second call is a no-op. Throws
    /// Error(kState) for a proposal that is not accepted.
    MembershipState apply(const Hash32& proposal_id, UnixMs now);
    /// Tallies every pending proposal and applies the accepted ones in
    /// (created_at, id) order. Returns the ids applied.
    std::vector<Hash32> settle(UnixMs now);

    /// Adopts a longer verified log. Throws on a forged log.
    bool sync(const std::vector<LogEntry>& log);

    MembershipState state() const;
    std::vector<LogEntry> log() const;
    const Genesis& genesis() const { return genesis_; }
    std::vector<ProposalView> proposals(UnixMs now) const;
    std::optional<ProposalView> proposal(const Hash32& id, UnixMs now) const;
    std::vector<Ballot> ballots(const Hash32& id) const;

private:
    struct Tracked {
        SignedProposal proposal;
        std::map<PeerId, Ballot> ballots;  // first ballot per voter binds
        bool applied = false;
        bool stale = false;
    };

    ProposalView view(const Hash32& id, const Tracked& t, UnixMs now) const;
    Outcome tally_locked(const Tracked& t, UnixMs now) const;
    void apply_locked(const Hash32& id, Tracked& t);

    Genesis genesis_;
    mutable std::mutex mu_;
    MembershipState state_;
    std::map<Hash32, Tracked> proposals_;
    std::vector<LogEntry> log_;
};

/// State transition for one accepted proposal (no vote checks).
MembershipState apply_effect(const MembershipState& s, const Proposal& p);
/// Throws Error(kInvalidArgument) when the subject does not fit the state.
void check_subject(const Proposal& p, const MembershipState& s);

}  // namespace fybrr
