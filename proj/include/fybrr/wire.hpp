#pragma once

#include <chrono>
#include <optional>

#include "fybrr/bytes.hpp"

namespace fybrr {

class Socket;

/// Every protocol message type. Direct-channel frames use 0x01-0x05; node
/// RPC, rendezvous and gossip share the rest of the byte.
enum class MsgType : std::uint8_t {
    // direct channel
    kData = 0x01,
    kPing = 0x02,
    kPong = 0x03,
    kClose = 0x04,
    kHello = 0x05,

    // dht
    kDhtPing = 0x10,
    kDhtPong = 0x11,
    kFindNode = 0x12,
    kFindNodeResp = 0x13,
    kFindValue = 0x14,
    kFindValueResp = 0x15,
    kStore = 0x16,
    kStoreResp = 0x17,

    // content store
    kPinPut = 0x20,
    kPinAck = 0x21,
    kGetBlock = 0x22,
    kBlockResp = 0x23,
    kRelease = 0x24,
    kReleaseAck = 0x25,

    // distributed message queue
    kDmqEnqueue = 0x30,
    kDmqDrain = 0x31,
    kDmqDrainResp = 0x32,
    kDmqAck = 0x33,
    kDmqReplicate = 0x34,
    kDmqStatus = 0x35,
    kDmqStatusResp = 0x36,
    kDmqOk = 0x37,

    // swarm consensus gossip
    kPropose = 0x40,
    kBallot = 0x41,
    kStateReq = 0x42,
    kStateResp = 0x43,
    kGossipOk = 0x44,

    // rendezvous
    kRegister = 0x50,
    kRegisterOk = 0x51,
    kLookup = 0x52,
    kLookupResp = 0x53,
    kRelay = 0x54,
    kRelayResult = 0x55,
    kRelayDeliver = 0x56,
    kDirectory = 0x57,
    kDirectoryResp = 0x58,
    kMembershipPush = 0x59,
    kMembershipOk = 0x5A,

    kError = 0x7F,
};

const char* msg_type_name(MsgType t);

inline constexpr std::size_t kMaxFrameBytes = 8u << 20;

/// WireFrame: u32 length (big-endian, counts type + payload) || u8 type || payload.
struct Frame {
    MsgType type = MsgType::kError;
    Bytes payload;

    bool operator==(const Frame&) const = default;
};

Bytes encode_frame(const Frame& frame);
/// Decodes exactly one frame occupying the whole buffer.
Frame decode_frame(ByteView data);

Frame error_frame(std::string_view message);

/// Blocking frame I/O. read_frame returns nullopt on orderly EOF and throws
/// Error(kTimeout) / Error(kIo) on deadline or socket failure.
std::optional<Frame> read_frame(Socket& sock,
                                std::optional<std::chrono::milliseconds> timeout = std::nullopt);
void write_frame(Socket& sock, const Frame& frame);

}  // namespace fybrr
