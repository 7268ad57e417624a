#include "fybrr/wire.hpp"

#include "fybrr/net.hpp"

namespace fybrr {

const char* msg_type_name(MsgType t) {
    switch (t) {
        case MsgType::kData: return "DATA";
        case MsgType::kPing: return "PING";
        case MsgType::kPong: return "PONG";
        case MsgType::kClose: return "CLOSE";
        case MsgType::kHello: return "HELLO";
        case MsgType::kDhtPing: return "DHT_PING";
        case MsgType::kDhtPong: return "DHT_PONG";
        case MsgType::kFindNode: return "FIND_NODE";
        case MsgType::kFindNodeResp: return "FIND_NODE_RESP";
        case MsgType::kFindValue: return "FIND_VALUE";
        case MsgType::kFindValueResp: return "FIND_VALUE_RESP";
        case MsgType::kStore: return "STORE";
        case MsgType::kStoreResp: return "STORE_RESP";
        case MsgType::kPinPut: return "PIN_PUT";
        case MsgType::kPinAck: return "PIN_ACK";
        case MsgType::kGetBlock: return "GET_BLOCK";
        case MsgType::kBlockResp: return "BLOCK_RESP";
        case MsgType::kRelease: return "RELEASE";
        case MsgType::kReleaseAck: return "RELEASE_ACK";
        case MsgType::kDmqEnqueue: return "DMQ_ENQUEUE";
        case MsgType::kDmqDrain: return "DMQ_DRAIN";
        case MsgType::kDmqDrainResp: return "DMQ_DRAIN_RESP";
        case MsgType::kDmqAck: return "DMQ_ACK";
        case MsgType::kDmqReplicate: return "DMQ_REPLICATE";
        case MsgType::kDmqStatus: return "DMQ_STATUS";
        case MsgType::kDmqStatusResp: return "DMQ_STATUS_RESP";
        case MsgType::kDmqOk: return "DMQ_OK";
        case MsgType::kPropose: return "PROPOSE";
        case MsgType::kBallot: return "BALLOT";
        case MsgType::kStateReq: return "STATE_REQ";
        case MsgType::kStateResp: return "STATE_RESP";
        case MsgType::kGossipOk: return "GOSSIP_OK";
        case MsgType::kRegister: return "REGISTER";
        case MsgType::kRegisterOk: return "REGISTER_OK";
        case MsgType::kLookup: return "LOOKUP";
        case MsgType::kLookupResp: return "LOOKUP_RESP";
        case MsgType::kRelay: return "RELAY";
        case MsgType::kRelayResult: return "RELAY_RESULT";
        case MsgType::kRelayDeliver: return "RELAY_DELIVER";
        case MsgType::kDirectory: return "DIRECTORY";
        case MsgType::kDirectoryResp: return "DIRECTORY_RESP";
        case MsgType::kMembershipPush: return "MEMBERSHIP_PUSH";
        case MsgType::kMembershipOk: return "MEMBERSHIP_OK";
        case MsgType::kError: return "ERROR";
    }
    return "UNKNOWN";
}

Bytes encode_frame(const Frame& frame) {
    if (frame.payload.size() + 1 > kMaxFrameBytes) throw Error(ErrorCode::kInvalidArgument, "frame too large");
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(frame.payload.size() + 1));
    w.u8(static_cast<std::uint8_t>(frame.type));
    w.raw(frame.payload);
    return std::move(w).take();
}

Frame decode_frame(ByteView data) {
    ByteReader r(data);
    std::uint32_t len = r.u32();
    if (len == 0 || len > kMaxFrameBytes) throw Error(ErrorCode::kDecode, "bad frame length");
    if (len != r.remaining()) throw Error(ErrorCode::kDecode, "frame length does not match buffer");
    Frame f;
    f.type = static_cast<MsgType>(r.u8());
    ByteView rest = r.rest();
    f.payload.assign(rest.begin(), rest.end());
    return f;
}

Frame error_frame(std::string_view message) {
    ByteWriter w;
    w.str(message);
    return {MsgType::kError, std::move(w).take()};
}

std::optional<Frame> read_frame(Socket& sock, std::optional<std::chrono::milliseconds> timeout) {
    ByteArray<4> hdr{};
    if (!sock.recv_exact(hdr, timeout)) return std::nullopt;
    std::uint32_t len = ByteReader(hdr).u32();
    if (len == 0 || len > kMaxFrameBytes) throw Error(ErrorCode::kDecode, "bad frame length");
    Bytes body(len);
    if (!sock.recv_exact(body, timeout)) throw Error(ErrorCode::kIo, "connection closed mid-frame");
    Frame f;
    f.type = static_cast<MsgType>(body[0]);
    f.payload.assign(body.begin() + 1, body.end());
    return f;
}

void write_frame(Socket& sock, const Frame& frame) { sock.send_all(encode_frame(frame)); }

}  // namespace fybrr
