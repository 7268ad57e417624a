#include "fybrr/crypto.hpp"

#include <sodium.h>

#include <fstream>
#include <sstream>

namespace fybrr {
namespace {

struct SodiumInit {
    SodiumInit() {
        if (sodium_init() < 0) throw Error(ErrorCode::kState, "libsodium initialisation failed");
    }
};

void ensure_sodium() { static SodiumInit init; }

void require_len(ByteView v, std::size_t n, const char* what) {
    if (v.size() != n) {
        throw Error(ErrorCode::kInvalidArgument, std::string(what) + " must be " + std::to_string(n) +
                                                     " bytes, got " + std::to_string(v.size()));
    }
}

constexpr std::string_view kSigSeedLabel = "fybrr/sig/v1";

}  // namespace

const char* error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::kInvalidArgument: return "invalid_argument";
        case ErrorCode::kDecode: return "decode";
        case ErrorCode::kAuthentication: return "authentication";
        case ErrorCode::kNotFound: return "not_found";
        case ErrorCode::kHashMismatch: return "hash_mismatch";
        case ErrorCode::kUnauthorized: return "unauthorized";
        case ErrorCode::kPeerOffline: return "peer_offline";
        case ErrorCode::kTimeout: return "timeout";
        case ErrorCode::kChannelClosed: return "channel_closed";
        case ErrorCode::kConnectivity: return "connectivity";
        case ErrorCode::kExpired: return "expired";
        case ErrorCode::kIo: return "io";
        case ErrorCode::kState: return "state";
    }
    return "unknown";
}

std::string to_hex(ByteView data) {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out;
    out.reserve(data.size() * 2);
    for (std::uint8_t b : data) {
        out.push_back(kDigits[b >> 4]);
        out.push_back(kDigits[b & 0xF]);
    }
    return out;
}

Bytes from_hex(std::string_view hex) {
    if (hex.size() % 2 != 0) throw Error(ErrorCode::kDecode, "odd-length hex string");
    auto nibble = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        throw Error(ErrorCode::kDecode, std::string("invalid hex character '") + c + "'");
    };
    Bytes out(hex.size() / 2);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<std::uint8_t>(nibble(hex[2 * i]) << 4 | nibble(hex[2 * i + 1]));
    }
    return out;
}

Hash32 sha256(ByteView data) {
    ensure_sodium();
    Hash32 out{};
    crypto_hash_sha256(out.data(), data.data(), data.size());
    return out;
}

ContentId content_id(ByteView data) { return {sha256(data)}; }

PeerId PeerKeys::peer_id() const {
    ByteWriter w;
    w.raw(enc_public).raw(sig_public);
    return sha256(w.bytes());
}

void encode(ByteWriter& w, const PeerKeys& keys) { w.raw(keys.enc_public).raw(keys.sig_public); }

PeerKeys decode_peer_keys(ByteReader& r) {
    PeerKeys k;
    k.enc_public = r.array<32>();
    k.sig_public = r.array<32>();
    return k;
}

PublicKey x25519_public(const SecretKey& secret) {
    ensure_sodium();
    PublicKey pub{};
    crypto_scalarmult_base(pub.data(), secret.data());
    return pub;
}

PeerIdentity PeerIdentity::from_secrets(const SecretKey& enc_secret, const SecretKey& sig_secret) {
    ensure_sodium();
    PeerIdentity id;
    id.enc_secret_ = enc_secret;
    id.sig_secret_ = sig_secret;
    id.keys_.enc_public = x25519_public(enc_secret);
    ByteArray<crypto_sign_SECRETKEYBYTES> expanded{};
    crypto_sign_seed_keypair(id.keys_.sig_public.data(), expanded.data(), sig_secret.data());
    sodium_memzero(expanded.data(), expanded.size());
    id.peer_id_ = id.keys_.peer_id();
    return id;
}

PeerIdentity generate_identity(std::optional<ByteView> seed) {
    ensure_sodium();
    SecretKey enc_secret{};
    if (seed) {
        require_len(*seed, 32, "identity seed");
        std::copy(seed->begin(), seed->end(), enc_secret.begin());
    } else {
        randombytes_buf(enc_secret.data(), enc_secret.size());
    }
    ByteWriter w;
    w.raw(as_bytes(kSigSeedLabel)).raw(enc_secret);
    SecretKey sig_secret = sha256(w.bytes());
    return PeerIdentity::from_secrets(enc_secret, sig_secret);
}

void random_fill(std::span<std::uint8_t> out) {
    ensure_sodium();
    randombytes_buf(out.data(), out.size());
}

Nonce random_nonce() { return random_array<kNonceBytes>(); }

SealedBox seal(ByteView plaintext, const PeerIdentity& sender, ByteView recipient_public,
               const Nonce& nonce) {
    ensure_sodium();
    require_len(recipient_public, kKeyBytes, "recipient public key");
    SealedBox box;
    box.nonce = nonce;
    box.ciphertext.resize(plaintext.size() + crypto_box_MACBYTES);
    if (crypto_box_easy(box.ciphertext.data(), plaintext.data(), plaintext.size(), nonce.data(),
                        recipient_public.data(), sender.enc_secret().data()) != 0) {
        throw Error(ErrorCode::kInvalidArgument, "crypto_box rejected the recipient key");
    }
    return box;
}

Bytes open(const SealedBox& box, const PeerIdentity& recipient, ByteView sender_public) {
    ensure_sodium();
    require_len(sender_public, kKeyBytes, "sender public key");
    if (box.ciphertext.size() < crypto_box_MACBYTES) {
        throw Error(ErrorCode::kDecode, "ciphertext shorter than authentication tag");
    }
    Bytes plain(box.ciphertext.size() - crypto_box_MACBYTES);
    if (crypto_box_open_easy(plain.data(), box.ciphertext.data(), box.ciphertext.size(),
                             box.nonce.data(), sender_public.data(),
                             recipient.enc_secret().data()) != 0) {
        throw Error(ErrorCode::kAuthentication, "sealed box failed authentication");
    }
    return plain;
}

Signature sign(ByteView data, const PeerIdentity& signer) {
    ensure_sodium();
    ByteArray<crypto_sign_SECRETKEYBYTES> sk{};
    PublicKey pk{};
    crypto_sign_seed_keypair(pk.data(), sk.data(), signer.sig_secret().data());
    Signature sig{};
    crypto_sign_detached(sig.data(), nullptr, data.data(), data.size(), sk.data());
    sodium_memzero(sk.data(), sk.size());
    return sig;
}

bool verify(ByteView data, ByteView signature, ByteView sig_public) {
    ensure_sodium();
    require_len(signature, kSignatureBytes, "signature");
    require_len(sig_public, kKeyBytes, "signing public key");
    return crypto_sign_verify_detached(signature.data(), data.data(), data.size(),
                                       sig_public.data()) == 0;
}

SecretKey derive_session_key(const SecretKey& my_ephemeral_secret, const PublicKey& their_ephemeral,
                             ByteView context) {
    ensure_sodium();
    SecretKey shared{};
    if (crypto_scalarmult(shared.data(), my_ephemeral_secret.data(), their_ephemeral.data()) != 0) {
        throw Error(ErrorCode::kAuthentication, "degenerate ephemeral public key");
    }
    ByteWriter w;
    w.raw(shared).raw(context);
    SecretKey key = sha256(w.bytes());
    sodium_memzero(shared.data(), shared.size());
    return key;
}

Bytes secretbox_seal(ByteView plaintext, const SecretKey& key, const Nonce& nonce) {
    ensure_sodium();
    Bytes out(plaintext.size() + crypto_secretbox_MACBYTES);
    crypto_secretbox_easy(out.data(), plaintext.data(), plaintext.size(), nonce.data(), key.data());
    return out;
}

Bytes secretbox_open(ByteView ciphertext, const SecretKey& key, const Nonce& nonce) {
    ensure_sodium();
    if (ciphertext.size() < crypto_secretbox_MACBYTES) {
        throw Error(ErrorCode::kDecode, "ciphertext shorter than authentication tag");
    }
    Bytes out(ciphertext.size() - crypto_secretbox_MACBYTES);
    if (crypto_secretbox_open_easy(out.data(), ciphertext.data(), ciphertext.size(), nonce.data(),
                                   key.data()) != 0) {
        throw Error(ErrorCode::kAuthentication, "frame failed authentication");
    }
    return out;
}

std::string encode_key_file(const PeerIdentity& id) {
    ByteWriter w;
    w.raw(id.enc_secret()).raw(id.enc_public()).raw(id.sig_secret()).raw(id.sig_public());
    return std::string(kKeyFileHeader) + "\n" + to_hex(w.bytes()) + "\n";
}

PeerIdentity decode_key_file(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string header, body;
    std::getline(in, header);
    std::getline(in, body);
    if (!header.empty() && header.back() == '\r') header.pop_back();
    if (!body.empty() && body.back() == '\r') body.pop_back();
    if (header != kKeyFileHeader) throw Error(ErrorCode::kDecode, "key file: bad header");
    Bytes raw = from_hex(body);
    if (raw.size() != 128) throw Error(ErrorCode::kDecode, "key file: expected 128 key bytes");
    ByteReader r(raw);
    auto enc_secret = r.array<32>();
    auto enc_public = r.array<32>();
    auto sig_secret = r.array<32>();
    auto sig_public = r.array<32>();
    PeerIdentity id = PeerIdentity::from_secrets(enc_secret, sig_secret);
    if (id.enc_public() != enc_public || id.sig_public() != sig_public) {
        throw Error(ErrorCode::kDecode, "key file: public keys do not match secrets");
    }
    return id;
}

void write_key_file(const std::filesystem::path& path, const PeerIdentity& id) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot write key file " + path.string());
    out << encode_key_file(id);
    std::filesystem::permissions(path, std::filesystem::perms::owner_read | std::filesystem::perms::owner_write,
                                 std::filesystem::perm_options::replace);
}

PeerIdentity read_key_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::kIo, "cannot read key file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return decode_key_file(ss.str());
}

}  // namespace fybrr
