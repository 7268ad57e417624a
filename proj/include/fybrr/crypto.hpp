#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "fybrr/bytes.hpp"

namespace fybrr {

inline constexpr std::size_t kKeyBytes = 32;
inline constexpr std::size_t kNonceBytes = 24;
inline constexpr std::size_t kTagBytes = 16;
inline constexpr std::size_t kSignatureBytes = 64;

using PublicKey = ByteArray<kKeyBytes>;
using SecretKey = ByteArray<kKeyBytes>;
using Nonce = ByteArray<kNonceBytes>;
using Signature = ByteArray<kSignatureBytes>;

/// SHA-256 content address.
struct ContentId {
    Hash32 digest{};

    auto operator<=>(const ContentId&) const = default;
    std::string hex() const { return to_hex(digest); }
    static ContentId from_hex(std::string_view h) { return {array_from_hex<32>(h)}; }
};

ContentId content_id(ByteView data);
Hash32 sha256(ByteView data);

/// The public half of an identity. Self-certifying: anyone holding the two
/// keys can recompute peer_id() and compare it with a claimed id.
struct PeerKeys {
    PublicKey enc_public{};
    PublicKey sig_public{};

    auto operator<=>(const PeerKeys&) const = default;
    PeerId peer_id() const;
    bool certifies(const PeerId& claimed) const { return peer_id() == claimed; }
};

void encode(class ByteWriter& w, const PeerKeys& keys);
PeerKeys decode_peer_keys(class ByteReader& r);

/// Long-lived key material for one peer: an X25519 pair for sealing and an
/// Ed25519 pair for signatures. peer_id = SHA-256(enc_public || sig_public).
class PeerIdentity {
public:
    static PeerIdentity from_secrets(const SecretKey& enc_secret, const SecretKey& sig_secret);

    const SecretKey& enc_secret() const { return enc_secret_; }
    const PublicKey& enc_public() const { return keys_.enc_public; }
    const SecretKey& sig_secret() const { return sig_secret_; }
    const PublicKey& sig_public() const { return keys_.sig_public; }
    const PeerId& peer_id() const { return peer_id_; }
    const PeerKeys& keys() const { return keys_; }

    bool operator==(const PeerIdentity&) const = default;

private:
    PeerIdentity() = default;
    SecretKey enc_secret_{};
    SecretKey sig_secret_{};
    PeerKeys keys_{};
    PeerId peer_id_{};
};

/// Deterministic when a seed is given, otherwise drawn from the OS CSPRNG.
PeerIdentity generate_identity(std::optional<ByteView> seed = std::nullopt);

struct SealedBox {
    Nonce nonce{};
    Bytes ciphertext;  // tag (16) || encrypted plaintext

    bool operator==(const SealedBox&) const = default;
};

Nonce random_nonce();
void random_fill(std::span<std::uint8_t> out);

template <std::size_t N>
ByteArray<N> random_array() {
    ByteArray<N> out{};
    random_fill(out);
    return out;
}

/// Authenticated public-key encryption from sender to recipient.
SealedBox seal(ByteView plaintext, const PeerIdentity& sender, ByteView recipient_public,
               const Nonce& nonce);
inline SealedBox seal(ByteView plaintext, const PeerIdentity& sender, ByteView recipient_public) {
    return seal(plaintext, sender, recipient_public, random_nonce());
}

/// Throws Error(kAuthentication) on tamper/wrong key and Error(kDecode) when
/// the ciphertext is too short to hold a tag.
Bytes open(const SealedBox& box, const PeerIdentity& recipient, ByteView sender_public);

Signature sign(ByteView data, const PeerIdentity& signer);
bool verify(ByteView data, ByteView signature, ByteView sig_public);

/// X25519 shared secret hashed into a 32-byte symmetric key bound to context.
SecretKey derive_session_key(const SecretKey& my_ephemeral_secret, const PublicKey& their_ephemeral,
                             ByteView context);
PublicKey x25519_public(const SecretKey& secret);

/// XSalsa20-Poly1305 under a symmetric key (direct channel frames).
Bytes secretbox_seal(ByteView plaintext, const SecretKey& key, const Nonce& nonce);
Bytes secretbox_open(ByteView ciphertext, const SecretKey& key, const Nonce& nonce);

// Key file: line 1 "FYBRR-KEY-V1", line 2 hex of
// enc_secret || enc_public || sig_secret || sig_public (128 bytes).
inline constexpr std::string_view kKeyFileHeader = "FYBRR-KEY-V1";
std::string encode_key_file(const PeerIdentity& id);
PeerIdentity decode_key_file(std::string_view text);
void write_key_file(const std::filesystem::path& path, const PeerIdentity& id);
PeerIdentity read_key_file(const std::filesystem::path& path);

}  // namespace fybrr
