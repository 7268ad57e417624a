#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fybrr/error.hpp"

namespace fybrr {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

template <std::size_t N>
using ByteArray = std::array<std::uint8_t, N>;

using Hash32 = ByteArray<32>;
using PeerId = Hash32;

inline ByteView as_bytes(std::string_view s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

inline std::string to_string(ByteView b) { return {b.begin(), b.end()}; }

std::string to_hex(ByteView data);

/// Throws Error(kDecode) on odd length or non-hex characters.
Bytes from_hex(std::string_view hex);

template <std::size_t N>
ByteArray<N> array_from_hex(std::string_view hex) {
    Bytes raw = from_hex(hex);
    if (raw.size() != N) {
        throw Error(ErrorCode::kDecode, "expected " + std::to_string(N) + " hex bytes, got " +
                                            std::to_string(raw.size()));
    }
    ByteArray<N> out{};
    std::copy(raw.begin(), raw.end(), out.begin());
    return out;
}

template <std::size_t N>
ByteArray<N> array_from(ByteView data) {
    if (data.size() != N) {
        throw Error(ErrorCode::kInvalidArgument,
                    "expected " + std::to_string(N) + " bytes, got " + std::to_string(data.size()));
    }
    ByteArray<N> out{};
    std::copy(data.begin(), data.end(), out.begin());
    return out;
}

/// Big-endian serializer used by every canonical encoding.
class ByteWriter {
public:
    ByteWriter& u8(std::uint8_t v) {
        buf_.push_back(v);
        return *this;
    }
    ByteWriter& u16(std::uint16_t v) { return be(v, 2); }
    ByteWriter& u32(std::uint32_t v) { return be(v, 4); }
    ByteWriter& u64(std::uint64_t v) { return be(v, 8); }
    ByteWriter& i64(std::int64_t v) { return be(static_cast<std::uint64_t>(v), 8); }

    ByteWriter& raw(ByteView data) {
        buf_.insert(buf_.end(), data.begin(), data.end());
        return *this;
    }
    template <std::size_t N>
    ByteWriter& raw(const ByteArray<N>& a) {
        return raw(ByteView(a));
    }
    /// u32 length prefix followed by the bytes.
    ByteWriter& blob(ByteView data) {
        u32(static_cast<std::uint32_t>(data.size()));
        return raw(data);
    }
    ByteWriter& str(std::string_view s) { return blob(as_bytes(s)); }

    const Bytes& bytes() const& { return buf_; }
    Bytes take() && { return std::move(buf_); }
    std::size_t size() const { return buf_.size(); }

private:
    ByteWriter& be(std::uint64_t v, int width) {
        for (int i = width - 1; i >= 0; --i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
        return *this;
    }
    Bytes buf_;
};

/// Bounds-checked big-endian reader; every overrun throws Error(kDecode).
class ByteReader {
public:
    explicit ByteReader(ByteView data) : data_(data) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(be(1)); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(be(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(be(4)); }
    std::uint64_t u64() { return be(8); }
    std::int64_t i64() { return static_cast<std::int64_t>(be(8)); }

    ByteView raw(std::size_t n) {
        need(n);
        ByteView out = data_.subspan(pos_, n);
        pos_ += n;
        return out;
    }
    template <std::size_t N>
    ByteArray<N> array() {
        ByteView v = raw(N);
        ByteArray<N> out{};
        std::copy(v.begin(), v.end(), out.begin());
        return out;
    }
    Bytes blob(std::size_t max_len = 64u << 20) {
        std::uint32_t n = u32();
        if (n > max_len) throw Error(ErrorCode::kDecode, "length prefix exceeds bound");
        ByteView v = raw(n);
        return {v.begin(), v.end()};
    }
    std::string str(std::size_t max_len = 1u << 16) {
        Bytes b = blob(max_len);
        return {b.begin(), b.end()};
    }
    ByteView rest() { return raw(remaining()); }

    std::size_t remaining() const { return data_.size() - pos_; }
    bool done() const { return pos_ == data_.size(); }
    void expect_done() const {
        if (!done()) throw Error(ErrorCode::kDecode, "trailing bytes");
    }

private:
    void need(std::size_t n) const {
        if (n > remaining()) throw Error(ErrorCode::kDecode, "truncated input");
    }
    std::uint64_t be(int width) {
        need(static_cast<std::size_t>(width));
        std::uint64_t v = 0;
        for (int i = 0; i < width; ++i) v = (v << 8) | data_[pos_ + i];
        pos_ += static_cast<std::size_t>(width);
        return v;
    }
    ByteView data_;
    std::size_t pos_ = 0;
};

}  // namespace fybrr
