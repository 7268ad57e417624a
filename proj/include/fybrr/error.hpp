#pragma once

#include <stdexcept>
#include <string>

namespace fybrr {

enum class ErrorCode {
    kInvalidArgument,
    kDecode,
    kAuthentication,
    kNotFound,
    kHashMismatch,
    kUnauthorized,
    kPeerOffline,
    kTimeout,
    kChannelClosed,
    kConnectivity,
    kExpired,
    kIo,
    kState,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace fybrr
