#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>

namespace fybrr {

/// Unix time in milliseconds.
using UnixMs = std::int64_t;

class Clock {
public:
    virtual ~Clock() = default;
    virtual UnixMs now() const = 0;
};

class SystemClock final : public Clock {
public:
    UnixMs now() const override {
        return std::chrono::duration_cast<std::chrono::milliseconds>(
                   std::chrono::system_clock::now().time_since_epoch())
            .count();
    }
};

/// Test clock; only moves when told to.
class ManualClock final : public Clock {
public:
    explicit ManualClock(UnixMs start = 1'700'000'000'000) : now_(start) {}
    UnixMs now() const override { return now_.load(); }
    void advance(UnixMs delta) { now_ += delta; }
    void set(UnixMs t) { now_ = t; }

private:
    std::atomic<UnixMs> now_;
};

inline std::shared_ptr<Clock> system_clock() {
    static auto clock = std::make_shared<SystemClock>();
    return clock;
}

}  // namespace fybrr
