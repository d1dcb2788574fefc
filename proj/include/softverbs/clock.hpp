#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <thread>

namespace softverbs {

enum class ClockKind { Real, Virtual };

// Modeled costs charged to virtual time, in nanoseconds. The constants
// stand in for a generic commodity host; timing *shapes* in virtual-clock
// runs come from these, never from the wall clock, so a run is a pure
// function of (config, seed).
struct VirtualCosts {
    uint64_t submit_ns        = 100;   // post validation + queue insert
    uint64_t serialize_ns     = 80;    // descriptor encode + decode
    uint64_t syscall_ns       = 300;   // one null user/kernel crossing
    uint64_t policy_ns        = 30;    // one policy check
    uint64_t fragment_ns      = 150;   // per-fragment engine dispatch
    uint64_t wire_ns          = 200;   // per-fragment propagation
    uint64_t deliver_ns       = 50;    // completion append
    uint64_t poll_ns          = 30;    // one poll_cq call
    uint64_t event_wake_ns    = 3000;  // sleep + interrupt-style wakeup
    double   copy_ns_per_byte = 1.0 / 15.0;  // ~15 GB/s staging/DMA copy
};

// Wall clock or deterministic simulated clock. In virtual mode `now_ns`
// is advanced only by explicit charges; entities keep their own cursors
// and synchronize through message timestamps.
class Clock {
public:
    explicit Clock(ClockKind kind = ClockKind::Real) : kind_(kind) {}

    ClockKind kind() const { return kind_; }
    bool is_virtual() const { return kind_ == ClockKind::Virtual; }

    uint64_t now_ns() const {
        if (kind_ == ClockKind::Real)
            return uint64_t(std::chrono::duration_cast<std::chrono::nanoseconds>(
                                std::chrono::steady_clock::now().time_since_epoch())
                                .count());
        return vnow_.load(std::memory_order_relaxed);
    }

    // Advance virtual time by `ns` and return the new reading. No-op
    // reading in real mode (real time passes by itself).
    uint64_t charge(uint64_t ns) {
        if (kind_ == ClockKind::Virtual)
            return vnow_.fetch_add(ns, std::memory_order_relaxed) + ns;
        return now_ns();
    }

    // Move virtual time forward to at least `t`.
    void advance_to(uint64_t t) {
        if (kind_ != ClockKind::Virtual) return;
        uint64_t cur = vnow_.load(std::memory_order_relaxed);
        while (cur < t && !vnow_.compare_exchange_weak(cur, t, std::memory_order_relaxed)) {}
    }

    void sleep_until(uint64_t t) {
        if (kind_ == ClockKind::Virtual) {
            advance_to(t);
            return;
        }
        auto tp = std::chrono::steady_clock::time_point(std::chrono::nanoseconds(t));
        std::this_thread::sleep_until(tp);
    }

    VirtualCosts costs;

private:
    ClockKind kind_;
    std::atomic<uint64_t> vnow_{0};
};

// Cheap scoped stopwatch for real-clock measurements.
class Stopwatch {
public:
    Stopwatch() : t0_(std::chrono::steady_clock::now()) {}
    double elapsed_us() const {
        return std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0_)
            .count();
    }
    void reset() { t0_ = std::chrono::steady_clock::now(); }

private:
    std::chrono::steady_clock::time_point t0_;
};

} // namespace softverbs
