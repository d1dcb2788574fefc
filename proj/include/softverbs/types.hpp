#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "softverbs/util.hpp"

namespace softverbs {

using NodeId = uint32_t;
using QpNum = uint32_t;
using MrKey = uint32_t;

constexpr uint32_t kMtu = 4096;                       // bytes per fragment
constexpr uint64_t kMaxMsgBytes = 1ull << 30;         // 1 GiB cap per WR
constexpr uint32_t kUdMaxBytes = 4096;                // min(path MTU, 4096)
constexpr int kMaxSge = 4;
constexpr int kRcWindow = 64;                         // in-flight fragment cap
constexpr uint64_t kRtoBaseNs = 1'000'000;            // 1 ms, doubling
constexpr int kRetryBudget = 8;
constexpr uint64_t kRnrBackoffBaseNs = 10'000;        // 10 us, doubling
constexpr uint32_t kInlineCap = 256;

enum class Transport : uint8_t { RC = 0, UD = 1 };

enum class QpState : uint8_t { RESET, INIT, RTR, RTS, ERROR };

enum class Opcode : uint8_t { SEND = 0, RECV = 1, RDMA_WRITE = 2, RDMA_READ = 3 };

enum class WcStatus : uint8_t {
    SUCCESS = 0,
    LOC_KEY_ERR,
    REM_ACCESS_ERR,
    POLICY_DENIED,
    QP_ERR,
    FLUSH_ERR,
};

// ibverbs-style immediate result of a post call. Anything the submitter
// can detect before the op enters the system is reported here; everything
// later arrives as a WorkCompletion.
enum class PostResult : uint8_t {
    OK = 0,
    QUEUE_FULL,
    BAD_STATE,
    INVALID_WR,
    CHANNEL_CLOSED,
};

// MR access permissions. LOCAL_READ is implicit on every registration.
enum Access : uint32_t {
    LOCAL_READ = 1u << 0,
    LOCAL_WRITE = 1u << 1,
    REMOTE_READ = 1u << 2,
    REMOTE_WRITE = 1u << 3,
};

struct Sge {
    uint64_t addr = 0;
    uint32_t length = 0;
    MrKey lkey = 0;
};

struct WorkRequest {
    uint64_t wr_id = 0;
    Opcode opcode = Opcode::SEND;
    std::vector<Sge> sge;
    // RDMA_WRITE / RDMA_READ target.
    std::optional<std::pair<uint64_t, MrKey>> remote;  // (remote_address, rkey)
    // UD SEND destination.
    std::optional<std::pair<NodeId, QpNum>> dest;      // (node_id, qp_num)

    uint64_t total_len() const {
        uint64_t n = 0;
        for (const auto& s : sge) n += s.length;
        return n;
    }
};

struct WorkCompletion {
    uint64_t wr_id = 0;
    WcStatus status = WcStatus::SUCCESS;
    Opcode opcode = Opcode::SEND;
    uint32_t byte_len = 0;   // recv and READ completions; 0 unless SUCCESS
    QpNum qp_num = 0;
    uint64_t sim_time_ns = 0;  // virtual-clock delivery timestamp
};

enum class PathMode : uint8_t { Bypass = 0, Mediated = 1 };

// Technique removal knobs; all independent and combinable.
struct AblationFlags {
    bool no_zero_copy = false;
    bool no_polling = false;
    bool no_bypass_tax = false;

    std::string label() const {
        std::string s;
        auto add = [&](const char* t) {
            if (!s.empty()) s += '+';
            s += t;
        };
        if (no_zero_copy) add("no-zc");
        if (no_polling) add("no-poll");
        if (no_bypass_tax) add("no-bypass");
        return s.empty() ? "-" : s;
    }
};

inline const char* to_string(WcStatus s) {
    switch (s) {
        case WcStatus::SUCCESS: return "SUCCESS";
        case WcStatus::LOC_KEY_ERR: return "LOC_KEY_ERR";
        case WcStatus::REM_ACCESS_ERR: return "REM_ACCESS_ERR";
        case WcStatus::POLICY_DENIED: return "POLICY_DENIED";
        case WcStatus::QP_ERR: return "QP_ERR";
        case WcStatus::FLUSH_ERR: return "FLUSH_ERR";
    }
    return "?";
}

inline const char* to_string(Opcode o) {
    switch (o) {
        case Opcode::SEND: return "SEND";
        case Opcode::RECV: return "RECV";
        case Opcode::RDMA_WRITE: return "RDMA_WRITE";
        case Opcode::RDMA_READ: return "RDMA_READ";
    }
    return "?";
}

inline const char* to_string(PathMode m) { return m == PathMode::Bypass ? "bp" : "cd"; }

} // namespace softverbs
