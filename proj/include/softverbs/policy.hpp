#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "softverbs/descriptor.hpp"
#include "softverbs/types.hpp"

namespace softverbs {

enum class DenyReason : uint8_t { RATE, ACL, SIZE };

struct PolicyVerdict {
    bool allow = true;
    DenyReason reason = DenyReason::ACL;
};

struct AclRule {
    bool allow = true;
    std::optional<QpNum> src_qp;    // nullopt = '*'
    std::optional<NodeId> dst_node;
    std::optional<QpNum> dst_qp;
    std::optional<Opcode> opcode;
};

struct RateLimit {
    double msgs_per_s = 0;
    double bytes_per_s = 0;  // 0 = unlimited bytes
    double burst = 1;        // messages
};

// Rule set: ACL first match wins (default allow), then the per-QP size
// cap, then token buckets. Evaluation is a pure function of the op, the
// bucket state and the clock: nothing here can wait.
struct PolicySpec {
    std::vector<AclRule> acl;
    std::map<QpNum, uint64_t> size_caps;
    std::optional<uint64_t> size_cap_all;
    std::map<QpNum, RateLimit> rates;
    std::optional<RateLimit> rate_all;

    void validate() const {
        for (auto& [qp, r] : rates) {
            require(r.msgs_per_s > 0, "policy: rate msgs/s must be > 0");
            require(r.burst >= 1, "policy: burst must be >= 1");
        }
        if (rate_all) {
            require(rate_all->msgs_per_s > 0, "policy: rate msgs/s must be > 0");
            require(rate_all->burst >= 1, "policy: burst must be >= 1");
        }
    }
};

struct PolicyCounters {
    struct Bucket {
        uint64_t msgs_posted = 0;
        uint64_t msgs_denied_rate = 0;
        uint64_t msgs_denied_acl = 0;
        uint64_t msgs_denied_size = 0;
        uint64_t bytes_allowed = 0;
        uint64_t by_opcode[4] = {0, 0, 0, 0};
    };
    Bucket global;
    std::map<QpNum, Bucket> per_qp;
};

class PolicyEngine {
public:
    void install(PolicySpec spec) {
        spec.validate();
        auto next = std::make_shared<const PolicySpec>(std::move(spec));
        std::lock_guard lk(mu_);
        spec_ = std::move(next);  // ops see old or new, never a mix
        buckets_.clear();
    }

    bool has_policy() const {
        std::lock_guard lk(mu_);
        return spec_ != nullptr;
    }

    // Single-op decision. Tokens are consumed only on ALLOW, and only
    // for send-side ops; receive posting is ACL-gated but not metered.
    PolicyVerdict check(const OpDescriptor& d, uint64_t now_ns,
                        std::optional<NodeId> dst_node) {
        std::lock_guard lk(mu_);
        if (!spec_) {
            count_allow(d);
            return {};
        }
        const PolicySpec& s = *spec_;
        for (const auto& r : s.acl) {
            if (r.src_qp && *r.src_qp != d.qp_num) continue;
            if (r.dst_node && (!dst_node || *r.dst_node != *dst_node)) continue;
            if (r.dst_qp) {
                std::optional<QpNum> dq;
                if (d.wr.dest) dq = d.wr.dest->second;
                if (!dq || *r.dst_qp != *dq) continue;
            }
            if (r.opcode && *r.opcode != d.wr.opcode) continue;
            if (!r.allow) return deny(d, DenyReason::ACL);
            break;
        }
        uint64_t len = d.wr.total_len();
        if (d.kind == OpKind::POST_SEND) {
            const uint64_t* cap = nullptr;
            auto it = s.size_caps.find(d.qp_num);
            if (it != s.size_caps.end()) cap = &it->second;
            else if (s.size_cap_all) cap = &*s.size_cap_all;
            if (cap && len > *cap) return deny(d, DenyReason::SIZE);

            const RateLimit* rl = nullptr;
            auto rit = s.rates.find(d.qp_num);
            if (rit != s.rates.end()) rl = &rit->second;
            else if (s.rate_all) rl = &*s.rate_all;
            if (rl) {
                Buckets& b = buckets_[d.qp_num];
                refill(b, *rl, now_ns);
                bool need_bytes = rl->bytes_per_s > 0;
                if (b.msg_tokens < 1.0 || (need_bytes && b.byte_tokens < double(len)))
                    return deny(d, DenyReason::RATE);
                b.msg_tokens -= 1.0;
                if (need_bytes) b.byte_tokens -= double(len);
            }
        }
        count_allow(d);
        return {};
    }

    PolicyCounters snapshot() const {
        std::lock_guard lk(mu_);
        return counters_;
    }

    // `counter <name> <qp|global> <value>` lines.
    std::string dump_counters() const {
        std::lock_guard lk(mu_);
        std::ostringstream os;
        auto emit = [&](const PolicyCounters::Bucket& b, const std::string& scope) {
            os << "counter msgs_posted " << scope << ' ' << b.msgs_posted << '\n';
            os << "counter msgs_denied_rate " << scope << ' ' << b.msgs_denied_rate << '\n';
            os << "counter msgs_denied_acl " << scope << ' ' << b.msgs_denied_acl << '\n';
            os << "counter msgs_denied_size " << scope << ' ' << b.msgs_denied_size << '\n';
            os << "counter bytes_allowed " << scope << ' ' << b.bytes_allowed << '\n';
            const char* names[4] = {"send", "recv", "rdma_write", "rdma_read"};
            for (int i = 0; i < 4; ++i)
                os << "counter ops_" << names[i] << ' ' << scope << ' ' << b.by_opcode[i] << '\n';
        };
        emit(counters_.global, "global");
        for (auto& [qp, b] : counters_.per_qp) emit(b, std::to_string(qp));
        return os.str();
    }

private:
    struct Buckets {
        double msg_tokens = -1;  // -1 = uninitialized (start full)
        double byte_tokens = -1;
        uint64_t last_ns = 0;
    };

    void refill(Buckets& b, const RateLimit& rl, uint64_t now_ns) {
        if (b.msg_tokens < 0) {
            b.msg_tokens = rl.burst;
            b.byte_tokens = rl.bytes_per_s;  // one second's worth
            b.last_ns = now_ns;
            return;
        }
        double dt = now_ns >= b.last_ns ? double(now_ns - b.last_ns) * 1e-9 : 0.0;
        b.last_ns = now_ns;
        b.msg_tokens = std::min(rl.burst, b.msg_tokens + rl.msgs_per_s * dt);
        if (rl.bytes_per_s > 0)
            b.byte_tokens = std::min(rl.bytes_per_s, b.byte_tokens + rl.bytes_per_s * dt);
    }

    PolicyVerdict deny(const OpDescriptor& d, DenyReason why) {
        auto bump = [&](PolicyCounters::Bucket& b) {
            switch (why) {
                case DenyReason::RATE: ++b.msgs_denied_rate; break;
                case DenyReason::ACL: ++b.msgs_denied_acl; break;
                case DenyReason::SIZE: ++b.msgs_denied_size; break;
            }
        };
        bump(counters_.global);
        bump(counters_.per_qp[d.qp_num]);
        return {false, why};
    }

    void count_allow(const OpDescriptor& d) {
        auto bump = [&](PolicyCounters::Bucket& b) {
            ++b.msgs_posted;
            b.bytes_allowed += d.wr.total_len();
            ++b.by_opcode[uint8_t(d.wr.opcode) & 3];
        };
        bump(counters_.global);
        bump(counters_.per_qp[d.qp_num]);
    }

    mutable std::mutex mu_;
    std::shared_ptr<const PolicySpec> spec_;
    std::map<QpNum, Buckets> buckets_;
    PolicyCounters counters_;
};

// Policy file:
//   rate <qp|*> <msgs/s> <bytes/s> <burst>
//   acl <allow|deny> <src_qp|*> <dst_node|*> <dst_qp|*> <opcode|*>
//   cap <qp|*> <bytes>
inline PolicySpec parse_policy(const std::string& text) {
    PolicySpec spec;
    std::istringstream in(text);
    std::string line;
    auto parse_opcode = [](const std::string& s) -> Opcode {
        if (s == "send") return Opcode::SEND;
        if (s == "recv") return Opcode::RECV;
        if (s == "write" || s == "rdma_write") return Opcode::RDMA_WRITE;
        if (s == "read" || s == "rdma_read") return Opcode::RDMA_READ;
        throw Error("policy: bad opcode " + s);
    };
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "rate") {
            std::string qp;
            RateLimit rl;
            if (!(ls >> qp >> rl.msgs_per_s >> rl.bytes_per_s >> rl.burst))
                throw Error("policy: bad rate line: " + line);
            if (qp == "*") spec.rate_all = rl;
            else spec.rates[QpNum(std::stoul(qp))] = rl;
        } else if (tag == "acl") {
            std::string verdict, src, dnode, dqp, op;
            if (!(ls >> verdict >> src >> dnode >> dqp >> op))
                throw Error("policy: bad acl line: " + line);
            AclRule r;
            r.allow = verdict == "allow";
            if (!r.allow && verdict != "deny") throw Error("policy: bad acl verdict: " + verdict);
            if (src != "*") r.src_qp = QpNum(std::stoul(src));
            if (dnode != "*") r.dst_node = NodeId(std::stoul(dnode));
            if (dqp != "*") r.dst_qp = QpNum(std::stoul(dqp));
            if (op != "*") r.opcode = parse_opcode(op);
            spec.acl.push_back(r);
        } else if (tag == "cap") {
            std::string qp;
            uint64_t bytes;
            if (!(ls >> qp >> bytes)) throw Error("policy: bad cap line: " + line);
            if (qp == "*") spec.size_cap_all = bytes;
            else spec.size_caps[QpNum(std::stoul(qp))] = bytes;
        } else {
            throw Error("policy: unknown directive: " + tag);
        }
    }
    return spec;
}

} // namespace softverbs
