#pragma once

#include <poll.h>
#include <sys/eventfd.h>
#include <unistd.h>

#include <atomic>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <map>
#include <memory>
#include <unordered_map>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <vector>

#include "softverbs/bounce.hpp"
#include "softverbs/clock.hpp"
#include "softverbs/types.hpp"
#include "softverbs/util.hpp"

namespace softverbs {

struct ProtectionDomain {
    uint32_t pd_id = 0;
};

struct MemoryRegion {
    uint32_t mr_id = 0;
    uint64_t base = 0;
    uint64_t length = 0;
    MrKey lkey = 0;
    MrKey rkey = 0;
    uint32_t access = LOCAL_READ;
    uint32_t pd_id = 0;
};

enum class AuditKind : uint8_t { DmaRead, DmaWrite, StageCopy, InlineCopy };

inline const char* to_string(AuditKind k) {
    switch (k) {
        case AuditKind::DmaRead: return "R";
        case AuditKind::DmaWrite: return "W";
        case AuditKind::StageCopy: return "stage";
        case AuditKind::InlineCopy: return "inline";
    }
    return "?";
}

struct AuditEntry {
    NodeId node = 0;
    MrKey key = 0;
    uint64_t base = 0;
    uint64_t len = 0;
    AuditKind kind = AuditKind::DmaRead;
    bool allowed = false;
};

// Every engine touch of application memory goes through the guard: a
// lookup either yields a span carved from a live registration or nothing.
// Out-of-range access is impossible by construction and the audit log
// records each decision.
class DmaGuard {
public:
    explicit DmaGuard(NodeId node) : node_(node) {}

    enum class MrState : uint8_t { Live, Dying, Dead };

    struct Record {
        uint32_t mr_id = 0;
        uint64_t base = 0;
        uint64_t length = 0;
        uint32_t access = 0;
        uint32_t pd_id = 0;
        MrState state = MrState::Live;
        int pins = 0;
    };

    void add(const MemoryRegion& mr) {
        std::lock_guard lk(mu_);
        auto rec = std::make_shared<Record>();
        rec->mr_id = mr.mr_id;
        rec->base = mr.base;
        rec->length = mr.length;
        rec->access = mr.access;
        rec->pd_id = mr.pd_id;
        table_[mr.lkey] = rec;
        table_[mr.rkey] = rec;
    }

    // Deregistration defers while ops hold pins; returns true when the
    // keys died immediately.
    bool deregister(MrKey lkey, MrKey rkey) {
        std::lock_guard lk(mu_);
        auto it = table_.find(lkey);
        if (it == table_.end()) return true;
        auto rec = it->second;
        rec->state = rec->pins > 0 ? MrState::Dying : MrState::Dead;
        (void)rkey;
        return rec->state == MrState::Dead;
    }

    // Pin a key on behalf of an accepted op. Fails on unknown, dying or
    // dead keys: a posted op may finish using a region being torn down,
    // but nothing new gets in.
    bool pin(MrKey key) {
        std::lock_guard lk(mu_);
        auto it = table_.find(key);
        if (it == table_.end() || it->second->state != MrState::Live) return false;
        ++it->second->pins;
        return true;
    }

    void unpin(MrKey key) {
        std::lock_guard lk(mu_);
        auto it = table_.find(key);
        if (it == table_.end()) return;
        auto& rec = *it->second;
        if (rec.pins > 0) --rec.pins;
        if (rec.pins == 0 && rec.state == MrState::Dying) rec.state = MrState::Dead;
    }

    // Control-plane range/permission probe; no audit entry, no memory
    // touched. Used to vet sges at submission time.
    bool validate(MrKey key, uint64_t addr, uint64_t len, uint32_t need) const {
        std::lock_guard lk(mu_);
        auto it = table_.find(key);
        return it != table_.end() && it->second->state == MrState::Live &&
               (it->second->access & need) == need && addr >= it->second->base &&
               len <= it->second->length && addr - it->second->base <= it->second->length - len;
    }

    // Checked access. On success returns the span covering
    // [addr, addr+len); the caller touches memory only through it.
    std::optional<std::span<uint8_t>> access(MrKey key, uint64_t addr, uint64_t len,
                                             uint32_t need, AuditKind kind,
                                             std::optional<uint32_t> pd = std::nullopt) {
        std::lock_guard lk(mu_);
        auto it = table_.find(key);
        bool ok = it != table_.end() && it->second->state != MrState::Dead &&
                  (it->second->access & need) == need && addr >= it->second->base &&
                  len <= it->second->length && addr - it->second->base <= it->second->length - len;
        if (ok && pd && it->second->pd_id != *pd) ok = false;
        log(key, addr, len, kind, ok);
        if (!ok) return std::nullopt;
        return std::span<uint8_t>(reinterpret_cast<uint8_t*>(addr), size_t(len));
    }

    // Record a staging/inline copy event (the copy itself happens in the
    // engine or the submission path).
    void note_copy(MrKey key, uint64_t addr, uint64_t len, AuditKind kind) {
        std::lock_guard lk(mu_);
        log(key, addr, len, kind, true);
    }

    void set_full_log(bool on) {
        std::lock_guard lk(mu_);
        full_log_ = on;
    }

    std::vector<AuditEntry> audit_snapshot() const {
        std::lock_guard lk(mu_);
        return log_;
    }

    void audit_reset() {
        std::lock_guard lk(mu_);
        log_.clear();
        counts_ = {};
    }

    struct Counts {
        uint64_t reads = 0, writes = 0, stage_copies = 0, inline_copies = 0, denied = 0;
    };
    Counts counts() const {
        std::lock_guard lk(mu_);
        return counts_;
    }

    // Line-delimited export: `access <node> <key> <base> <len> <perm> <verdict>`.
    std::string export_audit() const {
        std::lock_guard lk(mu_);
        std::ostringstream os;
        for (const auto& e : log_)
            os << "access " << e.node << ' ' << e.key << ' ' << e.base << ' ' << e.len << ' '
               << to_string(e.kind) << ' ' << (e.allowed ? "allow" : "deny") << '\n';
        return os.str();
    }

private:
    void log(MrKey key, uint64_t addr, uint64_t len, AuditKind kind, bool ok) {
        switch (kind) {
            case AuditKind::DmaRead: ++counts_.reads; break;
            case AuditKind::DmaWrite: ++counts_.writes; break;
            case AuditKind::StageCopy: ++counts_.stage_copies; break;
            case AuditKind::InlineCopy: ++counts_.inline_copies; break;
        }
        if (!ok) ++counts_.denied;
        if (full_log_) log_.push_back({node_, key, addr, len, kind, ok});
    }

    NodeId node_;
    mutable std::mutex mu_;
    std::unordered_map<MrKey, std::shared_ptr<Record>> table_;
    std::vector<AuditEntry> log_;
    Counts counts_;
    bool full_log_ = true;
};

// Completion ring plus an event channel. The channel is a real eventfd:
// firing an event is a write(2) from the completion producer, waiting is
// a poll(2)/read(2) by the consumer, the same machinery as an ibverbs
// completion channel.
class CompletionQueue {
public:
    CompletionQueue(uint32_t cq_id, uint32_t capacity) : cq_id_(cq_id), capacity_(capacity) {
        require(capacity >= 1, "cq capacity must be >= 1");
        efd_ = ::eventfd(0, EFD_NONBLOCK);
        require(efd_ >= 0, "eventfd failed");
    }

    ~CompletionQueue() {
        if (efd_ >= 0) ::close(efd_);
    }

    CompletionQueue(const CompletionQueue&) = delete;
    CompletionQueue& operator=(const CompletionQueue&) = delete;

    uint32_t id() const { return cq_id_; }
    uint32_t capacity() const { return capacity_; }

    // Engine-side append. Returns false on overrun (the sticky flag is
    // set; the caller escalates to the bound QPs).
    bool push(const WorkCompletion& wc) {
        std::unique_lock lk(mu_);
        if (ring_.size() >= capacity_) {
            overrun_ = true;
            return false;
        }
        ring_.push_back(wc);
        size_.store(ring_.size(), std::memory_order_release);
        if (armed_) {
            armed_ = false;
            event_pending_ = true;
            lk.unlock();
            fire();
        }
        return true;
    }

    std::vector<WorkCompletion> poll(uint32_t max) {
        // empty polls stay off the mutex so a spinning poller cannot
        // block the completion producer
        if (size_.load(std::memory_order_acquire) == 0) return {};
        std::lock_guard lk(mu_);
        std::vector<WorkCompletion> out;
        while (!ring_.empty() && out.size() < max) {
            out.push_back(ring_.front());
            ring_.pop_front();
        }
        size_.store(ring_.size(), std::memory_order_release);
        return out;
    }

    // Arm event notification. A completion already sitting in the ring
    // counts: the next wait returns immediately (no lost wakeups).
    void req_notify() {
        std::unique_lock lk(mu_);
        if (!ring_.empty()) {
            event_pending_ = true;
            lk.unlock();
            fire();
        } else {
            armed_ = true;
        }
    }

    // Block until an armed event fires or the timeout elapses. Virtual
    // clock: never blocks, charges the modeled wake cost instead.
    bool wait_event(uint64_t timeout_ns, Clock& clock, uint64_t* virt_cursor = nullptr) {
        if (clock.is_virtual()) {
            std::lock_guard lk(mu_);
            if (event_pending_) {
                event_pending_ = false;
                uint64_t t = 0;
                if (!ring_.empty()) t = ring_.front().sim_time_ns;
                if (virt_cursor) *virt_cursor = std::max(*virt_cursor, t) + clock.costs.event_wake_ns;
                return true;
            }
            if (virt_cursor) *virt_cursor += timeout_ns;
            return false;
        }
        {
            std::lock_guard lk(mu_);
            ++wait_calls_;
        }
        pollfd pfd{efd_, POLLIN, 0};
        int timeout_ms = int(std::min<uint64_t>(timeout_ns / 1'000'000, 60'000));
        int rc = ::poll(&pfd, 1, std::max(timeout_ms, 1));
        std::lock_guard lk(mu_);
        uint64_t drain = 0;
        while (::read(efd_, &drain, sizeof drain) > 0) {}
        if (event_pending_) {
            event_pending_ = false;
            return true;
        }
        (void)rc;
        return false;
    }

    bool overrun() const {
        std::lock_guard lk(mu_);
        return overrun_;
    }
    size_t depth() const {
        std::lock_guard lk(mu_);
        return ring_.size();
    }
    uint64_t wait_calls() const {
        std::lock_guard lk(mu_);
        return wait_calls_;
    }

    void bind_qp(QpNum qp) {
        std::lock_guard lk(mu_);
        bound_qps_.push_back(qp);
    }
    std::vector<QpNum> bound_qps() const {
        std::lock_guard lk(mu_);
        return bound_qps_;
    }

private:
    void fire() {
        uint64_t one = 1;
        [[maybe_unused]] ssize_t n = ::write(efd_, &one, sizeof one);
    }

    uint32_t cq_id_;
    uint32_t capacity_;
    int efd_ = -1;
    mutable std::mutex mu_;
    std::atomic<size_t> size_{0};
    std::deque<WorkCompletion> ring_;
    std::vector<QpNum> bound_qps_;
    bool armed_ = false;
    bool event_pending_ = false;
    bool overrun_ = false;
    uint64_t wait_calls_ = 0;
};

// A posted work request plus the submission-path state that travels with
// it: inline or staged payload bytes and the keys pinned on its behalf.
struct PostedWr {
    WorkRequest wr;
    enum class Payload : uint8_t { App, Inline, Staged } payload = Payload::App;
    std::vector<uint8_t> bytes;      // inline contents
    BouncePool::Slot slot;           // staged contents live in the pool
    std::vector<MrKey> pinned;
    uint64_t submit_time_ns = 0;     // virtual-clock submission stamp

    std::span<const uint8_t> flat_payload() const {
        if (payload == Payload::Staged) return {slot.bytes.data(), slot.bytes.size()};
        return {bytes.data(), bytes.size()};
    }
};

class QueuePair {
public:
    QueuePair(QpNum num, Transport tr, uint32_t pd_id, CompletionQueue* send_cq,
              CompletionQueue* recv_cq, uint32_t tx_depth, uint32_t rx_depth)
        : qp_num(num),
          transport(tr),
          pd_id(pd_id),
          send_cq(send_cq),
          recv_cq(recv_cq),
          tx_depth(tx_depth),
          rx_depth(rx_depth) {
        require(tx_depth >= 1 && rx_depth >= 1, "queue depths must be >= 1");
    }

    const QpNum qp_num;
    const Transport transport;
    const uint32_t pd_id;
    CompletionQueue* const send_cq;
    CompletionQueue* const recv_cq;
    const uint32_t tx_depth;
    const uint32_t rx_depth;

    std::atomic<QpState> state{QpState::RESET};
    std::optional<std::pair<NodeId, QpNum>> peer;

    // Send-queue occupancy counts posted-but-not-completed WRs, the
    // ibverbs notion of a send-queue slot.
    bool enqueue_send(PostedWr&& p) {
        std::lock_guard lk(mu_);
        if (outstanding_send_ >= tx_depth) return false;
        ++outstanding_send_;
        send_queue_.push_back(std::move(p));
        return true;
    }

    bool enqueue_recv(PostedWr&& p) {
        std::lock_guard lk(mu_);
        if (recv_queue_.size() >= rx_depth) return false;
        recv_queue_.push_back(std::move(p));
        return true;
    }

    std::optional<PostedWr> pop_send() {
        std::lock_guard lk(mu_);
        if (send_queue_.empty()) return std::nullopt;
        PostedWr p = std::move(send_queue_.front());
        send_queue_.pop_front();
        return p;
    }

    std::optional<PostedWr> pop_recv() {
        std::lock_guard lk(mu_);
        if (recv_queue_.empty()) return std::nullopt;
        PostedWr p = std::move(recv_queue_.front());
        recv_queue_.pop_front();
        return p;
    }

    void complete_send_slot() {
        std::lock_guard lk(mu_);
        if (outstanding_send_ > 0) --outstanding_send_;
    }

    size_t send_backlog() const {
        std::lock_guard lk(mu_);
        return send_queue_.size();
    }
    size_t recv_backlog() const {
        std::lock_guard lk(mu_);
        return recv_queue_.size();
    }
    uint32_t outstanding_send() const {
        std::lock_guard lk(mu_);
        return outstanding_send_;
    }

private:
    mutable std::mutex mu_;
    std::deque<PostedWr> send_queue_;
    std::deque<PostedWr> recv_queue_;
    uint32_t outstanding_send_ = 0;
};

// Per-node verbs control plane: resource tables and state machine. Post
// and poll live on the node (they route through the dataplane path).
class Device {
public:
    explicit Device(NodeId node) : node_(node), guard_(node) {}

    NodeId node() const { return node_; }
    DmaGuard& guard() { return guard_; }
    const DmaGuard& guard() const { return guard_; }

    ProtectionDomain alloc_pd() {
        std::lock_guard lk(mu_);
        if (next_pd_ == 0) throw Error("protection domain ids exhausted");
        ProtectionDomain pd{next_pd_++};
        pds_.push_back(pd.pd_id);
        return pd;
    }

    MemoryRegion reg_mr(const ProtectionDomain& pd, uint64_t base, uint64_t length,
                        uint32_t access) {
        std::lock_guard lk(mu_);
        require(length > 0, "reg_mr: zero-length range");
        require(pd_live(pd.pd_id), "reg_mr: unknown or dead protection domain");
        MemoryRegion mr;
        mr.mr_id = next_mr_++;
        mr.base = base;
        mr.length = length;
        mr.access = access | LOCAL_READ;
        mr.pd_id = pd.pd_id;
        mr.lkey = next_key();
        mr.rkey = next_key();
        guard_.add(mr);
        mrs_[mr.mr_id] = mr;
        return mr;
    }

    // Returns true when the keys died immediately, false when torn down
    // lazily behind in-flight ops.
    bool dereg_mr(const MemoryRegion& mr) {
        std::lock_guard lk(mu_);
        require(mrs_.count(mr.mr_id) > 0, "dereg_mr: unknown mr");
        mrs_.erase(mr.mr_id);
        return guard_.deregister(mr.lkey, mr.rkey);
    }

    CompletionQueue& create_cq(uint32_t capacity) {
        std::lock_guard lk(mu_);
        auto cq = std::make_unique<CompletionQueue>(next_cq_++, capacity);
        auto& ref = *cq;
        cqs_[ref.id()] = std::move(cq);
        return ref;
    }

    QueuePair& create_qp(const ProtectionDomain& pd, Transport tr, CompletionQueue& send_cq,
                         CompletionQueue& recv_cq, uint32_t tx_depth, uint32_t rx_depth) {
        std::lock_guard lk(mu_);
        require(pd_live(pd.pd_id), "create_qp: unknown protection domain");
        auto qp = std::make_unique<QueuePair>(next_qp_++, tr, pd.pd_id, &send_cq, &recv_cq,
                                              tx_depth, rx_depth);
        auto& ref = *qp;
        send_cq.bind_qp(ref.qp_num);
        if (&recv_cq != &send_cq) recv_cq.bind_qp(ref.qp_num);
        qps_[ref.qp_num] = std::move(qp);
        return ref;
    }

    // One legal step per call: RESET->INIT->RTR->RTS. ERROR is reachable
    // from any state at or past INIT.
    void modify_qp(QueuePair& qp, QpState target,
                   std::optional<std::pair<NodeId, QpNum>> peer = std::nullopt) {
        std::lock_guard lk(mu_);
        QpState cur = qp.state.load();
        if (target == QpState::ERROR) {
            require(cur != QpState::RESET, "modify_qp: ERROR from RESET");
            qp.state = QpState::ERROR;
            return;
        }
        bool legal = (cur == QpState::RESET && target == QpState::INIT) ||
                     (cur == QpState::INIT && target == QpState::RTR) ||
                     (cur == QpState::RTR && target == QpState::RTS);
        require(legal, "modify_qp: illegal transition (one step at a time)");
        if (target == QpState::RTR && qp.transport == Transport::RC) {
            if (peer) qp.peer = peer;
            require(qp.peer.has_value(), "modify_qp: RC needs a peer before RTR");
        } else if (peer) {
            qp.peer = peer;
        }
        qp.state = target;
    }

    QueuePair* find_qp(QpNum num) {
        std::lock_guard lk(mu_);
        auto it = qps_.find(num);
        return it == qps_.end() ? nullptr : it->second.get();
    }

    CompletionQueue* find_cq(uint32_t id) {
        std::lock_guard lk(mu_);
        auto it = cqs_.find(id);
        return it == cqs_.end() ? nullptr : it->second.get();
    }

    std::vector<QueuePair*> qps_bound_to(const CompletionQueue& cq) {
        std::lock_guard lk(mu_);
        std::vector<QueuePair*> out;
        for (QpNum n : cq.bound_qps()) {
            auto it = qps_.find(n);
            if (it != qps_.end()) out.push_back(it->second.get());
        }
        return out;
    }

    // Test hook for the id-exhaustion path.
    void debug_set_next_pd(uint32_t v) {
        std::lock_guard lk(mu_);
        next_pd_ = v;
    }

private:
    bool pd_live(uint32_t id) const {
        for (uint32_t p : pds_)
            if (p == id) return true;
        return false;
    }

    // 32-bit keys: per-node counter through a fixed odd multiplier, a
    // bijection on u32, so keys never repeat over the process lifetime.
    MrKey next_key() {
        MrKey k = 0;
        while (k == 0) k = MrKey(key_counter_++ * 2654435761u);
        return k;
    }

    NodeId node_;
    DmaGuard guard_;
    mutable std::mutex mu_;
    std::vector<uint32_t> pds_;
    std::unordered_map<uint32_t, MemoryRegion> mrs_;
    std::unordered_map<uint32_t, std::unique_ptr<CompletionQueue>> cqs_;
    std::unordered_map<QpNum, std::unique_ptr<QueuePair>> qps_;
    uint32_t next_pd_ = 1;
    uint32_t next_mr_ = 1;
    uint32_t next_cq_ = 1;
    QpNum next_qp_ = 1;
    uint32_t key_counter_ = 1;
};

// poll_cq / req_notify_cq / wait_cq_event free functions mirroring the
// verbs surface; thin forwarders onto the CQ object.
inline std::vector<WorkCompletion> poll_cq(CompletionQueue& cq, uint32_t max) {
    return cq.poll(max);
}
inline void req_notify_cq(CompletionQueue& cq) { cq.req_notify(); }
inline bool wait_cq_event(CompletionQueue& cq, uint64_t timeout_ns, Clock& clock) {
    return cq.wait_event(timeout_ns, clock);
}

} // namespace softverbs
