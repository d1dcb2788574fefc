#pragma once

#include <sys/syscall.h>
#include <unistd.h>

#include <condition_variable>
#include <deque>
#include <mutex>
#include <thread>

#include "softverbs/descriptor.hpp"
#include "softverbs/engine.hpp"
#include "softverbs/policy.hpp"

namespace softverbs {

// How a mediated op reaches the privileged context.
//  - RealNullSyscall: the submitting thread performs one genuine null
//    system call, then runs the mediator logic inline (the desk-scale
//    analog of an ioctl: same thread, one user/kernel crossing, no other
//    CPU involved).
//  - ProxyContext: synchronous rendezvous with a dedicated mediator
//    thread through a bounded ring with per-op reply slots.
//  - Both: rendezvous plus the real crossing.
enum class Crossing : uint8_t { RealNullSyscall, ProxyContext, Both };

struct PathConfig {
    PathMode mode = PathMode::Bypass;
    Crossing crossing = Crossing::Both;  // rendezvous plus one real crossing
    bool mediate_poll = false;
};

struct PathStats {
    uint64_t submits = 0;
    uint64_t mediated_ops = 0;
    uint64_t denied = 0;
    uint64_t bypass_taxes = 0;
    uint64_t staged_msgs = 0;
    uint64_t inline_msgs = 0;
    uint64_t mediated_polls = 0;
};

// Routes every data-plane op through the configured submission path.
// Bypass rings the doorbell directly; the mediated path serializes the
// op, crosses the privilege boundary, runs the policy check and only
// then enqueues on the caller's behalf.
class DataplanePath {
public:
    DataplanePath(Device& dev, NicEngine& engine, BouncePool& bounce, PolicyEngine& policy,
                  Clock& clock, const AblationFlags& flags, PathConfig cfg)
        : dev_(dev),
          engine_(engine),
          bounce_(bounce),
          policy_(policy),
          clock_(clock),
          flags_(flags),
          cfg_(cfg) {
        if (cfg_.mode == PathMode::Mediated &&
            (cfg_.crossing == Crossing::ProxyContext || cfg_.crossing == Crossing::Both) &&
            !clock_.is_virtual())
            proxy_ = std::thread([this] { proxy_loop(); });
    }

    ~DataplanePath() {
        {
            std::lock_guard lk(ring_mu_);
            stopping_ = true;
        }
        ring_cv_.notify_all();
        if (proxy_.joinable()) proxy_.join();
    }

    const PathConfig& config() const { return cfg_; }

    PathStats stats() const {
        std::lock_guard lk(stats_mu_);
        return stats_;
    }

    PostResult post_send(QueuePair& qp, const std::vector<WorkRequest>& wrs) {
        if (qp.state.load() != QpState::RTS) return PostResult::BAD_STATE;
        bool rang = false;
        PostResult rc = PostResult::OK;
        for (const auto& wr : wrs) {
            rc = validate_send(qp, wr);
            if (rc != PostResult::OK) break;
            rc = submit(OpKind::POST_SEND, qp, wr);
            if (rc != PostResult::OK) break;
            rang = true;
        }
        if (rang) engine_.ring_doorbell(qp.qp_num);
        return rc;
    }

    PostResult post_recv(QueuePair& qp, const std::vector<WorkRequest>& wrs) {
        QpState st = qp.state.load();
        // pre-posting from INIT on is standard practice
        if (st != QpState::INIT && st != QpState::RTR && st != QpState::RTS)
            return PostResult::BAD_STATE;
        for (const auto& wr : wrs) {
            if (wr.opcode != Opcode::RECV || wr.sge.empty() || wr.sge.size() > size_t(kMaxSge) ||
                wr.total_len() > kMaxMsgBytes)
                return PostResult::INVALID_WR;
            PostResult rc = submit(OpKind::POST_RECV, qp, wr);
            if (rc != PostResult::OK) return rc;
        }
        return PostResult::OK;
    }

    // Completion collection strategy. Poll mode spins on the ring; event
    // mode commits to the channel up front: arm, sleep on the channel fd,
    // then drain. A completion that already landed makes the fd readable,
    // so the wait returns through the same real syscalls either way.
    std::vector<WorkCompletion> wait_completions(CompletionQueue& cq, uint32_t want, bool event_mode,
                                                 uint64_t timeout_ns = 2'000'000'000ull,
                                                 uint64_t* cursor = nullptr) {
        std::vector<WorkCompletion> got;
        Stopwatch sw;
        uint32_t spins = 0;
        while (got.size() < want) {
            if (event_mode) {
                cq.req_notify();
                // sleep in slices so retransmission timers stay alive
                uint64_t slice = clock_.is_virtual() ? timeout_ns
                                                     : std::min<uint64_t>(timeout_ns, 1'000'000);
                bool fired = cq.wait_event(slice, clock_, cursor);
                auto batch = poll(cq, want - uint32_t(got.size()), cursor);
                for (auto& wc : batch) got.push_back(wc);
                if (!fired && batch.empty()) {
                    if (engine_.has_deadline_due()) engine_.tick();
                    if (clock_.is_virtual()) break;
                    if (sw.elapsed_us() * 1000.0 > double(timeout_ns)) break;
                }
                continue;
            }
            auto batch = poll(cq, want - uint32_t(got.size()), cursor);
            if (!batch.empty()) {
                for (auto& wc : batch) got.push_back(wc);
                continue;
            }
            if (clock_.is_virtual()) break;  // nothing can arrive later
            // tight spin first, then pause so a long wait does not steal
            // pipeline slots from the context actually moving bytes
            ++spins;
            if (spins > 256) {
                uint32_t pauses = std::min((spins - 256) / 4u + 1u, 16u);
                for (uint32_t p = 0; p < pauses; ++p) cpu_pause();
            }
            if ((spins & 0x3FF) == 0) {
                if (engine_.has_deadline_due()) engine_.tick();
                if (sw.elapsed_us() * 1000.0 > double(timeout_ns)) break;
            }
        }
        return got;
    }

    std::vector<WorkCompletion> poll(CompletionQueue& cq, uint32_t max,
                                     uint64_t* cursor = nullptr) {
        if (cfg_.mediate_poll && cfg_.mode == PathMode::Mediated) {
            cross_boundary(cursor);
            std::lock_guard lk(stats_mu_);
            ++stats_.mediated_polls;
        }
        auto wcs = cq.poll(max);
        if (cursor && clock_.is_virtual()) {
            uint64_t t = *cursor + clock_.costs.poll_ns;
            for (const auto& wc : wcs) t = std::max(t, wc.sim_time_ns);
            *cursor = t;
        }
        return wcs;
    }

private:
    PostResult validate_send(const QueuePair& qp, const WorkRequest& wr) const {
        if (wr.opcode == Opcode::RECV) return PostResult::INVALID_WR;
        if (wr.sge.empty() || wr.sge.size() > size_t(kMaxSge)) return PostResult::INVALID_WR;
        uint64_t len = wr.total_len();
        if (len > kMaxMsgBytes) return PostResult::INVALID_WR;
        if (qp.transport == Transport::UD) {
            if (wr.opcode != Opcode::SEND) return PostResult::INVALID_WR;
            if (len > std::min(engine_.mtu(), kUdMaxBytes)) return PostResult::INVALID_WR;
            if (!wr.dest) return PostResult::INVALID_WR;
        } else {
            if ((wr.opcode == Opcode::RDMA_WRITE || wr.opcode == Opcode::RDMA_READ) && !wr.remote)
                return PostResult::INVALID_WR;
        }
        return PostResult::OK;
    }

    PostResult submit(OpKind kind, QueuePair& qp, const WorkRequest& wr) {
        uint64_t* cursor = engine_.cursor();
        {
            std::lock_guard lk(stats_mu_);
            ++stats_.submits;
        }
        if (clock_.is_virtual() && cursor) *cursor += clock_.costs.submit_ns;

        if (flags_.no_bypass_tax) {
            // one real null system call per data-plane op
            null_syscall(cursor);
            std::lock_guard lk(stats_mu_);
            ++stats_.bypass_taxes;
        }

        if (cfg_.mode == PathMode::Bypass) return accept(kind, qp, wr, cursor);

        // Mediated path: serialize, cross, check, then enqueue on the
        // caller's behalf. The verdict comes back before submit returns.
        thread_local std::vector<uint8_t> bytes(OpDescriptor::kEncodedSize);
        serialize_into(kind, qp.qp_num, wr, bytes.data());
        if (clock_.is_virtual() && cursor) *cursor += clock_.costs.serialize_ns;

        switch (cfg_.crossing) {
            case Crossing::RealNullSyscall:
                null_syscall(cursor);
                return mediator_execute(bytes, qp, cursor);
            case Crossing::ProxyContext:
                return proxy_execute(bytes, qp, cursor);
            case Crossing::Both:
                null_syscall(cursor);
                return proxy_execute(bytes, qp, cursor);
        }
        return PostResult::CHANNEL_CLOSED;
    }

    void null_syscall(uint64_t* cursor) {
        if (clock_.is_virtual()) {
            if (cursor) *cursor += clock_.costs.syscall_ns;
            return;
        }
        (void)syscall(SYS_getppid);
    }

    // Privileged-side logic: deserialize, verify, decide, enqueue.
    PostResult mediator_execute(const std::vector<uint8_t>& bytes, QueuePair& qp,
                                uint64_t* cursor) {
        std::unique_lock lk(mediator_mu_);
        thread_local OpDescriptor desc;  // keeps sge capacity across ops
        if (deserialize_into(bytes, desc) != nullptr) return PostResult::INVALID_WR;
        {
            std::lock_guard slk(stats_mu_);
            ++stats_.mediated_ops;
        }
        std::optional<NodeId> dst;
        if (desc.wr.dest) dst = desc.wr.dest->first;
        else if (qp.peer) dst = qp.peer->first;
        uint64_t now = cursor && clock_.is_virtual() ? *cursor : clock_.now_ns();
        PolicyVerdict v = policy_.check(desc, now, dst);
        if (clock_.is_virtual() && cursor) *cursor += clock_.costs.policy_ns;
        if (!v.allow) {
            {
                std::lock_guard slk(stats_mu_);
                ++stats_.denied;
            }
            lk.unlock();
            deliver_denial(qp, desc, cursor);
            return PostResult::OK;  // surfaced as an error completion
        }
        lk.unlock();
        return accept(desc.kind, qp, desc.wr, cursor);
    }

    void deliver_denial(QueuePair& qp, const OpDescriptor& desc, uint64_t* cursor) {
        WorkCompletion wc;
        wc.wr_id = desc.wr.wr_id;
        wc.status = WcStatus::POLICY_DENIED;
        wc.opcode = desc.wr.opcode;
        wc.qp_num = qp.qp_num;
        if (clock_.is_virtual() && cursor)
            wc.sim_time_ns = *cursor + clock_.costs.deliver_ns;
        CompletionQueue* cq = desc.kind == OpKind::POST_SEND ? qp.send_cq : qp.recv_cq;
        if (!cq->push(wc)) qp.state = QpState::ERROR;  // overrun: flushed on next doorbell
    }

    // Common admission: pin/validate sges, apply inline and staging, and
    // place the op on the queue pair.
    PostResult accept(OpKind kind, QueuePair& qp, const WorkRequest& wr, uint64_t* cursor) {
        PostedWr posted;
        posted.wr = wr;
        DmaGuard& guard = dev_.guard();
        uint64_t total = wr.total_len();

        bool is_send_kind = kind == OpKind::POST_SEND;
        bool can_inline = is_send_kind &&
                          (wr.opcode == Opcode::SEND || wr.opcode == Opcode::RDMA_WRITE) &&
                          total <= engine_.config().inline_threshold && !flags_.no_zero_copy;

        if (can_inline) {
            // small payload embedded in the descriptor at submission; the
            // buffer is free for reuse immediately and no key is needed
            posted.payload = PostedWr::Payload::Inline;
            posted.bytes.resize(size_t(total));
            uint64_t off = 0;
            for (const auto& s : wr.sge) {
                std::memcpy(posted.bytes.data() + off, reinterpret_cast<const void*>(s.addr),
                            s.length);
                off += s.length;
            }
            guard.note_copy(wr.sge.empty() ? 0 : wr.sge[0].lkey, total, total,
                            AuditKind::InlineCopy);
            if (clock_.is_virtual() && cursor)
                *cursor += uint64_t(double(total) * clock_.costs.copy_ns_per_byte);
            std::lock_guard lk(stats_mu_);
            ++stats_.inline_msgs;
        } else {
            // vet and pin every referenced key up front so the engine
            // cannot fault mid-message
            uint32_t need = is_send_kind && wr.opcode != Opcode::RDMA_READ ? LOCAL_READ
                                                                           : LOCAL_WRITE;
            for (const auto& s : wr.sge) {
                if (!guard.validate(s.lkey, s.addr, s.length, need) || !guard.pin(s.lkey)) {
                    for (MrKey k : posted.pinned) guard.unpin(k);
                    deliver_key_error(kind, qp, wr, cursor);
                    return PostResult::OK;  // error travels as a completion
                }
                posted.pinned.push_back(s.lkey);
            }
        }

        if (!can_inline && is_send_kind && flags_.no_zero_copy && total > 0 &&
            wr.opcode != Opcode::RDMA_READ) {
            // staging copy: application buffer -> bounce slot; the slot
            // rides along until the op completes
            posted.slot = bounce_.acquire(size_t(total));
            uint64_t off = 0;
            for (const auto& s : wr.sge) {
                auto sp = guard.access(s.lkey, s.addr, s.length, LOCAL_READ, AuditKind::DmaRead);
                if (sp) std::memcpy(posted.slot.bytes.data() + off, sp->data(), s.length);
                off += s.length;
            }
            guard.note_copy(wr.sge[0].lkey, total, total, AuditKind::StageCopy);
            posted.payload = PostedWr::Payload::Staged;
            if (clock_.is_virtual() && cursor)
                *cursor += uint64_t(double(total) * clock_.costs.copy_ns_per_byte) +
                           clock_.costs.fragment_ns;
            std::lock_guard lk(stats_mu_);
            ++stats_.staged_msgs;
        }

        if (clock_.is_virtual() && cursor) posted.submit_time_ns = *cursor;

        bool ok = is_send_kind ? qp.enqueue_send(std::move(posted))
                               : qp.enqueue_recv(std::move(posted));
        if (!ok) {
            // nothing from the failing WR onward enters the queue
            return PostResult::QUEUE_FULL;
        }
        return PostResult::OK;
    }

    void deliver_key_error(OpKind kind, QueuePair& qp, const WorkRequest& wr, uint64_t* cursor) {
        WorkCompletion wc;
        wc.wr_id = wr.wr_id;
        wc.status = WcStatus::LOC_KEY_ERR;
        wc.opcode = wr.opcode;
        wc.qp_num = qp.qp_num;
        if (clock_.is_virtual() && cursor) wc.sim_time_ns = *cursor + clock_.costs.deliver_ns;
        CompletionQueue* cq = kind == OpKind::POST_SEND ? qp.send_cq : qp.recv_cq;
        if (!cq->push(wc)) qp.state = QpState::ERROR;
    }

    void cross_boundary(uint64_t* cursor) {
        switch (cfg_.crossing) {
            case Crossing::RealNullSyscall: null_syscall(cursor); break;
            case Crossing::ProxyContext:
            case Crossing::Both: null_syscall(cursor); break;  // poll probe keeps it cheap
        }
    }

    // ---- proxy crossing --------------------------------------------------

    struct RingOp {
        const std::vector<uint8_t>* bytes;
        QueuePair* qp;
        uint64_t* cursor;
        PostResult result = PostResult::CHANNEL_CLOSED;
        bool done = false;
        std::condition_variable cv;
        std::mutex mu;
    };

    PostResult proxy_execute(const std::vector<uint8_t>& bytes, QueuePair& qp,
                             uint64_t* cursor) {
        if (clock_.is_virtual()) {
            // deterministic single-threaded stand-in for the rendezvous
            if (cursor) *cursor += 2 * clock_.costs.syscall_ns;
            return mediator_execute(bytes, qp, cursor);
        }
        RingOp op;
        op.bytes = &bytes;
        op.qp = &qp;
        op.cursor = cursor;
        {
            std::unique_lock lk(ring_mu_);
            if (stopping_) return PostResult::CHANNEL_CLOSED;
            ring_cv_.wait(lk, [&] { return ring_.size() < kRingCap || stopping_; });
            if (stopping_) return PostResult::CHANNEL_CLOSED;
            ring_.push_back(&op);
        }
        ring_cv_.notify_all();
        std::unique_lock lk(op.mu);
        op.cv.wait(lk, [&] { return op.done; });
        return op.result;
    }

    void proxy_loop() {
        for (;;) {
            RingOp* op = nullptr;
            {
                std::unique_lock lk(ring_mu_);
                ring_cv_.wait(lk, [&] { return stopping_ || !ring_.empty(); });
                if (stopping_ && ring_.empty()) return;
                op = ring_.front();
                ring_.pop_front();
            }
            ring_cv_.notify_all();
            PostResult r = mediator_execute(*op->bytes, *op->qp, op->cursor);
            {
                std::lock_guard lk(op->mu);
                op->result = r;
                op->done = true;
            }
            op->cv.notify_one();
        }
    }

    static constexpr size_t kRingCap = 64;

    Device& dev_;
    NicEngine& engine_;
    BouncePool& bounce_;
    PolicyEngine& policy_;
    Clock& clock_;
    const AblationFlags& flags_;
    PathConfig cfg_;

    mutable std::mutex stats_mu_;
    PathStats stats_;

    std::mutex mediator_mu_;

    std::mutex ring_mu_;
    std::condition_variable ring_cv_;
    std::deque<RingOp*> ring_;
    std::thread proxy_;
    bool stopping_ = false;
};

} // namespace softverbs
