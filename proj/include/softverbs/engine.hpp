#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <map>
#include <mutex>
#include <unordered_map>
#include <set>
#include <thread>
#include <vector>

#include "softverbs/bounce.hpp"
#include "softverbs/clock.hpp"
#include "softverbs/verbs.hpp"
#include "softverbs/wire.hpp"

namespace softverbs {

struct EngineConfig {
    // poll_loop: a dedicated context drains rings (models the NIC
    // processor); caller_driven: the submitting/delivering context runs
    // the engine inline, which keeps 2-core hosts quiet for latency work.
    enum class Mode { CallerDriven, PollLoop };
    Mode mode = Mode::CallerDriven;
    uint32_t mtu = kMtu;
    uint32_t inline_threshold = 0;  // <= kInlineCap; 0 disables
};

struct EngineStats {
    uint64_t drain_passes = 0;
    uint64_t frags_tx = 0;
    uint64_t frags_rx = 0;
    uint64_t acks_tx = 0;
    uint64_t naks_tx = 0;
    uint64_t retransmits = 0;
    uint64_t rnr_backoffs = 0;
    uint64_t flushed_wrs = 0;
    uint64_t ud_drops = 0;
    uint64_t completions = 0;
};

// Emulated NIC. Owns all QP protocol state; a single context at a time
// runs engine code (the engine mutex enforces it). The engine never
// touches the node's submission path: inbound one-sided work is served
// entirely in here, which is what keeps the responder CPU out of the
// picture.
class NicEngine {
public:
    NicEngine(NodeId node, Device& dev, Fabric& fabric, Clock& clock, BouncePool& bounce,
              const AblationFlags& flags, EngineConfig cfg = {})
        : node_(node),
          dev_(dev),
          fabric_(fabric),
          clock_(clock),
          bounce_(bounce),
          flags_(flags),
          cfg_(cfg) {
        if (cfg_.mode == EngineConfig::Mode::PollLoop)
            worker_ = std::thread([this] { worker_loop(); });
    }

    ~NicEngine() {
        {
            std::lock_guard lk(inbox_mu_);
            stopping_ = true;
        }
        cv_.notify_all();
        if (worker_.joinable()) worker_.join();
    }

    NodeId node() const { return node_; }
    const EngineConfig& config() const { return cfg_; }
    uint32_t mtu() const { return cfg_.mtu; }

    EngineStats stats() const {
        std::lock_guard lk(mu_);
        return stats_;
    }

    std::string debug_state() const {
        std::lock_guard lk(mu_);
        std::lock_guard ilk(inbox_mu_);
        std::ostringstream os;
        os << "engine node=" << node_ << " inbox=" << inbox_.size()
           << " doorbells=" << doorbells_.size() << " in_service=" << in_service_.load()
           << " paused=" << paused_ << '\n';
        for (auto& [q, st] : rc_) {
            size_t pending = 0;
            for (auto& op : st.ops)
                if (!op.done && op.frags_emitted < op.frags_total()) ++pending;
            os << "  qp " << q << ": ops=" << st.ops.size() << " pending_emit=" << pending
               << " psn_next=" << st.psn_next << " psn_acked=" << st.psn_acked
               << " in_flight=" << in_flight(st) << " expected=" << st.psn_expected
               << " rnr_at=" << st.rnr_resume_at << " rto=" << st.rto_deadline << '\n';
        }
        return os.str();
    }

    // Virtual-clock submission cursor for the calling context; real-clock
    // runs ignore it.
    void bind_cursor(uint64_t* cursor) { cursor_ = cursor; }
    uint64_t* cursor() const { return cursor_; }

    void pause() {
        std::lock_guard lk(inbox_mu_);
        paused_ = true;
    }

    void resume() {
        {
            std::lock_guard lk(inbox_mu_);
            paused_ = false;
        }
        kick();
    }

    // Doorbell: the engine will drain this QP's send queue. Idempotent
    // while a drain is already pending.
    void ring_doorbell(QpNum qp_num) {
        if (!dev_.find_qp(qp_num)) throw Error("ring_doorbell: unknown qp");
        mark_doorbell(qp_num);
        kick();
    }

    // Fabric sink. Frames always land in the inbox; whichever context
    // drives service() consumes them. Enqueueing never blocks on the
    // engine state lock, so a frame cascade can always make progress.
    void on_inbound(Envelope&& env) {
        {
            std::lock_guard lk(inbox_mu_);
            inbox_.push_back(std::move(env));
        }
        kick();
    }

    // Timer pass: RNR backoff expiry and retransmission timeouts.
    void tick() {
        uint64_t now = now_ns();
        if (next_deadline_.load(std::memory_order_relaxed) > now) return;
        {
            std::lock_guard lk(mu_);
            check_timers(now);
        }
        kick();
    }

    bool has_deadline_due() const {
        uint64_t d = next_deadline_.load(std::memory_order_relaxed);
        return d != UINT64_MAX && d <= now_ns();
    }

    // Drive all pending work to quiescence from the calling context. The
    // engine lock is held across processing *and* transmission, so one
    // QP's frames reach the fabric in psn order no matter which context
    // drives the engine.
    void service() {
        std::unique_lock lk(mu_);
        run_service(lk);
    }

private:
    // Enqueue-side nudge. Never blocks on the engine lock: an active
    // service loop re-checks the queues before leaving, so its work is
    // covered; the only contested window is the few instructions between
    // a loop clearing in_service_ and releasing the lock, which the pause
    // spin rides out.
    void kick() {
        if (cfg_.mode == EngineConfig::Mode::PollLoop) {
            cv_.notify_one();
            return;
        }
        for (;;) {
            if (in_service_.load(std::memory_order_acquire)) return;
            if (mu_.try_lock()) {
                std::unique_lock lk(mu_, std::adopt_lock);
                run_service(lk);
                return;
            }
            cpu_pause();
        }
    }

    void run_service(std::unique_lock<std::mutex>& lk) {
        (void)lk;
        in_service_.store(true, std::memory_order_release);
        for (;;) {
            std::vector<Envelope> out;
            std::vector<std::pair<CompletionQueue*, WorkCompletion>> late_wcs;
            std::deque<Envelope> inbox;
            std::deque<QpNum> pending;
            {
                std::lock_guard ilk(inbox_mu_);
                if (paused_ || stopping_ || (inbox_.empty() && doorbells_.empty())) {
                    // flag clears inside the queue lock: a later enqueue
                    // either saw work pending here or finds the engine free
                    in_service_.store(false, std::memory_order_release);
                    return;
                }
                inbox.swap(inbox_);
                pending.swap(doorbells_);
                doorbell_set_.clear();
            }
            for (auto& env : inbox) process_inbound(env, out);
            for (QpNum q : pending) {
                ++stats_.drain_passes;
                drain_qp(q, out, late_wcs);
            }
            for (auto& e : out) fabric_.tx(std::move(e));
            // UD send completions surface only after the payload frame
            // left, so the application cannot reuse the buffer early.
            for (auto& [cq, wc] : late_wcs) deliver_completion(*cq, wc);
        }
    }

    // ---- posted-op bookkeeping -------------------------------------

    struct FragPiece {
        uint64_t addr = 0;      // app address (App payload) or offset (Inline/Staged)
        uint32_t len = 0;
        MrKey lkey = 0;
        uint64_t msg_off = 0;
    };

    struct SendOp {
        PostedWr posted;
        std::vector<FragPiece> plan;
        uint64_t first_psn = 0;
        bool psn_assigned = false;
        uint32_t frags_emitted = 0;
        bool done = false;
        WcStatus status = WcStatus::SUCCESS;
        uint32_t byte_len = 0;
        uint64_t done_time = 0;
        // requester-side READ progress
        uint64_t read_len = 0;
        uint64_t read_done = 0;
        bool read_sink_failed = false;

        uint32_t frags_total() const {
            return posted.wr.opcode == Opcode::RDMA_READ ? 1 : uint32_t(plan.size());
        }
        uint32_t last_psn() const { return psn_add(uint32_t(first_psn), frags_total() - 1); }
    };

    struct ReadJob {
        QpNum requester_qp = 0;
        uint64_t addr = 0;
        uint64_t len = 0;
        MrKey rkey = 0;
        uint64_t offset = 0;
        bool denied = false;
    };

    struct RecvAsm {
        bool active = false;
        PostedWr wr;
        std::vector<FragPiece> plan;
        uint64_t capacity = 0;
        uint64_t offset = 0;
        bool failed = false;
        WcStatus fail_status = WcStatus::REM_ACCESS_ERR;
        BouncePool::Slot slot;  // no-zero-copy landing area
    };

    struct RcState {
        // tx stream
        uint32_t psn_next = 0;
        uint32_t psn_acked = kPsnMask;  // cumulative; init = predecessor of 0
        std::deque<SendOp> ops;         // posting order
        std::deque<SendOp*> reads_waiting;
        std::deque<ReadJob> read_jobs;
        // rx stream
        uint32_t psn_expected = 0;
        RecvAsm recv_asm;
        // timers
        int rnr_retries = 0;
        uint64_t rnr_resume_at = 0;
        uint64_t rto_deadline = UINT64_MAX;
        uint64_t rto_ns = kRtoBaseNs;
        int timeouts = 0;
        // virtual-clock engine occupancy for this QP's work
    };

    uint32_t in_flight(const RcState& st) const {
        return (st.psn_next - (st.psn_acked + 1)) & kPsnMask;
    }

    bool tx_work_pending(QueuePair& qp, const RcState& st) const {
        if (qp.send_backlog() > 0) return true;
        for (const auto& job : st.read_jobs)
            if (job.offset < job.len || job.len == 0) return true;
        for (const auto& op : st.ops)
            if (!op.done && op.frags_emitted < op.frags_total()) return true;
        return false;
    }

    // ---- shared helpers ---------------------------------------------

    uint64_t now_ns() const { return clock_.now_ns(); }

    void mark_doorbell(QpNum q) {
        std::lock_guard lk(inbox_mu_);
        if (doorbell_set_.insert(q).second) doorbells_.push_back(q);
    }

    RcState& rc(QpNum q) { return rc_[q]; }

    void set_deadline(uint64_t t) {
        uint64_t cur = next_deadline_.load(std::memory_order_relaxed);
        while (t < cur && !next_deadline_.compare_exchange_weak(cur, t)) {}
    }

    void recompute_deadline() {
        uint64_t d = UINT64_MAX;
        for (auto& [q, st] : rc_) {
            if (st.rnr_resume_at) d = std::min(d, st.rnr_resume_at);
            if (st.rto_deadline != UINT64_MAX) d = std::min(d, st.rto_deadline);
        }
        next_deadline_.store(d, std::memory_order_relaxed);
    }

    // Fragment plan across scatter/gather entries; fragments respect both
    // the MTU and sge boundaries so in-process frames stay contiguous.
    static std::vector<FragPiece> plan_app(const WorkRequest& wr, uint32_t mtu) {
        std::vector<FragPiece> plan;
        uint64_t msg_off = 0;
        for (const auto& s : wr.sge) {
            uint64_t off = 0;
            while (off < s.length) {
                uint32_t len = uint32_t(std::min<uint64_t>(mtu, s.length - off));
                plan.push_back({s.addr + off, len, s.lkey, msg_off});
                off += len;
                msg_off += len;
            }
        }
        if (plan.empty())
            plan.push_back({wr.sge.empty() ? 0 : wr.sge[0].addr, 0,
                            wr.sge.empty() ? 0 : wr.sge[0].lkey, 0});
        return plan;
    }

    static std::vector<FragPiece> plan_flat(uint64_t total, uint32_t mtu) {
        std::vector<FragPiece> plan;
        uint64_t off = 0;
        do {
            uint32_t len = uint32_t(std::min<uint64_t>(mtu, total - off));
            plan.push_back({off, len, 0, off});
            off += len;
        } while (off < total);
        return plan;
    }

    std::span<const uint8_t> frag_bytes(SendOp& op, const FragPiece& f, bool& fail) {
        fail = false;
        if (op.posted.payload == PostedWr::Payload::App) {
            auto sp = dev_.guard().access(f.lkey, f.addr, f.len, LOCAL_READ, AuditKind::DmaRead);
            if (!sp) {
                fail = true;
                return {};
            }
            return {sp->data(), sp->size()};
        }
        return op.posted.flat_payload().subspan(size_t(f.addr), f.len);
    }

    void stamp_virtual_emit(SendOp& op, uint32_t bytes, Envelope& env) {
        if (!clock_.is_virtual()) return;
        uint64_t start = std::max(vbusy_, op.posted.submit_time_ns);
        uint64_t cost = clock_.costs.fragment_ns + uint64_t(double(bytes) * clock_.costs.copy_ns_per_byte);
        vbusy_ = start + cost;
        env.sim_time_ns = vbusy_ + clock_.costs.wire_ns;
    }

    // ---- drain (tx) ---------------------------------------------------

    void drain_qp(QpNum qp_num, std::vector<Envelope>& out,
                  std::vector<std::pair<CompletionQueue*, WorkCompletion>>& late_wcs) {
        QueuePair* qp = dev_.find_qp(qp_num);
        if (!qp) return;
        if (qp->state.load() == QpState::ERROR) {
            qp_error(*qp, WcStatus::FLUSH_ERR);
            return;
        }
        if (qp->transport == Transport::UD) {
            drain_ud(*qp, out, late_wcs);
            return;
        }
        RcState& st = rc(qp_num);

        // admit newly posted WRs into the protocol stream
        while (auto p = qp->pop_send()) {
            SendOp op;
            op.posted = std::move(*p);
            prepare_op(op);
            st.ops.push_back(std::move(op));
            if (st.ops.back().posted.wr.opcode == Opcode::RDMA_READ && !st.ops.back().done)
                st.reads_waiting.push_back(&st.ops.back());
        }

        if (st.rnr_resume_at && now_ns() < st.rnr_resume_at) return;

        emit_frames(*qp, st, out);
        emit_read_responses(*qp, st, out);
        release_ready(*qp, st);
    }

    // Build the fragment plan and flag immediately-failing ops.
    void prepare_op(SendOp& op) {
        const WorkRequest& wr = op.posted.wr;
        if (wr.opcode == Opcode::RDMA_READ) {
            op.read_len = wr.total_len();
            op.plan = plan_app(wr, cfg_.mtu);  // scatter plan for the response
            return;
        }
        if (op.posted.payload == PostedWr::Payload::App)
            op.plan = plan_app(wr, cfg_.mtu);
        else
            op.plan = plan_flat(op.posted.flat_payload().size(), cfg_.mtu);
    }

    void emit_frames(QueuePair& qp, RcState& st, std::vector<Envelope>& out) {
        if (!qp.peer) return;
        for (auto& op : st.ops) {
            if (op.done) continue;
            while (op.frags_emitted < op.frags_total()) {
                if (in_flight(st) >= kRcWindow) return;
                if (!op.psn_assigned) {
                    op.first_psn = st.psn_next;
                    op.psn_assigned = true;
                }
                uint32_t idx = op.frags_emitted;
                Envelope env;
                env.src_node = node_;
                env.dst_node = qp.peer->first;
                env.hdr.transport = Transport::RC;
                env.hdr.src_qp = qp.qp_num;
                env.hdr.dst_qp = qp.peer->second;
                env.hdr.psn = psn_add(uint32_t(op.first_psn), idx);

                if (op.posted.wr.opcode == Opcode::RDMA_READ) {
                    env.hdr.opcode = PktOp::READ_REQ;
                    env.hdr.flags = kFlagLastFragment;
                    env.hdr.remote_address = op.posted.wr.remote->first;
                    env.hdr.rkey = op.posted.wr.remote->second;
                    env.owned.resize(4);
                    put_be32(env.owned.data(), uint32_t(op.read_len));
                    if (clock_.is_virtual()) {
                        uint64_t start = std::max(vbusy_, op.posted.submit_time_ns);
                        vbusy_ = start + clock_.costs.fragment_ns;
                        env.sim_time_ns = vbusy_ + clock_.costs.wire_ns;
                    }
                } else {
                    const FragPiece& f = op.plan[idx];
                    bool fail = false;
                    auto bytes = frag_bytes(op, f, fail);
                    if (fail) {
                        // Unreachable in practice: sges are validated and
                        // pinned at submission. Kept as a hard stop.
                        op.done = true;
                        op.status = WcStatus::LOC_KEY_ERR;
                        if (op.frags_emitted == 0) op.psn_assigned = false;
                        break;
                    }
                    env.hdr.opcode =
                        op.posted.wr.opcode == Opcode::SEND ? PktOp::SEND : PktOp::WRITE;
                    if (idx + 1 == op.frags_total()) env.hdr.flags |= kFlagLastFragment;
                    if (op.posted.wr.opcode == Opcode::RDMA_WRITE) {
                        env.hdr.remote_address = op.posted.wr.remote->first + f.msg_off;
                        env.hdr.rkey = op.posted.wr.remote->second;
                    }
                    env.view = bytes;
                    stamp_virtual_emit(op, f.len, env);
                }
                ++op.frags_emitted;
                st.psn_next = psn_add(env.hdr.psn, 1);  // track the emitted stream exactly
                ++stats_.frags_tx;
                arm_rto(st);
                out.push_back(std::move(env));
            }
            if (!op.done && op.frags_emitted < op.frags_total()) return;  // window full
        }
    }

    void emit_read_responses(QueuePair& qp, RcState& st, std::vector<Envelope>& out) {
        while (!st.read_jobs.empty()) {
            ReadJob& job = st.read_jobs.front();
            while (job.offset < job.len || (job.len == 0 && job.offset == 0)) {
                if (in_flight(st) >= kRcWindow) return;
                uint32_t len = uint32_t(std::min<uint64_t>(cfg_.mtu, job.len - job.offset));
                auto sp = dev_.guard().access(job.rkey, job.addr + job.offset, len, REMOTE_READ,
                                              AuditKind::DmaRead);
                Envelope env;
                env.src_node = node_;
                env.dst_node = qp.peer ? qp.peer->first : 0;
                env.hdr.opcode = PktOp::READ_RESP;
                env.hdr.transport = Transport::RC;
                env.hdr.src_qp = qp.qp_num;
                env.hdr.dst_qp = job.requester_qp;
                env.hdr.psn = st.psn_next;
                if (!sp) {
                    // permission revoked mid-stream; cut the response short
                    env.hdr.opcode = PktOp::NAK;
                    env.owned.push_back(uint8_t(NakReason::ACCESS));
                    out.push_back(std::move(env));
                    ++stats_.naks_tx;
                    st.read_jobs.pop_front();
                    break;
                }
                bool last = job.offset + len >= job.len;
                if (last) env.hdr.flags |= kFlagLastFragment;
                env.view = {sp->data(), sp->size()};
                if (clock_.is_virtual()) {
                    uint64_t start = std::max(vbusy_, env.sim_time_ns);
                    vbusy_ = start + clock_.costs.fragment_ns +
                             uint64_t(double(len) * clock_.costs.copy_ns_per_byte);
                    env.sim_time_ns = vbusy_ + clock_.costs.wire_ns;
                }
                st.psn_next = psn_add(st.psn_next, 1);
                ++stats_.frags_tx;
                arm_rto(st);
                job.offset += len;
                out.push_back(std::move(env));
                if (last) break;
                if (job.len == 0) break;
            }
            if (job.offset >= job.len) st.read_jobs.pop_front();
            else return;  // window full
        }
    }

    void drain_ud(QueuePair& qp, std::vector<Envelope>& out,
                  std::vector<std::pair<CompletionQueue*, WorkCompletion>>& late_wcs) {
        while (auto p = qp.pop_send()) {
            SendOp op;
            op.posted = std::move(*p);
            prepare_op(op);
            const auto& dest = op.posted.wr.dest;
            bool fail = false;
            std::span<const uint8_t> bytes;
            if (op.frags_total() == 1) bytes = frag_bytes(op, op.plan[0], fail);
            WcStatus status = WcStatus::SUCCESS;
            if (fail) status = WcStatus::LOC_KEY_ERR;
            if (!fail && dest) {
                Envelope env;
                env.src_node = node_;
                env.dst_node = dest->first;
                env.hdr.opcode = PktOp::SEND;
                env.hdr.transport = Transport::UD;
                env.hdr.src_qp = qp.qp_num;
                env.hdr.dst_qp = dest->second;
                env.hdr.flags = kFlagLastFragment;
                stamp_virtual_emit(op, uint32_t(bytes.size()), env);
                if (op.posted.payload == PostedWr::Payload::App) {
                    // application memory stays pinned until the completion
                    // below, which follows the transmit
                    env.view = bytes;
                } else {
                    // inline/staged bytes die with this op; they ride in
                    // the envelope
                    env.owned.assign(bytes.begin(), bytes.end());
                }
                ++stats_.frags_tx;
                out.push_back(std::move(env));
            }
            // fire-and-forget: completes once the frame left
            finish_posted(op.posted);
            qp.complete_send_slot();
            WorkCompletion wc;
            wc.wr_id = op.posted.wr.wr_id;
            wc.status = status;
            wc.opcode = op.posted.wr.opcode;
            wc.qp_num = qp.qp_num;
            wc.sim_time_ns = clock_.is_virtual() ? vbusy_ + clock_.costs.deliver_ns : 0;
            late_wcs.emplace_back(qp.send_cq, wc);
        }
    }

    // ---- inbound (rx) --------------------------------------------------

    void process_inbound(Envelope& env, std::vector<Envelope>& out) {
        QueuePair* qp = dev_.find_qp(env.hdr.dst_qp);
        ++stats_.frags_rx;
        if (env.hdr.transport == Transport::UD) {
            if (env.hdr.opcode != PktOp::SEND || !qp || qp->transport != Transport::UD ||
                qp->state.load() == QpState::ERROR || qp->state.load() < QpState::RTR) {
                ++stats_.ud_drops;
                return;
            }
            deliver_ud(*qp, env);
            return;
        }
        if (!qp || qp->transport != Transport::RC) {
            if (env.hdr.opcode != PktOp::ACK && env.hdr.opcode != PktOp::NAK)
                nak(env, NakReason::MALFORMED, out);
            return;
        }
        RcState& st = rc(qp->qp_num);
        switch (env.hdr.opcode) {
            case PktOp::ACK:
                on_ack(*qp, st, env.hdr.psn);
                break;
            case PktOp::NAK:
                on_nak(*qp, st,
                       env.payload().empty() ? NakReason::MALFORMED
                                             : NakReason(env.payload()[0]),
                       env.hdr.psn);
                break;
            default:
                on_rc_data(*qp, st, env, out);
                break;
        }
        release_ready(*qp, st);
    }

    void on_rc_data(QueuePair& qp, RcState& st, Envelope& env, std::vector<Envelope>& out) {
        if (qp.state.load() < QpState::RTR || qp.state.load() == QpState::ERROR) {
            nak_psn(qp, env, NakReason::RNR, out);
            return;
        }
        uint32_t psn = env.hdr.psn;
        if (psn != st.psn_expected) {
            // duplicate or gap: go-back-N re-acks the last in-order psn
            ack(qp, env, psn_add(st.psn_expected, kPsnMask), out);  // expected-1
            return;
        }
        switch (env.hdr.opcode) {
            case PktOp::SEND:
                if (!rc_recv_fragment(qp, st, env, out)) return;  // RNR, no advance
                break;
            case PktOp::WRITE:
                rc_write_fragment(qp, st, env, out);
                break;
            case PktOp::READ_REQ:
                rc_read_request(qp, st, env, out);
                break;
            case PktOp::READ_RESP:
                rc_read_response(qp, st, env);
                break;
            default:
                break;
        }
        st.psn_expected = psn_add(st.psn_expected, 1);
        ack(qp, env, psn, out);
    }

    // Returns false when the receiver is not ready (no advance, NAK sent).
    bool rc_recv_fragment(QueuePair& qp, RcState& st, Envelope& env, std::vector<Envelope>& out) {
        auto payload = env.payload();
        if (!st.recv_asm.active) {
            auto wr = qp.pop_recv();
            if (!wr) {
                nak_psn(qp, env, NakReason::RNR, out);
                return false;
            }
            st.recv_asm = RecvAsm{};
            st.recv_asm.active = true;
            st.recv_asm.wr = std::move(*wr);
            st.recv_asm.plan = plan_app(st.recv_asm.wr.wr, cfg_.mtu);
            st.recv_asm.capacity = st.recv_asm.wr.wr.total_len();
            if (flags_.no_zero_copy && st.recv_asm.capacity > 0)
                st.recv_asm.slot = bounce_.acquire(st.recv_asm.capacity);
        }
        RecvAsm& as = st.recv_asm;
        if (!as.failed && as.offset + payload.size() > as.capacity) {
            as.failed = true;
            as.fail_status = WcStatus::REM_ACCESS_ERR;
            nak_psn(qp, env, NakReason::ACCESS, out);
        }
        if (!as.failed && !payload.empty()) {
            if (flags_.no_zero_copy) {
                std::memcpy(as.slot.bytes.data() + as.offset, payload.data(), payload.size());
            } else if (!scatter(as, as.offset, payload)) {
                as.failed = true;
                as.fail_status = WcStatus::LOC_KEY_ERR;
                nak_psn(qp, env, NakReason::ACCESS, out);
            }
        }
        if (!as.failed) as.offset += payload.size();
        if (env.hdr.last_fragment()) {
            WorkCompletion wc;
            wc.wr_id = as.wr.wr.wr_id;
            wc.opcode = Opcode::RECV;
            wc.qp_num = qp.qp_num;
            if (as.failed) {
                wc.status = as.fail_status;
            } else if (flags_.no_zero_copy && as.offset > 0) {
                // unstage: one bounce-to-application copy of the message
                if (!scatter(as, 0, std::span<const uint8_t>(as.slot.bytes.data(), as.offset))) {
                    wc.status = WcStatus::LOC_KEY_ERR;
                } else {
                    dev_.guard().note_copy(0, uint64_t(as.offset), as.offset,
                                           AuditKind::StageCopy);
                    wc.byte_len = uint32_t(as.offset);
                }
            } else {
                wc.byte_len = uint32_t(as.offset);
            }
            if (clock_.is_virtual()) {
                uint64_t t = std::max(env.sim_time_ns, vbusy_);
                if (flags_.no_zero_copy)
                    t += uint64_t(double(as.offset) * clock_.costs.copy_ns_per_byte);
                wc.sim_time_ns = t + clock_.costs.deliver_ns;
                vbusy_ = std::max(vbusy_, wc.sim_time_ns);
            }
            finish_posted(as.wr, &as.slot);
            deliver_completion(*qp.recv_cq, wc);
            st.recv_asm = RecvAsm{};
        }
        return true;
    }

    // Scatter `bytes` into the recv WR at message offset `at`.
    bool scatter(RecvAsm& as, uint64_t at, std::span<const uint8_t> bytes) {
        size_t done = 0;
        for (const auto& piece : as.plan) {
            if (done >= bytes.size()) break;
            uint64_t piece_end = piece.msg_off + piece.len;
            if (piece_end <= at) continue;
            uint64_t start = std::max<uint64_t>(at, piece.msg_off);
            uint64_t n = std::min<uint64_t>(piece_end - start, bytes.size() - done);
            if (n == 0) continue;
            auto sp = dev_.guard().access(piece.lkey, piece.addr + (start - piece.msg_off), n,
                                          LOCAL_WRITE, AuditKind::DmaWrite);
            if (!sp) return false;
            std::memcpy(sp->data(), bytes.data() + done, size_t(n));
            done += size_t(n);
            at += n;
        }
        return done == bytes.size();
    }

    void rc_write_fragment(QueuePair& qp, RcState& st, Envelope& env, std::vector<Envelope>& out) {
        auto payload = env.payload();
        auto sp = dev_.guard().access(env.hdr.rkey, env.hdr.remote_address, payload.size(),
                                      REMOTE_WRITE, AuditKind::DmaWrite);
        if (!sp) {
            nak_psn(qp, env, NakReason::ACCESS, out);
            return;
        }
        if (flags_.no_zero_copy && !payload.empty()) {
            auto slot = bounce_.acquire(payload.size());
            std::memcpy(slot.bytes.data(), payload.data(), payload.size());
            std::memcpy(sp->data(), slot.bytes.data(), payload.size());
            dev_.guard().note_copy(env.hdr.rkey, env.hdr.remote_address, payload.size(),
                                   AuditKind::StageCopy);
            bounce_.release(slot);
        } else if (!payload.empty()) {
            std::memcpy(sp->data(), payload.data(), payload.size());
        }
        if (clock_.is_virtual()) vbusy_ = std::max(vbusy_, env.sim_time_ns);
        (void)st;
    }

    void rc_read_request(QueuePair& qp, RcState& st, Envelope& env, std::vector<Envelope>& out) {
        uint64_t len = env.payload().size() >= 4 ? get_be32(env.payload().data()) : 0;
        // validate the full range up front; fragments reuse the grant
        auto sp = dev_.guard().access(env.hdr.rkey, env.hdr.remote_address, len, REMOTE_READ,
                                      AuditKind::DmaRead);
        if (!sp) {
            nak_psn(qp, env, NakReason::ACCESS, out);
            // psn still consumed by caller
            return;
        }
        ReadJob job;
        job.requester_qp = env.hdr.src_qp;
        job.addr = env.hdr.remote_address;
        job.len = len;
        job.rkey = env.hdr.rkey;
        st.read_jobs.push_back(job);
        if (clock_.is_virtual()) vbusy_ = std::max(vbusy_, env.sim_time_ns);
        mark_doorbell(qp.qp_num);
    }

    void rc_read_response(QueuePair& qp, RcState& st, Envelope& env) {
        if (st.reads_waiting.empty()) return;
        SendOp& op = *st.reads_waiting.front();
        auto payload = env.payload();
        if (!op.read_sink_failed && !payload.empty()) {
            RecvAsm scratch;
            scratch.plan = op.plan;
            if (!scatter(scratch, op.read_done, payload)) op.read_sink_failed = true;
        }
        if (!op.read_sink_failed) op.read_done += payload.size();
        if (env.hdr.last_fragment()) {
            op.done = true;
            op.status = op.read_sink_failed ? WcStatus::LOC_KEY_ERR : WcStatus::SUCCESS;
            op.byte_len = op.read_sink_failed ? 0 : uint32_t(op.read_done);
            op.done_time = clock_.is_virtual()
                               ? std::max(env.sim_time_ns, vbusy_) + clock_.costs.deliver_ns
                               : 0;
            st.reads_waiting.pop_front();
        }
    }

    void deliver_ud(QueuePair& qp, Envelope& env) {
        auto payload = env.payload();
        auto wr = qp.pop_recv();
        if (!wr) {
            ++stats_.ud_drops;
            return;
        }
        RecvAsm as;
        as.active = true;
        as.wr = std::move(*wr);
        as.plan = plan_app(as.wr.wr, cfg_.mtu);
        as.capacity = as.wr.wr.total_len();
        WorkCompletion wc;
        wc.wr_id = as.wr.wr.wr_id;
        wc.opcode = Opcode::RECV;
        wc.qp_num = qp.qp_num;
        if (payload.size() > as.capacity) {
            wc.status = WcStatus::REM_ACCESS_ERR;
        } else if (flags_.no_zero_copy && !payload.empty()) {
            auto slot = bounce_.acquire(payload.size());
            std::memcpy(slot.bytes.data(), payload.data(), payload.size());
            bool ok = scatter(as, 0, std::span<const uint8_t>(slot.bytes.data(), payload.size()));
            dev_.guard().note_copy(0, 0, payload.size(), AuditKind::StageCopy);
            bounce_.release(slot);
            if (ok)
                wc.byte_len = uint32_t(payload.size());
            else
                wc.status = WcStatus::LOC_KEY_ERR;
        } else if (!scatter(as, 0, payload)) {
            wc.status = WcStatus::LOC_KEY_ERR;
        } else {
            wc.byte_len = uint32_t(payload.size());
        }
        if (wc.status != WcStatus::SUCCESS) wc.byte_len = 0;
        if (clock_.is_virtual())
            wc.sim_time_ns = std::max(env.sim_time_ns, vbusy_) + clock_.costs.deliver_ns;
        finish_posted(as.wr, &as.slot);
        deliver_completion(*qp.recv_cq, wc);
    }

    // ---- acks, naks, timers ---------------------------------------------

    void ack(QueuePair& qp, const Envelope& cause, uint32_t psn, std::vector<Envelope>& out) {
        Envelope env;
        env.src_node = node_;
        env.dst_node = qp.peer ? qp.peer->first : cause.src_node;
        env.hdr.opcode = PktOp::ACK;
        env.hdr.transport = Transport::RC;
        env.hdr.src_qp = qp.qp_num;
        env.hdr.dst_qp = cause.hdr.src_qp;
        env.hdr.psn = psn & kPsnMask;
        if (clock_.is_virtual())
            env.sim_time_ns = std::max(cause.sim_time_ns, vbusy_) + clock_.costs.wire_ns;
        ++stats_.acks_tx;
        out.push_back(std::move(env));
    }

    void nak_psn(QueuePair& qp, const Envelope& cause, NakReason reason,
                 std::vector<Envelope>& out) {
        Envelope env;
        env.src_node = node_;
        env.dst_node = qp.peer ? qp.peer->first : cause.src_node;
        env.hdr.opcode = PktOp::NAK;
        env.hdr.transport = Transport::RC;
        env.hdr.src_qp = qp.qp_num;
        env.hdr.dst_qp = cause.hdr.src_qp;
        env.hdr.psn = cause.hdr.psn;
        env.owned.push_back(uint8_t(reason));
        if (clock_.is_virtual())
            env.sim_time_ns = std::max(cause.sim_time_ns, vbusy_) + clock_.costs.wire_ns;
        ++stats_.naks_tx;
        out.push_back(std::move(env));
    }

    void nak(const Envelope& cause, NakReason reason, std::vector<Envelope>& out) {
        Envelope env;
        env.src_node = node_;
        env.dst_node = cause.src_node;
        env.hdr.opcode = PktOp::NAK;
        env.hdr.transport = Transport::RC;
        env.hdr.src_qp = cause.hdr.dst_qp;
        env.hdr.dst_qp = cause.hdr.src_qp;
        env.hdr.psn = cause.hdr.psn;
        env.owned.push_back(uint8_t(reason));
        ++stats_.naks_tx;
        out.push_back(std::move(env));
    }

    void on_ack(QueuePair& qp, RcState& st, uint32_t acked) {
        if (!psn_lt(st.psn_acked, acked)) return;  // stale cumulative ack
        st.psn_acked = acked;
        // a duplicate re-ack can confirm frames we rewound past; keep the
        // emission cursor ahead of the confirmed prefix
        if (psn_lt(st.psn_next, psn_add(acked, 1))) st.psn_next = psn_add(acked, 1);
        st.rto_ns = kRtoBaseNs;
        st.timeouts = 0;
        st.rnr_retries = 0;
        bool all_acked = st.psn_acked == psn_add(st.psn_next, kPsnMask);
        st.rto_deadline =
            (!fabric_.reliable() && !all_acked) ? now_ns() + st.rto_ns : UINT64_MAX;
        recompute_deadline();
        for (auto& op : st.ops) {
            if (op.done || !op.psn_assigned) continue;
            if (op.posted.wr.opcode == Opcode::RDMA_READ) continue;  // completes on RESP
            if (psn_le(op.last_psn(), acked)) {
                // delivery confirmed even if a rewind reset the emission
                // progress
                op.frags_emitted = op.frags_total();
                op.done = true;
                op.status = WcStatus::SUCCESS;
                op.done_time = clock_.is_virtual() ? now_virtual_ack() : 0;
            } else if (psn_le(op.first_psn, acked)) {
                // partially confirmed: emission resumes where the ack left
                // off so frame psns stay aligned with psn_next
                uint32_t confirmed = ((acked - uint32_t(op.first_psn)) & kPsnMask) + 1;
                op.frags_emitted = std::max(op.frags_emitted, confirmed);
            }
        }
        if (tx_work_pending(qp, st)) mark_doorbell(qp.qp_num);  // window space opened
    }

    uint64_t now_virtual_ack() { return vbusy_ + clock_.costs.wire_ns + clock_.costs.deliver_ns; }

    void on_nak(QueuePair& qp, RcState& st, NakReason reason, uint32_t psn) {
        if (reason == NakReason::RNR) {
            if (++st.rnr_retries > kRetryBudget) {
                qp_error(qp, WcStatus::QP_ERR);
                return;
            }
            ++stats_.rnr_backoffs;
            uint64_t backoff = kRnrBackoffBaseNs << (st.rnr_retries - 1);
            st.rnr_resume_at = now_ns() + backoff;
            set_deadline(st.rnr_resume_at);
            // go-back: re-emit everything at and after the refused psn
            rewind_to(st, psn);
            return;
        }
        // ACCESS / MALFORMED: the covering op fails, the psn is consumed
        if (psn_lt(st.psn_acked, psn)) st.psn_acked = psn;
        for (auto& op : st.ops) {
            if (op.done || !op.psn_assigned) continue;
            if (psn_le(op.first_psn, psn) && psn_le(psn, op.last_psn())) {
                op.done = true;
                op.status = WcStatus::REM_ACCESS_ERR;
                op.byte_len = 0;
                op.done_time = clock_.is_virtual() ? now_virtual_ack() : 0;
                if (op.posted.wr.opcode == Opcode::RDMA_READ) {
                    auto it = std::find(st.reads_waiting.begin(), st.reads_waiting.end(), &op);
                    if (it != st.reads_waiting.end()) st.reads_waiting.erase(it);
                }
                break;
            }
        }
        if (tx_work_pending(qp, st)) mark_doorbell(qp.qp_num);
    }

    void rewind_to(RcState& st, uint32_t psn) {
        st.psn_next = psn & kPsnMask;
        for (auto& op : st.ops) {
            if (op.done || !op.psn_assigned) continue;
            if (psn_lt(op.last_psn(), psn)) continue;  // fully delivered
            // a psn range is permanent once assigned: re-emission reuses
            // it, so a straggler ack can still complete the op and a
            // duplicate frame stays recognizable at the receiver
            if (psn_le(psn, op.first_psn))
                op.frags_emitted = 0;
            else
                op.frags_emitted = (psn - uint32_t(op.first_psn)) & kPsnMask;
        }
    }

    void check_timers(uint64_t now) {
        for (auto& [qp_num, st] : rc_) {
            QueuePair* qp = dev_.find_qp(qp_num);
            if (!qp) continue;
            if (st.rnr_resume_at && now >= st.rnr_resume_at) {
                st.rnr_resume_at = 0;
                mark_doorbell(qp_num);
            }
            if (st.rto_deadline != UINT64_MAX && now >= st.rto_deadline) {
                if (++st.timeouts >= kRetryBudget) {
                    qp_error(*qp, WcStatus::QP_ERR);
                    continue;
                }
                ++stats_.retransmits;
                rewind_to(st, psn_add(st.psn_acked, 1));
                st.rto_ns *= 2;
                st.rto_deadline = now + st.rto_ns;
                mark_doorbell(qp_num);
            }
        }
        recompute_deadline();
    }

    void arm_rto(RcState& st) {
        if (fabric_.reliable()) return;
        if (st.rto_deadline == UINT64_MAX) {
            st.rto_deadline = now_ns() + st.rto_ns;
            set_deadline(st.rto_deadline);
        }
    }

    // ---- completion plumbing ---------------------------------------------

    void release_ready(QueuePair& qp, RcState& st) {
        while (!st.ops.empty() && st.ops.front().done) {
            SendOp op = std::move(st.ops.front());
            st.ops.pop_front();
            finish_posted(op.posted);
            qp.complete_send_slot();
            WorkCompletion wc;
            wc.wr_id = op.posted.wr.wr_id;
            wc.status = op.status;
            wc.opcode = op.posted.wr.opcode;
            wc.byte_len = op.status == WcStatus::SUCCESS ? op.byte_len : 0;
            wc.qp_num = qp.qp_num;
            wc.sim_time_ns = op.done_time;
            deliver_completion(*qp.send_cq, wc);
        }
    }

    void finish_posted(PostedWr& p, BouncePool::Slot* extra_slot = nullptr) {
        for (MrKey k : p.pinned) dev_.guard().unpin(k);
        p.pinned.clear();
        bounce_.release(p.slot);
        p.slot = BouncePool::Slot{};
        if (extra_slot) {
            bounce_.release(*extra_slot);
            *extra_slot = BouncePool::Slot{};
        }
    }

    void deliver_completion(CompletionQueue& cq, const WorkCompletion& wc) {
        ++stats_.completions;
        if (cq.push(wc)) return;
        // Overrun: loud failure. Every QP bound to this CQ goes to ERROR
        // and flushes; the overflowing completion is lost (the sticky
        // flag records that).
        if (escalating_.insert(cq.id()).second) {
            for (QueuePair* qp : dev_.qps_bound_to(cq)) qp_error(*qp, WcStatus::FLUSH_ERR);
            escalating_.erase(cq.id());
        }
    }

    void qp_error(QueuePair& qp, WcStatus head_status) {
        qp.state = QpState::ERROR;
        auto it = rc_.find(qp.qp_num);
        if (it != rc_.end()) {
            RcState& st = it->second;
            bool first = true;
            for (auto& op : st.ops) {
                if (op.done) continue;
                op.done = true;
                op.status = first ? head_status : WcStatus::FLUSH_ERR;
                first = false;
                ++stats_.flushed_wrs;
            }
            st.reads_waiting.clear();
            st.read_jobs.clear();
            st.rnr_resume_at = 0;
            st.rto_deadline = UINT64_MAX;
            release_ready(qp, st);
        }
        flush_qp(qp, WcStatus::FLUSH_ERR);
    }

    // Flush everything still queued (send backlog not yet admitted plus
    // posted receives).
    void flush_qp(QueuePair& qp, WcStatus status) {
        while (auto p = qp.pop_send()) {
            finish_posted(*p);
            qp.complete_send_slot();
            WorkCompletion wc;
            wc.wr_id = p->wr.wr_id;
            wc.status = status;
            wc.opcode = p->wr.opcode;
            wc.qp_num = qp.qp_num;
            ++stats_.flushed_wrs;
            deliver_completion(*qp.send_cq, wc);
        }
        while (auto p = qp.pop_recv()) {
            finish_posted(*p);
            WorkCompletion wc;
            wc.wr_id = p->wr.wr_id;
            wc.status = status;
            wc.opcode = Opcode::RECV;
            wc.qp_num = qp.qp_num;
            ++stats_.flushed_wrs;
            deliver_completion(*qp.recv_cq, wc);
        }
    }

    void worker_loop() {
        std::unique_lock lk(inbox_mu_);
        while (!stopping_) {
            cv_.wait_for(lk, std::chrono::microseconds(200), [&] {
                return stopping_ || (!paused_ && (!inbox_.empty() || !doorbells_.empty()));
            });
            if (stopping_) break;
            if (paused_) continue;
            lk.unlock();
            tick();
            service();
            lk.lock();
        }
    }

    NodeId node_;
    Device& dev_;
    Fabric& fabric_;
    Clock& clock_;
    BouncePool& bounce_;
    const AblationFlags& flags_;
    EngineConfig cfg_;

    mutable std::mutex mu_;        // engine/protocol state; held across tx
    mutable std::mutex inbox_mu_;  // submission queues; enqueue never blocks on mu_
    std::condition_variable cv_;
    std::thread worker_;
    std::atomic<bool> in_service_{false};
    bool stopping_ = false;
    bool paused_ = false;

    std::deque<Envelope> inbox_;
    std::deque<QpNum> doorbells_;
    std::set<QpNum> doorbell_set_;
    std::unordered_map<QpNum, RcState> rc_;
    std::set<uint32_t> escalating_;
    EngineStats stats_;
    uint64_t vbusy_ = 0;
    uint64_t* cursor_ = nullptr;
    std::atomic<uint64_t> next_deadline_{UINT64_MAX};
};

} // namespace softverbs
