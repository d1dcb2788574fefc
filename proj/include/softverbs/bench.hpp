#pragma once

#include <atomic>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "softverbs/node.hpp"
#include "softverbs/stats.hpp"

namespace softverbs::bench {

enum class Mode { Lat, Bw, Ablation, Matrix, App };
enum class OpSel { Send, Read, Write };
enum class WireSel { Inproc, Udp };

inline const char* to_string(Mode m) {
    switch (m) {
        case Mode::Lat: return "lat";
        case Mode::Bw: return "bw";
        case Mode::Ablation: return "ablation";
        case Mode::Matrix: return "matrix";
        case Mode::App: return "app";
    }
    return "?";
}
inline const char* to_string(OpSel o) {
    switch (o) {
        case OpSel::Send: return "send";
        case OpSel::Read: return "read";
        case OpSel::Write: return "write";
    }
    return "?";
}

struct BenchConfig {
    Mode mode = Mode::Lat;
    Transport transport = Transport::RC;
    OpSel op = OpSel::Send;
    std::vector<uint32_t> sizes = {16, 4096, 65536, 1048576};
    uint32_t iters = 10000;
    uint32_t tx_depth = 0;  // 0 = mode default (1 for lat, 64 for bw)
    uint32_t warmup = 0;    // 0 = max(100, iters/10)
    uint32_t reps = 0;      // 0 = mode default (30 for matrix, 1 otherwise)
    PathMode client_path = PathMode::Bypass;
    PathMode server_path = PathMode::Bypass;
    AblationFlags ablations;
    WireSel wire = WireSel::Inproc;
    ClockKind clock = ClockKind::Real;
    uint64_t seed = 1;
    std::optional<Crossing> crossing;  // default: mode-appropriate
    bool mediate_poll = false;
    std::optional<uint32_t> inline_threshold;
    std::string policy_text;
    // app mode
    uint32_t procs = 4;
    double rate_per_proc = 1300.0;
    uint32_t app_msg_size = 65536;
    double duration_s = 2.0;
    // udp backend
    std::string registry_text;
    double p_loss = 0.0;

    uint32_t effective_depth() const {
        if (tx_depth) return tx_depth;
        return mode == Mode::Bw ? 64 : 1;
    }
    uint32_t effective_warmup() const {
        if (warmup) return warmup;
        return std::max<uint32_t>(100, iters / 10);
    }
    uint32_t effective_reps() const {
        if (reps) return reps;
        if (mode == Mode::Matrix) return 30;
        if (mode == Mode::Ablation) return 5;
        return 1;
    }

    // Latency-overhead runs exercise the full privileged-context path;
    // rate-oriented runs use the bare crossing, the per-op cost analog.
    Crossing effective_crossing() const {
        if (crossing) return *crossing;
        return (mode == Mode::Matrix || mode == Mode::Lat) ? Crossing::Both
                                                           : Crossing::RealNullSyscall;
    }

    void validate() const {
        require(iters >= 1, "bench: iters must be >= 1");
        if (op != OpSel::Send)
            require(transport == Transport::RC, "bench: read/write require rc");
        if (transport == Transport::UD)
            for (uint32_t s : sizes)
                require(s <= kUdMaxBytes, "bench: ud sizes must be <= 4096");
        if (clock == ClockKind::Virtual)
            require(wire == WireSel::Inproc, "bench: virtual clock needs the inproc wire");
        if (mode == Mode::App) require(procs >= 2, "bench: app mode needs >= 2 participants");
    }
};

// One row per (config, metric). The canonical string pins every knob that
// shapes the measurement, so equal configs share a run id.
inline std::string canonical(const BenchConfig& c, PathMode cp, PathMode sp,
                             const AblationFlags& fl) {
    std::ostringstream os;
    os << to_string(c.mode) << '|' << (c.transport == Transport::RC ? "rc" : "ud") << '|'
       << to_string(c.op) << '|' << to_string(cp) << '|' << to_string(sp) << '|' << fl.label()
       << '|' << c.iters << '|' << c.effective_depth() << '|'
       << (c.wire == WireSel::Inproc ? "inproc" : "udp") << '|'
       << (c.clock == ClockKind::Virtual ? "virtual" : "real") << '|' << c.seed;
    return os.str();
}

inline std::string run_id_for(const BenchConfig& c, PathMode cp, PathMode sp,
                              const AblationFlags& fl) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%012llx",
                  (unsigned long long)(fnv1a64_str(canonical(c, cp, sp, fl)) & 0xFFFFFFFFFFFFull));
    return buf;
}

class CsvWriter {
public:
    static constexpr const char* kHeader =
        "run_id,mode,transport,op,size,client_path,server_path,ablations,metric,value,unit,seed";

    explicit CsvWriter(std::ostream& out) : out_(out) { out_ << kHeader << '\n'; }

    void row(const std::string& run_id, const BenchConfig& c, uint64_t size, PathMode cp,
             PathMode sp, const AblationFlags& fl, const std::string& metric, double value,
             const std::string& unit) {
        char val[40];
        std::snprintf(val, sizeof val, "%.6f", value);
        out_ << run_id << ',' << to_string(c.mode) << ','
             << (c.transport == Transport::RC ? "rc" : "ud") << ',' << to_string(c.op) << ','
             << size << ',' << to_string(cp) << ',' << to_string(sp) << ',' << fl.label() << ','
             << metric << ',' << val << ',' << unit << ',' << c.seed << '\n';
    }

private:
    std::ostream& out_;
};

// analytic sanity model: relative slowdown = message rate x per-op cost
struct OverheadPrediction {
    double slowdown = 0;
    bool saturated = false;
};
inline OverheadPrediction predict_overhead(double msg_rate_per_s, double per_op_cost_s) {
    require(msg_rate_per_s >= 0 && per_op_cost_s >= 0, "predict_overhead: inputs must be >= 0");
    double o = msg_rate_per_s * per_op_cost_s;
    return {std::min(o, 1.0), o >= 1.0};
}

// ---------------------------------------------------------------------
// workload plumbing

struct Side {
    Node* node = nullptr;
    ProtectionDomain pd;
    MemoryRegion mr;
    QueuePair* qp = nullptr;
    CompletionQueue* scq = nullptr;
    CompletionQueue* rcq = nullptr;
    uint8_t* buf = nullptr;
    size_t buf_len = 0;
    uint64_t cursor = 0;  // virtual-clock role time
};

struct PairBench {
    std::unique_ptr<Cluster> cluster;
    std::unique_ptr<HugeBuffer> client_mem, server_mem;
    Side client, server;
    bool event_mode = false;
    Clock* clock = nullptr;
};

// Build a two-node pair for one benchmark run. `worker_client` puts the
// client engine on its own drain thread so submission overlaps transfer
// (throughput runs); latency runs keep everything on the caller.
inline PairBench make_pair_bench(const BenchConfig& c, PathMode client_path, PathMode server_path,
                                 const AblationFlags& flags, uint32_t depth, uint32_t rx_slots,
                                 bool worker_client) {
    PairBench pb;
    NodeConfig ccfg, scfg;
    ccfg.path.mode = client_path;
    scfg.path.mode = server_path;
    ccfg.path.crossing = scfg.path.crossing = c.effective_crossing();
    ccfg.path.mediate_poll = scfg.path.mediate_poll = c.mediate_poll;
    ccfg.flags = scfg.flags = flags;
    ccfg.inline_threshold = scfg.inline_threshold = c.inline_threshold;
    ccfg.full_audit = scfg.full_audit = false;  // counters stay on
    if (worker_client && c.clock == ClockKind::Real)
        ccfg.engine.mode = EngineConfig::Mode::PollLoop;

    if (c.wire == WireSel::Inproc) {
        pb.cluster = std::make_unique<Cluster>(2, c.clock, std::vector<NodeConfig>{ccfg, scfg});
    } else {
        auto reg = parse_registry(c.registry_text);
        pb.cluster = std::make_unique<Cluster>(reg, std::vector<NodeId>{1, 2}, c.p_loss, c.seed,
                                               std::vector<NodeConfig>{ccfg, scfg});
    }
    pb.clock = &pb.cluster->clock();
    pb.event_mode = flags.no_polling;

    size_t need = size_t(2) << 20;
    for (uint32_t s : c.sizes) need = std::max(need, size_t(s) + 4096);
    pb.client_mem = std::make_unique<HugeBuffer>(need);
    pb.server_mem = std::make_unique<HugeBuffer>(need);

    auto setup = [&](Side& s, Node& n, HugeBuffer& mem, uint32_t cq_cap) {
        s.node = &n;
        s.buf = mem.data();
        s.buf_len = mem.size();
        s.pd = n.dev().alloc_pd();
        s.mr = n.dev().reg_mr(s.pd, uint64_t(uintptr_t(mem.data())), mem.size(),
                              LOCAL_WRITE | REMOTE_READ | REMOTE_WRITE);
        s.scq = &n.dev().create_cq(cq_cap);
        s.rcq = &n.dev().create_cq(cq_cap);
    };
    uint32_t cq_cap = std::max<uint32_t>(rx_slots + depth + 16, 256);
    setup(pb.client, pb.cluster->node(0), *pb.client_mem, cq_cap);
    setup(pb.server, pb.cluster->node(1), *pb.server_mem, cq_cap);

    pb.client.qp = &pb.client.node->dev().create_qp(pb.client.pd, c.transport, *pb.client.scq,
                                                    *pb.client.rcq, depth + 1, rx_slots + 1);
    pb.server.qp = &pb.server.node->dev().create_qp(pb.server.pd, c.transport, *pb.server.scq,
                                                    *pb.server.rcq, depth + 1, rx_slots + 1);
    if (c.transport == Transport::RC) {
        Cluster::connect_rc(*pb.client.node, *pb.client.qp, *pb.server.node, *pb.server.qp);
    } else {
        Cluster::activate_ud(*pb.client.node, *pb.client.qp);
        Cluster::activate_ud(*pb.server.node, *pb.server.qp);
    }
    if (!c.policy_text.empty()) {
        pb.client.node->policy().install(parse_policy(c.policy_text));
        pb.server.node->policy().install(parse_policy(c.policy_text));
    }
    return pb;
}

inline WorkRequest side_send(const Side& s, uint32_t size, uint64_t wr_id,
                             std::optional<std::pair<NodeId, QpNum>> dest = std::nullopt) {
    WorkRequest wr;
    wr.wr_id = wr_id;
    wr.opcode = Opcode::SEND;
    wr.sge.push_back({uint64_t(uintptr_t(s.buf)), size, s.mr.lkey});
    wr.dest = dest;
    return wr;
}

inline WorkRequest side_recv(const Side& s, uint32_t size, uint64_t wr_id, uint64_t off = 0) {
    WorkRequest wr;
    wr.wr_id = wr_id;
    wr.opcode = Opcode::RECV;
    wr.sge.push_back({uint64_t(uintptr_t(s.buf)) + off, size, s.mr.lkey});
    return wr;
}

// Collect exactly `want` completions for one side, honoring the
// configured wait mode and virtual cursor.
inline std::vector<WorkCompletion> side_wait(PairBench& pb, Side& s, CompletionQueue& cq,
                                             uint32_t want) {
    s.node->bind_cursor(pb.clock->is_virtual() ? &s.cursor : nullptr);
    return s.node->wait_completions(cq, want, pb.event_mode, 5'000'000'000ull);
}

// ---------------------------------------------------------------------
// latency runners: samples are one-way (send/write ping-pong halved) or
// full-op (read) times in microseconds

// Ping-pong with both roles interleaved on the measuring thread (the
// engines execute inline, so a role's completion is ready the moment its
// peer finishes posting). This removes cross-thread scheduling noise from
// the medians; the recorded costs are the code paths themselves.
inline std::vector<double> lat_send(PairBench& pb, const BenchConfig& c, uint32_t size,
                                    uint32_t iters, uint32_t warmup) {
    std::vector<double> samples;
    samples.reserve(iters);
    bool ud = c.transport == Transport::UD;
    auto cdest = ud ? std::make_optional(std::make_pair(pb.server.node->id(),
                                                        pb.server.qp->qp_num))
                    : std::nullopt;
    auto sdest = ud ? std::make_optional(std::make_pair(pb.client.node->id(),
                                                        pb.client.qp->qp_num))
                    : std::nullopt;
    uint32_t total = warmup + iters;
    bool virt = pb.clock->is_virtual();

    pb.server.node->bind_cursor(virt ? &pb.server.cursor : nullptr);
    // the previous run's trailing repost doubles as this run's first slot
    if (pb.server.qp->recv_backlog() == 0)
        pb.server.node->post_recv(*pb.server.qp, {side_recv(pb.server, size, 1)});
    for (uint32_t i = 0; i < total; ++i) {
        pb.client.node->bind_cursor(virt ? &pb.client.cursor : nullptr);
        uint64_t t0 = pb.client.cursor;
        Stopwatch sw;
        pb.client.node->post_recv(*pb.client.qp, {side_recv(pb.client, size, 2)});
        pb.client.node->post_send(*pb.client.qp, {side_send(pb.client, size, 3, cdest)});
        auto ping = side_wait(pb, pb.server, *pb.server.rcq, 1);
        if (ping.empty()) break;
        pb.server.node->bind_cursor(virt ? &pb.server.cursor : nullptr);
        pb.server.node->post_recv(*pb.server.qp, {side_recv(pb.server, size, 1)});
        pb.server.node->post_send(*pb.server.qp, {side_send(pb.server, size, 4, sdest)});
        side_wait(pb, pb.server, *pb.server.scq, 1);
        auto pong = side_wait(pb, pb.client, *pb.client.rcq, 1);
        if (pong.empty()) break;
        side_wait(pb, pb.client, *pb.client.scq, 1);
        if (i >= warmup)
            samples.push_back(virt ? double(pb.client.cursor - t0) / 1000.0 / 2.0
                                   : sw.elapsed_us() / 2.0);
    }
    return samples;
}

inline std::vector<double> lat_read(PairBench& pb, const BenchConfig& c, uint32_t size,
                                    uint32_t iters, uint32_t warmup) {
    (void)c;
    std::vector<double> samples;
    samples.reserve(iters);
    uint32_t total = warmup + iters;
    for (uint32_t i = 0; i < total; ++i) {
        if (pb.clock->is_virtual()) pb.client.node->bind_cursor(&pb.client.cursor);
        uint64_t t0 = pb.client.cursor;
        Stopwatch sw;
        WorkRequest wr;
        wr.wr_id = i;
        wr.opcode = Opcode::RDMA_READ;
        wr.sge.push_back({uint64_t(uintptr_t(pb.client.buf)), size, pb.client.mr.lkey});
        wr.remote = {pb.server.mr.base, pb.server.mr.rkey};
        pb.client.node->post_send(*pb.client.qp, {wr});
        auto wcs = side_wait(pb, pb.client, *pb.client.scq, 1);
        if (wcs.empty()) break;
        if (i >= warmup)
            samples.push_back(pb.clock->is_virtual() ? double(pb.client.cursor - t0) / 1000.0
                                                     : sw.elapsed_us());
    }
    return samples;
}

// perftest-style write ping-pong: both sides post writes and spin on
// their own memory for the peer's token.
inline std::vector<double> lat_write(PairBench& pb, const BenchConfig& c, uint32_t size,
                                     uint32_t iters, uint32_t warmup) {
    (void)c;
    std::vector<double> samples;
    samples.reserve(iters);
    uint32_t total = warmup + iters;
    uint64_t flag_off = size;  // token byte rides at the end of the payload

    auto write_wr = [&](Side& from, Side& to, uint32_t len, uint8_t token, uint64_t id) {
        from.buf[flag_off] = token;
        WorkRequest wr;
        wr.wr_id = id;
        wr.opcode = Opcode::RDMA_WRITE;
        wr.sge.push_back({uint64_t(uintptr_t(from.buf)), len + 1, from.mr.lkey});
        wr.remote = {to.mr.base, to.mr.rkey};
        return wr;
    };

    bool virt = pb.clock->is_virtual();
    auto* my_flag = reinterpret_cast<std::atomic<uint8_t>*>(pb.client.buf + flag_off);
    auto* peer_flag = reinterpret_cast<std::atomic<uint8_t>*>(pb.server.buf + flag_off);
    for (uint32_t i = 0; i < total; ++i) {
        uint8_t tok = uint8_t(1 + i % 250);
        pb.client.node->bind_cursor(virt ? &pb.client.cursor : nullptr);
        uint64_t t0 = pb.client.cursor;
        Stopwatch sw;
        pb.client.node->post_send(*pb.client.qp, {write_wr(pb.client, pb.server, size, tok, i)});
        auto cwc = side_wait(pb, pb.client, *pb.client.scq, 1);
        // responder side: the token is visible once the write landed
        if (virt)
            pb.server.cursor = std::max(pb.server.cursor,
                                        cwc.empty() ? pb.server.cursor : cwc[0].sim_time_ns);
        else if (peer_flag->load(std::memory_order_acquire) != tok)
            break;  // write must have landed inline
        pb.server.node->bind_cursor(virt ? &pb.server.cursor : nullptr);
        pb.server.node->post_send(*pb.server.qp, {write_wr(pb.server, pb.client, size, tok, i)});
        auto swc = side_wait(pb, pb.server, *pb.server.scq, 1);
        if (virt)
            pb.client.cursor = std::max(pb.client.cursor,
                                        swc.empty() ? pb.client.cursor : swc[0].sim_time_ns);
        else if (my_flag->load(std::memory_order_acquire) != tok)
            break;
        if (i >= warmup)
            samples.push_back(virt ? double(pb.client.cursor - t0) / 1000.0 / 2.0
                                   : sw.elapsed_us() / 2.0);
    }
    return samples;
}

inline std::vector<double> run_lat_samples(PairBench& pb, const BenchConfig& c, uint32_t size,
                                           uint32_t iters, uint32_t warmup) {
    switch (c.op) {
        case OpSel::Send: return lat_send(pb, c, size, iters, warmup);
        case OpSel::Read: return lat_read(pb, c, size, iters, warmup);
        case OpSel::Write: return lat_write(pb, c, size, iters, warmup);
    }
    return {};
}

// ---------------------------------------------------------------------
// throughput runner

struct BwResult {
    double msg_rate = 0;   // messages per second (acknowledged)
    double gbps = 0;       // payload goodput
    double delivered = 0;  // receiver-side count (UD)
};

inline BwResult run_bw_once(PairBench& pb, const BenchConfig& c, uint32_t size, uint32_t iters,
                            uint32_t depth) {
    bool ud = c.transport == Transport::UD;
    bool one_sided = c.op != OpSel::Send;
    auto dest = ud ? std::make_optional(std::make_pair(pb.server.node->id(),
                                                       pb.server.qp->qp_num))
                   : std::nullopt;

    if (!one_sided) {
        // drain lazily after the run; receives were preposted in bulk
        for (uint32_t i = 0; i < iters; ++i)
            require(pb.server.node->post_recv(*pb.server.qp,
                                              {side_recv(pb.server, size, i)}) == PostResult::OK,
                    "bw: prepost failed");
    }

    auto make_wr = [&](uint64_t i) {
        WorkRequest wr;
        wr.wr_id = i;
        switch (c.op) {
            case OpSel::Send:
                wr.opcode = Opcode::SEND;
                wr.dest = dest;
                break;
            case OpSel::Write:
                wr.opcode = Opcode::RDMA_WRITE;
                wr.remote = {pb.server.mr.base, pb.server.mr.rkey};
                break;
            case OpSel::Read:
                wr.opcode = Opcode::RDMA_READ;
                wr.remote = {pb.server.mr.base, pb.server.mr.rkey};
                break;
        }
        wr.sge.push_back({uint64_t(uintptr_t(pb.client.buf)), size, pb.client.mr.lkey});
        return wr;
    };

    if (pb.clock->is_virtual()) pb.client.node->bind_cursor(&pb.client.cursor);
    uint64_t vt0 = pb.client.cursor;
    uint64_t vlast = vt0;
    Stopwatch sw;
    uint32_t posted = 0, done = 0, idle = 0;
    std::vector<WorkRequest> batch;
    while (done < iters) {
        // post in chunks: one doorbell per batch, like a perftest burst
        uint32_t room = depth - std::min(depth, posted - done);
        uint32_t n = std::min({room, iters - posted, 16u});
        if (n > 0) {
            batch.clear();
            for (uint32_t k = 0; k < n; ++k) batch.push_back(make_wr(posted + k));
            if (pb.client.node->post_send(*pb.client.qp, batch) == PostResult::OK)
                posted += n;
        }
        auto wcs = pb.client.node->poll(*pb.client.scq, 64);
        if (wcs.empty() && pb.clock->is_virtual()) {
            // single-threaded virtual run: everything already completed
            auto rest = pb.client.node->poll(*pb.client.scq, iters);
            for (auto& wc : rest) vlast = std::max(vlast, wc.sim_time_ns);
            done += uint32_t(rest.size());
            if (rest.empty() && posted == done) break;
            continue;
        }
        for (auto& wc : wcs) vlast = std::max(vlast, wc.sim_time_ns);
        done += uint32_t(wcs.size());
        if (wcs.empty() && n == 0) {
            ++idle;
            if (idle > 512) {
                // engine-bound: park so the drain context owns the cores
                std::this_thread::sleep_for(std::chrono::microseconds(50));
            } else if (idle > 64) {
                for (uint32_t p = 0; p < 16; ++p) cpu_pause();
            }
        } else {
            idle = 0;
        }
        if (!pb.clock->is_virtual() && sw.elapsed_us() > 120e6) break;
    }
    double elapsed_s = pb.clock->is_virtual() ? double(vlast - vt0) * 1e-9
                                              : sw.elapsed_us() * 1e-6;
    if (elapsed_s <= 0) elapsed_s = 1e-9;

    BwResult r;
    r.msg_rate = double(done) / elapsed_s;
    r.gbps = double(done) * double(size) * 8.0 / elapsed_s / 1e9;
    if (ud) {
        // count what actually landed
        Stopwatch settle;
        uint64_t got = 0;
        while (settle.elapsed_us() < 50e3) {
            auto wcs = pb.server.node->poll(*pb.server.rcq, 256);
            got += wcs.size();
            if (wcs.empty() && settle.elapsed_us() > 10e3) break;
        }
        r.delivered = double(got);
    }
    return r;
}

// ---------------------------------------------------------------------
// app workload: ring halo exchange with compute pacing

struct AppResult {
    double runtime_s = 0;
    double achieved_rate = 0;  // per process
    bool rate_met = true;
};

inline AppResult run_app_once(const BenchConfig& c, PathMode path) {
    uint32_t P = c.procs;
    uint32_t n_msgs = uint32_t(std::max(1.0, c.rate_per_proc * c.duration_s));
    double period_ns = c.rate_per_proc > 0 ? 1e9 / c.rate_per_proc : 0;

    std::vector<NodeConfig> cfgs(P);
    for (auto& cfg : cfgs) {
        cfg.path.mode = path;
        cfg.path.crossing = c.effective_crossing();
        cfg.flags = c.ablations;
        cfg.full_audit = false;
        cfg.inline_threshold = c.inline_threshold;
    }
    Cluster cluster(P, c.clock, cfgs);

    struct Part {
        Node* node;
        ProtectionDomain pd;
        MemoryRegion mr;
        QueuePair* to_next = nullptr;    // sends
        QueuePair* from_prev = nullptr;  // receives
        CompletionQueue *scq, *rcq;
        std::vector<uint8_t> mem;
        uint64_t cursor = 0;
    };
    std::vector<Part> parts(P);
    for (uint32_t i = 0; i < P; ++i) {
        Part& p = parts[i];
        p.node = &cluster.node(i);
        p.mem.assign(size_t(c.app_msg_size) * 2 + 4096, 0);
        p.pd = p.node->dev().alloc_pd();
        p.mr = p.node->dev().reg_mr(p.pd, uint64_t(uintptr_t(p.mem.data())), p.mem.size(),
                                    LOCAL_WRITE | REMOTE_READ | REMOTE_WRITE);
        p.scq = &p.node->dev().create_cq(n_msgs + 64);
        p.rcq = &p.node->dev().create_cq(n_msgs + 64);
    }
    for (uint32_t i = 0; i < P; ++i) {
        uint32_t j = (i + 1) % P;
        auto& qa = parts[i].node->dev().create_qp(parts[i].pd, Transport::RC, *parts[i].scq,
                                                  *parts[i].rcq, 64, 8);
        auto& qb = parts[j].node->dev().create_qp(parts[j].pd, Transport::RC, *parts[j].scq,
                                                  *parts[j].rcq, 8, n_msgs + 8);
        Cluster::connect_rc(*parts[i].node, qa, *parts[j].node, qb);
        parts[i].to_next = &qa;
        parts[j].from_prev = &qb;
    }
    for (uint32_t i = 0; i < P; ++i) {
        // the whole exchange is preposted so a delayed participant never
        // bounces its neighbor into retry backoff
        Part& p = parts[i];
        std::vector<WorkRequest> recvs;
        for (uint32_t k = 0; k < n_msgs + 4; ++k) {
            WorkRequest wr;
            wr.wr_id = k;
            wr.opcode = Opcode::RECV;
            wr.sge.push_back({uint64_t(uintptr_t(p.mem.data())) + c.app_msg_size, c.app_msg_size,
                              p.mr.lkey});
            recvs.push_back(wr);
        }
        require(p.node->post_recv(*p.from_prev, recvs) == PostResult::OK,
                "app: recv prepost failed");
    }

    auto body = [&](Part& p, uint32_t idx) {
        (void)idx;
        uint64_t t0 = p.node->clock().now_ns();
        uint32_t recvd = 0, sent = 0;
        uint32_t sends_done = 0;
        auto service = [&] {
            p.node->engine().service();  // adopt frames parked in our inbox
            recvd += uint32_t(p.node->poll(*p.rcq, 32).size());
            sends_done += uint32_t(p.node->poll(*p.scq, 32).size());
        };
        // deadline-driven with catch-up: whatever the host timer
        // granularity, all overdue sends go out as a burst, so the
        // average rate tracks the target until the ops themselves
        // cannot keep up
        while (sent < n_msgs) {
            uint64_t deadline = t0 + uint64_t(period_ns) * (sent + 1);
            uint64_t now = p.node->clock().now_ns();
            while (sent < n_msgs && deadline <= now) {
                WorkRequest wr;
                wr.wr_id = sent;
                wr.opcode = Opcode::SEND;
                wr.sge.push_back({uint64_t(uintptr_t(p.mem.data())), c.app_msg_size, p.mr.lkey});
                p.node->post_send(*p.to_next, {wr});
                ++sent;
                service();
                deadline = t0 + uint64_t(period_ns) * (sent + 1);
            }
            if (sent >= n_msgs) break;
            p.node->clock().sleep_until(deadline);
        }
        // drain our remaining send completions
        Stopwatch sw;
        while (sends_done < n_msgs && sw.elapsed_us() < 10e6) {
            p.node->engine().service();
            sends_done += uint32_t(p.node->poll(*p.scq, 64).size());
        }
    };

    AppResult res;
    if (c.clock == ClockKind::Virtual) {
        // deterministic round-robin schedule
        Stopwatch sw;
        for (uint32_t m = 0; m < n_msgs; ++m) {
            for (uint32_t i = 0; i < P; ++i) {
                Part& p = parts[i];
                p.node->bind_cursor(&p.cursor);
                uint64_t deadline = uint64_t(period_ns) * (m + 1);
                p.cursor = std::max(p.cursor, deadline);
                WorkRequest wr;
                wr.wr_id = m;
                wr.opcode = Opcode::SEND;
                wr.sge.push_back({uint64_t(uintptr_t(p.mem.data())), c.app_msg_size, p.mr.lkey});
                p.node->post_send(*p.to_next, {wr});
                p.node->poll(*p.rcq, 16);
                p.node->poll(*p.scq, 16);
            }
        }
        uint64_t tmax = 0;
        for (auto& p : parts) tmax = std::max(tmax, p.cursor);
        res.runtime_s = double(tmax) * 1e-9;
    } else {
        Stopwatch sw;
        std::vector<std::thread> threads;
        for (uint32_t i = 0; i < P; ++i) threads.emplace_back([&, i] { body(parts[i], i); });
        for (auto& t : threads) t.join();
        res.runtime_s = sw.elapsed_us() * 1e-6;
    }
    res.achieved_rate = double(n_msgs) / std::max(res.runtime_s, 1e-9);
    res.rate_met = res.achieved_rate >= 0.97 * c.rate_per_proc;
    return res;
}

// ---------------------------------------------------------------------
// top-level runners: emit rows per the CSV contract

inline void emit_lat_rows(CsvWriter& csv, const BenchConfig& c, PathMode cp, PathMode sp,
                          const AblationFlags& fl, uint32_t size,
                          const std::vector<double>& samples) {
    auto rid = run_id_for(c, cp, sp, fl);
    csv.row(rid, c, size, cp, sp, fl, "lat_median_us", stats::median(samples), "us");
    csv.row(rid, c, size, cp, sp, fl, "lat_p99_us", stats::percentile(samples, 0.99), "us");
}

inline void run_lat(const BenchConfig& c, CsvWriter& csv) {
    for (uint32_t size : c.sizes) {
        PairBench pb = make_pair_bench(c, c.client_path, c.server_path, c.ablations,
                                       c.effective_depth(), 8, false);
        auto samples = run_lat_samples(pb, c, size, c.iters, c.effective_warmup());
        require(!samples.empty(), "lat: no samples collected");
        emit_lat_rows(csv, c, c.client_path, c.server_path, c.ablations, size, samples);
    }
}

inline void run_bw(const BenchConfig& c, CsvWriter& csv) {
    for (uint32_t size : c.sizes) {
        auto one = [&](PathMode cp, PathMode sp) {
            BenchConfig cc = c;
            PairBench pb = make_pair_bench(cc, cp, sp, c.ablations, c.effective_depth(),
                                           c.iters + 8, false);
            return run_bw_once(pb, cc, size, c.iters, c.effective_depth());
        };
        auto rid = run_id_for(c, c.client_path, c.server_path, c.ablations);
        BwResult r = one(c.client_path, c.server_path);
        csv.row(rid, c, size, c.client_path, c.server_path, c.ablations, "msg_rate_per_s",
                r.msg_rate, "1/s");
        csv.row(rid, c, size, c.client_path, c.server_path, c.ablations, "bw_gbps", r.gbps,
                "gbps");
        if (c.transport == Transport::UD)
            csv.row(rid, c, size, c.client_path, c.server_path, c.ablations, "ud_delivered",
                    r.delivered, "msgs");
        if (c.client_path != PathMode::Bypass || c.server_path != PathMode::Bypass) {
            BwResult base = one(PathMode::Bypass, PathMode::Bypass);
            auto base_id = run_id_for(c, PathMode::Bypass, PathMode::Bypass, c.ablations);
            csv.row(rid, c, size, c.client_path, c.server_path, c.ablations, "rel_throughput",
                    base.msg_rate > 0 ? r.msg_rate / base.msg_rate : 0,
                    "ratio@base=" + base_id);
        }
    }
}

// Technique-removal sweep. Latency overheads come from paired
// repetitions over persistent benches (variant minus baseline within the
// same repetition) so slow drift cancels; single unpaired runs at 1 MiB
// wander by tens of microseconds on shared hosts.
struct AblationVariant {
    const char* name;
    AblationFlags flags;
};

inline std::vector<AblationVariant> ablation_variants() {
    return {
        {"baseline", {}},
        {"no-bypass", {.no_zero_copy = false, .no_polling = false, .no_bypass_tax = true}},
        {"no-poll", {.no_zero_copy = false, .no_polling = true, .no_bypass_tax = false}},
        {"no-zc", {.no_zero_copy = true, .no_polling = false, .no_bypass_tax = false}},
    };
}

struct AblationResult {
    // [variant][size] -> median latency over reps; overhead vs baseline
    std::map<std::string, std::map<uint32_t, double>> lat_us;
    std::map<std::string, std::map<uint32_t, double>> overhead_us;
};

inline AblationResult run_ablation_lat(const BenchConfig& c) {
    AblationResult res;
    auto variants = ablation_variants();
    uint32_t reps = c.effective_reps();
    uint32_t iters = std::max<uint32_t>(100, c.iters / reps);
    uint32_t warmup = std::max<uint32_t>(50, iters / 10);
    for (uint32_t size : c.sizes) {
        std::vector<std::unique_ptr<PairBench>> benches;
        for (const auto& v : variants) {
            BenchConfig cc = c;
            cc.ablations = v.flags;
            benches.push_back(std::make_unique<PairBench>(
                make_pair_bench(cc, c.client_path, c.server_path, v.flags, 1, 8, false)));
            // one warm pass primes allocator and caches
            BenchConfig warm = cc;
            run_lat_samples(*benches.back(), warm, size, warmup, 0);
        }
        std::map<std::string, std::vector<double>> meds;
        for (uint32_t r = 0; r < reps; ++r) {
            for (size_t vi = 0; vi < variants.size(); ++vi) {
                BenchConfig cc = c;
                cc.ablations = variants[vi].flags;
                auto samples = run_lat_samples(*benches[vi], cc, size, iters, warmup);
                meds[variants[vi].name].push_back(stats::median(samples));
            }
        }
        for (const auto& v : variants) {
            res.lat_us[v.name][size] = stats::median(meds[v.name]);
            std::vector<double> diffs;
            for (uint32_t r = 0; r < reps; ++r)
                diffs.push_back(meds[v.name][r] - meds["baseline"][r]);
            res.overhead_us[v.name][size] = stats::median(diffs);
        }
    }
    return res;
}

inline void run_ablation_suite(const BenchConfig& c, CsvWriter& csv) {
    auto variants = ablation_variants();
    AblationResult res = run_ablation_lat(c);
    auto base_id = run_id_for(c, c.client_path, c.server_path, AblationFlags{});
    uint32_t bw_iters = std::min<uint32_t>(c.iters, 2000);
    for (const auto& v : variants) {
        auto rid = run_id_for(c, c.client_path, c.server_path, v.flags);
        for (uint32_t size : c.sizes) {
            BenchConfig cc = c;
            cc.ablations = v.flags;
            csv.row(rid, cc, size, c.client_path, c.server_path, v.flags, "lat_median_us",
                    res.lat_us[v.name][size], "us");
            if (std::string(v.name) != "baseline")
                csv.row(rid, cc, size, c.client_path, c.server_path, v.flags, "overhead_us",
                        res.overhead_us[v.name][size], "us@base=" + base_id);
            PairBench pbw = make_pair_bench(cc, c.client_path, c.server_path, v.flags, 64,
                                            bw_iters + 8, false);
            BwResult r = run_bw_once(pbw, cc, size, bw_iters, 64);
            csv.row(rid, cc, size, c.client_path, c.server_path, v.flags, "msg_rate_per_s",
                    r.msg_rate, "1/s");
            csv.row(rid, cc, size, c.client_path, c.server_path, v.flags, "bw_gbps", r.gbps,
                    "gbps");
        }
    }
}

// BP/CD direction matrix with paired repetitions and a noise floor, run
// over the whole size sweep on shared benches so the ratio across sizes
// reflects one process state.
struct MatrixResult {
    // [size][combo] -> per-rep medians
    std::map<uint32_t, std::map<std::pair<PathMode, PathMode>, std::vector<double>>> medians;
    std::map<uint32_t, double> noise_floor_us;  // MAD of BP->BP rep medians
};

inline MatrixResult run_direction_matrix_samples(const BenchConfig& c) {
    MatrixResult res;
    std::vector<std::pair<PathMode, PathMode>> combos = {
        {PathMode::Bypass, PathMode::Bypass},
        {PathMode::Mediated, PathMode::Bypass},
        {PathMode::Bypass, PathMode::Mediated},
        {PathMode::Mediated, PathMode::Mediated},
    };
    uint32_t reps = c.effective_reps();
    uint32_t iters = std::max<uint32_t>(100, c.iters / reps);
    uint32_t warmup = std::max<uint32_t>(50, iters / 10);
    // persistent benches, interleaved repetitions: combo-vs-combo diffs
    // stay paired and slow drift cancels
    std::vector<std::unique_ptr<PairBench>> benches;
    for (auto& combo : combos) {
        benches.push_back(std::make_unique<PairBench>(
            make_pair_bench(c, combo.first, combo.second, c.ablations, 1, 8, false)));
        run_lat_samples(*benches.back(), c, c.sizes.front(), warmup, 0);  // warm pass
    }
    for (uint32_t size : c.sizes) {
        auto& per_size = res.medians[size];
        for (uint32_t r = 0; r < reps; ++r)
            for (size_t k = 0; k < combos.size(); ++k) {
                auto samples = run_lat_samples(*benches[k], c, size, iters, warmup);
                per_size[combos[k]].push_back(stats::median(samples));
            }
        // the floor comes from independent BP->BP runs: fresh state per
        // repetition, so it reflects run-to-run spread rather than the
        // (much tighter) within-bench repeatability
        std::vector<double> floor_meds;
        for (uint32_t r = 0; r < reps; ++r) {
            PairBench fresh = make_pair_bench(c, PathMode::Bypass, PathMode::Bypass,
                                              c.ablations, 1, 8, false);
            auto samples = run_lat_samples(fresh, c, size, iters, warmup);
            floor_meds.push_back(stats::median(samples));
        }
        res.noise_floor_us[size] = stats::mad(floor_meds);
    }
    return res;
}

inline void run_direction_matrix(const BenchConfig& c, CsvWriter& csv) {
    MatrixResult res = run_direction_matrix_samples(c);
    auto base_id = run_id_for(c, PathMode::Bypass, PathMode::Bypass, c.ablations);
    for (uint32_t size : c.sizes) {
        auto& per_size = res.medians[size];
        auto& base = per_size[{PathMode::Bypass, PathMode::Bypass}];
        csv.row(base_id, c, size, PathMode::Bypass, PathMode::Bypass, c.ablations,
                "noise_floor_us", res.noise_floor_us[size], "us");
        for (auto& [combo, meds] : per_size) {
            auto rid = run_id_for(c, combo.first, combo.second, c.ablations);
            csv.row(rid, c, size, combo.first, combo.second, c.ablations, "lat_median_us",
                    stats::median(meds), "us");
            if (combo.first != PathMode::Bypass || combo.second != PathMode::Bypass) {
                std::vector<double> diffs;
                for (size_t i = 0; i < meds.size() && i < base.size(); ++i)
                    diffs.push_back(meds[i] - base[i]);
                csv.row(rid, c, size, combo.first, combo.second, c.ablations, "overhead_us",
                        stats::median(diffs), "us@base=" + base_id);
                csv.row(rid, c, size, combo.first, combo.second, c.ablations,
                        "overhead_sign_p", stats::sign_test_p(diffs), "p");
            }
        }
    }
}

inline void run_app_workload(const BenchConfig& c, CsvWriter& csv) {
    AblationFlags fl = c.ablations;
    AppResult bp = run_app_once(c, PathMode::Bypass);
    AppResult cd = run_app_once(c, PathMode::Mediated);
    auto bp_id = run_id_for(c, PathMode::Bypass, PathMode::Bypass, fl);
    auto cd_id = run_id_for(c, PathMode::Mediated, PathMode::Mediated, fl);
    csv.row(bp_id, c, c.app_msg_size, PathMode::Bypass, PathMode::Bypass, fl, "app_runtime_s",
            bp.runtime_s, "s");
    csv.row(bp_id, c, c.app_msg_size, PathMode::Bypass, PathMode::Bypass, fl, "msg_rate_per_s",
            bp.achieved_rate, "1/s");
    csv.row(cd_id, c, c.app_msg_size, PathMode::Mediated, PathMode::Mediated, fl,
            "app_runtime_s", cd.runtime_s, "s");
    csv.row(cd_id, c, c.app_msg_size, PathMode::Mediated, PathMode::Mediated, fl,
            "msg_rate_per_s", cd.achieved_rate, "1/s");
    csv.row(cd_id, c, c.app_msg_size, PathMode::Mediated, PathMode::Mediated, fl, "rel_runtime",
            bp.runtime_s > 0 ? cd.runtime_s / bp.runtime_s : 0, "ratio@base=" + bp_id);
    if (!cd.rate_met)
        csv.row(cd_id, c, c.app_msg_size, PathMode::Mediated, PathMode::Mediated, fl,
                "rate_unachievable", 1.0, "flag");
    if (!bp.rate_met)
        csv.row(bp_id, c, c.app_msg_size, PathMode::Bypass, PathMode::Bypass, fl,
                "rate_unachievable", 1.0, "flag");
}

inline void run(const BenchConfig& c, std::ostream& out) {
    c.validate();
    CsvWriter csv(out);
    switch (c.mode) {
        case Mode::Lat: run_lat(c, csv); break;
        case Mode::Bw: run_bw(c, csv); break;
        case Mode::Ablation: run_ablation_suite(c, csv); break;
        case Mode::Matrix: run_direction_matrix(c, csv); break;
        case Mode::App: run_app_workload(c, csv); break;
    }
}

inline std::string run_to_string(const BenchConfig& c) {
    std::ostringstream os;
    run(c, os);
    return os.str();
}

} // namespace softverbs::bench
