// perftest-style benchmark harness over the emulated verbs dataplane.
//
//   bench --mode lat|bw|ablation|matrix|app --transport rc|ud
//         --op send|read|write --size-list 16,4096,65536,1048576
//         --iters N --tx-depth D --client-path bp|cd --server-path bp|cd
//         --ablate no-zc,no-poll,no-bypass --wire inproc|udp
//         --policy FILE --seed S --out FILE.csv
//
// Exit code 0 on success, 2 on assertion-mode failure (--assert).

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "softverbs/bench.hpp"

using namespace softverbs;
using namespace softverbs::bench;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// Two-process UDP role: rendezvous over a UD control QP, then run the
// client or server half of the workload. The hello payload carries the
// peer's data QP number and MR coordinates.
struct Hello {
    QpNum data_qp;
    uint64_t mr_base;
    MrKey rkey;
    NodeId node;
};

int run_udp_role(const BenchConfig& c, const std::string& role, std::ostream& out) {
    auto reg = parse_registry(c.registry_text);
    bool is_client = role == "client";
    NodeId my_id = is_client ? 1 : 2;
    NodeId peer_id = is_client ? 2 : 1;
    NodeConfig cfg;
    cfg.path.mode = is_client ? c.client_path : c.server_path;
    cfg.path.crossing = c.effective_crossing();
    cfg.flags = c.ablations;
    cfg.full_audit = false;
    cfg.inline_threshold = c.inline_threshold;
    Cluster cluster(reg, {my_id}, c.p_loss, c.seed, {cfg});
    Node& n = cluster.node(0);

    uint32_t max_size = 16;
    for (uint32_t s : c.sizes) max_size = std::max(max_size, s);
    std::vector<uint8_t> mem(size_t(max_size) + 4096, 0);
    auto pd = n.dev().alloc_pd();
    auto mr = n.dev().reg_mr(pd, uint64_t(uintptr_t(mem.data())), mem.size(),
                             LOCAL_WRITE | REMOTE_READ | REMOTE_WRITE);
    auto& ctrl_cq = n.dev().create_cq(64);
    auto& ctrl_qp = n.dev().create_qp(pd, Transport::UD, ctrl_cq, ctrl_cq, 16, 16);
    Cluster::activate_ud(n, ctrl_qp);
    uint32_t depth = c.effective_depth();
    auto& scq = n.dev().create_cq(c.iters + depth + 64);
    auto& rcq = n.dev().create_cq(c.iters + depth + 64);
    auto& data_qp = n.dev().create_qp(pd, c.transport, scq, rcq, depth + 1, c.iters + 8);

    std::vector<uint8_t> hello_buf(64, 0);
    auto hello_mr = n.dev().reg_mr(pd, uint64_t(uintptr_t(hello_buf.data())), hello_buf.size(),
                                   LOCAL_WRITE);
    auto post_ctrl_recv = [&] {
        WorkRequest wr;
        wr.wr_id = 900;
        wr.opcode = Opcode::RECV;
        wr.sge.push_back({uint64_t(uintptr_t(hello_buf.data())), 64, hello_mr.lkey});
        n.post_recv(ctrl_qp, {wr});
    };
    auto send_hello = [&] {
        Hello h{data_qp.qp_num, mr.base, mr.rkey, my_id};
        std::vector<uint8_t> payload(sizeof h);
        std::memcpy(payload.data(), &h, sizeof h);
        auto hmr = n.dev().reg_mr(pd, uint64_t(uintptr_t(payload.data())), payload.size(), 0);
        WorkRequest wr;
        wr.wr_id = 901;
        wr.opcode = Opcode::SEND;
        wr.sge.push_back({uint64_t(uintptr_t(payload.data())), uint32_t(sizeof h), hmr.lkey});
        wr.dest = {peer_id, 1};  // control QP is the first created on each node
        n.post_send(ctrl_qp, {wr});
        // send completions are reaped by the rendezvous loop's poll, which
        // filters for the RECV carrying the peer's coordinates
    };

    // rendezvous: client pings until the server answers
    Hello peer{};
    post_ctrl_recv();
    Stopwatch sw;
    bool connected = false;
    while (!connected && sw.elapsed_us() < 30e6) {
        if (is_client) send_hello();
        auto wcs = n.poll(ctrl_cq, 4);
        for (auto& wc : wcs) {
            if (wc.opcode != Opcode::RECV || wc.status != WcStatus::SUCCESS) continue;
            std::memcpy(&peer, hello_buf.data(), sizeof peer);
            connected = true;
        }
        if (!connected) std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    if (!connected) {
        std::cerr << "rendezvous timed out\n";
        return 1;
    }
    if (c.transport == Transport::RC) {
        n.dev().modify_qp(data_qp, QpState::INIT);
        n.dev().modify_qp(data_qp, QpState::RTR, std::make_pair(peer_id, peer.data_qp));
        n.dev().modify_qp(data_qp, QpState::RTS);
    } else {
        Cluster::activate_ud(n, data_qp);
    }
    if (!is_client) send_hello();  // server answers once its QP is ready

    uint32_t size = c.sizes.empty() ? 4096 : c.sizes.front();
    uint32_t warmup = c.effective_warmup();
    auto recv_wr = [&](uint64_t id) {
        WorkRequest wr;
        wr.wr_id = id;
        wr.opcode = Opcode::RECV;
        wr.sge.push_back({uint64_t(uintptr_t(mem.data())), size, mr.lkey});
        return wr;
    };
    auto send_wr = [&](uint64_t id) {
        WorkRequest wr;
        wr.wr_id = id;
        wr.opcode = c.op == OpSel::Send ? Opcode::SEND
                    : c.op == OpSel::Read ? Opcode::RDMA_READ
                                          : Opcode::RDMA_WRITE;
        wr.sge.push_back({uint64_t(uintptr_t(mem.data())), size, mr.lkey});
        if (wr.opcode != Opcode::SEND) wr.remote = {peer.mr_base, peer.rkey};
        if (c.transport == Transport::UD) wr.dest = {peer_id, peer.data_qp};
        return wr;
    };

    if (!is_client) {
        // serve: echo pings (lat send) or absorb the stream
        if (c.mode == Mode::Lat && c.op == OpSel::Send) {
            n.post_recv(data_qp, {recv_wr(1)});
            for (uint32_t i = 0; i < warmup + c.iters; ++i) {
                auto wcs = n.wait_completions(rcq, 1, false, 60'000'000'000ull);
                if (wcs.empty()) break;
                n.post_recv(data_qp, {recv_wr(1)});
                n.post_send(data_qp, {send_wr(2)});
                n.wait_completions(scq, 1, false);
            }
        } else {
            for (uint32_t i = 0; i < c.iters; ++i) n.post_recv(data_qp, {recv_wr(i)});
            uint64_t got = 0;
            Stopwatch idle;
            while (idle.elapsed_us() < 60e6) {
                auto wcs = n.poll(rcq, 64);
                if (!wcs.empty()) {
                    got += wcs.size();
                    idle.reset();
                    if (got >= c.iters) break;
                }
                std::this_thread::sleep_for(std::chrono::microseconds(200));
            }
        }
        return 0;
    }

    // client half
    CsvWriter csv(out);
    auto rid = run_id_for(c, c.client_path, c.server_path, c.ablations);
    if (c.mode == Mode::Lat) {
        std::vector<double> samples;
        for (uint32_t i = 0; i < warmup + c.iters; ++i) {
            Stopwatch it;
            if (c.op == OpSel::Send) {
                n.post_recv(data_qp, {recv_wr(3)});
                n.post_send(data_qp, {send_wr(4)});
                auto wcs = n.wait_completions(rcq, 1, c.ablations.no_polling, 60'000'000'000ull);
                n.wait_completions(scq, 1, false);
                if (wcs.empty()) break;
                if (i >= warmup) samples.push_back(it.elapsed_us() / 2.0);
            } else {
                n.post_send(data_qp, {send_wr(4)});
                auto wcs = n.wait_completions(scq, 1, c.ablations.no_polling, 60'000'000'000ull);
                if (wcs.empty()) break;
                if (i >= warmup) samples.push_back(it.elapsed_us());
            }
        }
        require(!samples.empty(), "udp lat: no samples");
        csv.row(rid, c, size, c.client_path, c.server_path, c.ablations, "lat_median_us",
                stats::median(samples), "us");
        csv.row(rid, c, size, c.client_path, c.server_path, c.ablations, "lat_p99_us",
                stats::percentile(samples, 0.99), "us");
    } else {
        Stopwatch it;
        uint32_t posted = 0, done = 0;
        while (done < c.iters && it.elapsed_us() < 120e6) {
            while (posted < c.iters && posted - done < depth &&
                   n.post_send(data_qp, {send_wr(posted)}) == PostResult::OK)
                ++posted;
            done += uint32_t(n.poll(scq, 64).size());
        }
        double s = it.elapsed_us() * 1e-6;
        csv.row(rid, c, size, c.client_path, c.server_path, c.ablations, "msg_rate_per_s",
                done / s, "1/s");
        csv.row(rid, c, size, c.client_path, c.server_path, c.ablations, "bw_gbps",
                double(done) * size * 8.0 / s / 1e9, "gbps");
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"verbs dataplane benchmark"};
    BenchConfig cfg;

    std::string mode = "lat", transport = "rc", op = "send", size_list = "16,4096,65536,1048576";
    std::string client_path = "bp", server_path = "bp", ablate, wire = "inproc", clock = "real";
    std::string policy_file, registry_file, out_file, role, crossing = "default";
    bool assert_mode = false;

    app.add_option("--mode", mode, "lat|bw|ablation|matrix|app");
    app.add_option("--transport", transport, "rc|ud");
    app.add_option("--op", op, "send|read|write");
    app.add_option("--size-list", size_list, "comma-separated byte sizes");
    app.add_option("--iters", cfg.iters, "iterations per run");
    app.add_option("--tx-depth", cfg.tx_depth, "outstanding sends (0 = mode default)");
    app.add_option("--warmup", cfg.warmup, "warmup iterations (0 = max(100, iters/10))");
    app.add_option("--reps", cfg.reps, "repetitions (0 = mode default)");
    app.add_option("--client-path", client_path, "bp|cd");
    app.add_option("--server-path", server_path, "bp|cd");
    app.add_option("--ablate", ablate, "comma list of no-zc,no-poll,no-bypass");
    app.add_option("--wire", wire, "inproc|udp");
    app.add_option("--policy", policy_file, "policy file (rate/acl/cap lines)");
    app.add_option("--seed", cfg.seed, "rng seed");
    app.add_option("--out", out_file, "CSV output path (appends; header when new)");
    app.add_option("--clock", clock, "real|virtual");
    app.add_option("--crossing", crossing, "default|syscall|proxy|both (mediated path)");
    app.add_flag("--mediate-poll", cfg.mediate_poll, "mediate poll_cq as well");
    uint32_t inline_thr = UINT32_MAX;
    app.add_option("--inline", inline_thr, "inline threshold bytes (default by path)");
    app.add_option("--registry", registry_file, "node registry for udp wire");
    app.add_option("--role", role, "client|server (two-process udp mode)");
    app.add_option("--p-loss", cfg.p_loss, "injected loss probability (udp)");
    app.add_option("--procs", cfg.procs, "app-mode participants");
    app.add_option("--rate", cfg.rate_per_proc, "app-mode msgs/s per process");
    app.add_option("--msg-size", cfg.app_msg_size, "app-mode message bytes");
    app.add_option("--duration", cfg.duration_s, "app-mode seconds");
    app.add_flag("--assert", assert_mode, "exit 2 when built-in sanity assertions fail");

    CLI11_PARSE(app, argc, argv);

    try {
        cfg.mode = mode == "lat"        ? Mode::Lat
                   : mode == "bw"       ? Mode::Bw
                   : mode == "ablation" ? Mode::Ablation
                   : mode == "matrix"   ? Mode::Matrix
                   : mode == "app"      ? Mode::App
                                        : throw Error("bad --mode " + mode);
        cfg.transport = transport == "rc"   ? Transport::RC
                        : transport == "ud" ? Transport::UD
                                            : throw Error("bad --transport " + transport);
        cfg.op = op == "send"    ? OpSel::Send
                 : op == "read"  ? OpSel::Read
                 : op == "write" ? OpSel::Write
                                 : throw Error("bad --op " + op);
        cfg.client_path = client_path == "cd" ? PathMode::Mediated : PathMode::Bypass;
        cfg.server_path = server_path == "cd" ? PathMode::Mediated : PathMode::Bypass;
        cfg.wire = wire == "udp" ? WireSel::Udp : WireSel::Inproc;
        cfg.clock = clock == "virtual" ? ClockKind::Virtual : ClockKind::Real;
        if (crossing == "proxy") cfg.crossing = Crossing::ProxyContext;
        else if (crossing == "both") cfg.crossing = Crossing::Both;
        else if (crossing == "syscall") cfg.crossing = Crossing::RealNullSyscall;
        else if (crossing != "default") throw Error("bad --crossing " + crossing);
        if (inline_thr != UINT32_MAX) cfg.inline_threshold = inline_thr;

        cfg.sizes.clear();
        std::stringstream ss(size_list);
        std::string tok;
        while (std::getline(ss, tok, ',')) cfg.sizes.push_back(uint32_t(std::stoul(tok)));

        std::stringstream as(ablate);
        while (std::getline(as, tok, ',')) {
            if (tok == "no-zc") cfg.ablations.no_zero_copy = true;
            else if (tok == "no-poll") cfg.ablations.no_polling = true;
            else if (tok == "no-bypass") cfg.ablations.no_bypass_tax = true;
            else if (!tok.empty()) throw Error("bad --ablate token " + tok);
        }
        if (!policy_file.empty()) cfg.policy_text = slurp(policy_file);
        if (!registry_file.empty()) cfg.registry_text = slurp(registry_file);
        cfg.validate();

        std::ostringstream rows;
        int rc = 0;
        if (!role.empty()) {
            require(cfg.wire == WireSel::Udp, "--role needs --wire udp");
            rc = run_udp_role(cfg, role, rows);
        } else {
            run(cfg, rows);
        }
        if (rc != 0) return rc;

        std::string text = rows.str();
        if (assert_mode) {
            // sanity: every emitted value is finite, latencies/rates positive,
            // app rate achieved unless explicitly flagged
            std::istringstream lines(text);
            std::string line;
            std::getline(lines, line);  // header
            bool ok = true;
            while (std::getline(lines, line)) {
                auto field = [&](int idx) {
                    std::stringstream ls(line);
                    std::string f;
                    for (int i = 0; i <= idx; ++i) std::getline(ls, f, ',');
                    return f;
                };
                std::string metric = field(8);
                double value = std::stod(field(9));
                if (!std::isfinite(value)) ok = false;
                if ((metric == "lat_median_us" || metric == "msg_rate_per_s") && value <= 0)
                    ok = false;
                if (metric == "rate_unachievable") ok = false;
            }
            if (!ok) {
                std::cerr << text;
                std::cerr << "assertion-mode failure\n";
                return 2;
            }
        }
        if (out_file.empty()) {
            std::cout << text;
        } else {
            std::ifstream probe(out_file, std::ios::ate | std::ios::binary);
            bool fresh = !probe || probe.tellg() <= 0;
            probe.close();
            std::ofstream out(out_file, std::ios::app);
            if (!fresh) {
                // append without repeating the header
                auto nl = text.find('\n');
                if (nl != std::string::npos) text = text.substr(nl + 1);
            }
            out << text;
        }
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "bench: " << e.what() << '\n';
        return 1;
    }
}
