#pragma once

#include <vector>

#include "softverbs/node.hpp"

namespace softverbs::testing {

inline WorkRequest make_send(uint64_t wr_id, const void* buf, uint32_t len, MrKey lkey) {
    WorkRequest wr;
    wr.wr_id = wr_id;
    wr.opcode = Opcode::SEND;
    wr.sge.push_back({uint64_t(reinterpret_cast<uintptr_t>(buf)), len, lkey});
    return wr;
}

inline WorkRequest make_recv(uint64_t wr_id, void* buf, uint32_t len, MrKey lkey) {
    WorkRequest wr;
    wr.wr_id = wr_id;
    wr.opcode = Opcode::RECV;
    wr.sge.push_back({uint64_t(reinterpret_cast<uintptr_t>(buf)), len, lkey});
    return wr;
}

inline WorkRequest make_write(uint64_t wr_id, const void* buf, uint32_t len, MrKey lkey,
                              uint64_t raddr, MrKey rkey) {
    WorkRequest wr;
    wr.wr_id = wr_id;
    wr.opcode = Opcode::RDMA_WRITE;
    wr.sge.push_back({uint64_t(reinterpret_cast<uintptr_t>(buf)), len, lkey});
    wr.remote = {raddr, rkey};
    return wr;
}

inline WorkRequest make_read(uint64_t wr_id, void* buf, uint32_t len, MrKey lkey, uint64_t raddr,
                             MrKey rkey) {
    WorkRequest wr;
    wr.wr_id = wr_id;
    wr.opcode = Opcode::RDMA_READ;
    wr.sge.push_back({uint64_t(reinterpret_cast<uintptr_t>(buf)), len, lkey});
    wr.remote = {raddr, rkey};
    return wr;
}

// Two in-process nodes with an RC pair at RTS and one registered buffer
// each. The workhorse fixture for dataplane tests. Inline is off by
// default so key checks stay observable; pass explicit configs to test
// the inline path.
inline std::vector<NodeConfig> default_cfgs(std::vector<NodeConfig> cfgs) {
    if (cfgs.empty()) {
        cfgs.resize(2);
        for (auto& c : cfgs) c.inline_threshold = 0;
    }
    return cfgs;
}

struct RcHarness {
    explicit RcHarness(std::vector<NodeConfig> cfgs = {}, size_t buf_size = 1 << 21,
                       uint32_t depth = 1024, ClockKind kind = ClockKind::Real)
        : cluster(2, kind, default_cfgs(std::move(cfgs))),
          a(cluster.node(0)),
          b(cluster.node(1)),
          a_buf(buf_size, 0),
          b_buf(buf_size, 0),
          a_cq(a.dev().create_cq(4096)),
          a_rcq(a.dev().create_cq(4096)),
          b_cq(b.dev().create_cq(4096)),
          b_rcq(b.dev().create_cq(4096)) {
        a_pd = a.dev().alloc_pd();
        b_pd = b.dev().alloc_pd();
        a_mr = a.dev().reg_mr(a_pd, uint64_t(reinterpret_cast<uintptr_t>(a_buf.data())),
                              a_buf.size(), LOCAL_WRITE | REMOTE_READ | REMOTE_WRITE);
        b_mr = b.dev().reg_mr(b_pd, uint64_t(reinterpret_cast<uintptr_t>(b_buf.data())),
                              b_buf.size(), LOCAL_WRITE | REMOTE_READ | REMOTE_WRITE);
        qa = &a.dev().create_qp(a_pd, Transport::RC, a_cq, a_rcq, depth, depth);
        qb = &b.dev().create_qp(b_pd, Transport::RC, b_cq, b_rcq, depth, depth);
        Cluster::connect_rc(a, *qa, b, *qb);
    }

    std::vector<WorkCompletion> drain_cq(Node& n, CompletionQueue& cq, size_t want,
                                         int max_spins = 2000000) {
        std::vector<WorkCompletion> got;
        while (got.size() < want && max_spins-- > 0) {
            for (auto& wc : n.poll(cq, uint32_t(want - got.size()))) got.push_back(wc);
            if (got.size() < want) n.tick();
        }
        return got;
    }

    Cluster cluster;
    Node& a;
    Node& b;
    std::vector<uint8_t> a_buf, b_buf;
    CompletionQueue& a_cq;
    CompletionQueue& a_rcq;
    CompletionQueue& b_cq;
    CompletionQueue& b_rcq;
    ProtectionDomain a_pd, b_pd;
    MemoryRegion a_mr, b_mr;
    QueuePair* qa = nullptr;
    QueuePair* qb = nullptr;
};

} // namespace softverbs::testing
