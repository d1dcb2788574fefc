#include <gtest/gtest.h>

#include <cstring>
#include <set>
#include <thread>

#include "helpers.hpp"

using namespace softverbs;
using namespace softverbs::testing;

TEST(Pd, FreshAndUnique) {
    Cluster c(1, ClockKind::Real);
    auto& dev = c.node(0).dev();
    auto pd1 = dev.alloc_pd();
    auto pd2 = dev.alloc_pd();
    EXPECT_EQ(pd1.pd_id, 1u);
    EXPECT_NE(pd1.pd_id, pd2.pd_id);
}

TEST(Pd, ExhaustionAfterWrap) {
    Cluster c(1, ClockKind::Real);
    auto& dev = c.node(0).dev();
    dev.debug_set_next_pd(0xFFFFFFFFu);
    auto pd = dev.alloc_pd();
    EXPECT_EQ(pd.pd_id, 0xFFFFFFFFu);
    EXPECT_THROW(dev.alloc_pd(), Error);
    EXPECT_THROW(dev.alloc_pd(), Error);  // exhaustion is permanent
}

TEST(Mr, ConstructionAndKeys) {
    Cluster c(1, ClockKind::Real);
    auto& dev = c.node(0).dev();
    auto pd = dev.alloc_pd();
    std::vector<uint8_t> buf(4096);
    auto mr = dev.reg_mr(pd, uint64_t(uintptr_t(buf.data())), 4096,
                         LOCAL_WRITE | REMOTE_READ);
    EXPECT_NE(mr.lkey, mr.rkey);
    EXPECT_EQ(mr.length, 4096u);
    EXPECT_TRUE(mr.access & LOCAL_READ);  // always implied
}

TEST(Mr, ZeroLengthRejected) {
    Cluster c(1, ClockKind::Real);
    auto& dev = c.node(0).dev();
    auto pd = dev.alloc_pd();
    std::vector<uint8_t> buf(16);
    EXPECT_THROW(dev.reg_mr(pd, uint64_t(uintptr_t(buf.data())), 0, 0), Error);
}

TEST(Mr, KeyUniquenessOverMany) {
    Cluster c(1, ClockKind::Real);
    auto& dev = c.node(0).dev();
    auto pd = dev.alloc_pd();
    std::vector<uint8_t> buf(64);
    std::set<MrKey> seen;
    for (int i = 0; i < 5000; ++i) {
        auto mr = dev.reg_mr(pd, uint64_t(uintptr_t(buf.data())), 64, 0);
        EXPECT_TRUE(seen.insert(mr.lkey).second);
        EXPECT_TRUE(seen.insert(mr.rkey).second);
    }
}

// Overlapping registration: both keys usable, payloads equal through
// either registration (oracle: send through both, compare bytes).
TEST(Mr, OverlappingRegistrationsBothUsable) {
    RcHarness h;
    auto mr2 = h.a.dev().reg_mr(h.a_pd, uint64_t(uintptr_t(h.a_buf.data())) + 1024, 4096,
                                LOCAL_WRITE | REMOTE_READ);
    std::memset(h.a_buf.data(), 0xA1, 8192);
    std::vector<uint8_t> rbuf(4096);

    for (MrKey lkey : {h.a_mr.lkey, mr2.lkey}) {
        uint64_t addr = lkey == mr2.lkey ? uint64_t(uintptr_t(h.a_buf.data())) + 1024
                                         : uint64_t(uintptr_t(h.a_buf.data()));
        ASSERT_EQ(h.b.post_recv(*h.qb, {make_recv(1, h.b_buf.data(), 4096, h.b_mr.lkey)}),
                  PostResult::OK);
        WorkRequest wr;
        wr.wr_id = 2;
        wr.opcode = Opcode::SEND;
        wr.sge.push_back({addr, 4096, lkey});
        ASSERT_EQ(h.a.post_send(*h.qa, {wr}), PostResult::OK);
        auto wcs = h.drain_cq(h.b, h.b_rcq, 1);
        ASSERT_EQ(wcs.size(), 1u);
        EXPECT_EQ(wcs[0].status, WcStatus::SUCCESS);
        EXPECT_EQ(wcs[0].byte_len, 4096u);
        EXPECT_EQ(std::memcmp(h.b_buf.data(), h.a_buf.data() + (lkey == mr2.lkey ? 1024 : 0),
                              4096),
                  0);
        h.drain_cq(h.a, h.a_cq, 1);
    }
}

TEST(Mr, DeregThenPostFailsWithLocKeyErr) {
    RcHarness h;
    EXPECT_TRUE(h.a.dev().dereg_mr(h.a_mr));  // immediate: nothing in flight
    ASSERT_EQ(h.a.post_send(*h.qa, {make_send(7, h.a_buf.data(), 64, h.a_mr.lkey)}),
              PostResult::OK);
    auto wcs = h.drain_cq(h.a, h.a_cq, 1);
    ASSERT_EQ(wcs.size(), 1u);
    EXPECT_EQ(wcs[0].status, WcStatus::LOC_KEY_ERR);
    EXPECT_EQ(wcs[0].wr_id, 7u);
    EXPECT_EQ(wcs[0].byte_len, 0u);
}

// dereg during an in-flight READ: the op completes, then the keys die.
TEST(Mr, DeregDeferredUntilInFlightOpCompletes) {
    RcHarness h;
    std::memset(h.b_buf.data(), 0x5C, 4096);
    h.a.engine().pause();
    ASSERT_EQ(h.a.post_send(*h.qa, {make_read(9, h.a_buf.data(), 4096, h.a_mr.lkey,
                                              h.b_mr.base, h.b_mr.rkey)}),
              PostResult::OK);
    // read is posted (keys pinned) but the engine is stalled
    EXPECT_FALSE(h.a.dev().dereg_mr(h.a_mr));  // deferred
    h.a.engine().resume();
    auto wcs = h.drain_cq(h.a, h.a_cq, 1);
    ASSERT_EQ(wcs.size(), 1u);
    EXPECT_EQ(wcs[0].status, WcStatus::SUCCESS);
    EXPECT_EQ(wcs[0].byte_len, 4096u);
    EXPECT_EQ(h.a_buf[100], 0x5C);
    // now the keys are dead
    ASSERT_EQ(h.a.post_send(*h.qa, {make_send(10, h.a_buf.data(), 64, h.a_mr.lkey)}),
              PostResult::OK);
    wcs = h.drain_cq(h.a, h.a_cq, 1);
    ASSERT_EQ(wcs.size(), 1u);
    EXPECT_EQ(wcs[0].status, WcStatus::LOC_KEY_ERR);
}

TEST(Qp, NoStateSkipping) {
    Cluster c(1, ClockKind::Real);
    auto& dev = c.node(0).dev();
    auto pd = dev.alloc_pd();
    auto& cq = dev.create_cq(16);
    auto& qp = dev.create_qp(pd, Transport::RC, cq, cq, 4, 4);
    EXPECT_THROW(dev.modify_qp(qp, QpState::RTS), Error);  // RESET -> RTS forbidden
    EXPECT_THROW(dev.modify_qp(qp, QpState::RTR), Error);
    dev.modify_qp(qp, QpState::INIT);
    EXPECT_THROW(dev.modify_qp(qp, QpState::RTS), Error);  // INIT -> RTS forbidden
}

TEST(Qp, RcNeedsPeerBeforeRtr) {
    Cluster c(2, ClockKind::Real);
    auto& dev = c.node(0).dev();
    auto pd = dev.alloc_pd();
    auto& cq = dev.create_cq(16);
    auto& qp = dev.create_qp(pd, Transport::RC, cq, cq, 4, 4);
    dev.modify_qp(qp, QpState::INIT);
    EXPECT_THROW(dev.modify_qp(qp, QpState::RTR), Error);
    dev.modify_qp(qp, QpState::RTR, std::make_pair(NodeId(2), QpNum(7)));
    EXPECT_EQ(qp.state.load(), QpState::RTR);
    ASSERT_TRUE(qp.peer.has_value());
    EXPECT_EQ(qp.peer->second, 7u);
}

TEST(Qp, UdIsConnectionless) {
    Cluster c(1, ClockKind::Real);
    auto& dev = c.node(0).dev();
    auto pd = dev.alloc_pd();
    auto& cq = dev.create_cq(16);
    auto& qp = dev.create_qp(pd, Transport::UD, cq, cq, 4, 4);
    dev.modify_qp(qp, QpState::INIT);
    dev.modify_qp(qp, QpState::RTR);  // no peer needed
    dev.modify_qp(qp, QpState::RTS);
    EXPECT_EQ(qp.state.load(), QpState::RTS);
}

TEST(PostSend, HappyPathRc4096) {
    RcHarness h;
    std::memset(h.a_buf.data(), 0x42, 4096);
    ASSERT_EQ(h.b.post_recv(*h.qb, {make_recv(1, h.b_buf.data(), 4096, h.b_mr.lkey)}),
              PostResult::OK);
    ASSERT_EQ(h.a.post_send(*h.qa, {make_send(2, h.a_buf.data(), 4096, h.a_mr.lkey)}),
              PostResult::OK);
    auto rwcs = h.drain_cq(h.b, h.b_rcq, 1);
    ASSERT_EQ(rwcs.size(), 1u);
    EXPECT_EQ(rwcs[0].status, WcStatus::SUCCESS);
    EXPECT_EQ(rwcs[0].byte_len, 4096u);
    auto swcs = h.drain_cq(h.a, h.a_cq, 1);
    ASSERT_EQ(swcs.size(), 1u);
    EXPECT_EQ(swcs[0].status, WcStatus::SUCCESS);
    EXPECT_EQ(swcs[0].wr_id, 2u);
}

TEST(PostSend, UdOversizeRejectedImmediately) {
    Cluster c(2, ClockKind::Real);
    auto& n = c.node(0);
    auto pd = n.dev().alloc_pd();
    auto& cq = n.dev().create_cq(16);
    std::vector<uint8_t> buf(8192);
    auto mr = n.dev().reg_mr(pd, uint64_t(uintptr_t(buf.data())), buf.size(), 0);
    auto& qp = n.dev().create_qp(pd, Transport::UD, cq, cq, 4, 4);
    Cluster::activate_ud(n, qp);
    auto wr = make_send(1, buf.data(), 8192, mr.lkey);
    wr.dest = {2, 1};
    EXPECT_EQ(n.post_send(qp, {wr}), PostResult::INVALID_WR);
    EXPECT_EQ(n.poll(cq, 8).size(), 0u);  // no completion for rejected op
}

TEST(PostSend, QueueFullStopsBatch) {
    std::vector<NodeConfig> cfgs(2);
    for (auto& c : cfgs) c.inline_threshold = 0;
    RcHarness h(cfgs, 1 << 21, /*depth=*/1);
    h.a.engine().pause();  // hold completions so the slot stays occupied
    auto wr1 = make_send(1, h.a_buf.data(), 64, h.a_mr.lkey);
    auto wr2 = make_send(2, h.a_buf.data(), 64, h.a_mr.lkey);
    ASSERT_EQ(h.b.post_recv(*h.qb, {make_recv(3, h.b_buf.data(), 4096, h.b_mr.lkey)}),
              PostResult::OK);
    EXPECT_EQ(h.a.post_send(*h.qa, {wr1, wr2}), PostResult::QUEUE_FULL);
    h.a.engine().resume();
    h.a.engine().ring_doorbell(h.qa->qp_num);
    // oracle: exactly one completion, the first WR
    auto wcs = h.drain_cq(h.a, h.a_cq, 1);
    ASSERT_EQ(wcs.size(), 1u);
    EXPECT_EQ(wcs[0].wr_id, 1u);
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    EXPECT_EQ(h.a.poll(h.a_cq, 8).size(), 0u);  // the second never entered
}

TEST(PostRecv, ShortMessageIntoLargeBuffer) {
    RcHarness h;
    std::memset(h.a_buf.data(), 0x11, 100);
    ASSERT_EQ(h.b.post_recv(*h.qb, {make_recv(1, h.b_buf.data(), 4096, h.b_mr.lkey)}),
              PostResult::OK);
    ASSERT_EQ(h.a.post_send(*h.qa, {make_send(2, h.a_buf.data(), 100, h.a_mr.lkey)}),
              PostResult::OK);
    auto wcs = h.drain_cq(h.b, h.b_rcq, 1);
    ASSERT_EQ(wcs.size(), 1u);
    EXPECT_EQ(wcs[0].status, WcStatus::SUCCESS);
    EXPECT_EQ(wcs[0].byte_len, 100u);
}

TEST(PostRecv, OversizeInboundFailsBothSides) {
    RcHarness h;
    ASSERT_EQ(h.b.post_recv(*h.qb, {make_recv(1, h.b_buf.data(), 100, h.b_mr.lkey)}),
              PostResult::OK);
    ASSERT_EQ(h.a.post_send(*h.qa, {make_send(2, h.a_buf.data(), 4096, h.a_mr.lkey)}),
              PostResult::OK);
    auto rwcs = h.drain_cq(h.b, h.b_rcq, 1);
    ASSERT_EQ(rwcs.size(), 1u);
    EXPECT_EQ(rwcs[0].status, WcStatus::REM_ACCESS_ERR);
    EXPECT_EQ(rwcs[0].byte_len, 0u);
    auto swcs = h.drain_cq(h.a, h.a_cq, 1);
    ASSERT_EQ(swcs.size(), 1u);
    EXPECT_EQ(swcs[0].status, WcStatus::REM_ACCESS_ERR);
}

TEST(PostRecv, NonRecvOpcodeRejected) {
    RcHarness h;
    auto wr = make_send(1, h.b_buf.data(), 64, h.b_mr.lkey);
    EXPECT_EQ(h.b.post_recv(*h.qb, {wr}), PostResult::INVALID_WR);
}

TEST(PostRecv, AllowedFromInit) {
    Cluster c(2, ClockKind::Real);
    auto& n = c.node(0);
    auto pd = n.dev().alloc_pd();
    auto& cq = n.dev().create_cq(16);
    std::vector<uint8_t> buf(256);
    auto mr = n.dev().reg_mr(pd, uint64_t(uintptr_t(buf.data())), buf.size(), LOCAL_WRITE);
    auto& qp = n.dev().create_qp(pd, Transport::RC, cq, cq, 4, 4);
    n.dev().modify_qp(qp, QpState::INIT);
    EXPECT_EQ(n.post_recv(qp, {make_recv(1, buf.data(), 256, mr.lkey)}), PostResult::OK);
    EXPECT_EQ(qp.recv_backlog(), 1u);
}

TEST(PollCq, EmptyAndFifoOrder) {
    RcHarness h;
    EXPECT_TRUE(h.a.poll(h.a_cq, 4).empty());
    for (uint64_t i = 1; i <= 3; ++i) {
        ASSERT_EQ(h.b.post_recv(*h.qb, {make_recv(100 + i, h.b_buf.data(), 4096, h.b_mr.lkey)}),
                  PostResult::OK);
        ASSERT_EQ(h.a.post_send(*h.qa, {make_send(i, h.a_buf.data(), 16, h.a_mr.lkey)}),
                  PostResult::OK);
    }
    auto wcs = h.drain_cq(h.a, h.a_cq, 2);  // 3 queued, take 2
    ASSERT_EQ(wcs.size(), 2u);
    EXPECT_EQ(wcs[0].wr_id, 1u);
    EXPECT_EQ(wcs[1].wr_id, 2u);
    wcs = h.drain_cq(h.a, h.a_cq, 1);
    ASSERT_EQ(wcs.size(), 1u);
    EXPECT_EQ(wcs[0].wr_id, 3u);
}

TEST(PollCq, TwoConsumersNoDuplicates) {
    RcHarness h;
    const int n = 200;
    for (int i = 0; i < n; ++i)
        ASSERT_EQ(h.b.post_recv(*h.qb, {make_recv(uint64_t(i), h.b_buf.data(), 64, h.b_mr.lkey)}),
                  PostResult::OK);
    for (int i = 0; i < n; ++i)
        ASSERT_EQ(h.a.post_send(*h.qa, {make_send(uint64_t(i), h.a_buf.data(), 16, h.a_mr.lkey)}),
                  PostResult::OK);
    std::vector<uint64_t> got1, got2;
    std::thread t1([&] {
        for (int spins = 0; spins < 1000000 && got1.size() + got2.size() < size_t(n);) {
            auto wcs = h.b.poll(h.b_rcq, 2);
            if (wcs.empty()) ++spins;
            for (auto& wc : wcs) got1.push_back(wc.wr_id);
        }
    });
    for (int spins = 0; spins < 1000000 && got1.size() + got2.size() < size_t(n);) {
        auto wcs = h.b.poll(h.b_rcq, 2);
        if (wcs.empty()) ++spins;
        for (auto& wc : wcs) got2.push_back(wc.wr_id);
    }
    t1.join();
    std::set<uint64_t> uni(got1.begin(), got1.end());
    uni.insert(got2.begin(), got2.end());
    EXPECT_EQ(got1.size() + got2.size(), size_t(n));  // no duplicates
    EXPECT_EQ(uni.size(), size_t(n));                 // union covers all
}

TEST(CqEvents, ArmThenCompletionWakes) {
    RcHarness h;
    h.b.req_notify(h.b_rcq);
    std::thread waker([&] {
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
        h.b.post_recv(*h.qb, {make_recv(1, h.b_buf.data(), 64, h.b_mr.lkey)});
        h.a.post_send(*h.qa, {make_send(2, h.a_buf.data(), 16, h.a_mr.lkey)});
    });
    EXPECT_TRUE(h.b.wait_event(h.b_rcq, 2'000'000'000ull));
    waker.join();
}

TEST(CqEvents, CompletionBeforeArmNotLost) {
    RcHarness h;
    h.a.engine().pause();
    ASSERT_EQ(h.b.post_recv(*h.qb, {make_recv(1, h.b_buf.data(), 64, h.b_mr.lkey)}),
              PostResult::OK);
    ASSERT_EQ(h.a.post_send(*h.qa, {make_send(2, h.a_buf.data(), 16, h.a_mr.lkey)}),
              PostResult::OK);
    h.a.engine().resume();  // completion lands before anyone armed
    auto wcs = h.drain_cq(h.b, h.b_rcq, 0);
    ASSERT_EQ(h.b_rcq.depth(), 1u);
    h.b.req_notify(h.b_rcq);
    EXPECT_TRUE(h.b.wait_event(h.b_rcq, 1'000'000ull));  // returns immediately
}

TEST(CqEvents, WaitWithoutArmTimesOut) {
    RcHarness h;
    EXPECT_FALSE(h.b.wait_event(h.b_rcq, 20'000'000ull));
}

TEST(CqOverrun, ErrorsBoundQpsAndFlushes) {
    std::vector<NodeConfig> cfgs(2);
    Cluster c(2, ClockKind::Real, cfgs);
    auto& a = c.node(0);
    auto& b = c.node(1);
    auto pd_a = a.dev().alloc_pd();
    auto pd_b = b.dev().alloc_pd();
    auto& cq_a = a.dev().create_cq(2);  // tiny: overruns quickly
    auto& rcq_a = a.dev().create_cq(64);
    auto& cq_b = b.dev().create_cq(64);
    std::vector<uint8_t> abuf(1 << 16), bbuf(1 << 16);
    auto mr_a = a.dev().reg_mr(pd_a, uint64_t(uintptr_t(abuf.data())), abuf.size(), LOCAL_WRITE);
    auto mr_b = b.dev().reg_mr(pd_b, uint64_t(uintptr_t(bbuf.data())), bbuf.size(), LOCAL_WRITE);
    auto& qa = a.dev().create_qp(pd_a, Transport::RC, cq_a, rcq_a, 16, 16);
    auto& qb = b.dev().create_qp(pd_b, Transport::RC, cq_b, cq_b, 16, 16);
    Cluster::connect_rc(a, qa, b, qb);
    for (int i = 0; i < 8; ++i)
        ASSERT_EQ(b.post_recv(qb, {make_recv(uint64_t(i), bbuf.data(), 4096, mr_b.lkey)}),
                  PostResult::OK);
    // 8 sends, send CQ holds 2: the third completion overruns
    for (int i = 0; i < 8; ++i)
        a.post_send(qa, {make_send(uint64_t(100 + i), abuf.data(), 16, mr_a.lkey)});
    EXPECT_TRUE(cq_a.overrun());
    EXPECT_EQ(qa.state.load(), QpState::ERROR);
}

// Completion conservation: every posted WR yields exactly one completion.
TEST(Invariants, CompletionConservation) {
    RcHarness h;
    std::mt19937_64 rng(11);
    const int n = 500;
    std::multiset<uint64_t> expected;
    int recvs_posted = 0;
    for (int i = 0; i < n; ++i) {
        uint64_t id = 1000 + uint64_t(i);
        uint32_t len = uint32_t(1 + rng() % 3000);
        ASSERT_EQ(h.b.post_recv(*h.qb, {make_recv(id, h.b_buf.data(), 4096, h.b_mr.lkey)}),
                  PostResult::OK);
        ++recvs_posted;
        ASSERT_EQ(h.a.post_send(*h.qa, {make_send(id, h.a_buf.data(), len, h.a_mr.lkey)}),
                  PostResult::OK);
        expected.insert(id);
    }
    auto swcs = h.drain_cq(h.a, h.a_cq, n);
    auto rwcs = h.drain_cq(h.b, h.b_rcq, size_t(recvs_posted));
    EXPECT_EQ(swcs.size(), size_t(n));
    EXPECT_EQ(rwcs.size(), size_t(recvs_posted));
    std::multiset<uint64_t> got_send, got_recv;
    for (auto& wc : swcs) got_send.insert(wc.wr_id);
    for (auto& wc : rwcs) got_recv.insert(wc.wr_id);
    EXPECT_EQ(got_send, expected);  // each wr_id exactly once
    EXPECT_EQ(got_recv, expected);
}

// FIFO per QP: send completions appear in posting order.
TEST(Invariants, SendCompletionFifo) {
    RcHarness h;
    const int n = 300;
    for (int i = 0; i < n; ++i)
        ASSERT_EQ(h.b.post_recv(*h.qb, {make_recv(uint64_t(i), h.b_buf.data(), 4096,
                                                  h.b_mr.lkey)}),
                  PostResult::OK);
    std::mt19937_64 rng(3);
    for (int i = 0; i < n; ++i) {
        uint32_t len = uint32_t(1 + rng() % 8000);  // mixes 1- and 2-fragment messages
        ASSERT_EQ(h.a.post_send(*h.qa, {make_send(uint64_t(i), h.a_buf.data(), len, h.a_mr.lkey)}),
                  PostResult::OK);
    }
    auto wcs = h.drain_cq(h.a, h.a_cq, n);
    ASSERT_EQ(wcs.size(), size_t(n));
    for (int i = 0; i < n; ++i) EXPECT_EQ(wcs[i].wr_id, uint64_t(i));
}

TEST(Invariants, NoTransmitUnlessRts) {
    Cluster c(2, ClockKind::Real);
    auto& a = c.node(0);
    auto pd = a.dev().alloc_pd();
    auto& cq = a.dev().create_cq(16);
    std::vector<uint8_t> buf(256);
    auto mr = a.dev().reg_mr(pd, uint64_t(uintptr_t(buf.data())), buf.size(), 0);
    auto& qp = a.dev().create_qp(pd, Transport::RC, cq, cq, 4, 4);
    a.dev().modify_qp(qp, QpState::INIT);
    a.dev().modify_qp(qp, QpState::RTR, std::make_pair(NodeId(2), QpNum(1)));
    EXPECT_EQ(a.post_send(qp, {make_send(1, buf.data(), 16, mr.lkey)}), PostResult::BAD_STATE);
    EXPECT_EQ(a.engine().stats().frags_tx, 0u);
}
