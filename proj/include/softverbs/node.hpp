#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "softverbs/dataplane.hpp"
#include "softverbs/engine.hpp"
#include "softverbs/udp_fabric.hpp"
#include "softverbs/verbs.hpp"

namespace softverbs {

struct NodeConfig {
    PathConfig path;
    AblationFlags flags;
    EngineConfig engine;
    std::optional<uint32_t> inline_threshold;  // default: 64 for bypass, 0 for mediated
    bool full_audit = true;
};

// One emulated host: device tables, NIC engine, dataplane path and the
// policy engine its mediator consults.
class Node {
public:
    Node(NodeId id, Fabric& fabric, Clock& clock, NodeConfig cfg = {})
        : id_(id), clock_(clock), cfg_(cfg), dev_(id) {
        uint32_t inl = cfg.inline_threshold.value_or(
            cfg.path.mode == PathMode::Bypass ? 64u : 0u);
        require(inl <= kInlineCap, "inline threshold above cap");
        cfg_.engine.inline_threshold = inl;
        dev_.guard().set_full_log(cfg.full_audit);
        engine_ = std::make_unique<NicEngine>(id, dev_, fabric, clock, bounce_, cfg_.flags,
                                              cfg_.engine);
        path_ = std::make_unique<DataplanePath>(dev_, *engine_, bounce_, policy_, clock,
                                                cfg_.flags, cfg_.path);
        fabric.register_sink(id, [this](Envelope&& env) { engine_->on_inbound(std::move(env)); });
    }

    NodeId id() const { return id_; }
    Device& dev() { return dev_; }
    NicEngine& engine() { return *engine_; }
    DataplanePath& path() { return *path_; }
    PolicyEngine& policy() { return policy_; }
    const NodeConfig& config() const { return cfg_; }
    Clock& clock() { return clock_; }

    // verbs-like surface, routed through the active dataplane path
    PostResult post_send(QueuePair& qp, const std::vector<WorkRequest>& wrs) {
        return path_->post_send(qp, wrs);
    }
    PostResult post_recv(QueuePair& qp, const std::vector<WorkRequest>& wrs) {
        return path_->post_recv(qp, wrs);
    }
    std::vector<WorkCompletion> poll(CompletionQueue& cq, uint32_t max) {
        return path_->poll(cq, max, cursor_);
    }
    void req_notify(CompletionQueue& cq) { cq.req_notify(); }
    bool wait_event(CompletionQueue& cq, uint64_t timeout_ns) {
        return cq.wait_event(timeout_ns, clock_, cursor_);
    }
    std::vector<WorkCompletion> wait_completions(CompletionQueue& cq, uint32_t want,
                                                 bool event_mode,
                                                 uint64_t timeout_ns = 2'000'000'000ull) {
        return path_->wait_completions(cq, want, event_mode, timeout_ns, cursor_);
    }
    void tick() { engine_->tick(); }

    // Virtual-clock execution cursor for the context currently driving
    // this node (bench roles bind their own).
    void bind_cursor(uint64_t* c) {
        cursor_ = c;
        engine_->bind_cursor(c);
    }
    uint64_t* cursor() const { return cursor_; }

private:
    NodeId id_;
    Clock& clock_;
    NodeConfig cfg_;
    Device dev_;
    BouncePool bounce_;
    PolicyEngine policy_;
    std::unique_ptr<NicEngine> engine_;
    std::unique_ptr<DataplanePath> path_;
    uint64_t* cursor_ = nullptr;
};

// A set of nodes sharing a transport backend and a clock.
class Cluster {
public:
    // In-process cluster.
    Cluster(size_t n_nodes, ClockKind clock_kind, std::vector<NodeConfig> cfgs = {})
        : clock_(clock_kind) {
        fabric_ = std::make_unique<InprocFabric>();
        make_nodes(n_nodes, std::move(cfgs));
    }

    // UDP cluster; hosts the given node ids in this process, loss
    // injectable. Ids not in `hosted` belong to peer processes.
    Cluster(std::map<NodeId, NodeAddr> registry, std::vector<NodeId> hosted, double p_loss,
            uint64_t seed, std::vector<NodeConfig> cfgs = {})
        : clock_(ClockKind::Real) {
        auto udp = std::make_unique<UdpFabric>(std::move(registry), p_loss, seed);
        udp_ = udp.get();
        fabric_ = std::move(udp);
        for (size_t i = 0; i < hosted.size(); ++i) {
            NodeConfig cfg = i < cfgs.size() ? cfgs[i] : NodeConfig{};
            nodes_.push_back(std::make_unique<Node>(hosted[i], *fabric_, clock_, cfg));
        }
        for (auto& n : nodes_) udp_->set_tick(n->id(), [p = n.get()] { p->tick(); });
        udp_->start();
    }

    Clock& clock() { return clock_; }
    Fabric& fabric() { return *fabric_; }
    UdpFabric* udp() { return udp_; }
    Node& node(size_t i) { return *nodes_.at(i); }
    size_t size() const { return nodes_.size(); }

    // Bring an RC pair to RTS against each other.
    static void connect_rc(Node& a, QueuePair& qa, Node& b, QueuePair& qb) {
        a.dev().modify_qp(qa, QpState::INIT);
        b.dev().modify_qp(qb, QpState::INIT);
        a.dev().modify_qp(qa, QpState::RTR, std::make_pair(b.id(), qb.qp_num));
        b.dev().modify_qp(qb, QpState::RTR, std::make_pair(a.id(), qa.qp_num));
        a.dev().modify_qp(qa, QpState::RTS);
        b.dev().modify_qp(qb, QpState::RTS);
    }

    static void activate_ud(Node& n, QueuePair& q) {
        n.dev().modify_qp(q, QpState::INIT);
        n.dev().modify_qp(q, QpState::RTR);
        n.dev().modify_qp(q, QpState::RTS);
    }

private:
    void make_nodes(size_t n, std::vector<NodeConfig> cfgs) {
        for (size_t i = 0; i < n; ++i) {
            NodeConfig cfg = i < cfgs.size() ? cfgs[i] : NodeConfig{};
            nodes_.push_back(std::make_unique<Node>(NodeId(i + 1), *fabric_, clock_, cfg));
        }
    }

    Clock clock_;
    std::unique_ptr<Fabric> fabric_;
    UdpFabric* udp_ = nullptr;
    std::vector<std::unique_ptr<Node>> nodes_;
};

} // namespace softverbs
