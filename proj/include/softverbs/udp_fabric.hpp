#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cstring>
#include <mutex>
#include <random>
#include <thread>

#include "softverbs/wire.hpp"

namespace softverbs {

// UDP datagram backend: best effort, loss injectable. One socket and one
// rx thread per locally hosted node. The rx thread doubles as the timer
// context; it invokes the registered tick callback on every wakeup so
// retransmission makes progress even when the application is blocked.
class UdpFabric : public Fabric {
public:
    using Tick = std::function<void()>;

    UdpFabric(std::map<NodeId, NodeAddr> registry, double p_loss = 0.0, uint64_t seed = 1)
        : registry_(std::move(registry)), p_loss_(p_loss), rng_(mix64(seed ^ 0x5eedf00d)) {}

    ~UdpFabric() override { stop(); }

    void register_sink(NodeId node, Sink sink) override {
        auto it = registry_.find(node);
        require(it != registry_.end(), "udp: node missing from registry");
        auto ep = std::make_unique<Endpoint>();
        ep->node = node;
        ep->sink = std::move(sink);
        ep->fd = ::socket(AF_INET, SOCK_DGRAM, 0);
        require(ep->fd >= 0, "udp: socket() failed");
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(it->second.port);
        addr.sin_addr.s_addr = resolve(it->second.host);
        int one = 1;
        ::setsockopt(ep->fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        require(::bind(ep->fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0,
                "udp: bind() failed");
        timeval tv{0, 200};  // 200 us; rx wakeups drive timers
        ::setsockopt(ep->fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
        endpoints_.push_back(std::move(ep));
    }

    void set_tick(NodeId node, Tick t) {
        for (auto& ep : endpoints_)
            if (ep->node == node) ep->tick = std::move(t);
    }

    void start() {
        running_ = true;
        for (auto& ep : endpoints_)
            ep->rx = std::thread([this, e = ep.get()] { rx_loop(*e); });
    }

    void stop() {
        if (!running_) return;
        running_ = false;
        for (auto& ep : endpoints_) {
            if (ep->rx.joinable()) ep->rx.join();
            if (ep->fd >= 0) ::close(ep->fd);
            ep->fd = -1;
        }
    }

    void tx(Envelope&& env) override {
        {
            std::lock_guard lk(tx_mu_);
            ++stats_tx_;
            if (p_loss_ > 0 && unit_dist_(rng_) < p_loss_) {
                ++stats_dropped_;
                return;
            }
        }
        auto it = registry_.find(env.dst_node);
        if (it == registry_.end()) return;
        std::vector<uint8_t> bytes = wire_encode(env.hdr, env.payload());
        sockaddr_in to{};
        to.sin_family = AF_INET;
        to.sin_port = htons(it->second.port);
        to.sin_addr.s_addr = resolve(it->second.host);
        // Sent from whichever local endpoint hosts the source node; fall
        // back to the first one for off-node test traffic.
        int fd = endpoints_.empty() ? -1 : endpoints_.front()->fd;
        for (auto& ep : endpoints_)
            if (ep->node == env.src_node) fd = ep->fd;
        if (fd >= 0)
            ::sendto(fd, bytes.data(), bytes.size(), 0, reinterpret_cast<sockaddr*>(&to),
                     sizeof to);
    }

    bool reliable() const override { return false; }

    uint64_t packets_tx() const { return stats_tx_; }
    uint64_t packets_dropped() const { return stats_dropped_; }

private:
    struct Endpoint {
        NodeId node = 0;
        int fd = -1;
        Sink sink;
        Tick tick;
        std::thread rx;
    };

    static uint32_t resolve(const std::string& host) {
        if (host == "localhost") return htonl(INADDR_LOOPBACK);
        in_addr a{};
        require(::inet_pton(AF_INET, host.c_str(), &a) == 1, "udp: bad host (use dotted quad)");
        return a.s_addr;
    }

    void rx_loop(Endpoint& ep) {
        std::vector<uint8_t> buf(kWireHeaderBytes + kMtu);
        while (running_) {
            sockaddr_in from{};
            socklen_t from_len = sizeof from;
            ssize_t n = ::recvfrom(ep.fd, buf.data(), buf.size(), 0,
                                   reinterpret_cast<sockaddr*>(&from), &from_len);
            if (n > 0) {
                auto dec = wire_decode(std::span<const uint8_t>(buf.data(), size_t(n)));
                if (dec.ok && ep.sink) {
                    Envelope env;
                    env.src_node = node_for(from);
                    env.dst_node = ep.node;
                    env.hdr = dec.packet.hdr;
                    env.owned = std::move(dec.packet.payload);
                    ep.sink(std::move(env));
                }
                // Malformed datagrams are dropped here; the RC layer
                // handles its own NAKs above this.
            }
            if (ep.tick) ep.tick();
        }
    }

    NodeId node_for(const sockaddr_in& from) const {
        for (const auto& [id, addr] : registry_)
            if (htons(addr.port) == from.sin_port && resolve(addr.host) == from.sin_addr.s_addr)
                return id;
        return 0;
    }

    std::map<NodeId, NodeAddr> registry_;
    double p_loss_;
    std::mt19937_64 rng_;
    std::uniform_real_distribution<double> unit_dist_{0.0, 1.0};
    std::mutex tx_mu_;
    uint64_t stats_tx_ = 0;
    uint64_t stats_dropped_ = 0;
    std::vector<std::unique_ptr<Endpoint>> endpoints_;
    std::atomic<bool> running_{false};
};

} // namespace softverbs
