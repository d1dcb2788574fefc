#pragma once

#include <cstdint>
#include <cstring>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "softverbs/types.hpp"
#include "softverbs/util.hpp"

namespace softverbs {

enum class PktOp : uint8_t {
    SEND = 0,
    WRITE = 1,
    READ_REQ = 2,
    READ_RESP = 3,
    ACK = 4,
    NAK = 5,
};

enum class NakReason : uint8_t { RNR = 1, ACCESS = 2, MALFORMED = 3 };

constexpr uint8_t kWireMagic0 = 0xC0;
constexpr uint8_t kWireMagic1 = 0x4D;
constexpr uint8_t kWireVersion = 1;
constexpr uint8_t kFlagLastFragment = 0x01;
constexpr uint32_t kPsnMask = 0x00FFFFFF;
// Fixed fields: magic(2) version(1) opcode(1) flags(1) transport(1)
// src_qp(4) dst_qp(4) psn(4) remote_address(8) rkey(4) payload_len(4).
constexpr size_t kWireHeaderBytes = 34;

struct PacketHeader {
    PktOp opcode = PktOp::SEND;
    uint8_t flags = 0;
    Transport transport = Transport::RC;
    QpNum src_qp = 0;
    QpNum dst_qp = 0;
    uint32_t psn = 0;  // low 24 bits used
    uint64_t remote_address = 0;
    MrKey rkey = 0;

    bool last_fragment() const { return flags & kFlagLastFragment; }
};

struct Packet {
    PacketHeader hdr;
    std::vector<uint8_t> payload;
};

inline std::vector<uint8_t> wire_encode(const PacketHeader& h, std::span<const uint8_t> payload) {
    std::vector<uint8_t> out(kWireHeaderBytes + payload.size());
    uint8_t* p = out.data();
    p[0] = kWireMagic0;
    p[1] = kWireMagic1;
    p[2] = kWireVersion;
    p[3] = uint8_t(h.opcode);
    p[4] = h.flags;
    p[5] = uint8_t(h.transport);
    put_be32(p + 6, h.src_qp);
    put_be32(p + 10, h.dst_qp);
    put_be32(p + 14, h.psn & kPsnMask);
    put_be64(p + 18, h.remote_address);
    put_be32(p + 26, h.rkey);
    put_be32(p + 30, uint32_t(payload.size()));
    if (!payload.empty()) std::memcpy(p + kWireHeaderBytes, payload.data(), payload.size());
    return out;
}

inline std::vector<uint8_t> wire_encode(const Packet& pkt) {
    return wire_encode(pkt.hdr, pkt.payload);
}

struct DecodeResult {
    bool ok = false;
    Packet packet;
    size_t error_offset = 0;
    const char* error = nullptr;
};

inline DecodeResult wire_decode(std::span<const uint8_t> bytes) {
    DecodeResult r;
    auto fail = [&](size_t off, const char* why) {
        r.ok = false;
        r.error_offset = off;
        r.error = why;
        return r;
    };
    if (bytes.size() < kWireHeaderBytes) return fail(bytes.size(), "truncated header");
    const uint8_t* p = bytes.data();
    if (p[0] != kWireMagic0 || p[1] != kWireMagic1) return fail(0, "bad magic");
    if (p[2] != kWireVersion) return fail(2, "bad version");
    if (p[3] > uint8_t(PktOp::NAK)) return fail(3, "bad opcode");
    if (p[5] > uint8_t(Transport::UD)) return fail(5, "bad transport");
    PacketHeader h;
    h.opcode = PktOp(p[3]);
    h.flags = p[4];
    h.transport = Transport(p[5]);
    h.src_qp = get_be32(p + 6);
    h.dst_qp = get_be32(p + 10);
    h.psn = get_be32(p + 14) & kPsnMask;
    h.remote_address = get_be64(p + 18);
    h.rkey = get_be32(p + 26);
    uint32_t plen = get_be32(p + 30);
    if (plen > kMtu) return fail(30, "payload length over MTU");
    if (bytes.size() < kWireHeaderBytes + plen) return fail(bytes.size(), "truncated payload");
    r.ok = true;
    r.packet.hdr = h;
    r.packet.payload.assign(p + kWireHeaderBytes, p + kWireHeaderBytes + plen);
    return r;
}

// 24-bit serial-number compares (distances stay far below 2^23).
inline bool psn_lt(uint32_t a, uint32_t b) {
    return ((b - a) & kPsnMask) != 0 && ((b - a) & kPsnMask) < (1u << 23);
}
inline bool psn_le(uint32_t a, uint32_t b) { return a == b || psn_lt(a, b); }
inline uint32_t psn_add(uint32_t a, uint32_t n) { return (a + n) & kPsnMask; }

// A frame in flight between engines. `view` points into registered source
// memory for the in-process backend (consumed before the ACK that frees
// the sender); `owned` carries bytes that needed encoding (UDP receive,
// NAK reasons, READ_REQ length words).
struct Envelope {
    NodeId src_node = 0;
    NodeId dst_node = 0;
    PacketHeader hdr;
    std::span<const uint8_t> view;
    std::vector<uint8_t> owned;
    uint64_t sim_time_ns = 0;

    std::span<const uint8_t> payload() const {
        return owned.empty() ? view : std::span<const uint8_t>(owned);
    }
};

// Transport backend. Implementations route an envelope to the
// destination node's inbound handler (sink). A sink must only enqueue
// and try-kick: it may be invoked deep inside another node's engine
// context, so it can never block on engine state.
class Fabric {
public:
    using Sink = std::function<void(Envelope&&)>;

    virtual ~Fabric() = default;
    virtual void register_sink(NodeId node, Sink sink) = 0;
    virtual void tx(Envelope&& env) = 0;
    // Lossless ordered delivery? When true the RC layer skips retransmit
    // buffering and timers.
    virtual bool reliable() const = 0;
};

// Same-process channel: lossless, ordered, zero-copy (payload spans are
// handed through untouched). Delivery is synchronous, which is what makes
// it ordered: a frame is in the destination's inbox before tx returns.
class InprocFabric : public Fabric {
public:
    void register_sink(NodeId node, Sink sink) override { sinks_[node] = std::move(sink); }

    void tx(Envelope&& env) override {
        auto it = sinks_.find(env.dst_node);
        if (it != sinks_.end()) it->second(std::move(env));
    }

    bool reliable() const override { return true; }

private:
    std::map<NodeId, Sink> sinks_;
};

// Node registry, line format: `node <id> <host>:<port>`.
struct NodeAddr {
    std::string host;
    uint16_t port = 0;
};

inline std::map<NodeId, NodeAddr> parse_registry(const std::string& text) {
    std::map<NodeId, NodeAddr> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string tag, ep;
        uint32_t id;
        if (!(ls >> tag >> id >> ep) || tag != "node") throw Error("bad registry line: " + line);
        auto colon = ep.rfind(':');
        if (colon == std::string::npos) throw Error("bad registry endpoint: " + ep);
        NodeAddr a;
        a.host = ep.substr(0, colon);
        a.port = uint16_t(std::stoul(ep.substr(colon + 1)));
        out[id] = a;
    }
    return out;
}

} // namespace softverbs
