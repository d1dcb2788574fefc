#pragma once

#include <bit>
#include <cstdint>
#include <span>
#include <vector>

#include "softverbs/types.hpp"
#include "softverbs/util.hpp"

namespace softverbs {

static_assert(std::endian::native == std::endian::little,
              "descriptor packing assumes a little-endian host");

enum class OpKind : uint8_t { POST_SEND = 0, POST_RECV = 1 };

// Flattened data-plane op crossing the mediation boundary. Fixed-width
// little-endian fields in declaration order, CRC-32 checksum last;
// 105 bytes for up to 4 sges.
struct OpDescriptor {
    OpKind kind = OpKind::POST_SEND;
    QpNum qp_num = 0;
    WorkRequest wr;

    static constexpr size_t kEncodedSize = 1 + 4 + 8 + 1 + 1 + size_t(kMaxSge) * 16 + 1 + 8 + 4 +
                                           1 + 4 + 4 + 4;

    bool operator==(const OpDescriptor& o) const {
        if (kind != o.kind || qp_num != o.qp_num || wr.wr_id != o.wr.wr_id ||
            wr.opcode != o.wr.opcode || wr.sge.size() != o.wr.sge.size() ||
            wr.remote != o.wr.remote || wr.dest != o.wr.dest)
            return false;
        for (size_t i = 0; i < wr.sge.size(); ++i)
            if (wr.sge[i].addr != o.wr.sge[i].addr || wr.sge[i].length != o.wr.sge[i].length ||
                wr.sge[i].lkey != o.wr.sge[i].lkey)
                return false;
        return true;
    }
};

// Encode directly from a work request; avoids building an intermediate
// OpDescriptor on the submission hot path.
inline void serialize_into(OpKind kind, QpNum qp_num, const WorkRequest& wr, uint8_t* p) {
    std::memset(p, 0, OpDescriptor::kEncodedSize);
    size_t off = 0;
    p[off++] = uint8_t(kind);
    put_le32(p + off, qp_num), off += 4;
    put_le64(p + off, wr.wr_id), off += 8;
    p[off++] = uint8_t(wr.opcode);
    p[off++] = uint8_t(wr.sge.size());
    for (int i = 0; i < kMaxSge; ++i) {
        if (size_t(i) < wr.sge.size()) {
            put_le64(p + off, wr.sge[i].addr);
            put_le32(p + off + 8, wr.sge[i].length);
            put_le32(p + off + 12, wr.sge[i].lkey);
        }
        off += 16;
    }
    p[off++] = wr.remote ? 1 : 0;
    put_le64(p + off, wr.remote ? wr.remote->first : 0), off += 8;
    put_le32(p + off, wr.remote ? wr.remote->second : 0), off += 4;
    p[off++] = wr.dest ? 1 : 0;
    put_le32(p + off, wr.dest ? wr.dest->first : 0), off += 4;
    put_le32(p + off, wr.dest ? wr.dest->second : 0), off += 4;
    put_le32(p + off, Crc32::of(p, off));
}

inline std::vector<uint8_t> serialize(const OpDescriptor& d) {
    std::vector<uint8_t> out(OpDescriptor::kEncodedSize, 0);
    serialize_into(d.kind, d.qp_num, d.wr, out.data());
    return out;
}

// Decode into caller-provided storage; `desc` keeps its sge capacity so
// steady-state mediation allocates nothing.
inline const char* deserialize_into(std::span<const uint8_t> bytes, OpDescriptor& desc) {
    if (bytes.size() != OpDescriptor::kEncodedSize) return "bad descriptor length";
    const uint8_t* p = bytes.data();
    size_t body = OpDescriptor::kEncodedSize - 4;
    if (Crc32::of(p, body) != get_le32(p + body)) return "checksum mismatch";
    size_t off = 0;
    uint8_t kind = p[off++];
    if (kind > uint8_t(OpKind::POST_RECV)) return "bad kind";
    desc.kind = OpKind(kind);
    desc.qp_num = get_le32(p + off), off += 4;
    desc.wr.wr_id = get_le64(p + off), off += 8;
    uint8_t opcode = p[off++];
    if (opcode > uint8_t(Opcode::RDMA_READ)) return "bad opcode";
    desc.wr.opcode = Opcode(opcode);
    uint8_t nsge = p[off++];
    if (nsge > kMaxSge) return "too many sges";
    desc.wr.sge.clear();
    for (int i = 0; i < kMaxSge; ++i) {
        if (i < nsge) {
            Sge s;
            s.addr = get_le64(p + off);
            s.length = get_le32(p + off + 8);
            s.lkey = get_le32(p + off + 12);
            desc.wr.sge.push_back(s);
        }
        off += 16;
    }
    bool has_remote = p[off++] != 0;
    uint64_t raddr = get_le64(p + off);
    off += 8;
    MrKey rkey = get_le32(p + off);
    off += 4;
    desc.wr.remote.reset();
    if (has_remote) desc.wr.remote = {raddr, rkey};
    bool has_dest = p[off++] != 0;
    NodeId dnode = get_le32(p + off);
    off += 4;
    QpNum dqp = get_le32(p + off);
    off += 4;
    desc.wr.dest.reset();
    if (has_dest) desc.wr.dest = {dnode, dqp};
    return nullptr;
}

struct DescDecode {
    bool ok = false;
    OpDescriptor desc;
    const char* error = nullptr;
};

inline DescDecode deserialize(std::span<const uint8_t> bytes) {
    DescDecode r;
    r.error = deserialize_into(bytes, r.desc);
    r.ok = r.error == nullptr;
    return r;
}

} // namespace softverbs
