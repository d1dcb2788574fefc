#pragma once

#include <sys/mman.h>

#include <cstdint>
#include <cstddef>
#include <cstring>
#include <stdexcept>
#include <string>

namespace softverbs {

// Library-level misuse and setup failures (bad arguments, exhausted
// resources, illegal state transitions). Dataplane errors travel as
// status codes on the hot path instead.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool ok, const char* msg) {
    if (!ok) throw Error(msg);
}

// CRC-32 (reflected 0xEDB88320), table built once.
class Crc32 {
public:
    static uint32_t of(const void* data, size_t len, uint32_t seed = 0) {
        static const Crc32 inst;
        uint32_t crc = ~seed;
        const auto* p = static_cast<const uint8_t*>(data);
        for (size_t i = 0; i < len; ++i)
            crc = inst.table_[(crc ^ p[i]) & 0xffu] ^ (crc >> 8);
        return ~crc;
    }

private:
    Crc32() {
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k)
                c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            table_[i] = c;
        }
    }
    uint32_t table_[256];
};

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64_str(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// Anonymous mapping with transparent-huge-page hint. Registered message
// buffers live here so large transfers do not thrash the TLB.
class HugeBuffer {
public:
    explicit HugeBuffer(size_t len) : len_((len + (2u << 20) - 1) & ~size_t((2u << 20) - 1)) {
        void* p = ::mmap(nullptr, len_, PROT_READ | PROT_WRITE,
                         MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
        require(p != MAP_FAILED, "mmap failed");
        ::madvise(p, len_, MADV_HUGEPAGE);
        std::memset(p, 0, len_);
        data_ = static_cast<uint8_t*>(p);
    }
    ~HugeBuffer() {
        if (data_) ::munmap(data_, len_);
    }
    HugeBuffer(const HugeBuffer&) = delete;
    HugeBuffer& operator=(const HugeBuffer&) = delete;
    HugeBuffer(HugeBuffer&& o) noexcept : data_(o.data_), len_(o.len_) {
        o.data_ = nullptr;
        o.len_ = 0;
    }

    uint8_t* data() { return data_; }
    const uint8_t* data() const { return data_; }
    size_t size() const { return len_; }

private:
    uint8_t* data_ = nullptr;
    size_t len_ = 0;
};

inline void cpu_pause() {
#if defined(__x86_64__) || defined(__i386__)
    __builtin_ia32_pause();
#else
    asm volatile("" ::: "memory");
#endif
}

// xorshift-multiply mix; used for key generation and deterministic streams.
inline uint64_t mix64(uint64_t x) {
    x ^= x >> 33;
    x *= 0xff51afd7ed558ccdull;
    x ^= x >> 33;
    x *= 0xc4ceb9fe1a85ec53ull;
    x ^= x >> 33;
    return x;
}

// Big-endian field packing for the wire format.
inline void put_be16(uint8_t* p, uint16_t v) { p[0] = uint8_t(v >> 8); p[1] = uint8_t(v); }
inline void put_be32(uint8_t* p, uint32_t v) {
    p[0] = uint8_t(v >> 24); p[1] = uint8_t(v >> 16); p[2] = uint8_t(v >> 8); p[3] = uint8_t(v);
}
inline void put_be64(uint8_t* p, uint64_t v) {
    put_be32(p, uint32_t(v >> 32));
    put_be32(p + 4, uint32_t(v));
}
inline uint16_t get_be16(const uint8_t* p) { return uint16_t(p[0]) << 8 | p[1]; }
inline uint32_t get_be32(const uint8_t* p) {
    return uint32_t(p[0]) << 24 | uint32_t(p[1]) << 16 | uint32_t(p[2]) << 8 | p[3];
}
inline uint64_t get_be64(const uint8_t* p) {
    return uint64_t(get_be32(p)) << 32 | get_be32(p + 4);
}

// Little-endian packing for the mediation descriptor encoding.
inline void put_le32(uint8_t* p, uint32_t v) { std::memcpy(p, &v, 4); }
inline void put_le64(uint8_t* p, uint64_t v) { std::memcpy(p, &v, 8); }
inline uint32_t get_le32(const uint8_t* p) { uint32_t v; std::memcpy(&v, p, 4); return v; }
inline uint64_t get_le64(const uint8_t* p) { uint64_t v; std::memcpy(&v, p, 8); return v; }

} // namespace softverbs
