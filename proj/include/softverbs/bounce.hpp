#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <thread>
#include <vector>

#include "softverbs/util.hpp"

namespace softverbs {

// Staging arena for the no-zero-copy ablation. Slots rotate through a
// small slab per size class, standing in for kernel socket buffers. A
// full slab backpressures the submitter.
class BouncePool {
public:
    struct Slot {
        std::span<uint8_t> bytes;
        uint32_t slab = 0;
        uint32_t index = 0;
        bool valid = false;
    };

    Slot acquire(size_t size) {
        auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(2);
        for (;;) {
            {
                std::lock_guard lk(mu_);
                Slab& slab = slab_for(size);
                for (uint32_t i = 0; i < slab.slots; ++i) {
                    uint32_t idx = (slab.cursor + i) % slab.slots;
                    if (!slab.busy[idx]) {
                        slab.busy[idx] = true;
                        slab.cursor = (idx + 1) % slab.slots;
                        Slot s;
                        s.bytes = std::span<uint8_t>(slab.mem->data() + size_t(idx) * slab.slot_size,
                                                     size);
                        s.slab = slab.id;
                        s.index = idx;
                        s.valid = true;
                        return s;
                    }
                }
            }
            if (std::chrono::steady_clock::now() > deadline)
                throw Error("bounce pool exhausted (backpressure timed out)");
            std::this_thread::yield();
        }
    }

    void release(const Slot& s) {
        if (!s.valid) return;
        std::lock_guard lk(mu_);
        for (auto& [sz, slab] : slabs_)
            if (slab.id == s.slab) slab.busy[s.index] = false;
    }

private:
    struct Slab {
        uint32_t id = 0;
        size_t slot_size = 0;
        uint32_t slots = 0;
        uint32_t cursor = 0;
        std::unique_ptr<HugeBuffer> mem;
        std::vector<bool> busy;
    };

    Slab& slab_for(size_t size) {
        size_t cls = 4096;
        while (cls < size) cls <<= 1;
        auto it = slabs_.find(cls);
        if (it == slabs_.end()) {
            Slab s;
            s.id = next_id_++;
            s.slot_size = cls;
            // Rotate through enough slots that staged bytes behave like
            // kernel socket buffers rather than a cache-resident scratch
            // line: footprint up to 16 MiB, 4..64 slots.
            s.slots = uint32_t(std::max<size_t>(4, std::min<size_t>(64, (16u << 20) / cls)));
            s.mem = std::make_unique<HugeBuffer>(s.slot_size * s.slots);
            s.busy.assign(s.slots, false);
            it = slabs_.emplace(cls, std::move(s)).first;
        }
        return it->second;
    }

    std::mutex mu_;
    std::map<size_t, Slab> slabs_;
    uint32_t next_id_ = 1;
};

} // namespace softverbs
