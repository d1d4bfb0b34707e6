#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "error.hpp"
#include "vocab.hpp"

namespace farsight::futuremap {

inline constexpr uint64_t kEmptySlot = ~0ull;

// Per-page K-slot successor table. Slots hold concrete pages; the model's
// output ordinal is a slot index. Oracle-built maps rank slots by successor
// frequency (slot 0 = most frequent); runtime-filled maps put page Y into
// whatever slot the model predicted when X missed. Either way the map, not
// the model, remembers addresses.
struct FutureMap {
    uint64_t owner = 0;
    std::vector<uint64_t> slots; // size k, kEmptySlot when unfilled
};

class FutureMapTable {
public:
    explicit FutureMapTable(uint32_t k);

    uint32_t k() const { return k_; }
    size_t size() const { return maps_.size(); }

    // Slot content for the predicted ordinal; kEmptySlot means no prefetch.
    // Lazily creates an all-empty map for pages seen for the first time.
    uint64_t lookup(uint64_t owner, uint32_t ordinal);

    // Returns true when an occupied slot changed value (an overwrite).
    // With fill_empty_only set, occupied slots are left alone.
    bool fill(uint64_t owner, uint32_t ordinal, uint64_t page, bool fill_empty_only = false);

    // Slot index holding `page` in owner's map, or -1 when absent.
    int find_slot(uint64_t owner, uint64_t page) const;

    const FutureMap* find(uint64_t owner) const;
    FutureMap& get_or_create(uint64_t owner);
    const std::unordered_map<uint64_t, FutureMap>& maps() const { return maps_; }

    void save(const std::string& path) const;
    static FutureMapTable load(const std::string& path);
    static FutureMapTable load(const std::string& path, uint32_t expected_k);

private:
    uint32_t k_;
    std::unordered_map<uint64_t, FutureMap> maps_;
};

// Offline construction from a no-prefetch miss stream: for each page X, rank
// every page observed as the lookahead-th miss after X by descending
// frequency (ties: earlier first appearance wins) and keep the top k as
// slots 0..k-1.
FutureMapTable build_oracle_maps(std::span<const uint64_t> miss_pages, uint32_t k,
                                 uint32_t lookahead);

// Training view of the same stream: one token per miss plus one example per
// position i (with i+lookahead in range) whose target is the slot index of
// the lookahead-th future page inside page i's map. Positions whose target
// page fell outside the map's top-k are dropped and counted.
struct LabeledDataset {
    struct Example {
        uint64_t end_idx = 0; // window ends here (inclusive)
        uint32_t target = 0;  // slot index in the map of the page at end_idx
    };

    std::vector<vocab::TokenPair> tokens; // one per miss, oldest first
    std::vector<uint64_t> positions;      // rotary position per token
    std::vector<Example> examples;
    uint64_t dropped = 0; // positions whose target page is absent from the map
    uint32_t k = 0;
    uint32_t lookahead = 0;
};

LabeledDataset make_labels(std::span<const uint64_t> miss_pages,
                           std::span<const uint64_t> miss_pcs, const FutureMapTable& maps,
                           uint32_t lookahead, uint64_t wrap_period);

} // namespace farsight::futuremap
