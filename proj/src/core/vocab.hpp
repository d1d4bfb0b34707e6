#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <string>

#include "error.hpp"

namespace farsight::vocab {

// Both the page id and the pc collapse onto a fixed vocabulary of k ordinals
// via modulo. Predictions are ordinals too; a per-page future map turns the
// winning ordinal back into a concrete page.
struct VocabConfig {
    uint32_t k = 64;             // vocabulary size, tokens are value % k
    uint32_t h = 64;             // history window length fed to the model
    double rotary_base = 10000.0;
    uint64_t wrap_period = 1ull << 32; // positions live in [0, wrap_period)

    void validate() const;
};

struct TokenPair {
    uint32_t addr_tok = 0;
    uint32_t pc_tok = 0;

    friend bool operator==(const TokenPair&, const TokenPair&) = default;
};

struct HistoryEntry {
    TokenPair tok;
    uint64_t pos = 0; // global miss index modulo wrap_period
};

inline uint32_t addr_token(uint64_t page, uint32_t k) { return static_cast<uint32_t>(page % k); }
inline uint32_t pc_token(uint64_t pc, uint32_t k) { return static_cast<uint32_t>(pc % k); }

// Rotary position encoding: dimension pair j of a head rotates by
// pos * inv_freq(j). Scores then depend only on position differences.
inline double rotary_inv_freq(double base, uint32_t pair_index, uint32_t d_head) {
    return std::pow(base, -2.0 * double(pair_index) / double(d_head));
}

// Sliding window over the miss history. Positions keep counting across
// evictions, so the model sees absolute indices; wrap_period == 1 pins every
// position to 0, which turns rotation off.
class HistoryWindow {
public:
    explicit HistoryWindow(const VocabConfig& cfg, uint64_t start_phase = 0);

    // Appends the (page, pc) token pair. Returns true when this entry's
    // position wrapped back to zero; callers must then discard any recurrent
    // state built on the old positions.
    bool push(uint64_t page, uint64_t pc);

    void clear();

    size_t size() const { return entries_.size(); }
    bool full() const { return entries_.size() == cfg_.h; }
    const HistoryEntry& operator[](size_t i) const { return entries_[i]; } // oldest first
    uint64_t phase() const { return phase_; }
    const VocabConfig& config() const { return cfg_; }
    size_t bytes() const { return sizeof(*this) + cfg_.h * sizeof(HistoryEntry); }

private:
    VocabConfig cfg_;
    std::deque<HistoryEntry> entries_;
    uint64_t phase_ = 0;     // total pushes, offset by the start phase
    uint64_t last_pos_ = 0;
    bool has_prev_ = false;
};

} // namespace farsight::vocab
