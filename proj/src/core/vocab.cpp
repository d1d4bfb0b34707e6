#include "vocab.hpp"

namespace farsight::vocab {

void VocabConfig::validate() const {
    if (k < 1 || k > 65536)
        raise(Errc::invalid_arg, "vocabulary size must be in [1, 65536], got " + std::to_string(k));
    if (h < 1)
        raise(Errc::invalid_arg, "history window must hold at least one entry");
    if (!(rotary_base > 0.0))
        raise(Errc::invalid_arg, "rotary base must be positive");
    if (wrap_period < 1)
        raise(Errc::invalid_arg, "wrap period must be positive");
}

HistoryWindow::HistoryWindow(const VocabConfig& cfg, uint64_t start_phase)
    : cfg_(cfg), phase_(start_phase) {
    cfg_.validate();
}

bool HistoryWindow::push(uint64_t page, uint64_t pc) {
    const uint64_t pos = phase_ % cfg_.wrap_period;
    const bool wrapped = has_prev_ && pos < last_pos_;
    entries_.push_back({{addr_token(page, cfg_.k), pc_token(pc, cfg_.k)}, pos});
    if (entries_.size() > cfg_.h)
        entries_.pop_front();
    ++phase_;
    last_pos_ = pos;
    has_prev_ = true;
    return wrapped;
}

void HistoryWindow::clear() { entries_.clear(); }

} // namespace farsight::vocab
