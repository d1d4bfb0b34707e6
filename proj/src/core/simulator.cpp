#include "simulator.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <list>
#include <memory>
#include <queue>
#include <random>
#include <unordered_map>
#include <unordered_set>

#include "vocab.hpp"

namespace farsight::sim {

namespace {

constexpr const char* kPolicyNames[] = {"none", "sequential", "stride", "oracle", "farsight"};
constexpr const char* kStageNames[] = {"none", "sync_all", "on_miss", "async", "lookahead_batched"};

// Plain LRU over page numbers: list front = MRU, back = victim.
class LruCache {
public:
    explicit LruCache(uint64_t capacity) : capacity_(capacity) {}

    bool contains(uint64_t page) const { return index_.count(page) != 0; }
    uint64_t size() const { return order_.size(); }

    void touch(uint64_t page) {
        auto it = index_.find(page);
        order_.splice(order_.begin(), order_, it->second);
    }

    // Inserts as MRU; returns true and sets *victim if a page was evicted.
    bool insert(uint64_t page, uint64_t* victim) {
        bool evicted = false;
        if (order_.size() == capacity_) {
            *victim = order_.back();
            index_.erase(order_.back());
            order_.pop_back();
            evicted = true;
        }
        order_.push_front(page);
        index_[page] = order_.begin();
        return evicted;
    }

private:
    uint64_t capacity_;
    std::list<uint64_t> order_;
    std::unordered_map<uint64_t, std::list<uint64_t>::iterator> index_;
};

struct StagedEntry {
    double arrival = 0.0;
    uint64_t seq = 0; // guards against stale heap records after reissue
};

struct Arrival {
    double at = 0.0;
    uint64_t seq = 0;
    uint64_t page = 0;
    bool operator>(const Arrival& o) const {
        if (at != o.at) return at > o.at;
        return seq > o.seq;
    }
};

// Pages fetched by a prefetch but not yet referenced. In-flight entries
// live in `staged` only; once arrived they also join the swap-cache FIFO,
// whose overflow drops the oldest unused page. Promotion into the resident
// set happens at first reference, never earlier, so the resident LRU sees
// exactly the same insert sequence a no-prefetch run would.
class StagedPages {
public:
    StagedPages(uint32_t max_inflight, uint32_t swap_max)
        : max_inflight_(max_inflight), swap_max_(swap_max) {}

    bool contains(uint64_t page) const { return staged_.count(page) != 0; }
    bool arrived(uint64_t page) const { return swap_index_.count(page) != 0; }
    double arrival_of(uint64_t page) const { return staged_.at(page).arrival; }
    uint64_t size() const { return staged_.size(); }

    uint64_t inflight() const { return staged_.size() - swap_fifo_.size(); }
    bool inflight_full() const { return max_inflight_ != 0 && inflight() >= max_inflight_; }

    void issue(uint64_t page, double arrival) {
        uint64_t seq = next_seq_++;
        staged_[page] = {arrival, seq};
        heap_.push({arrival, seq, page});
    }

    // Moves everything that has landed by `now` into the swap cache;
    // returns how many unused pages the bounded cache pushed out.
    uint64_t drain(double now) {
        uint64_t dropped = 0;
        while (!heap_.empty() && heap_.top().at <= now) {
            Arrival a = heap_.top();
            heap_.pop();
            auto it = staged_.find(a.page);
            if (it == staged_.end() || it->second.seq != a.seq) continue;
            swap_fifo_.push_back(a.page);
            swap_index_[a.page] = std::prev(swap_fifo_.end());
            while (swap_max_ != 0 && swap_fifo_.size() > swap_max_) {
                uint64_t old = swap_fifo_.front();
                swap_fifo_.pop_front();
                swap_index_.erase(old);
                staged_.erase(old);
                ++dropped;
            }
        }
        return dropped;
    }

    // First reference consumes the staged entry (full hit or partial).
    void consume(uint64_t page) {
        auto sw = swap_index_.find(page);
        if (sw != swap_index_.end()) {
            swap_fifo_.erase(sw->second);
            swap_index_.erase(sw);
        }
        staged_.erase(page);
    }

private:
    uint32_t max_inflight_;
    uint32_t swap_max_;
    uint64_t next_seq_ = 0;
    std::unordered_map<uint64_t, StagedEntry> staged_;
    std::priority_queue<Arrival, std::vector<Arrival>, std::greater<Arrival>> heap_;
    std::list<uint64_t> swap_fifo_;
    std::unordered_map<uint64_t, std::list<uint64_t>::iterator> swap_index_;
};

struct PendingPrediction {
    uint64_t owner = 0;
    uint32_t ordinal = 0;
    uint32_t countdown = 0;
};

uint64_t count_footprint(std::span<const trace::AccessEvent> events, uint32_t shift) {
    std::unordered_set<uint64_t> pages;
    for (const auto& e : events) pages.insert(e.vaddr >> shift);
    return pages.size();
}

double round6(double v) {
    return std::round(v * 1e6) / 1e6;
}

} // namespace

Policy parse_policy(const std::string& name) {
    for (size_t i = 0; i < std::size(kPolicyNames); ++i)
        if (name == kPolicyNames[i]) return static_cast<Policy>(i);
    raise(Errc::invalid_arg, "unknown policy '" + name +
                                 "' (expected none, sequential, stride, oracle, or farsight)");
}

Stage parse_stage(const std::string& name) {
    for (size_t i = 0; i < std::size(kStageNames); ++i)
        if (name == kStageNames[i]) return static_cast<Stage>(i);
    raise(Errc::invalid_arg, "unknown stage '" + name +
                                 "' (expected none, sync_all, on_miss, async, or lookahead_batched)");
}

const char* policy_name(Policy p) { return kPolicyNames[static_cast<size_t>(p)]; }
const char* stage_name(Stage s) { return kStageNames[static_cast<size_t>(s)]; }

void SimConfig::validate() const {
    if (capacity_pages == 0 && !(local_fraction > 0.0 && local_fraction <= 1.0))
        raise(Errc::invalid_arg, "local_fraction must be in (0, 1]");
    if (page_size != 0) trace::page_shift(page_size); // rejects non powers of two
    if (fetch_latency_ns < 0 || evict_penalty_ns < 0 || local_access_ns < 0 || predict_cost_ns < 0)
        raise(Errc::invalid_arg, "latencies must be non-negative");
    if (fetch_jitter_ns < 0 || fetch_jitter_ns > fetch_latency_ns)
        raise(Errc::invalid_arg, "fetch_jitter_ns must be in [0, fetch_latency_ns]");
    if (batch_f == 0) raise(Errc::invalid_arg, "batch_f must be at least 1");
    if (seq_window == 0) raise(Errc::invalid_arg, "seq_window must be at least 1");
}

uint64_t resolve_capacity(const SimConfig& cfg, uint64_t footprint) {
    if (cfg.capacity_pages != 0) return cfg.capacity_pages;
    if (footprint == 0) return 1;
    auto cap = static_cast<uint64_t>(std::llround(cfg.local_fraction * static_cast<double>(footprint)));
    return std::max<uint64_t>(1, std::min(cap, footprint));
}

Json metrics_finalize(const Counters& c, bool partial_as_faults) {
    uint64_t tp = partial_as_faults ? c.tp_full : c.tp_full + c.tp_partial;
    uint64_t faults_eff = partial_as_faults ? c.faults + c.tp_partial : c.faults;
    bool defined = c.issued != 0;
    double precision = defined ? static_cast<double>(tp) / static_cast<double>(c.issued) : 0.0;
    uint64_t recall_den = faults_eff + tp;
    double recall = recall_den != 0 ? static_cast<double>(tp) / static_cast<double>(recall_den) : 0.0;
    double f1 = (precision + recall) > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    Json j;
    j["tp"] = tp;
    j["faults_effective"] = faults_eff;
    j["precision"] = round6(precision);
    j["precision_defined"] = defined;
    j["recall"] = round6(recall);
    j["f1"] = round6(f1);
    return j;
}

std::vector<MissEvent> derive_miss_stream(std::span<const trace::AccessEvent> events,
                                          uint32_t page_shift, uint64_t capacity,
                                          const SimConfig& cfg) {
    if (capacity == 0) raise(Errc::invalid_arg, "capacity must be at least 1 page");
    LruCache resident(capacity);
    std::vector<MissEvent> misses;
    double clock = 0.0;
    uint64_t victim = 0;
    for (const auto& e : events) {
        uint64_t page = e.vaddr >> page_shift;
        if (resident.contains(page)) {
            resident.touch(page);
            clock += cfg.local_access_ns;
            continue;
        }
        clock += cfg.fetch_latency_ns;
        if (resident.insert(page, &victim)) clock += cfg.evict_penalty_ns;
        clock += cfg.local_access_ns;
        misses.push_back({page, e.pc, misses.size(), clock});
    }
    return misses;
}

uint32_t compute_lookahead(std::span<const MissEvent> sample, double p95_delay_ns,
                           bool* degenerate) {
    if (degenerate) *degenerate = false;
    if (sample.size() < 2) {
        if (degenerate) *degenerate = true;
        return 1;
    }
    double spanned = sample.back().sim_time_ns - sample.front().sim_time_ns;
    double mean_gap = spanned / static_cast<double>(sample.size() - 1);
    if (!(mean_gap > 0.0)) {
        if (degenerate) *degenerate = true;
        return 1;
    }
    double s = std::ceil(p95_delay_ns / mean_gap);
    if (s < 1.0) return 1;
    if (s > 4096.0) return 4096;
    return static_cast<uint32_t>(s);
}

namespace {

struct RunState {
    const SimConfig& cfg;
    Counters c;
    Counters post; // counted once warmup_misses miss events have passed
    TimeBreakdown t;
    double clock = 0.0;
    std::mt19937_64 rng;
    std::uniform_real_distribution<double> jitter;

    explicit RunState(const SimConfig& config)
        : cfg(config), rng(config.seed),
          jitter(config.fetch_latency_ns - config.fetch_jitter_ns,
                 config.fetch_latency_ns + config.fetch_jitter_ns) {}

    double sample_fetch() {
        if (cfg.fetch_jitter_ns == 0.0) return cfg.fetch_latency_ns;
        return jitter(rng);
    }

    void charge(double& bucket, double ns) {
        bucket += ns;
        clock += ns;
    }
};

// Shared prefetch-issue path: dedupe against resident/staged state, respect
// the in-flight cap, and either stall for a synchronous fetch or schedule an
// asynchronous arrival. Returns true if budget was consumed.
bool try_issue(RunState& rs, LruCache& resident, StagedPages& staged, uint64_t page,
               bool sync_io, bool post_warmup) {
    if (resident.contains(page)) {
        ++rs.c.skip_resident;
        return rs.cfg.count_skips_against_budget;
    }
    if (staged.contains(page)) {
        ++rs.c.skip_staged;
        return rs.cfg.count_skips_against_budget;
    }
    if (staged.inflight_full()) {
        ++rs.c.skip_budget;
        return rs.cfg.count_skips_against_budget;
    }
    double latency = rs.sample_fetch();
    if (sync_io) {
        rs.charge(rs.t.sync_prefetch, latency);
        staged.issue(page, rs.clock);
        rs.c.unused_evicted += staged.drain(rs.clock);
    } else {
        staged.issue(page, rs.clock + latency);
    }
    ++rs.c.issued;
    if (post_warmup) ++rs.post.issued;
    return true;
}

} // namespace

Json simulate(std::span<const trace::AccessEvent> events, const trace::TraceHeader& header,
              Policy policy, Stage stage, const SimConfig& cfg,
              const retnet::RetNetParams* model, const futuremap::FutureMapTable* maps,
              std::vector<MissEvent>* miss_log) {
    cfg.validate();
    if (cfg.page_size != 0 && cfg.page_size != header.page_size)
        raise(Errc::config_mismatch,
              "config page_size " + std::to_string(cfg.page_size) + " does not match trace page_size " +
                  std::to_string(header.page_size));
    uint32_t shift = trace::page_shift(header.page_size);

    // A farsight run demoted to stage none issues nothing; drop the model
    // machinery entirely so it behaves and costs exactly like policy none.
    if (policy == Policy::farsight && stage == Stage::none) policy = Policy::none;

    uint64_t footprint = count_footprint(events, shift);
    uint64_t capacity = resolve_capacity(cfg, footprint);

    bool is_farsight = policy == Policy::farsight;
    if (is_farsight && model == nullptr)
        raise(Errc::invalid_arg, "policy farsight requires a trained model");

    futuremap::FutureMapTable table(is_farsight ? model->cfg.k : 1);
    if (is_farsight && maps != nullptr) {
        if (maps->k() != model->cfg.k)
            raise(Errc::config_mismatch,
                  "future maps have k=" + std::to_string(maps->k()) + " but the model expects k=" +
                      std::to_string(model->cfg.k));
        table = *maps;
    }

    // Resolve the look-ahead distance. Early ablation rungs pin s = 1;
    // explicit config wins otherwise, then the model's trained value, then
    // profiling the opening of the no-prefetch miss stream.
    RunState rs(cfg);
    uint32_t s_used = 1;
    uint32_t f_used = 1;
    std::string s_source = "fixed";
    bool lookahead_degenerate = false;
    std::vector<MissEvent> oracle_stream;
    if (policy == Policy::oracle) {
        oracle_stream = derive_miss_stream(events, shift, capacity, cfg);
        if (cfg.lookahead_s != 0) {
            s_used = cfg.lookahead_s;
            s_source = "explicit";
        }
    } else if (is_farsight) {
        f_used = stage == Stage::lookahead_batched ? cfg.batch_f : 1;
        if (stage != Stage::lookahead_batched) {
            s_used = 1;
        } else if (cfg.lookahead_s != 0) {
            s_used = cfg.lookahead_s;
            s_source = "explicit";
        } else if (model->trained_lookahead != 0) {
            s_used = model->trained_lookahead;
            s_source = "model";
        } else {
            auto profile = derive_miss_stream(events, shift, capacity, cfg);
            size_t n = std::max<size_t>(2, profile.size() / 10);
            n = std::min(n, profile.size());
            double p95 = cfg.fetch_latency_ns + 0.9 * cfg.fetch_jitter_ns;
            s_used = compute_lookahead(std::span(profile).first(n), p95, &lookahead_degenerate);
            s_source = "profiled";
        }
    }

    LruCache resident(capacity);
    StagedPages staged(cfg.max_inflight, cfg.swap_cache_max);
    std::unordered_set<uint64_t> touched;

    // farsight machinery
    vocab::VocabConfig vcfg;
    std::unique_ptr<vocab::HistoryWindow> window;
    retnet::RecurrentState state;
    std::deque<PendingPrediction> pending;
    std::vector<double> logits;
    std::vector<uint32_t> order;
    if (is_farsight) {
        vcfg.k = model->cfg.k;
        vcfg.h = model->cfg.t;
        vcfg.rotary_base = model->cfg.rotary_base;
        vcfg.wrap_period = model->cfg.wrap_period;
        vcfg.validate();
        window = std::make_unique<vocab::HistoryWindow>(vcfg);
        state = retnet::make_state(model->cfg);
        order.resize(model->cfg.k);
    }

    // sequential / stride observation state
    uint64_t seq_last_page = 0;
    uint32_t seq_run = 0;
    uint64_t stride_hist[3] = {0, 0, 0};
    uint32_t stride_seen = 0;

    bool sync_io = is_farsight && (stage == Stage::sync_all || stage == Stage::on_miss);

    for (const auto& e : events) {
        uint64_t page = e.vaddr >> shift;
        ++rs.c.accesses;
        rs.c.unused_evicted += staged.drain(rs.clock);

        if (resident.contains(page)) {
            resident.touch(page);
            rs.charge(rs.t.local, cfg.local_access_ns);
            if (is_farsight && stage == Stage::sync_all)
                rs.charge(rs.t.predict_fg, cfg.predict_cost_ns);
            continue;
        }

        uint64_t miss_index = rs.c.miss_events++;
        bool post_warmup = miss_index >= cfg.warmup_misses;
        if (post_warmup) ++rs.post.miss_events;
        bool first_touch = touched.insert(page).second;
        if (first_touch) {
            ++rs.c.cold_misses;
            if (post_warmup) ++rs.post.cold_misses;
        }
        if (miss_log) miss_log->push_back({page, e.pc, miss_index, rs.clock});

        uint64_t victim = 0;
        double stall = 0.0;
        if (staged.contains(page)) {
            if (staged.arrived(page)) {
                ++rs.c.tp_full;
                if (post_warmup) ++rs.post.tp_full;
            } else {
                stall = staged.arrival_of(page) - rs.clock;
                rs.charge(rs.t.partial_stall, stall);
                ++rs.c.tp_partial;
                if (post_warmup) ++rs.post.tp_partial;
            }
            staged.consume(page);
            resident.insert(page, &victim);
        } else {
            ++rs.c.faults;
            if (post_warmup) ++rs.post.faults;
            stall = rs.sample_fetch();
            rs.charge(rs.t.fault_stall, stall);
            if (resident.insert(page, &victim)) rs.charge(rs.t.evict, cfg.evict_penalty_ns);
        }
        rs.charge(rs.t.local, cfg.local_access_ns);

        // Post-service prefetcher hooks. The miss is fully resolved first so
        // issue-time dedupe sees the cache state the next access will see.
        switch (policy) {
        case Policy::none:
            break;
        case Policy::sequential: {
            if (seq_run != 0 && page == seq_last_page + 1) ++seq_run;
            else seq_run = 1;
            seq_last_page = page;
            if (seq_run >= 2)
                for (uint32_t i = 1; i <= cfg.seq_window; ++i)
                    try_issue(rs, resident, staged, page + i, false, post_warmup);
            break;
        }
        case Policy::stride: {
            stride_hist[0] = stride_hist[1];
            stride_hist[1] = stride_hist[2];
            stride_hist[2] = page;
            if (++stride_seen >= 3) {
                int64_t d1 = static_cast<int64_t>(stride_hist[1] - stride_hist[0]);
                int64_t d2 = static_cast<int64_t>(stride_hist[2] - stride_hist[1]);
                if (d1 == d2 && d1 != 0) {
                    uint64_t target = stride_hist[2] + static_cast<uint64_t>(d1);
                    if (!(d1 < 0 && target > stride_hist[2]))
                        try_issue(rs, resident, staged, target, false, post_warmup);
                }
            }
            break;
        }
        case Policy::oracle: {
            if (miss_index >= oracle_stream.size() || oracle_stream[miss_index].page != page)
                raise(Errc::internal, "oracle miss stream diverged from the live run");
            uint64_t target_idx = miss_index + s_used;
            if (target_idx < oracle_stream.size()) {
                uint64_t target = oracle_stream[target_idx].page;
                // Never prefetch a page the stream has not yet revealed; its
                // first fault is the cold miss the oracle cannot avoid.
                if (touched.count(target) != 0)
                    try_issue(rs, resident, staged, target, false, post_warmup);
            }
            break;
        }
        case Policy::farsight: {
            // Mature pending predictions: this miss is the next step of every
            // countdown, and whichever hits zero learns this page as its slot.
            for (auto it = pending.begin(); it != pending.end();) {
                if (--it->countdown == 0) {
                    bool was_empty =
                        table.lookup(it->owner, it->ordinal) == futuremap::kEmptySlot;
                    bool overwrote = table.fill(it->owner, it->ordinal, page, cfg.fill_empty_only);
                    if (was_empty || overwrote) ++rs.c.fills;
                    if (overwrote) ++rs.c.overwrites;
                    it = pending.erase(it);
                } else {
                    ++it;
                }
            }

            uint64_t pos = miss_index % vcfg.wrap_period;
            if (window->push(page, e.pc)) state.reset();
            logits = retnet::forward_recurrent(
                *model, state,
                {vocab::addr_token(page, vcfg.k), vocab::pc_token(e.pc, vcfg.k)}, pos);
            if (stage == Stage::sync_all || stage == Stage::on_miss)
                rs.charge(rs.t.predict_fg, cfg.predict_cost_ns);
            else
                rs.charge(rs.t.predict_fg, std::max(0.0, cfg.predict_cost_ns - stall));

            for (uint32_t i = 0; i < model->cfg.k; ++i) order[i] = i;
            std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
                if (logits[a] != logits[b]) return logits[a] > logits[b];
                return a < b;
            });

            uint32_t budget = f_used;
            for (uint32_t i = 0; i < model->cfg.k && budget > 0; ++i) {
                uint64_t target = table.lookup(page, order[i]);
                if (target == futuremap::kEmptySlot) {
                    ++rs.c.skip_empty;
                    --budget; // an empty slot wastes the prediction
                    continue;
                }
                if (try_issue(rs, resident, staged, target, sync_io, post_warmup)) --budget;
            }
            pending.push_back({page, order[0], s_used});
            break;
        }
        }
    }

    rs.c.unused_at_end = staged.size();

    Json report;
    report["schema"] = "farsight-sim-report-v1";
    Json run;
    run["policy"] = policy_name(policy);
    if (is_farsight) run["stage"] = stage_name(stage);
    else run["stage"] = nullptr;
    run["trace_tag"] = std::string(header.generator_tag);
    run["trace_seed"] = header.seed;
    run["events"] = static_cast<uint64_t>(events.size());
    report["run"] = run;

    Json jc;
    jc["page_size"] = header.page_size;
    jc["footprint_pages"] = footprint;
    jc["local_fraction"] = cfg.local_fraction;
    jc["capacity_pages"] = capacity;
    jc["fetch_latency_ns"] = cfg.fetch_latency_ns;
    jc["fetch_jitter_ns"] = cfg.fetch_jitter_ns;
    jc["evict_penalty_ns"] = cfg.evict_penalty_ns;
    jc["local_access_ns"] = cfg.local_access_ns;
    jc["predict_cost_ns"] = cfg.predict_cost_ns;
    jc["lookahead_s"] = s_used;
    jc["lookahead_source"] = s_source;
    jc["lookahead_degenerate"] = lookahead_degenerate;
    jc["batch_f"] = f_used;
    jc["max_inflight"] = cfg.max_inflight;
    jc["swap_cache_max"] = cfg.swap_cache_max;
    jc["seq_window"] = cfg.seq_window;
    jc["warmup_misses"] = cfg.warmup_misses;
    jc["fill_empty_only"] = cfg.fill_empty_only;
    jc["count_skips_against_budget"] = cfg.count_skips_against_budget;
    jc["partial_hits_as_faults"] = cfg.partial_hits_as_faults;
    jc["seed"] = cfg.seed;
    if (is_farsight) jc["k"] = model->cfg.k;
    report["config"] = jc;

    auto counters_json = [](const Counters& c) {
        Json j;
        j["accesses"] = c.accesses;
        j["miss_events"] = c.miss_events;
        j["faults"] = c.faults;
        j["cold_misses"] = c.cold_misses;
        j["issued"] = c.issued;
        j["tp_full"] = c.tp_full;
        j["tp_partial"] = c.tp_partial;
        j["unused_evicted"] = c.unused_evicted;
        j["unused_at_end"] = c.unused_at_end;
        j["fills"] = c.fills;
        j["overwrites"] = c.overwrites;
        Json sk;
        sk["empty_slot"] = c.skip_empty;
        sk["resident"] = c.skip_resident;
        sk["staged"] = c.skip_staged;
        sk["budget"] = c.skip_budget;
        j["skips"] = sk;
        return j;
    };
    report["counters"] = counters_json(rs.c);

    Json jt;
    jt["total"] = round6(rs.t.total());
    jt["local"] = round6(rs.t.local);
    jt["fault_stall"] = round6(rs.t.fault_stall);
    jt["evict"] = round6(rs.t.evict);
    jt["partial_stall"] = round6(rs.t.partial_stall);
    jt["predict_foreground"] = round6(rs.t.predict_fg);
    jt["sync_prefetch"] = round6(rs.t.sync_prefetch);
    report["time_ns"] = jt;

    report["metrics"] = metrics_finalize(rs.c, cfg.partial_hits_as_faults);
    report["metrics_strict"] = metrics_finalize(rs.c, !cfg.partial_hits_as_faults);

    if (cfg.warmup_misses > 0) {
        Json pw;
        pw["counters"] = counters_json(rs.post);
        pw["metrics"] = metrics_finalize(rs.post, cfg.partial_hits_as_faults);
        report["post_warmup"] = pw;
    }
    return report;
}

} // namespace farsight::sim
