#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "error.hpp"
#include "futuremap.hpp"
#include "retnet.hpp"
#include "trace.hpp"

namespace farsight::sim {

using Json = nlohmann::ordered_json;

enum class Policy { none, sequential, stride, oracle, farsight };
enum class Stage { none, sync_all, on_miss, async, lookahead_batched };

Policy parse_policy(const std::string& name);
Stage parse_stage(const std::string& name);
const char* policy_name(Policy p);
const char* stage_name(Stage s);

// One page miss from a no-prefetch LRU run; sim_time places it on that
// run's clock so look-ahead profiling can measure inter-miss gaps.
struct MissEvent {
    uint64_t page = 0;
    uint64_t pc = 0;
    uint64_t index = 0;
    double sim_time_ns = 0.0;
};

struct SimConfig {
    double local_fraction = 0.5;   // of the trace's unique-page footprint
    uint64_t capacity_pages = 0;   // nonzero overrides local_fraction
    uint32_t page_size = 0;        // nonzero must match the trace header
    double fetch_latency_ns = 2000.0;
    double fetch_jitter_ns = 0.0;  // uniform in [latency-j, latency+j]
    double evict_penalty_ns = 4000.0;
    double local_access_ns = 100.0;
    double predict_cost_ns = 600.0;
    uint32_t lookahead_s = 0;      // 0 = auto (model's trained value, else profiled)
    uint32_t batch_f = 2;
    uint32_t max_inflight = 16;    // concurrent fetch cap; 0 = unlimited
    uint32_t swap_cache_max = 64;  // staged-but-unreferenced cap; 0 = unlimited
    uint32_t seq_window = 8;       // sequential readahead span
    uint64_t warmup_misses = 0;    // metrics also reported excluding these
    bool fill_empty_only = false;  // runtime fills never overwrite
    bool count_skips_against_budget = false;
    bool partial_hits_as_faults = false; // flips the headline accounting
    uint64_t seed = 1;

    void validate() const;
};

// Raw outcome tallies; the report derives every metric from these.
struct Counters {
    uint64_t accesses = 0;
    uint64_t miss_events = 0; // any access to a non-resident page
    uint64_t faults = 0;      // full-latency on-demand fetches
    uint64_t cold_misses = 0; // first touch of a page
    uint64_t issued = 0;
    uint64_t tp_full = 0;     // prefetched, arrived before the access
    uint64_t tp_partial = 0;  // prefetched, access stalled for the residual
    uint64_t unused_evicted = 0;
    uint64_t unused_at_end = 0;
    uint64_t fills = 0;
    uint64_t overwrites = 0;
    uint64_t skip_empty = 0;
    uint64_t skip_resident = 0;
    uint64_t skip_staged = 0;
    uint64_t skip_budget = 0;
};

struct TimeBreakdown {
    double local = 0.0;
    double fault_stall = 0.0;
    double evict = 0.0;
    double partial_stall = 0.0;
    double predict_fg = 0.0;
    double sync_prefetch = 0.0;

    double total() const {
        return local + fault_stall + evict + partial_stall + predict_fg + sync_prefetch;
    }
};

// precision = TP/issued (0 with a flag when nothing was issued),
// recall = TP/(faults + TP), F1 their harmonic mean. partial_as_faults
// moves late arrivals from the hit column into the fault column.
Json metrics_finalize(const Counters& c, bool partial_as_faults);

uint64_t resolve_capacity(const SimConfig& cfg, uint64_t footprint);

// No-prefetch LRU pass: one MissEvent per fault, stamped with the
// no-prefetch clock. This is the stream training data comes from.
std::vector<MissEvent> derive_miss_stream(std::span<const trace::AccessEvent> events,
                                          uint32_t page_shift, uint64_t capacity,
                                          const SimConfig& cfg);

// s = ceil(p95(fetch delay) / mean inter-miss time), at least 1. Degenerate
// samples (no forward time progress) give s = 1 and set *degenerate.
uint32_t compute_lookahead(std::span<const MissEvent> sample, double p95_delay_ns,
                           bool* degenerate = nullptr);

// Full simulation. `stage` applies to policy farsight only (ablation rungs);
// other policies ignore it. model is required for farsight (any stage but
// none); maps are optional and default to an empty table that runtime fills
// populate. miss_log, when given, receives the run's miss events.
Json simulate(std::span<const trace::AccessEvent> events, const trace::TraceHeader& header,
              Policy policy, Stage stage, const SimConfig& cfg,
              const retnet::RetNetParams* model, const futuremap::FutureMapTable* maps,
              std::vector<MissEvent>* miss_log = nullptr);

} // namespace farsight::sim
