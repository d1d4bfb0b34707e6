#ifndef FARSIGHT_H
#define FARSIGHT_H

/* C interface to the far-memory prefetching laboratory: trace generators,
 * offline training, future-map inspection, and the cache/latency simulator.
 * Every function returns fs_status; on failure fs_last_error() describes
 * what went wrong. Handles are opaque and freed with their _free function. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fs_status {
    FS_OK = 0,
    FS_EINVAL = 1,    /* bad argument or flag combination */
    FS_EIO = 2,       /* file could not be read or written */
    FS_EFORMAT = 3,   /* file exists but is not a valid artifact */
    FS_EMISMATCH = 4, /* artifacts disagree (k, page size, model shape) */
    FS_EINTERNAL = 5  /* invariant violation inside the library */
} fs_status;

/* Message for the calling thread's most recent failure; never NULL. */
const char* fs_last_error(void);

/* Frees strings returned through char** out parameters. */
void fs_string_free(char* s);

/* ---------- traces ---------- */

typedef struct fs_trace fs_trace;

fs_status fs_trace_gen_linked_list(uint64_t nodes, uint64_t node_stride, uint64_t shuffle_seed,
                                   uint32_t passes, uint32_t page_size, fs_trace** out);
/* algo: bfs | pagerank | sssp */
fs_status fs_trace_gen_graph(uint64_t node_count, double avg_degree, const char* algo,
                             uint64_t seed, uint32_t iterations, uint32_t page_size,
                             fs_trace** out);
fs_status fs_trace_gen_btree(uint64_t key_count, uint32_t fanout, uint64_t lookups, uint64_t seed,
                             uint32_t page_size, fs_trace** out);
/* kind: sequential | strided */
fs_status fs_trace_gen_regular(const char* kind, uint64_t span_bytes, uint64_t stride_bytes,
                               uint64_t seed, uint32_t page_size, fs_trace** out);

fs_status fs_trace_load(const char* path, fs_trace** out);
fs_status fs_trace_save(const fs_trace* t, const char* path);
/* limit = 0 exports every event */
fs_status fs_trace_export_csv(const fs_trace* t, const char* path, uint64_t limit);

uint64_t fs_trace_events(const fs_trace* t);
uint32_t fs_trace_page_size(const fs_trace* t);
uint64_t fs_trace_seed(const fs_trace* t);
uint64_t fs_trace_footprint_pages(const fs_trace* t);
const char* fs_trace_tag(const fs_trace* t);
void fs_trace_free(fs_trace* t);

/* ---------- offline training ---------- */

typedef struct fs_train_opts {
    double local_fraction;   /* capacity for the no-prefetch miss stream */
    uint64_t capacity_pages; /* nonzero overrides local_fraction */
    uint32_t k;              /* vocabulary size == future-map slots */
    uint32_t d_model;
    uint32_t n_heads;
    uint32_t n_layers;
    uint32_t window;         /* maximum history length */
    uint32_t lookahead;      /* 0 profiles the miss stream */
    uint32_t epochs;
    uint32_t batch_size;
    double lr;
    uint64_t wrap_period;    /* 0 keeps the default (2^32) */
    uint64_t seed;
} fs_train_opts;

fs_status fs_train_opts_default(fs_train_opts* opts);

typedef void (*fs_epoch_cb)(uint32_t epoch, double loss, double accuracy, void* user);

/* Derives the miss stream, builds oracle future maps, labels, trains, and
 * writes the model and maps files. cb may be NULL. */
fs_status fs_train(const fs_trace* t, const fs_train_opts* opts, const char* model_path,
                   const char* maps_path, fs_epoch_cb cb, void* user);

/* ---------- models ---------- */

typedef struct fs_model fs_model;

fs_status fs_model_load(const char* path, fs_model** out);
uint64_t fs_model_param_count(const fs_model* m);
uint32_t fs_model_k(const fs_model* m);
uint32_t fs_model_lookahead(const fs_model* m);
void fs_model_free(fs_model* m);

/* Streaming predictor over the miss history: constant-size state, one step
 * per miss. logits must hold fs_model_k(m) doubles. */
typedef struct fs_predictor fs_predictor;

fs_status fs_predictor_new(const fs_model* m, fs_predictor** out);
fs_status fs_predictor_step(fs_predictor* p, uint64_t page, uint64_t pc, double* logits);
void fs_predictor_reset(fs_predictor* p);
size_t fs_predictor_state_bytes(const fs_predictor* p);
void fs_predictor_free(fs_predictor* p);

/* ---------- future maps ---------- */

typedef struct fs_maps fs_maps;

fs_status fs_maps_load(const char* path, fs_maps** out);
uint32_t fs_maps_k(const fs_maps* m);
uint64_t fs_maps_owners(const fs_maps* m);
/* *page_out = UINT64_MAX when the slot is empty */
fs_status fs_maps_lookup(fs_maps* m, uint64_t owner, uint32_t ordinal, uint64_t* page_out);
void fs_maps_free(fs_maps* m);

/* ---------- simulation ---------- */

typedef struct fs_sim_opts {
    double local_fraction;
    uint64_t capacity_pages; /* nonzero overrides local_fraction */
    double fetch_latency_ns;
    double fetch_jitter_ns;
    double evict_penalty_ns;
    double local_access_ns;
    double predict_cost_ns;
    uint32_t lookahead;      /* 0 = model's trained value, else profiled */
    uint32_t batch;
    uint32_t max_inflight;   /* 0 = unlimited */
    uint32_t swap_cache_max; /* 0 = unlimited */
    uint32_t seq_window;
    uint64_t warmup_misses;
    int fill_empty_only;
    int count_skips_against_budget;
    int partial_hits_as_faults;
    uint64_t seed;
} fs_sim_opts;

fs_status fs_sim_opts_default(fs_sim_opts* opts);

/* policy: none | sequential | stride | oracle | farsight.
 * stage (farsight only, NULL = lookahead_batched): none | sync_all | on_miss |
 * async | lookahead_batched. model and maps may be NULL except that farsight
 * requires a model. miss_log_path, when non-NULL, receives the run's miss
 * events in trace framing. *report_json_out is the run report. */
fs_status fs_simulate(const fs_trace* t, const char* policy, const char* stage,
                      const fs_sim_opts* opts, const fs_model* model, const fs_maps* maps,
                      const char* miss_log_path, char** report_json_out);

#ifdef __cplusplus
}
#endif

#endif /* FARSIGHT_H */
