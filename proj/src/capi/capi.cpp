#include "farsight.h"

#include <cstring>
#include <exception>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "futuremap.hpp"
#include "retnet.hpp"
#include "simulator.hpp"
#include "trace.hpp"
#include "vocab.hpp"

using namespace farsight;

namespace {

thread_local std::string g_last_error = "no error";

fs_status fail(fs_status code, const std::string& msg) {
    g_last_error = msg;
    return code;
}

template <typename Fn>
fs_status guard(Fn&& fn) {
    try {
        fn();
        return FS_OK;
    } catch (const Error& e) {
        return fail(static_cast<fs_status>(static_cast<int>(e.code())), e.what());
    } catch (const std::exception& e) {
        return fail(FS_EINTERNAL, e.what());
    }
}

fs_status require(bool ok, const char* what) {
    return ok ? FS_OK : fail(FS_EINVAL, what);
}

} // namespace

struct fs_trace {
    trace::GeneratedTrace t;
};

struct fs_model {
    retnet::RetNetParams params;
};

struct fs_predictor {
    const fs_model* model;
    vocab::HistoryWindow window;
    retnet::RecurrentState state;
    uint64_t misses = 0;
};

struct fs_maps {
    futuremap::FutureMapTable table;
};

extern "C" {

const char* fs_last_error(void) { return g_last_error.c_str(); }

void fs_string_free(char* s) { delete[] s; }

/* ---------- traces ---------- */

fs_status fs_trace_gen_linked_list(uint64_t nodes, uint64_t node_stride, uint64_t shuffle_seed,
                                   uint32_t passes, uint32_t page_size, fs_trace** out) {
    if (auto st = require(out != nullptr, "out must not be NULL"); st != FS_OK) return st;
    return guard([&] {
        *out = new fs_trace{trace::gen_linked_list(nodes, node_stride, shuffle_seed, passes,
                                                   page_size)};
    });
}

fs_status fs_trace_gen_graph(uint64_t node_count, double avg_degree, const char* algo,
                             uint64_t seed, uint32_t iterations, uint32_t page_size,
                             fs_trace** out) {
    if (auto st = require(out != nullptr && algo != nullptr, "out and algo must not be NULL"); st != FS_OK) return st;
    return guard([&] {
        *out = new fs_trace{trace::gen_graph_traversal(node_count, avg_degree,
                                                       trace::parse_graph_algo(algo), seed,
                                                       iterations, page_size)};
    });
}

fs_status fs_trace_gen_btree(uint64_t key_count, uint32_t fanout, uint64_t lookups, uint64_t seed,
                             uint32_t page_size, fs_trace** out) {
    if (auto st = require(out != nullptr, "out must not be NULL"); st != FS_OK) return st;
    return guard([&] {
        *out = new fs_trace{trace::gen_btree_lookup(key_count, fanout, lookups, seed, page_size)};
    });
}

fs_status fs_trace_gen_regular(const char* kind, uint64_t span_bytes, uint64_t stride_bytes,
                               uint64_t seed, uint32_t page_size, fs_trace** out) {
    if (auto st = require(out != nullptr && kind != nullptr, "out and kind must not be NULL"); st != FS_OK) return st;
    return guard([&] {
        *out = new fs_trace{trace::gen_regular(trace::parse_regular_kind(kind), span_bytes,
                                               stride_bytes, seed, page_size)};
    });
}

fs_status fs_trace_load(const char* path, fs_trace** out) {
    if (auto st = require(out != nullptr && path != nullptr, "out and path must not be NULL"); st != FS_OK) return st;
    return guard([&] {
        auto [header, events] = trace::read_trace(path);
        *out = new fs_trace{{header, std::move(events)}};
    });
}

fs_status fs_trace_save(const fs_trace* t, const char* path) {
    if (auto st = require(t != nullptr && path != nullptr, "trace and path must not be NULL"); st != FS_OK) return st;
    return guard([&] { trace::write_trace(path, t->t.header, t->t.events); });
}

fs_status fs_trace_export_csv(const fs_trace* t, const char* path, uint64_t limit) {
    if (auto st = require(t != nullptr && path != nullptr, "trace and path must not be NULL"); st != FS_OK) return st;
    return guard([&] { trace::export_csv(std::span(t->t.events), path, limit); });
}

uint64_t fs_trace_events(const fs_trace* t) { return t ? t->t.events.size() : 0; }
uint32_t fs_trace_page_size(const fs_trace* t) { return t ? t->t.header.page_size : 0; }
uint64_t fs_trace_seed(const fs_trace* t) { return t ? t->t.header.seed : 0; }
const char* fs_trace_tag(const fs_trace* t) { return t ? t->t.header.generator_tag.c_str() : ""; }

uint64_t fs_trace_footprint_pages(const fs_trace* t) {
    if (!t) return 0;
    uint32_t shift = trace::page_shift(t->t.header.page_size);
    std::vector<uint64_t> pages;
    pages.reserve(t->t.events.size());
    for (const auto& e : t->t.events) pages.push_back(e.vaddr >> shift);
    std::sort(pages.begin(), pages.end());
    return std::unique(pages.begin(), pages.end()) - pages.begin();
}

void fs_trace_free(fs_trace* t) { delete t; }

/* ---------- offline training ---------- */

fs_status fs_train_opts_default(fs_train_opts* opts) {
    if (auto st = require(opts != nullptr, "opts must not be NULL"); st != FS_OK) return st;
    retnet::RetNetConfig mc;
    retnet::TrainHyper hp;
    *opts = {};
    opts->local_fraction = 0.5;
    opts->k = mc.k;
    opts->d_model = mc.d_model;
    opts->n_heads = mc.n_heads;
    opts->n_layers = mc.n_layers;
    opts->window = mc.t;
    opts->lookahead = 0;
    opts->epochs = hp.epochs;
    opts->batch_size = hp.batch_size;
    opts->lr = hp.lr;
    opts->wrap_period = 0;
    opts->seed = 1;
    return FS_OK;
}

fs_status fs_train(const fs_trace* t, const fs_train_opts* opts, const char* model_path,
                   const char* maps_path, fs_epoch_cb cb, void* user) {
    if (auto st = require(t != nullptr && opts != nullptr && model_path != nullptr &&
                                   maps_path != nullptr,
                               "trace, opts, and output paths must not be NULL"); st != FS_OK) return st;
    return guard([&] {
        retnet::RetNetConfig mc;
        mc.k = opts->k;
        mc.d_model = opts->d_model;
        mc.n_heads = opts->n_heads;
        mc.n_layers = opts->n_layers;
        mc.t = opts->window;
        if (opts->wrap_period != 0) mc.wrap_period = opts->wrap_period;
        mc.validate();

        sim::SimConfig sc;
        sc.local_fraction = opts->local_fraction;
        sc.capacity_pages = opts->capacity_pages;
        sc.validate();

        uint32_t shift = trace::page_shift(t->t.header.page_size);
        uint64_t footprint = fs_trace_footprint_pages(t);
        uint64_t capacity = sim::resolve_capacity(sc, footprint);
        auto misses = sim::derive_miss_stream(t->t.events, shift, capacity, sc);

        uint32_t s = opts->lookahead;
        if (s == 0) {
            size_t n = std::max<size_t>(2, misses.size() / 10);
            n = std::min(n, misses.size());
            double p95 = sc.fetch_latency_ns + 0.9 * sc.fetch_jitter_ns;
            s = sim::compute_lookahead(std::span(misses).first(n), p95);
        }

        std::vector<uint64_t> pages, pcs;
        pages.reserve(misses.size());
        pcs.reserve(misses.size());
        for (const auto& m : misses) {
            pages.push_back(m.page);
            pcs.push_back(m.pc);
        }
        auto maps = futuremap::build_oracle_maps(pages, mc.k, s);
        auto ds = futuremap::make_labels(pages, pcs, maps, s, mc.wrap_period);
        if (ds.examples.empty())
            raise(Errc::invalid_arg, "trace yields no trainable examples at this capacity");

        retnet::TrainHyper hp;
        hp.epochs = opts->epochs;
        hp.batch_size = opts->batch_size;
        if (opts->lr > 0) hp.lr = opts->lr;
        hp.seed = opts->seed;

        auto res = retnet::train(ds, mc, hp, [&](const retnet::EpochLog& el) {
            if (cb) cb(el.epoch, el.loss, el.accuracy, user);
        });
        retnet::save_model(res.params, model_path);
        maps.save(maps_path);
    });
}

/* ---------- models ---------- */

fs_status fs_model_load(const char* path, fs_model** out) {
    if (auto st = require(out != nullptr && path != nullptr, "out and path must not be NULL"); st != FS_OK) return st;
    return guard([&] { *out = new fs_model{retnet::load_model(path)}; });
}

uint64_t fs_model_param_count(const fs_model* m) {
    return m ? retnet::param_count(m->params.cfg) : 0;
}
uint32_t fs_model_k(const fs_model* m) { return m ? m->params.cfg.k : 0; }
uint32_t fs_model_lookahead(const fs_model* m) { return m ? m->params.trained_lookahead : 0; }
void fs_model_free(fs_model* m) { delete m; }

/* ---------- predictor ---------- */

fs_status fs_predictor_new(const fs_model* m, fs_predictor** out) {
    if (auto st = require(m != nullptr && out != nullptr, "model and out must not be NULL"); st != FS_OK) return st;
    return guard([&] {
        vocab::VocabConfig vc;
        vc.k = m->params.cfg.k;
        vc.h = m->params.cfg.t;
        vc.rotary_base = m->params.cfg.rotary_base;
        vc.wrap_period = m->params.cfg.wrap_period;
        vc.validate();
        *out = new fs_predictor{m, vocab::HistoryWindow(vc), retnet::make_state(m->params.cfg), 0};
    });
}

fs_status fs_predictor_step(fs_predictor* p, uint64_t page, uint64_t pc, double* logits) {
    if (auto st = require(p != nullptr && logits != nullptr,
                               "predictor and logits must not be NULL"); st != FS_OK) return st;
    return guard([&] {
        const auto& cfg = p->model->params.cfg;
        uint64_t pos = p->misses % cfg.wrap_period;
        if (p->window.push(page, pc)) p->state.reset();
        auto out = retnet::forward_recurrent(
            p->model->params, p->state,
            {vocab::addr_token(page, cfg.k), vocab::pc_token(pc, cfg.k)}, pos);
        ++p->misses;
        std::memcpy(logits, out.data(), out.size() * sizeof(double));
    });
}

void fs_predictor_reset(fs_predictor* p) {
    if (!p) return;
    p->window.clear();
    p->state.reset();
    p->misses = 0;
}

size_t fs_predictor_state_bytes(const fs_predictor* p) {
    return p ? p->state.bytes() + p->window.bytes() : 0;
}

void fs_predictor_free(fs_predictor* p) { delete p; }

/* ---------- future maps ---------- */

fs_status fs_maps_load(const char* path, fs_maps** out) {
    if (auto st = require(out != nullptr && path != nullptr, "out and path must not be NULL"); st != FS_OK) return st;
    return guard([&] { *out = new fs_maps{futuremap::FutureMapTable::load(path)}; });
}

uint32_t fs_maps_k(const fs_maps* m) { return m ? m->table.k() : 0; }
uint64_t fs_maps_owners(const fs_maps* m) { return m ? m->table.size() : 0; }

fs_status fs_maps_lookup(fs_maps* m, uint64_t owner, uint32_t ordinal, uint64_t* page_out) {
    if (auto st = require(m != nullptr && page_out != nullptr,
                               "maps and page_out must not be NULL"); st != FS_OK) return st;
    if (auto st = require(ordinal < m->table.k(), "ordinal out of range"); st != FS_OK) return st;
    const futuremap::FutureMap* map = m->table.find(owner);
    *page_out = map ? map->slots[ordinal] : futuremap::kEmptySlot;
    return FS_OK;
}

void fs_maps_free(fs_maps* m) { delete m; }

/* ---------- simulation ---------- */

fs_status fs_sim_opts_default(fs_sim_opts* opts) {
    if (auto st = require(opts != nullptr, "opts must not be NULL"); st != FS_OK) return st;
    sim::SimConfig c;
    *opts = {};
    opts->local_fraction = c.local_fraction;
    opts->fetch_latency_ns = c.fetch_latency_ns;
    opts->fetch_jitter_ns = c.fetch_jitter_ns;
    opts->evict_penalty_ns = c.evict_penalty_ns;
    opts->local_access_ns = c.local_access_ns;
    opts->predict_cost_ns = c.predict_cost_ns;
    opts->lookahead = c.lookahead_s;
    opts->batch = c.batch_f;
    opts->max_inflight = c.max_inflight;
    opts->swap_cache_max = c.swap_cache_max;
    opts->seq_window = c.seq_window;
    opts->warmup_misses = c.warmup_misses;
    opts->seed = c.seed;
    return FS_OK;
}

fs_status fs_simulate(const fs_trace* t, const char* policy, const char* stage,
                      const fs_sim_opts* opts, const fs_model* model, const fs_maps* maps,
                      const char* miss_log_path, char** report_json_out) {
    if (auto st = require(t != nullptr && policy != nullptr && opts != nullptr &&
                                   report_json_out != nullptr,
                               "trace, policy, opts, and report out must not be NULL"); st != FS_OK) return st;
    return guard([&] {
        sim::SimConfig c;
        c.local_fraction = opts->local_fraction;
        c.capacity_pages = opts->capacity_pages;
        c.fetch_latency_ns = opts->fetch_latency_ns;
        c.fetch_jitter_ns = opts->fetch_jitter_ns;
        c.evict_penalty_ns = opts->evict_penalty_ns;
        c.local_access_ns = opts->local_access_ns;
        c.predict_cost_ns = opts->predict_cost_ns;
        c.lookahead_s = opts->lookahead;
        c.batch_f = opts->batch;
        c.max_inflight = opts->max_inflight;
        c.swap_cache_max = opts->swap_cache_max;
        c.seq_window = opts->seq_window;
        c.warmup_misses = opts->warmup_misses;
        c.fill_empty_only = opts->fill_empty_only != 0;
        c.count_skips_against_budget = opts->count_skips_against_budget != 0;
        c.partial_hits_as_faults = opts->partial_hits_as_faults != 0;
        c.seed = opts->seed;

        sim::Policy pol = sim::parse_policy(policy);
        sim::Stage stg = stage ? sim::parse_stage(stage) : sim::Stage::lookahead_batched;

        std::vector<sim::MissEvent> miss_log;
        auto report = sim::simulate(t->t.events, t->t.header, pol, stg, c,
                                    model ? &model->params : nullptr,
                                    maps ? &maps->table : nullptr,
                                    miss_log_path ? &miss_log : nullptr);

        if (miss_log_path) {
            uint32_t shift = trace::page_shift(t->t.header.page_size);
            trace::TraceHeader h;
            h.page_size = t->t.header.page_size;
            h.generator_tag = "miss_log";
            h.seed = c.seed;
            std::vector<trace::AccessEvent> events;
            events.reserve(miss_log.size());
            for (const auto& m : miss_log)
                events.push_back({m.page << shift, m.pc, m.index});
            trace::write_trace(miss_log_path, h, events);
        }

        std::string text = report.dump(2);
        char* buf = new char[text.size() + 1];
        std::memcpy(buf, text.c_str(), text.size() + 1);
        *report_json_out = buf;
    });
}

} // extern "C"
