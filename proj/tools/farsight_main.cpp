#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "farsight.h"

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

// Exit codes: 0 success, 2 usage/invalid flags, 3 I/O or file format,
// 4 artifact mismatch, 5 internal error.
int exit_code(fs_status st) {
    switch (st) {
    case FS_OK: return 0;
    case FS_EINVAL: return 2;
    case FS_EIO:
    case FS_EFORMAT: return 3;
    case FS_EMISMATCH: return 4;
    default: return 5;
    }
}

void check(fs_status st) {
    if (st == FS_OK) return;
    std::fprintf(stderr, "error: %s\n", fs_last_error());
    std::exit(exit_code(st));
}

[[noreturn]] void die_usage(const std::string& msg) {
    std::fprintf(stderr, "error: %s\n", msg.c_str());
    std::exit(2);
}

[[noreturn]] void die_io(const std::string& msg) {
    std::fprintf(stderr, "error: %s\n", msg.c_str());
    std::exit(3);
}

void atomic_write(const std::string& path, const std::string& text) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        os << text;
        if (!os) die_io("write failed: " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) die_io("rename failed: " + tmp + " -> " + path);
}

struct TraceHandle {
    fs_trace* t = nullptr;
    ~TraceHandle() { fs_trace_free(t); }
};

struct ModelHandle {
    fs_model* m = nullptr;
    ~ModelHandle() { fs_model_free(m); }
};

struct MapsHandle {
    fs_maps* m = nullptr;
    ~MapsHandle() { fs_maps_free(m); }
};

std::string format_frac(double f) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", f);
    return buf;
}

// Re-derives precision/recall/F1 from the raw counters and cross-checks the
// report's metrics block. Independent of the simulator's own arithmetic.
void check_report_metrics(const Json& report) {
    bool partial_as_faults = report.at("config").at("partial_hits_as_faults").get<bool>();
    auto verify = [&](const Json& counters, const Json& metrics, bool flip) {
        uint64_t tp_full = counters.at("tp_full").get<uint64_t>();
        uint64_t tp_partial = counters.at("tp_partial").get<uint64_t>();
        uint64_t issued = counters.at("issued").get<uint64_t>();
        uint64_t faults = counters.at("faults").get<uint64_t>();
        uint64_t tp = flip ? tp_full : tp_full + tp_partial;
        uint64_t faults_eff = flip ? faults + tp_partial : faults;
        double precision = issued ? double(tp) / double(issued) : 0.0;
        double recall = (faults_eff + tp) ? double(tp) / double(faults_eff + tp) : 0.0;
        double f1 = (precision + recall) > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
        auto close = [](double a, double b) { return std::abs(a - b) <= 1e-6; };
        if (!close(precision, metrics.at("precision").get<double>()) ||
            !close(recall, metrics.at("recall").get<double>()) ||
            !close(f1, metrics.at("f1").get<double>()) ||
            metrics.at("tp").get<uint64_t>() != tp ||
            (metrics.at("precision_defined").get<bool>() != (issued != 0))) {
            std::fprintf(stderr, "error: report metrics disagree with counters\n");
            std::exit(5);
        }
    };
    verify(report.at("counters"), report.at("metrics"), partial_as_faults);
    verify(report.at("counters"), report.at("metrics_strict"), !partial_as_faults);
    if (report.contains("post_warmup"))
        verify(report.at("post_warmup").at("counters"), report.at("post_warmup").at("metrics"),
               partial_as_faults);
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        q += c;
        if (c == '"') q += '"';
    }
    q += "\"";
    return q;
}

struct GenFlags {
    // linked-list
    uint64_t nodes = 100000;
    uint64_t stride = 4096;
    uint64_t shuffle_seed = 1;
    uint32_t passes = 3;
    // graph
    uint64_t gnodes = 20000;
    double avg_degree = 8.0;
    std::string algo = "bfs";
    uint32_t iterations = 1;
    // btree
    uint64_t keys = 100000;
    uint32_t fanout = 64;
    uint64_t lookups = 200000;
    // regular
    std::string kind = "sequential";
    uint64_t span = 64ull << 20;
    uint64_t rstride = 64;
    // shared
    uint64_t seed = 1;
    uint32_t page_size = 4096;
    std::string output;
    std::string csv;
    uint64_t csv_limit = 0;
};

void finish_gen(fs_trace* t, const GenFlags& g) {
    TraceHandle th{t};
    check(fs_trace_save(t, g.output.c_str()));
    if (!g.csv.empty()) check(fs_trace_export_csv(t, g.csv.c_str(), g.csv_limit));
    std::printf("wrote %s: %" PRIu64 " events, %" PRIu64 " pages, tag %s\n", g.output.c_str(),
                fs_trace_events(t), fs_trace_footprint_pages(t), fs_trace_tag(t));
}

struct SimFlags {
    std::string trace;
    std::string outdir;
    std::vector<std::string> policies{"farsight"};
    std::vector<double> fractions{0.5};
    std::vector<uint32_t> s_list{0};
    std::vector<uint32_t> f_list{2};
    std::vector<std::string> models;
    std::vector<std::string> maps;
    std::string stage = "lookahead_batched";
    uint64_t capacity_pages = 0;
    double fetch = 2000.0, jitter = 0.0, evict = 4000.0, local = 100.0, predict = 600.0;
    uint32_t max_inflight = 16, swap_cache = 64, seq_window = 8;
    uint64_t warmup = 0;
    bool fill_empty_only = false, count_skips = false, partial_as_faults = false;
    bool miss_log = false;
    uint64_t seed = 1;
};

void fill_opts(const SimFlags& sf, double frac, uint32_t s, uint32_t f, fs_sim_opts* o) {
    check(fs_sim_opts_default(o));
    o->local_fraction = frac;
    o->capacity_pages = sf.capacity_pages;
    o->fetch_latency_ns = sf.fetch;
    o->fetch_jitter_ns = sf.jitter;
    o->evict_penalty_ns = sf.evict;
    o->local_access_ns = sf.local;
    o->predict_cost_ns = sf.predict;
    o->lookahead = s;
    o->batch = f;
    o->max_inflight = sf.max_inflight;
    o->swap_cache_max = sf.swap_cache;
    o->seq_window = sf.seq_window;
    o->warmup_misses = sf.warmup;
    o->fill_empty_only = sf.fill_empty_only;
    o->count_skips_against_budget = sf.count_skips;
    o->partial_hits_as_faults = sf.partial_as_faults;
    o->seed = sf.seed;
}

// Runs one simulate() call, validates the emitted report against the
// independent metrics checker, and writes it atomically.
Json run_one(fs_trace* trace, const std::string& policy, const char* stage,
             const fs_sim_opts& opts, fs_model* model, fs_maps* maps,
             const std::string& report_path, const std::string& misslog_path) {
    char* text = nullptr;
    check(fs_simulate(trace, policy.c_str(), stage, &opts, model, maps,
                      misslog_path.empty() ? nullptr : misslog_path.c_str(), &text));
    std::string body(text);
    fs_string_free(text);
    Json report = Json::parse(body);
    check_report_metrics(report);
    atomic_write(report_path, body + "\n");
    return report;
}

int cmd_simulate(const SimFlags& sf) {
    if (sf.trace.empty() || sf.outdir.empty()) die_usage("simulate needs --trace and --output");
    fs::create_directories(sf.outdir);

    TraceHandle trace;
    check(fs_trace_load(sf.trace.c_str(), &trace.t));

    if (sf.maps.size() > sf.models.size()) die_usage("--maps given without a matching --model");

    std::vector<std::unique_ptr<ModelHandle>> models;
    std::vector<std::unique_ptr<MapsHandle>> maps;
    for (size_t i = 0; i < sf.models.size(); ++i) {
        auto mh = std::make_unique<ModelHandle>();
        check(fs_model_load(sf.models[i].c_str(), &mh->m));
        models.push_back(std::move(mh));
        auto ph = std::make_unique<MapsHandle>();
        if (i < sf.maps.size()) check(fs_maps_load(sf.maps[i].c_str(), &ph->m));
        maps.push_back(std::move(ph));
    }

    bool wants_model = false;
    for (const auto& p : sf.policies) wants_model |= p == "farsight";
    if (wants_model && models.empty())
        die_usage("policy farsight requires --model (and usually --maps)");

    Json spec;
    spec["command"] = "simulate";
    spec["trace"] = sf.trace;
    spec["policies"] = sf.policies;
    spec["local_fractions"] = sf.fractions;
    spec["lookahead_list"] = sf.s_list;
    spec["batch_list"] = sf.f_list;
    spec["models"] = sf.models;
    spec["maps"] = sf.maps;
    spec["stage"] = sf.stage;
    spec["seed"] = sf.seed;
    spec["warmup_misses"] = sf.warmup;
    atomic_write((fs::path(sf.outdir) / "experiment_spec.json").string(), spec.dump(2) + "\n");

    int written = 0;
    for (const auto& policy : sf.policies) {
        size_t model_combos = policy == "farsight" ? models.size() : 1;
        size_t s_combos = policy == "farsight" || policy == "oracle" ? sf.s_list.size() : 1;
        size_t f_combos = policy == "farsight" ? sf.f_list.size() : 1;
        for (size_t mi = 0; mi < model_combos; ++mi)
            for (double frac : sf.fractions)
                for (size_t si = 0; si < s_combos; ++si)
                    for (size_t fi = 0; fi < f_combos; ++fi) {
                        fs_sim_opts opts;
                        fill_opts(sf, frac, sf.s_list[si], sf.f_list[fi], &opts);
                        fs_model* model = nullptr;
                        fs_maps* mp = nullptr;
                        std::string name = "report_" + policy;
                        if (policy == "farsight") {
                            model = models[mi]->m;
                            mp = maps[mi]->m;
                            if (sf.stage != "lookahead_batched") name += "_" + sf.stage;
                            name += "_k" + std::to_string(fs_model_k(model));
                        }
                        name += "_lf" + format_frac(frac);
                        if (s_combos > 1) name += "_s" + std::to_string(sf.s_list[si]);
                        if (f_combos > 1) name += "_f" + std::to_string(sf.f_list[fi]);
                        std::string base = (fs::path(sf.outdir) / name).string();
                        run_one(trace.t, policy, policy == "farsight" ? sf.stage.c_str() : nullptr,
                                opts, model, mp, base + ".json",
                                sf.miss_log ? base + ".misslog" : "");
                        ++written;
                    }
    }
    std::printf("wrote %d report(s) to %s\n", written, sf.outdir.c_str());
    return 0;
}

int cmd_ablate(const SimFlags& sf, const std::string& model_path, const std::string& maps_path) {
    if (sf.trace.empty() || sf.outdir.empty() || model_path.empty())
        die_usage("ablate needs --trace, --model, and --output");
    fs::create_directories(sf.outdir);

    TraceHandle trace;
    check(fs_trace_load(sf.trace.c_str(), &trace.t));
    ModelHandle model;
    check(fs_model_load(model_path.c_str(), &model.m));
    MapsHandle maps;
    if (!maps_path.empty()) check(fs_maps_load(maps_path.c_str(), &maps.m));

    Json spec;
    spec["command"] = "ablate";
    spec["trace"] = sf.trace;
    spec["model"] = model_path;
    spec["maps"] = maps_path;
    spec["local_fraction"] = sf.fractions.front();
    spec["seed"] = sf.seed;
    atomic_write((fs::path(sf.outdir) / "experiment_spec.json").string(), spec.dump(2) + "\n");

    const char* stages[] = {"none", "sync_all", "on_miss", "async", "lookahead_batched"};
    std::string csv = "stage,total_time_ns,faults,recall\r\n";
    for (const char* stage : stages) {
        fs_sim_opts opts;
        fill_opts(sf, sf.fractions.front(), sf.s_list.front(), sf.f_list.front(), &opts);
        std::string base = (fs::path(sf.outdir) / ("ablate_" + std::string(stage))).string();
        Json rep = run_one(trace.t, "farsight", stage, opts, model.m, maps.m, base + ".json", "");
        char row[160];
        std::snprintf(row, sizeof row, "%s,%.6f,%" PRIu64 ",%.6f\r\n", stage,
                      rep.at("time_ns").at("total").get<double>(),
                      rep.at("counters").at("faults").get<uint64_t>(),
                      rep.at("metrics").at("recall").get<double>());
        csv += row;
    }
    atomic_write((fs::path(sf.outdir) / "ablation.csv").string(), csv);
    std::printf("wrote 5 stage reports and ablation.csv to %s\n", sf.outdir.c_str());
    return 0;
}

int cmd_compare(const std::vector<std::string>& inputs, const std::string& output,
                const std::string& baseline_path) {
    if (inputs.empty() || output.empty()) die_usage("compare needs report files and --output");
    std::vector<Json> reports;
    for (const auto& arg : inputs) {
        fs::path p(arg);
        std::vector<fs::path> files;
        if (fs::is_directory(p)) {
            for (const auto& ent : fs::directory_iterator(p))
                if (ent.path().extension() == ".json" &&
                    ent.path().filename().string().rfind("report_", 0) == 0)
                    files.push_back(ent.path());
            std::sort(files.begin(), files.end());
        } else {
            files.push_back(p);
        }
        for (const auto& f : files) {
            std::ifstream is(f);
            if (!is) die_io("cannot read " + f.string());
            Json j = Json::parse(is, nullptr, false);
            if (j.is_discarded()) die_io(f.string() + " is not a report JSON");
            reports.push_back(std::move(j));
        }
    }
    if (reports.empty()) die_usage("no reports found");

    double baseline_total = 0.0;
    if (!baseline_path.empty()) {
        std::ifstream is(baseline_path);
        if (!is) die_io("cannot read " + baseline_path);
        Json j = Json::parse(is, nullptr, false);
        if (j.is_discarded()) die_io(baseline_path + " is not a report JSON");
        baseline_total = j.at("time_ns").at("total").get<double>();
    } else {
        // Full-capacity run: every page resident, the natural 1.0 anchor.
        const Json* best = nullptr;
        for (const auto& r : reports) {
            const auto& cfg = r.at("config");
            if (cfg.at("capacity_pages").get<uint64_t>() != cfg.at("footprint_pages").get<uint64_t>())
                continue;
            if (!best || (r.at("run").at("policy").get<std::string>() == "none" &&
                          best->at("run").at("policy").get<std::string>() != "none"))
                best = &r;
        }
        if (!best)
            die_usage("no full-capacity report to normalize against; pass --baseline");
        baseline_total = best->at("time_ns").at("total").get<double>();
    }
    if (!(baseline_total > 0)) die_usage("baseline total time must be positive");

    // rows = local fractions, columns = policies
    std::map<double, std::map<std::string, double>> table;
    std::vector<std::string> col_order;
    auto col_rank = [](const std::string& p) {
        const char* order[] = {"none", "sequential", "stride", "oracle", "farsight"};
        for (size_t i = 0; i < std::size(order); ++i)
            if (p == order[i]) return i;
        return std::size(order);
    };
    for (const auto& r : reports) {
        std::string policy = r.at("run").at("policy").get<std::string>();
        double frac = r.at("config").at("local_fraction").get<double>();
        double total = r.at("time_ns").at("total").get<double>();
        if (table[frac].count(policy))
            die_usage("duplicate report for policy " + policy + " at local_fraction " +
                      format_frac(frac));
        table[frac][policy] = total / baseline_total;
        if (std::find(col_order.begin(), col_order.end(), policy) == col_order.end())
            col_order.push_back(policy);
    }
    std::sort(col_order.begin(), col_order.end(), [&](const auto& a, const auto& b) {
        auto ra = col_rank(a), rb = col_rank(b);
        return ra != rb ? ra < rb : a < b;
    });

    std::string csv = "local_fraction";
    for (const auto& c : col_order) csv += "," + csv_field(c);
    csv += "\r\n";
    for (const auto& [frac, row] : table) {
        csv += format_frac(frac);
        for (const auto& c : col_order) {
            csv += ",";
            auto it = row.find(c);
            if (it != row.end()) {
                char buf[32];
                std::snprintf(buf, sizeof buf, "%.6f", it->second);
                csv += buf;
            }
        }
        csv += "\r\n";
    }
    atomic_write(output, csv);
    std::printf("wrote %s (%zu rows x %zu policies)\n", output.c_str(), table.size(),
                col_order.size());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"far-memory prefetching laboratory"};
    app.require_subcommand(1);
    app.set_config("--config", "", "read defaults from an INI/TOML file (flags override)");

    // ---- gen ----
    GenFlags g;
    auto* gen = app.add_subcommand("gen", "generate a synthetic access trace");
    gen->require_subcommand(1);

    auto add_shared = [&](CLI::App* sub) {
        sub->add_option("-o,--output", g.output, "trace file to write")->required();
        sub->add_option("--page-size", g.page_size, "page size in bytes");
        sub->add_option("--csv", g.csv, "also export a CSV listing");
        sub->add_option("--csv-limit", g.csv_limit, "max CSV rows (0 = all)");
    };

    auto* gll = gen->add_subcommand("linked-list", "pointer chase over a shuffled list");
    gll->add_option("--nodes", g.nodes, "list length");
    gll->add_option("--stride", g.stride, "bytes between node slots");
    gll->add_option("--shuffle-seed", g.shuffle_seed, "placement shuffle seed (0 = in order)");
    gll->add_option("--passes", g.passes, "full traversals");
    add_shared(gll);

    auto* ggr = gen->add_subcommand("graph", "graph traversal over a random graph");
    ggr->add_option("--nodes", g.gnodes, "node count");
    ggr->add_option("--avg-degree", g.avg_degree, "average out-degree");
    ggr->add_option("--algo", g.algo, "bfs | pagerank | sssp");
    ggr->add_option("--iterations", g.iterations, "sweeps (pagerank/sssp)");
    ggr->add_option("--seed", g.seed, "edge sampling seed");
    add_shared(ggr);

    auto* gbt = gen->add_subcommand("btree", "random lookups in a fixed-fanout B-tree");
    gbt->add_option("--keys", g.keys, "key count");
    gbt->add_option("--fanout", g.fanout, "node fanout");
    gbt->add_option("--lookups", g.lookups, "number of lookups");
    gbt->add_option("--seed", g.seed, "lookup key seed");
    add_shared(gbt);

    auto* grg = gen->add_subcommand("regular", "sequential or strided scan");
    grg->add_option("--kind", g.kind, "sequential | strided");
    grg->add_option("--span", g.span, "bytes covered");
    grg->add_option("--stride", g.rstride, "bytes between accesses");
    grg->add_option("--seed", g.seed, "recorded in the header");
    add_shared(grg);

    // ---- train ----
    struct {
        std::string trace, model, maps, log;
        fs_train_opts opts;
    } tr;
    fs_train_opts_default(&tr.opts);
    auto* train = app.add_subcommand("train", "train a model + oracle maps from a trace");
    train->add_option("--trace", tr.trace, "input trace")->required();
    train->add_option("--model", tr.model, "model file to write")->required();
    train->add_option("--maps", tr.maps, "future-map file to write")->required();
    train->add_option("--log", tr.log, "training log JSON to write");
    train->add_option("--local-fraction", tr.opts.local_fraction, "capacity for the miss stream");
    train->add_option("--capacity-pages", tr.opts.capacity_pages, "explicit capacity override");
    train->add_option("--k", tr.opts.k, "vocabulary size / future-map slots");
    train->add_option("--d-model", tr.opts.d_model, "embedding width");
    train->add_option("--heads", tr.opts.n_heads, "retention heads");
    train->add_option("--layers", tr.opts.n_layers, "retention layers");
    train->add_option("--window", tr.opts.window, "history window length");
    train->add_option("--lookahead", tr.opts.lookahead, "look-ahead distance (0 = profile)");
    train->add_option("--epochs", tr.opts.epochs, "training epochs");
    train->add_option("--batch", tr.opts.batch_size, "mini-batch size");
    train->add_option("--lr", tr.opts.lr, "learning rate");
    train->add_option("--wrap-period", tr.opts.wrap_period, "position wrap period (0 = default)");
    train->add_option("--seed", tr.opts.seed, "training seed");

    // ---- simulate ----
    SimFlags sf;
    auto* sim = app.add_subcommand("simulate", "run the cache/latency simulator sweep");
    sim->add_option("--trace", sf.trace, "input trace")->required();
    sim->add_option("-o,--output", sf.outdir, "report directory")->required();
    sim->add_option("--policy", sf.policies, "none|sequential|stride|oracle|farsight (repeatable)");
    sim->add_option("--local-fraction", sf.fractions, "local memory fractions (repeatable)");
    sim->add_option("--capacity-pages", sf.capacity_pages, "explicit capacity override");
    sim->add_option("--model", sf.models, "model file (repeatable for K sweeps)");
    sim->add_option("--maps", sf.maps, "future-map file matching each --model");
    sim->add_option("--stage", sf.stage, "farsight stage (ablation rung)");
    sim->add_option("--lookahead", sf.s_list, "look-ahead distance s, 0=auto (repeatable)");
    sim->add_option("--batch", sf.f_list, "prefetch batch factor f (repeatable)");
    sim->add_option("--fetch-ns", sf.fetch, "remote fetch latency");
    sim->add_option("--jitter-ns", sf.jitter, "uniform fetch jitter half-width");
    sim->add_option("--evict-ns", sf.evict, "on-demand eviction penalty");
    sim->add_option("--local-ns", sf.local, "local access time");
    sim->add_option("--predict-ns", sf.predict, "model prediction cost");
    sim->add_option("--max-inflight", sf.max_inflight, "in-flight prefetch cap (0 = unlimited)");
    sim->add_option("--swap-cache", sf.swap_cache, "staged-page cap (0 = unlimited)");
    sim->add_option("--seq-window", sf.seq_window, "sequential readahead span");
    sim->add_option("--warmup", sf.warmup, "misses excluded from post-warmup metrics");
    sim->add_flag("--fill-empty-only", sf.fill_empty_only, "runtime fills never overwrite");
    sim->add_flag("--count-skips", sf.count_skips, "skipped candidates consume batch budget");
    sim->add_flag("--partial-as-faults", sf.partial_as_faults,
                  "count late prefetch arrivals as faults in headline metrics");
    sim->add_flag("--miss-log", sf.miss_log, "write each run's miss events in trace framing");
    sim->add_option("--seed", sf.seed, "jitter seed");

    // ---- ablate ----
    SimFlags af;
    std::string ab_model, ab_maps;
    auto* ablate = app.add_subcommand("ablate", "run the five-stage prefetching ablation");
    ablate->add_option("--trace", af.trace, "input trace")->required();
    ablate->add_option("-o,--output", af.outdir, "report directory")->required();
    ablate->add_option("--model", ab_model, "model file")->required();
    ablate->add_option("--maps", ab_maps, "future-map file");
    ablate->add_option("--local-fraction", af.fractions, "local memory fraction");
    ablate->add_option("--capacity-pages", af.capacity_pages, "explicit capacity override");
    ablate->add_option("--lookahead", af.s_list, "look-ahead distance for the final stage");
    ablate->add_option("--batch", af.f_list, "batch factor for the final stage");
    ablate->add_option("--fetch-ns", af.fetch, "remote fetch latency");
    ablate->add_option("--evict-ns", af.evict, "on-demand eviction penalty");
    ablate->add_option("--local-ns", af.local, "local access time");
    ablate->add_option("--predict-ns", af.predict, "model prediction cost");
    ablate->add_option("--max-inflight", af.max_inflight, "in-flight prefetch cap");
    ablate->add_option("--swap-cache", af.swap_cache, "staged-page cap");
    ablate->add_option("--warmup", af.warmup, "misses excluded from post-warmup metrics");
    ablate->add_option("--seed", af.seed, "jitter seed");

    // ---- compare ----
    std::vector<std::string> cmp_inputs;
    std::string cmp_output, cmp_baseline;
    auto* compare = app.add_subcommand("compare", "normalize report times into a CSV table");
    compare->add_option("reports", cmp_inputs, "report files or directories")->required();
    compare->add_option("-o,--output", cmp_output, "CSV file to write")->required();
    compare->add_option("--baseline", cmp_baseline, "explicit baseline report");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    if (gen->parsed()) {
        fs_trace* t = nullptr;
        if (gll->parsed()) {
            check(fs_trace_gen_linked_list(g.nodes, g.stride, g.shuffle_seed, g.passes,
                                           g.page_size, &t));
        } else if (ggr->parsed()) {
            check(fs_trace_gen_graph(g.gnodes, g.avg_degree, g.algo.c_str(), g.seed, g.iterations,
                                     g.page_size, &t));
        } else if (gbt->parsed()) {
            check(fs_trace_gen_btree(g.keys, g.fanout, g.lookups, g.seed, g.page_size, &t));
        } else {
            check(fs_trace_gen_regular(g.kind.c_str(), g.span, g.rstride, g.seed, g.page_size, &t));
        }
        finish_gen(t, g);
        return 0;
    }

    if (train->parsed()) {
        TraceHandle trace;
        check(fs_trace_load(tr.trace.c_str(), &trace.t));
        // Refuse to overwrite maps built for a different k.
        if (fs::exists(tr.maps)) {
            fs_maps* prev = nullptr;
            fs_status st = fs_maps_load(tr.maps.c_str(), &prev);
            if (st == FS_OK) {
                uint32_t prev_k = fs_maps_k(prev);
                fs_maps_free(prev);
                if (prev_k != tr.opts.k) {
                    std::fprintf(stderr,
                                 "error: %s already holds maps with k=%u, requested k=%u\n",
                                 tr.maps.c_str(), prev_k, tr.opts.k);
                    return 4;
                }
            } else if (st == FS_EFORMAT) {
                std::fprintf(stderr, "error: %s exists and is not a future-map file\n",
                             tr.maps.c_str());
                return 3;
            }
        }
        Json log = Json::array();
        auto cb = [](uint32_t epoch, double loss, double accuracy, void* user) {
            auto* lj = static_cast<Json*>(user);
            Json row;
            row["epoch"] = epoch;
            row["loss"] = loss;
            row["accuracy"] = accuracy;
            lj->push_back(row);
            std::printf("epoch %u: loss %.6f, ordinal accuracy %.4f\n", epoch, loss, accuracy);
        };
        check(fs_train(trace.t, &tr.opts, tr.model.c_str(), tr.maps.c_str(), cb, &log));
        ModelHandle m;
        check(fs_model_load(tr.model.c_str(), &m.m));
        std::printf("model: %" PRIu64 " parameters, k=%u, lookahead=%u\n",
                    fs_model_param_count(m.m), fs_model_k(m.m), fs_model_lookahead(m.m));
        if (!tr.log.empty()) {
            Json full;
            full["trace"] = tr.trace;
            full["param_count"] = fs_model_param_count(m.m);
            full["k"] = fs_model_k(m.m);
            full["lookahead"] = fs_model_lookahead(m.m);
            full["epochs"] = log;
            atomic_write(tr.log, full.dump(2) + "\n");
        }
        return 0;
    }

    if (sim->parsed()) return cmd_simulate(sf);
    if (ablate->parsed()) return cmd_ablate(af, ab_model, ab_maps);
    if (compare->parsed()) return cmd_compare(cmp_inputs, cmp_output, cmp_baseline);
    return 2;
}
