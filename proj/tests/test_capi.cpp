#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "farsight.h"
#include "json.hpp"

#include "futuremap.hpp"
#include "helpers.hpp"
#include "retnet.hpp"
#include "simulator.hpp"
#include "trace.hpp"
#include "vocab.hpp"

using Json = nlohmann::ordered_json;
namespace fm = farsight::futuremap;
namespace rn = farsight::retnet;
namespace sm = farsight::sim;
namespace tr = farsight::trace;
namespace vc = farsight::vocab;

namespace {

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

// One tiny trained artifact set shared by the model/maps/simulate cases.
struct Artifacts {
    TempDir dir;
    std::string model_path = dir.path("model.fmnn");
    std::string maps_path = dir.path("maps.fmfm");
    fs_train_opts opts{};
    TraceHandle trace;
    std::vector<uint32_t> epochs_seen;

    Artifacts() {
        REQUIRE(fs_trace_gen_linked_list(64, 4096, 7, 2, 4096, &trace.t) == FS_OK);
        REQUIRE(fs_train_opts_default(&opts) == FS_OK);
        opts.k = 16;
        opts.d_model = 8;
        opts.n_heads = 2;
        opts.n_layers = 1;
        opts.window = 8;
        opts.lookahead = 1;
        opts.epochs = 3;
        opts.batch_size = 16;
        opts.lr = 0.01;
        opts.seed = 5;
        auto cb = [](uint32_t epoch, double loss, double accuracy, void* user) {
            auto* self = static_cast<Artifacts*>(user);
            self->epochs_seen.push_back(epoch);
            REQUIRE(std::isfinite(loss));
            REQUIRE(accuracy >= 0.0);
            REQUIRE(accuracy <= 1.0);
        };
        REQUIRE(fs_train(trace.t, &opts, model_path.c_str(), maps_path.c_str(), cb, this) ==
                FS_OK);
    }
};

Artifacts& artifacts() {
    static Artifacts a;
    return a;
}

// The same miss stream fs_train derives internally, rebuilt via the core.
std::vector<sm::MissEvent> reference_misses() {
    auto gen = tr::gen_linked_list(64, 4096, 7, 2, 4096);
    sm::SimConfig sc;
    sc.local_fraction = 0.5;
    uint64_t cap = sm::resolve_capacity(sc, 64);
    return sm::derive_miss_stream(gen.events, 12, cap, sc);
}

} // namespace

TEST_CASE("default option blocks mirror the library defaults") {
    fs_train_opts t{};
    REQUIRE(fs_train_opts_default(&t) == FS_OK);
    CHECK(t.k == 64);
    CHECK(t.d_model == 8);
    CHECK(t.window == 64);
    CHECK(t.epochs > 0);
    CHECK(t.lr > 0);
    CHECK(t.local_fraction == 0.5);

    fs_sim_opts s{};
    REQUIRE(fs_sim_opts_default(&s) == FS_OK);
    CHECK(s.fetch_latency_ns == 2000.0);
    CHECK(s.evict_penalty_ns == 4000.0);
    CHECK(s.local_access_ns == 100.0);
    CHECK(s.predict_cost_ns == 600.0);
    CHECK(s.batch == 2);
    CHECK(s.seq_window == 8);

    CHECK(fs_train_opts_default(nullptr) == FS_EINVAL);
    CHECK(fs_sim_opts_default(nullptr) == FS_EINVAL);
}

TEST_CASE("generators expose trace properties through the handle") {
    TraceHandle list;
    REQUIRE(fs_trace_gen_linked_list(64, 4096, 7, 2, 4096, &list.t) == FS_OK);
    CHECK(fs_trace_events(list.t) == 128); // 64 nodes, 2 passes
    CHECK(fs_trace_page_size(list.t) == 4096);
    CHECK(fs_trace_footprint_pages(list.t) == 64); // one node per page
    CHECK(fs_trace_seed(list.t) == 7);
    CHECK(std::string(fs_trace_tag(list.t)) == "linked_list");

    TraceHandle seq;
    REQUIRE(fs_trace_gen_regular("sequential", 16 * 4096, 64, 3, 4096, &seq.t) == FS_OK);
    CHECK(fs_trace_footprint_pages(seq.t) == 16);
    CHECK(std::string(fs_trace_tag(seq.t)) == "seq");

    TraceHandle graph;
    REQUIRE(fs_trace_gen_graph(200, 4.0, "bfs", 11, 1, 4096, &graph.t) == FS_OK);
    CHECK(fs_trace_events(graph.t) > 0);
    CHECK(fs_trace_footprint_pages(graph.t) > 0);
    CHECK(std::string(fs_trace_tag(graph.t)) == "graph_bfs");

    TraceHandle btree;
    REQUIRE(fs_trace_gen_btree(5000, 16, 300, 13, 4096, &btree.t) == FS_OK);
    CHECK(fs_trace_events(btree.t) > 300); // several levels per lookup
    CHECK(std::string(fs_trace_tag(btree.t)) == "btree");

    fs_trace* out = nullptr;
    CHECK(fs_trace_gen_graph(100, 4.0, "dijkstra", 1, 1, 4096, &out) == FS_EINVAL);
    CHECK(std::string(fs_last_error()).size() > 0);
    CHECK(fs_trace_gen_linked_list(64, 4096, 7, 2, 4096, nullptr) == FS_EINVAL);
}

TEST_CASE("trace files round-trip and export") {
    TempDir dir;
    TraceHandle a;
    REQUIRE(fs_trace_gen_btree(2000, 8, 200, 17, 4096, &a.t) == FS_OK);
    const std::string path = dir.path("trace.fmtr");
    REQUIRE(fs_trace_save(a.t, path.c_str()) == FS_OK);

    TraceHandle b;
    REQUIRE(fs_trace_load(path.c_str(), &b.t) == FS_OK);
    CHECK(fs_trace_events(b.t) == fs_trace_events(a.t));
    CHECK(fs_trace_page_size(b.t) == fs_trace_page_size(a.t));
    CHECK(fs_trace_seed(b.t) == fs_trace_seed(a.t));
    CHECK(std::string(fs_trace_tag(b.t)) == fs_trace_tag(a.t));
    CHECK(fs_trace_footprint_pages(b.t) == fs_trace_footprint_pages(a.t));

    const std::string csv = dir.path("head.csv");
    REQUIRE(fs_trace_export_csv(a.t, csv.c_str(), 5) == FS_OK);
    std::ifstream is(csv);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(is, line)) lines.push_back(line);
    REQUIRE(lines.size() == 6);
    CHECK(lines[0] == "vaddr,pc,tick");
    CHECK(lines[1].find(',') != std::string::npos);

    fs_trace* missing = nullptr;
    CHECK(fs_trace_load(dir.path("nope.fmtr").c_str(), &missing) == FS_EIO);
    CHECK(fs_trace_load(csv.c_str(), &missing) == FS_EFORMAT); // wrong magic
}

TEST_CASE("training writes a loadable model with the advertised shape") {
    auto& art = artifacts();
    REQUIRE(art.epochs_seen.size() == 3);
    CHECK(art.epochs_seen[0] == 1);
    CHECK(art.epochs_seen[2] == 3);

    ModelHandle model;
    REQUIRE(fs_model_load(art.model_path.c_str(), &model.m) == FS_OK);
    CHECK(fs_model_k(model.m) == 16);
    CHECK(fs_model_lookahead(model.m) == 1);
    // 2kd embeddings + L(4d^2+d) + head dk+k with k=16, d=8, L=1
    CHECK(fs_model_param_count(model.m) == 2 * 16 * 8 + (4 * 64 + 8) + (8 * 16 + 16));
}

TEST_CASE("trained maps match oracle maps built directly from the miss stream") {
    auto& art = artifacts();
    auto misses = reference_misses();
    std::vector<uint64_t> pages;
    for (const auto& m : misses) pages.push_back(m.page);
    auto expected = fm::build_oracle_maps(pages, 16, 1);

    MapsHandle maps;
    REQUIRE(fs_maps_load(art.maps_path.c_str(), &maps.m) == FS_OK);
    CHECK(fs_maps_k(maps.m) == 16);
    REQUIRE(fs_maps_owners(maps.m) == expected.size());
    for (const auto& [owner, map] : expected.maps()) {
        for (uint32_t ord = 0; ord < 16; ++ord) {
            uint64_t got = 0;
            REQUIRE(fs_maps_lookup(maps.m, owner, ord, &got) == FS_OK);
            CHECK(got == map.slots[ord]);
        }
    }
    uint64_t empty = 0;
    REQUIRE(fs_maps_lookup(maps.m, UINT64_MAX - 1, 0, &empty) == FS_OK);
    CHECK(empty == UINT64_MAX); // unknown owner reads as empty
    CHECK(fs_maps_lookup(maps.m, 0, 99, &empty) == FS_EINVAL);
}

TEST_CASE("predictor steps agree with a direct recurrent replay") {
    auto& art = artifacts();
    auto params = rn::load_model(art.model_path);
    auto misses = reference_misses();
    REQUIRE(misses.size() > 20);

    fs_predictor* pred = nullptr;
    ModelHandle model;
    REQUIRE(fs_model_load(art.model_path.c_str(), &model.m) == FS_OK);
    REQUIRE(fs_predictor_new(model.m, &pred) == FS_OK);
    const size_t state_bytes = fs_predictor_state_bytes(pred);
    CHECK(state_bytes > 0);

    auto state = rn::make_state(params.cfg);
    std::vector<double> logits(16);
    std::vector<std::vector<double>> first_run;
    for (size_t i = 0; i < misses.size(); ++i) {
        REQUIRE(fs_predictor_step(pred, misses[i].page, misses[i].pc, logits.data()) == FS_OK);
        auto want = rn::forward_recurrent(
            params, state,
            {vc::addr_token(misses[i].page, 16), vc::pc_token(misses[i].pc, 16)},
            i % params.cfg.wrap_period);
        for (uint32_t c = 0; c < 16; ++c) CHECK(std::abs(logits[c] - want[c]) <= 1e-12);
        CHECK(fs_predictor_state_bytes(pred) == state_bytes); // never grows
        first_run.push_back(logits);
    }

    // reset rewinds to a fresh stream
    fs_predictor_reset(pred);
    REQUIRE(fs_predictor_step(pred, misses[0].page, misses[0].pc, logits.data()) == FS_OK);
    for (uint32_t c = 0; c < 16; ++c) CHECK(logits[c] == first_run[0][c]);

    CHECK(fs_predictor_step(nullptr, 0, 0, logits.data()) == FS_EINVAL);
    CHECK(fs_predictor_step(pred, 0, 0, nullptr) == FS_EINVAL);
    fs_predictor_free(pred);
}

TEST_CASE("simulation reports and miss logs flow through the C surface") {
    auto& art = artifacts();
    TempDir dir;
    fs_sim_opts opts{};
    REQUIRE(fs_sim_opts_default(&opts) == FS_OK);
    opts.local_fraction = 0.5;

    char* text = nullptr;
    const std::string log_path = dir.path("misses.fmtr");
    REQUIRE(fs_simulate(art.trace.t, "none", nullptr, &opts, nullptr, nullptr, log_path.c_str(),
                        &text) == FS_OK);
    REQUIRE(text != nullptr);
    auto report = Json::parse(text);
    fs_string_free(text);
    CHECK(report["schema"] == "farsight-sim-report-v1");
    CHECK(report["run"]["policy"] == "none");
    CHECK(report["run"]["trace_tag"] == "linked_list");

    auto misses = reference_misses();
    CHECK(report["counters"]["miss_events"].get<uint64_t>() == misses.size());
    CHECK(report["counters"]["faults"].get<uint64_t>() == misses.size());

    TraceHandle log;
    REQUIRE(fs_trace_load(log_path.c_str(), &log.t) == FS_OK);
    CHECK(fs_trace_events(log.t) == misses.size());
    CHECK(std::string(fs_trace_tag(log.t)) == "miss_log");

    // farsight with the trained artifacts; NULL stage means lookahead_batched
    ModelHandle model;
    MapsHandle maps;
    REQUIRE(fs_model_load(art.model_path.c_str(), &model.m) == FS_OK);
    REQUIRE(fs_maps_load(art.maps_path.c_str(), &maps.m) == FS_OK);
    char* ftext = nullptr;
    REQUIRE(fs_simulate(art.trace.t, "farsight", nullptr, &opts, model.m, maps.m, nullptr,
                        &ftext) == FS_OK);
    auto freport = Json::parse(ftext);
    fs_string_free(ftext);
    CHECK(freport["run"]["stage"] == "lookahead_batched");
    CHECK(freport["config"]["k"].get<uint32_t>() == 16);
    CHECK(freport["config"]["lookahead_s"].get<uint32_t>() == 1); // model's trained value
    CHECK(freport["config"]["lookahead_source"] == "model");
    CHECK(freport["counters"]["issued"].get<uint64_t>() > 0);
}

TEST_CASE("failures come back as status codes with messages") {
    auto& art = artifacts();
    fs_sim_opts opts{};
    REQUIRE(fs_sim_opts_default(&opts) == FS_OK);

    char* text = nullptr;
    CHECK(fs_simulate(art.trace.t, "farsight", "async", &opts, nullptr, nullptr, nullptr,
                      &text) == FS_EINVAL);
    CHECK(std::string(fs_last_error()).find("model") != std::string::npos);
    CHECK(fs_simulate(art.trace.t, "speculative", nullptr, &opts, nullptr, nullptr, nullptr,
                      &text) == FS_EINVAL);
    CHECK(fs_simulate(art.trace.t, "none", nullptr, &opts, nullptr, nullptr, nullptr, nullptr) ==
          FS_EINVAL);

    // artifacts trained at different k refuse to run together
    TempDir dir;
    fs_train_opts topts{};
    REQUIRE(fs_train_opts_default(&topts) == FS_OK);
    topts.k = 8;
    topts.d_model = 8;
    topts.n_heads = 2;
    topts.n_layers = 1;
    topts.window = 8;
    topts.lookahead = 1;
    topts.epochs = 1;
    topts.lr = 0.01;
    const std::string model8 = dir.path("m8.fmnn");
    const std::string maps8 = dir.path("m8.fmfm");
    REQUIRE(fs_train(art.trace.t, &topts, model8.c_str(), maps8.c_str(), nullptr, nullptr) ==
            FS_OK);
    ModelHandle model;
    MapsHandle maps;
    REQUIRE(fs_model_load(art.model_path.c_str(), &model.m) == FS_OK); // k=16
    REQUIRE(fs_maps_load(maps8.c_str(), &maps.m) == FS_OK);            // k=8
    CHECK(fs_simulate(art.trace.t, "farsight", nullptr, &opts, model.m, maps.m, nullptr,
                      &text) == FS_EMISMATCH);
    CHECK(std::string(fs_last_error()).find("k=8") != std::string::npos);

    // model files reject corruption with a format error
    std::ofstream(dir.path("junk.fmnn")) << "not a model";
    fs_model* bad = nullptr;
    CHECK(fs_model_load(dir.path("junk.fmnn").c_str(), &bad) == FS_EFORMAT);
    CHECK(fs_model_load(dir.path("absent.fmnn").c_str(), &bad) == FS_EIO);

    fs_train_opts zero{};
    REQUIRE(fs_train_opts_default(&zero) == FS_OK);
    zero.k = 0;
    CHECK(fs_train(art.trace.t, &zero, dir.path("x").c_str(),
                   dir.path("y").c_str(), nullptr, nullptr) == FS_EINVAL);

    fs_string_free(nullptr); // must be a no-op
}
