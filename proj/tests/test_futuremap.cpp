#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <map>
#include <random>
#include <vector>

#include "error.hpp"
#include "futuremap.hpp"
#include "helpers.hpp"

using namespace farsight;
using futuremap::FutureMapTable;
using futuremap::kEmptySlot;

namespace {

// Brute-force rank oracle: for each page, histogram its s-th-future
// successors, rank by (count desc, first appearance asc), keep top k.
std::map<uint64_t, std::vector<uint64_t>> rank_oracle(const std::vector<uint64_t>& stream,
                                                      uint32_t k, uint32_t s) {
    std::map<uint64_t, std::vector<uint64_t>> result;
    std::map<uint64_t, std::map<uint64_t, std::pair<uint64_t, uint64_t>>> hist; // x -> y -> (count, first)
    for (size_t i = 0; i + s < stream.size(); ++i) {
        auto& cell = hist[stream[i]];
        auto it = cell.find(stream[i + s]);
        if (it == cell.end()) cell[stream[i + s]] = {1, i};
        else ++it->second.first;
    }
    for (auto& [x, ys] : hist) {
        std::vector<std::pair<uint64_t, std::pair<uint64_t, uint64_t>>> ranked(ys.begin(), ys.end());
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.second.first != b.second.first) return a.second.first > b.second.first;
            return a.second.second < b.second.second;
        });
        auto& slots = result[x];
        for (size_t i = 0; i < ranked.size() && i < k; ++i) slots.push_back(ranked[i].first);
    }
    return result;
}

std::vector<uint64_t> random_stream(std::mt19937_64& rng, size_t len, uint64_t page_span) {
    std::uniform_int_distribution<uint64_t> d(0, page_span - 1);
    std::vector<uint64_t> s(len);
    for (auto& v : s) v = d(rng);
    return s;
}

} // namespace

TEST_CASE("alternating stream maps each page to the other") {
    std::vector<uint64_t> stream;
    for (int i = 0; i < 10; ++i) {
        stream.push_back(100);
        stream.push_back(200);
    }
    auto maps = futuremap::build_oracle_maps(stream, 4, 1);
    CHECK(maps.lookup(100, 0) == 200);
    CHECK(maps.lookup(200, 0) == 100);
    CHECK(maps.lookup(100, 1) == kEmptySlot);
    CHECK(maps.lookup(200, 1) == kEmptySlot);
}

TEST_CASE("slots rank successors by frequency then first appearance") {
    // X followed by C five times, E three times, D once; k=4
    const uint64_t X = 1, C = 30, E = 50, D = 40;
    std::vector<uint64_t> stream;
    auto follow = [&](uint64_t y) {
        stream.push_back(X);
        stream.push_back(y);
    };
    follow(C);
    follow(E);
    follow(D);
    follow(C);
    follow(E);
    follow(C);
    follow(E);
    follow(C);
    follow(C);
    auto maps = futuremap::build_oracle_maps(stream, 4, 1);
    CHECK(maps.lookup(X, 0) == C);
    CHECK(maps.lookup(X, 1) == E);
    CHECK(maps.lookup(X, 2) == D);
    CHECK(maps.lookup(X, 3) == kEmptySlot);
    CHECK(maps.find_slot(X, C) == 0);
    CHECK(maps.find_slot(X, E) == 1);
    CHECK(maps.find_slot(X, D) == 2);
    CHECK(maps.find_slot(X, 999) == -1);
}

TEST_CASE("frequency ties resolve by first appearance") {
    // A then B, A then C, repeated equally; B appeared first
    std::vector<uint64_t> stream = {7, 20, 7, 10, 7, 20, 7, 10};
    auto maps = futuremap::build_oracle_maps(stream, 4, 1);
    // successors of 7 at s=1: 20, 10, 20, 10 (the trailing 10 has no successor)
    CHECK(maps.lookup(7, 0) == 20);
    CHECK(maps.lookup(7, 1) == 10);
}

TEST_CASE("empty stream gives an empty table") {
    auto maps = futuremap::build_oracle_maps({}, 8, 1);
    CHECK(maps.size() == 0);
}

TEST_CASE("oracle maps equal the brute-force rank oracle") {
    std::mt19937_64 rng(2024);
    for (int round = 0; round < 60; ++round) {
        uint32_t k = round % 2 ? 8 : 64;
        uint32_t s = 1 + round % 4;
        size_t len = 50 + size_t(rng() % 4000);
        uint64_t span = 3 + rng() % 120;
        auto stream = random_stream(rng, len, span);
        auto maps = futuremap::build_oracle_maps(stream, k, s);
        auto expect = rank_oracle(stream, k, s);
        for (const auto& [x, slots] : expect) {
            for (size_t i = 0; i < k; ++i) {
                uint64_t want = i < slots.size() ? slots[i] : kEmptySlot;
                CHECK(maps.lookup(x, uint32_t(i)) == want);
            }
        }
        CHECK(maps.size() == expect.size());
    }
}

TEST_CASE("alternating labels are all slot zero") {
    std::vector<uint64_t> pages = {1, 2, 1, 2};
    std::vector<uint64_t> pcs = {9, 9, 9, 9};
    auto maps = futuremap::build_oracle_maps(pages, 4, 1);
    auto ds = futuremap::make_labels(pages, pcs, maps, 1, 1ull << 32);
    REQUIRE(ds.examples.size() == 3);
    for (const auto& ex : ds.examples) CHECK(ex.target == 0);
    CHECK(ds.dropped == 0);
    CHECK(ds.tokens.size() == 4);
    CHECK(ds.lookahead == 1);
    // dataset size <= L - s
    CHECK(ds.examples.size() <= pages.size() - 1);
}

TEST_CASE("labels point at the rank of the s-th future page") {
    std::mt19937_64 rng(77);
    auto pages = random_stream(rng, 3000, 40);
    std::vector<uint64_t> pcs(pages.size(), 5);
    for (uint32_t s : {1u, 3u}) {
        auto maps = futuremap::build_oracle_maps(pages, 16, s);
        auto ds = futuremap::make_labels(pages, pcs, maps, s, 1ull << 32);
        CHECK(ds.examples.size() + ds.dropped == pages.size() - s);
        for (const auto& ex : ds.examples) {
            uint64_t target_page = pages[ex.end_idx + s];
            CHECK(maps.lookup(pages[ex.end_idx], ex.target) == target_page);
            CHECK(maps.find_slot(pages[ex.end_idx], target_page) == int(ex.target));
        }
    }
}

TEST_CASE("drop count equals the successor mass outside top-k") {
    // page 0 has 6 distinct successors with distinct frequencies; k=4 keeps 4
    std::vector<uint64_t> stream;
    uint64_t succ[] = {11, 12, 13, 14, 15, 16};
    int times[] = {6, 5, 4, 3, 2, 1}; // ranks 0..5; 15 and 16 fall out at k=4
    for (int i = 0; i < 6; ++i)
        for (int t = 0; t < times[i]; ++t) {
            stream.push_back(0);
            stream.push_back(succ[i]);
        }
    std::vector<uint64_t> pcs(stream.size(), 1);
    auto maps = futuremap::build_oracle_maps(stream, 4, 1);
    auto ds = futuremap::make_labels(stream, pcs, maps, 1, 1ull << 32);
    // dropped examples: the 0->15 (2x) and 0->16 (1x) transitions
    CHECK(ds.dropped == 3);
}

TEST_CASE("runtime lookup creates maps lazily and reads back fills") {
    FutureMapTable t(4);
    CHECK(t.size() == 0);
    CHECK(t.lookup(42, 0) == kEmptySlot); // fresh page, any ordinal -> empty
    CHECK(t.size() == 1);                 // created lazily
    CHECK_THROWS_AS(t.lookup(42, 4), Error);

    CHECK_FALSE(t.fill(42, 2, 900));
    CHECK(t.lookup(42, 2) == 900);
    // overwrite: latest wins
    CHECK(t.fill(42, 2, 901));
    CHECK(t.lookup(42, 2) == 901);
    // fill_empty_only leaves the occupied slot alone
    CHECK_FALSE(t.fill(42, 2, 902, true));
    CHECK(t.lookup(42, 2) == 901);
    CHECK_FALSE(t.fill(42, 3, 903, true)); // empty slot still fills
    CHECK(t.lookup(42, 3) == 903);
    CHECK_THROWS_AS(t.fill(42, 0, kEmptySlot), Error);
}

TEST_CASE("stub predictor of ordinal zero learns the alternating stream") {
    // simulate the runtime fill rule by hand: predict ordinal 0 at every miss,
    // fill when the next miss materializes (s = 1)
    FutureMapTable t(4);
    std::vector<uint64_t> stream;
    for (int i = 0; i < 10; ++i) {
        stream.push_back(7);
        stream.push_back(9);
    }
    bool have_pending = false;
    uint64_t pending_page = 0;
    for (uint64_t page : stream) {
        if (have_pending) t.fill(pending_page, 0, page);
        pending_page = page;
        have_pending = true;
    }
    CHECK(t.lookup(7, 0) == 9);
    CHECK(t.lookup(9, 0) == 7);
}

TEST_CASE("maps serialize round-trip and validate k") {
    TempDir td;
    std::mt19937_64 rng(5);
    auto stream = random_stream(rng, 20000, 300);
    auto maps = futuremap::build_oracle_maps(stream, 16, 2);
    maps.save(td.path("m.fmfm"));

    auto back = FutureMapTable::load(td.path("m.fmfm"));
    CHECK(back.k() == 16);
    REQUIRE(back.size() == maps.size());
    for (const auto& [owner, fm] : maps.maps())
        for (uint32_t i = 0; i < 16; ++i) CHECK(back.lookup(owner, i) == maps.lookup(owner, i));

    CHECK_NOTHROW(FutureMapTable::load(td.path("m.fmfm"), 16));
    CHECK_THROWS_WITH_AS(FutureMapTable::load(td.path("m.fmfm"), 64),
                         doctest::Contains("k=16"), Error);

    FutureMapTable empty(8);
    empty.save(td.path("empty.fmfm"));
    auto eback = FutureMapTable::load(td.path("empty.fmfm"));
    CHECK(eback.size() == 0);
    CHECK(eback.k() == 8);
}

TEST_CASE("save writes owners in deterministic order") {
    TempDir td;
    FutureMapTable a(4), b(4);
    for (uint64_t p : {9ull, 2ull, 5ull}) a.fill(p, 0, p + 1);
    for (uint64_t p : {5ull, 9ull, 2ull}) b.fill(p, 0, p + 1);
    a.save(td.path("a.fmfm"));
    b.save(td.path("b.fmfm"));
    CHECK(slurp(td.path("a.fmfm")) == slurp(td.path("b.fmfm")));
}

TEST_CASE("corrupt maps file is a format error") {
    TempDir td;
    std::ofstream os(td.path("x.fmfm"), std::ios::binary);
    os << "FMXX garbage";
    os.close();
    CHECK_THROWS_AS(FutureMapTable::load(td.path("x.fmfm")), Error);
}
