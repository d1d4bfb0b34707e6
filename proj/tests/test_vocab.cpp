#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "error.hpp"
#include "vocab.hpp"

using namespace farsight;
using vocab::HistoryWindow;
using vocab::VocabConfig;

TEST_CASE("token encoding is modulo k") {
    CHECK(vocab::addr_token(130, 64) == 2);
    CHECK(vocab::pc_token(7, 64) == 7);
    CHECK(vocab::addr_token(64, 64) == 0);
    CHECK(vocab::pc_token(64, 64) == 0);
    for (uint64_t page : {0ull, 1ull, 3ull, 4ull, 1023ull, 77ull}) {
        CHECK(vocab::addr_token(page, 4) < 4);
        CHECK(vocab::pc_token(page * 31 + 5, 4) < 4);
    }
}

TEST_CASE("window pushes count phase and evict the oldest") {
    VocabConfig cfg;
    cfg.k = 16;
    cfg.h = 3;
    HistoryWindow w(cfg);
    CHECK(w.size() == 0);
    CHECK(w.phase() == 0);

    CHECK_FALSE(w.push(5, 9));
    CHECK(w.size() == 1);
    CHECK(w.phase() == 1);
    CHECK(w[0].tok.addr_tok == 5);
    CHECK(w[0].tok.pc_tok == 9);
    CHECK(w[0].pos == 0);

    w.push(6, 10);
    w.push(7, 11);
    CHECK(w.full());
    w.push(8, 12);
    CHECK(w.size() == 3);
    CHECK(w.phase() == 4);
    CHECK(w[0].tok.addr_tok == 6);  // oldest now the second push
    CHECK(w[2].tok.addr_tok == 8);
    CHECK(w[2].pos == 3);           // positions are global, not window offsets
}

TEST_CASE("consecutive windows keep shared positions identical") {
    VocabConfig cfg;
    cfg.k = 64;
    cfg.h = 16;
    HistoryWindow w(cfg);
    for (uint64_t i = 0; i < 100; ++i) w.push(i * 131, i * 17);

    std::vector<vocab::HistoryEntry> before;
    for (size_t i = 0; i < w.size(); ++i) before.push_back(w[i]);
    w.push(100 * 131, 100 * 17);
    for (size_t i = 1; i < before.size(); ++i) {
        CHECK(w[i - 1].tok.addr_tok == before[i].tok.addr_tok);
        CHECK(w[i - 1].pos == before[i].pos);
    }
}

TEST_CASE("scratch window at an offset phase matches the slid window") {
    VocabConfig cfg;
    cfg.k = 64;
    cfg.h = 16;
    HistoryWindow slid(cfg);
    for (uint64_t i = 0; i < 100; ++i) slid.push(i * 7 + 3, i * 13 + 1);

    HistoryWindow scratch(cfg, 84);
    for (uint64_t i = 84; i < 100; ++i) scratch.push(i * 7 + 3, i * 13 + 1);

    REQUIRE(slid.size() == scratch.size());
    for (size_t i = 0; i < slid.size(); ++i) {
        CHECK(slid[i].tok.addr_tok == scratch[i].tok.addr_tok);
        CHECK(slid[i].tok.pc_tok == scratch[i].tok.pc_tok);
        CHECK(slid[i].pos == scratch[i].pos);
    }
}

TEST_CASE("positions wrap at the period and report the wrap") {
    VocabConfig cfg;
    cfg.k = 8;
    cfg.h = 4;
    cfg.wrap_period = 8;
    HistoryWindow w(cfg);
    for (uint64_t i = 0; i < 8; ++i) CHECK_FALSE(w.push(i, i));
    CHECK(w.push(8, 8)); // position 8 % 8 == 0 < 7
    CHECK(w[w.size() - 1].pos == 0);
    CHECK_FALSE(w.push(9, 9));
}

TEST_CASE("wrap period one pins every position to zero without wraps") {
    VocabConfig cfg;
    cfg.k = 8;
    cfg.h = 4;
    cfg.wrap_period = 1;
    HistoryWindow w(cfg);
    for (uint64_t i = 0; i < 20; ++i) {
        CHECK_FALSE(w.push(i, i));
        CHECK(w[w.size() - 1].pos == 0);
    }
}

TEST_CASE("clear keeps the phase counter") {
    VocabConfig cfg;
    cfg.h = 4;
    HistoryWindow w(cfg);
    for (uint64_t i = 0; i < 6; ++i) w.push(i, i);
    w.clear();
    CHECK(w.size() == 0);
    CHECK(w.phase() == 6);
    w.push(1, 1);
    CHECK(w[0].pos == 6);
}

TEST_CASE("rotary frequencies decay geometrically") {
    CHECK(vocab::rotary_inv_freq(10000.0, 0, 8) == doctest::Approx(1.0));
    CHECK(vocab::rotary_inv_freq(10000.0, 1, 8) == doctest::Approx(std::pow(10000.0, -0.25)));
    CHECK(vocab::rotary_inv_freq(10000.0, 3, 8) == doctest::Approx(std::pow(10000.0, -0.75)));
    CHECK(vocab::rotary_inv_freq(2.0, 1, 4) == doctest::Approx(1.0 / std::sqrt(2.0)));
    CHECK(vocab::rotary_inv_freq(4.0, 1, 2) == doctest::Approx(0.25));
}

TEST_CASE("window footprint stays small") {
    VocabConfig cfg;
    HistoryWindow w(cfg);
    for (uint64_t i = 0; i < 200; ++i) w.push(i, i);
    CHECK(w.bytes() <= 4096);
}

TEST_CASE("config validation") {
    VocabConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.k = 0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg.k = 65537;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = {};
    cfg.h = 0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = {};
    cfg.rotary_base = 0.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = {};
    cfg.wrap_period = 0;
    CHECK_THROWS_AS(cfg.validate(), Error);
}
