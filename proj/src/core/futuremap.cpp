#include "futuremap.hpp"

#include <algorithm>

#include "binio.hpp"

namespace farsight::futuremap {

namespace {
constexpr char kMagic[4] = {'F', 'M', 'F', 'M'};
constexpr uint16_t kVersion = 1;
} // namespace

FutureMapTable::FutureMapTable(uint32_t k) : k_(k) {
    if (k < 1 || k > 65536)
        raise(Errc::invalid_arg, "future map k must be in [1, 65536], got " + std::to_string(k));
}

uint64_t FutureMapTable::lookup(uint64_t owner, uint32_t ordinal) {
    if (ordinal >= k_)
        raise(Errc::invalid_arg, "ordinal " + std::to_string(ordinal) + " out of range for k=" +
                                     std::to_string(k_));
    return get_or_create(owner).slots[ordinal];
}

bool FutureMapTable::fill(uint64_t owner, uint32_t ordinal, uint64_t page, bool fill_empty_only) {
    if (ordinal >= k_)
        raise(Errc::invalid_arg, "ordinal " + std::to_string(ordinal) + " out of range for k=" +
                                     std::to_string(k_));
    if (page == kEmptySlot)
        raise(Errc::invalid_arg, "page id collides with the empty-slot sentinel");
    uint64_t& slot = get_or_create(owner).slots[ordinal];
    if (slot != kEmptySlot) {
        if (fill_empty_only || slot == page)
            return false;
        slot = page;
        return true;
    }
    slot = page;
    return false;
}

int FutureMapTable::find_slot(uint64_t owner, uint64_t page) const {
    const FutureMap* map = find(owner);
    if (!map)
        return -1;
    for (uint32_t s = 0; s < k_; ++s)
        if (map->slots[s] == page)
            return static_cast<int>(s);
    return -1;
}

const FutureMap* FutureMapTable::find(uint64_t owner) const {
    auto it = maps_.find(owner);
    return it == maps_.end() ? nullptr : &it->second;
}

FutureMap& FutureMapTable::get_or_create(uint64_t owner) {
    auto [it, added] = maps_.try_emplace(owner);
    if (added) {
        it->second.owner = owner;
        it->second.slots.assign(k_, kEmptySlot);
    }
    return it->second;
}

void FutureMapTable::save(const std::string& path) const {
    std::vector<uint64_t> owners;
    owners.reserve(maps_.size());
    for (const auto& [owner, map] : maps_)
        owners.push_back(owner);
    std::sort(owners.begin(), owners.end());

    std::ofstream os = binio::open_out(path);
    os.write(kMagic, 4);
    binio::put<uint16_t>(os, kVersion);
    binio::put<uint32_t>(os, k_);
    binio::put<uint64_t>(os, owners.size());
    for (uint64_t owner : owners) {
        binio::put<uint64_t>(os, owner);
        for (uint64_t page : maps_.at(owner).slots)
            binio::put<uint64_t>(os, page);
    }
    if (!os)
        raise(Errc::io, "write failed: " + path);
}

FutureMapTable FutureMapTable::load(const std::string& path) {
    std::ifstream is = binio::open_in(path);
    binio::check_magic(is, kMagic, "future map");
    const auto version = binio::get<uint16_t>(is, "future map version");
    if (version != kVersion)
        raise(Errc::format, "unsupported future map version " + std::to_string(version));
    const auto k = binio::get<uint32_t>(is, "future map k");
    if (k < 1 || k > 65536)
        raise(Errc::format, "future map file has implausible k=" + std::to_string(k));
    const auto count = binio::get<uint64_t>(is, "future map count");
    FutureMapTable table(k);
    for (uint64_t i = 0; i < count; ++i) {
        const auto owner = binio::get<uint64_t>(is, "future map owner");
        FutureMap& map = table.get_or_create(owner);
        for (uint32_t s = 0; s < k; ++s)
            map.slots[s] = binio::get<uint64_t>(is, "future map slot");
    }
    return table;
}

FutureMapTable FutureMapTable::load(const std::string& path, uint32_t expected_k) {
    FutureMapTable table = load(path);
    if (table.k() != expected_k)
        raise(Errc::config_mismatch, "future map file " + path + " has k=" +
                                         std::to_string(table.k()) + ", expected k=" +
                                         std::to_string(expected_k));
    return table;
}

FutureMapTable build_oracle_maps(std::span<const uint64_t> miss_pages, uint32_t k,
                                 uint32_t lookahead) {
    if (lookahead < 1)
        raise(Errc::invalid_arg, "lookahead must be at least 1");
    FutureMapTable table(k);

    struct Stat {
        uint64_t page = 0;
        uint64_t count = 0;
        uint64_t first_seen = 0;
    };
    // Successor histogram per page: how often page Y was the lookahead-th
    // miss after page X, and where that pairing first appeared.
    std::unordered_map<uint64_t, std::unordered_map<uint64_t, Stat>> stats;
    for (size_t i = 0; i + lookahead < miss_pages.size(); ++i) {
        Stat& s = stats[miss_pages[i]][miss_pages[i + lookahead]];
        if (s.count == 0) {
            s.page = miss_pages[i + lookahead];
            s.first_seen = i;
        }
        ++s.count;
    }

    std::vector<Stat> ranked;
    for (const auto& [owner, succ] : stats) {
        ranked.clear();
        ranked.reserve(succ.size());
        for (const auto& [page, stat] : succ)
            ranked.push_back(stat);
        std::sort(ranked.begin(), ranked.end(), [](const Stat& a, const Stat& b) {
            if (a.count != b.count)
                return a.count > b.count;
            return a.first_seen < b.first_seen;
        });
        FutureMap& map = table.get_or_create(owner);
        const size_t kept = std::min<size_t>(ranked.size(), k);
        for (size_t s = 0; s < kept; ++s)
            map.slots[s] = ranked[s].page;
    }
    return table;
}

LabeledDataset make_labels(std::span<const uint64_t> miss_pages,
                           std::span<const uint64_t> miss_pcs, const FutureMapTable& maps,
                           uint32_t lookahead, uint64_t wrap_period) {
    if (miss_pages.size() != miss_pcs.size())
        raise(Errc::invalid_arg, "page and pc streams differ in length");
    if (lookahead < 1)
        raise(Errc::invalid_arg, "lookahead must be at least 1");
    if (wrap_period < 1)
        raise(Errc::invalid_arg, "wrap period must be positive");

    LabeledDataset ds;
    ds.k = maps.k();
    ds.lookahead = lookahead;
    const size_t n = miss_pages.size();
    ds.tokens.reserve(n);
    ds.positions.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        ds.tokens.push_back(
            {vocab::addr_token(miss_pages[i], ds.k), vocab::pc_token(miss_pcs[i], ds.k)});
        ds.positions.push_back(i % wrap_period);
    }
    for (size_t i = 0; i + lookahead < n; ++i) {
        const int slot = maps.find_slot(miss_pages[i], miss_pages[i + lookahead]);
        if (slot < 0) {
            ++ds.dropped;
            continue;
        }
        ds.examples.push_back({i, static_cast<uint32_t>(slot)});
    }
    return ds;
}

} // namespace farsight::futuremap
