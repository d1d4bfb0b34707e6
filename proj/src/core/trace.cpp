#include "trace.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <queue>
#include <random>
#include <unordered_set>

#include "binio.hpp"

namespace farsight::trace {

namespace {

constexpr size_t kTagBytes = 16; // NUL-padded on disk, so 15 usable chars

void check_tag(const std::string& tag) {
    if (tag.size() >= kTagBytes)
        raise(Errc::invalid_arg, "generator tag too long: " + tag);
}

TraceHeader make_header(std::string tag, uint64_t seed, uint32_t page_size, uint64_t count) {
    TraceHeader h;
    h.version = kTraceVersion;
    h.page_size = page_size;
    h.event_count = count;
    h.generator_tag = std::move(tag);
    h.seed = seed;
    return h;
}

// Shared by all generators: appends events with tick == position.
class Builder {
public:
    void access(uint64_t vaddr, uint64_t pc) {
        events_.push_back({vaddr, pc, static_cast<uint64_t>(events_.size())});
    }
    std::vector<AccessEvent> take() { return std::move(events_); }
    size_t size() const { return events_.size(); }

private:
    std::vector<AccessEvent> events_;
};

uint64_t pc_site(uint32_t site) {
    if (site >= 32)
        raise(Errc::internal, "generator exceeded its pc site budget");
    return kPcBase + uint64_t(site) * 4;
}

} // namespace

uint32_t page_shift(uint32_t page_size) {
    if (page_size < 64 || (page_size & (page_size - 1)) != 0)
        raise(Errc::invalid_arg,
              "page_size must be a power of two >= 64, got " + std::to_string(page_size));
    uint32_t shift = 0;
    while ((1u << shift) != page_size)
        ++shift;
    return shift;
}

void write_trace(const std::string& path, const TraceHeader& header,
                 std::span<const AccessEvent> events) {
    check_tag(header.generator_tag);
    page_shift(header.page_size);
    for (size_t i = 1; i < events.size(); ++i) {
        if (events[i].tick <= events[i - 1].tick)
            raise(Errc::invalid_arg, "ticks must be strictly increasing (violated at record " +
                                         std::to_string(i) + ")");
    }

    std::ofstream os = binio::open_out(path);
    os.write(kTraceMagic, 4);
    binio::put<uint16_t>(os, header.version);
    binio::put<uint32_t>(os, header.page_size);
    binio::put<uint64_t>(os, events.size());
    char tag[kTagBytes] = {};
    std::copy(header.generator_tag.begin(), header.generator_tag.end(), tag);
    os.write(tag, kTagBytes);
    binio::put<uint64_t>(os, header.seed);
    for (const AccessEvent& e : events) {
        binio::put<uint64_t>(os, e.vaddr);
        binio::put<uint64_t>(os, e.pc);
        binio::put<uint64_t>(os, e.tick);
    }
    if (!os)
        raise(Errc::io, "write failed: " + path);
}

TraceReader::TraceReader(const std::string& path) : is_(binio::open_in(path)), path_(path) {
    binio::check_magic(is_, kTraceMagic, "trace");
    header_.version = binio::get<uint16_t>(is_, "trace version");
    if (header_.version != kTraceVersion)
        raise(Errc::format, "unsupported trace version " + std::to_string(header_.version));
    header_.page_size = binio::get<uint32_t>(is_, "trace page size");
    header_.event_count = binio::get<uint64_t>(is_, "trace event count");
    char tag[kTagBytes];
    binio::get_bytes(is_, tag, kTagBytes, "trace generator tag");
    header_.generator_tag.assign(tag, strnlen(tag, kTagBytes));
    header_.seed = binio::get<uint64_t>(is_, "trace seed");
    shift_ = trace::page_shift(header_.page_size);
}

bool TraceReader::next(AccessEvent& out) {
    if (read_ == header_.event_count)
        return false;
    char rec[kRecordBytes];
    is_.read(rec, kRecordBytes);
    if (is_.gcount() != static_cast<std::streamsize>(kRecordBytes))
        raise(Errc::format, "truncated trace " + path_ + ": header promises " +
                                std::to_string(header_.event_count) + " records, file ends after " +
                                std::to_string(read_));
    auto u64at = [&](size_t off) {
        uint64_t v = 0;
        std::memcpy(&v, rec + off, 8);
        return v;
    };
    out.vaddr = u64at(0);
    out.pc = u64at(8);
    out.tick = u64at(16);
    ++read_;
    return true;
}

std::pair<TraceHeader, std::vector<AccessEvent>> read_trace(const std::string& path) {
    TraceReader reader(path);
    std::vector<AccessEvent> events;
    events.reserve(reader.header().event_count);
    AccessEvent e;
    while (reader.next(e))
        events.push_back(e);
    return {reader.header(), std::move(events)};
}

namespace {

void write_csv_line(std::ofstream& os, const AccessEvent& e) {
    char line[80];
    std::snprintf(line, sizeof line, "0x%llx,0x%llx,%llu\n",
                  static_cast<unsigned long long>(e.vaddr),
                  static_cast<unsigned long long>(e.pc),
                  static_cast<unsigned long long>(e.tick));
    os << line;
}

} // namespace

void export_csv(const std::string& trace_path, const std::string& csv_path, uint64_t limit) {
    TraceReader reader(trace_path);
    std::ofstream os = binio::open_out(csv_path);
    os << "vaddr,pc,tick\n";
    AccessEvent e;
    uint64_t n = 0;
    while (reader.next(e)) {
        if (limit != 0 && n == limit)
            break;
        write_csv_line(os, e);
        ++n;
    }
    if (!os)
        raise(Errc::io, "write failed: " + csv_path);
}

void export_csv(std::span<const AccessEvent> events, const std::string& csv_path, uint64_t limit) {
    std::ofstream os = binio::open_out(csv_path);
    os << "vaddr,pc,tick\n";
    uint64_t n = 0;
    for (const AccessEvent& e : events) {
        if (limit != 0 && n == limit)
            break;
        write_csv_line(os, e);
        ++n;
    }
    if (!os)
        raise(Errc::io, "write failed: " + csv_path);
}

// --- generators -------------------------------------------------------------

GeneratedTrace gen_linked_list(uint64_t nodes, uint64_t node_stride, uint64_t shuffle_seed,
                               uint64_t passes, uint32_t page_size) {
    if (nodes < 2)
        raise(Errc::invalid_arg, "linked list needs at least 2 nodes");
    if (node_stride == 0)
        raise(Errc::invalid_arg, "node_stride must be positive");
    if (passes == 0)
        raise(Errc::invalid_arg, "passes must be positive");
    page_shift(page_size);

    // slot[i] is where the i-th list element lives; traversal follows list
    // order, so a shuffled placement turns the walk into pointer chasing.
    std::vector<uint64_t> slot(nodes);
    std::iota(slot.begin(), slot.end(), 0);
    if (shuffle_seed != 0) {
        std::mt19937_64 rng(shuffle_seed);
        std::shuffle(slot.begin(), slot.end(), rng);
    }

    Builder b;
    const uint64_t pc = pc_site(0);
    for (uint64_t p = 0; p < passes; ++p)
        for (uint64_t i = 0; i < nodes; ++i)
            b.access(kVaBase + slot[i] * node_stride, pc);

    GeneratedTrace t;
    t.events = b.take();
    t.header = make_header("linked_list", shuffle_seed, page_size, t.events.size());
    return t;
}

GraphAlgo parse_graph_algo(const std::string& name) {
    if (name == "bfs") return GraphAlgo::bfs;
    if (name == "pagerank" || name == "pagerank_pull") return GraphAlgo::pagerank_pull;
    if (name == "sssp" || name == "sssp_relax") return GraphAlgo::sssp_relax;
    raise(Errc::invalid_arg, "unknown graph algorithm: " + name);
}

namespace {

struct Csr {
    std::vector<uint64_t> row; // n+1
    std::vector<uint64_t> col; // m, slot index == position here
};

Csr build_csr(uint64_t n, std::vector<std::pair<uint64_t, uint64_t>> edges) {
    std::sort(edges.begin(), edges.end());
    Csr csr;
    csr.row.assign(n + 1, 0);
    csr.col.reserve(edges.size());
    for (const auto& [u, v] : edges)
        ++csr.row[u + 1];
    for (uint64_t i = 0; i < n; ++i)
        csr.row[i + 1] += csr.row[i];
    for (const auto& [u, v] : edges)
        csr.col.push_back(v);
    return csr;
}

std::vector<std::pair<uint64_t, uint64_t>> sample_edges(uint64_t n, uint64_t m,
                                                        std::mt19937_64& rng) {
    const uint64_t max_edges = n * (n - 1);
    std::vector<std::pair<uint64_t, uint64_t>> edges;
    edges.reserve(m);
    if (max_edges <= 2'000'000) {
        std::vector<std::pair<uint64_t, uint64_t>> all;
        all.reserve(max_edges);
        for (uint64_t u = 0; u < n; ++u)
            for (uint64_t v = 0; v < n; ++v)
                if (u != v)
                    all.emplace_back(u, v);
        std::shuffle(all.begin(), all.end(), rng);
        edges.assign(all.begin(), all.begin() + m);
    } else {
        std::unordered_set<uint64_t> seen;
        seen.reserve(m * 2);
        std::uniform_int_distribution<uint64_t> pick(0, n - 1);
        while (edges.size() < m) {
            uint64_t u = pick(rng), v = pick(rng);
            if (u == v)
                continue;
            if (seen.insert(u * n + v).second)
                edges.emplace_back(u, v);
        }
    }
    return edges;
}

} // namespace

GeneratedTrace gen_graph_traversal(uint64_t node_count, double avg_degree, GraphAlgo algo,
                                   uint64_t seed, uint32_t iterations, uint32_t page_size) {
    if (node_count == 0)
        raise(Errc::invalid_arg, "graph needs at least one node");
    if (avg_degree < 0 || !std::isfinite(avg_degree))
        raise(Errc::invalid_arg, "avg_degree must be finite and non-negative");
    if (iterations == 0)
        raise(Errc::invalid_arg, "iterations must be positive");
    page_shift(page_size);

    const uint64_t n = node_count;
    const uint64_t max_edges = n * (n - 1);
    const auto m = static_cast<uint64_t>(std::llround(double(n) * avg_degree));
    if (m > max_edges)
        raise(Errc::invalid_arg, "avg_degree " + std::to_string(avg_degree) +
                                     " asks for more distinct edges than " + std::to_string(n) +
                                     " nodes allow");

    std::mt19937_64 rng(seed);
    auto edges = sample_edges(n, m, rng);

    // 64-byte node records in one region, 8-byte edge slots in another.
    constexpr uint64_t kNodeBytes = 64;
    constexpr uint64_t kEdgeBytes = 8;
    const uint64_t node_base = kVaBase;
    const uint64_t edge_base = kVaBase + (1ull << 40);
    auto node_addr = [&](uint64_t v) { return node_base + v * kNodeBytes; };
    auto edge_addr = [&](uint64_t slot) { return edge_base + slot * kEdgeBytes; };
    const uint64_t pc_visit = pc_site(0);
    const uint64_t pc_edge = pc_site(1);
    const uint64_t pc_neigh = pc_site(2);

    Builder b;
    const char* tag = nullptr;

    switch (algo) {
    case GraphAlgo::bfs: {
        tag = "graph_bfs";
        Csr csr = build_csr(n, std::move(edges));
        for (uint32_t it = 0; it < iterations; ++it) {
            std::vector<char> visited(n, 0);
            std::queue<uint64_t> q;
            uint64_t scan = 0;
            for (;;) {
                if (q.empty()) {
                    while (scan < n && visited[scan])
                        ++scan;
                    if (scan == n)
                        break;
                    visited[scan] = 1;
                    q.push(scan);
                }
                uint64_t u = q.front();
                q.pop();
                b.access(node_addr(u), pc_visit);
                for (uint64_t e = csr.row[u]; e < csr.row[u + 1]; ++e) {
                    b.access(edge_addr(e), pc_edge);
                    uint64_t v = csr.col[e];
                    b.access(node_addr(v), pc_neigh);
                    if (!visited[v]) {
                        visited[v] = 1;
                        q.push(v);
                    }
                }
            }
        }
        break;
    }
    case GraphAlgo::pagerank_pull: {
        tag = "graph_pagerank";
        for (auto& [u, v] : edges)
            std::swap(u, v); // pull reads along incoming edges
        Csr rev = build_csr(n, std::move(edges));
        for (uint32_t it = 0; it < iterations; ++it) {
            for (uint64_t u = 0; u < n; ++u) {
                b.access(node_addr(u), pc_visit);
                for (uint64_t e = rev.row[u]; e < rev.row[u + 1]; ++e) {
                    b.access(edge_addr(e), pc_edge);
                    b.access(node_addr(rev.col[e]), pc_neigh);
                }
            }
        }
        break;
    }
    case GraphAlgo::sssp_relax: {
        tag = "graph_sssp";
        Csr csr = build_csr(n, std::move(edges));
        for (uint32_t it = 0; it < iterations; ++it) {
            for (uint64_t u = 0; u < n; ++u) {
                b.access(node_addr(u), pc_visit);
                for (uint64_t e = csr.row[u]; e < csr.row[u + 1]; ++e) {
                    b.access(edge_addr(e), pc_edge);
                    b.access(node_addr(csr.col[e]), pc_neigh);
                }
            }
        }
        break;
    }
    }

    GeneratedTrace t;
    t.events = b.take();
    t.header = make_header(tag, seed, page_size, t.events.size());
    return t;
}

GeneratedTrace gen_btree_lookup(uint64_t key_count, uint32_t fanout, uint64_t lookups,
                                uint64_t seed, uint32_t page_size) {
    if (key_count == 0)
        raise(Errc::invalid_arg, "key_count must be positive");
    if (fanout < 2)
        raise(Errc::invalid_arg, "fanout must be at least 2");
    if (lookups == 0)
        raise(Errc::invalid_arg, "lookups must be positive");
    page_shift(page_size);

    // Complete implicit tree, one node per page, laid out level by level.
    // Leaves hold `fanout` keys each; depth is the smallest that fits them.
    const uint64_t leaves = (key_count + fanout - 1) / fanout;
    uint32_t depth = 0; // edges from root to leaf
    uint64_t cap = 1;
    while (cap < leaves) {
        if (depth + 1 >= 32)
            raise(Errc::invalid_arg, "tree too deep, raise the fanout");
        cap *= fanout;
        ++depth;
    }
    std::vector<uint64_t> level_start(depth + 1, 0);
    uint64_t width = 1;
    for (uint32_t d = 1; d <= depth; ++d) {
        level_start[d] = level_start[d - 1] + width;
        width *= fanout;
    }

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<uint64_t> key_dist(0, key_count - 1);
    Builder b;
    for (uint64_t l = 0; l < lookups; ++l) {
        const uint64_t leaf = key_dist(rng) / fanout;
        // Walk root to leaf; the node at level d is leaf's base-fanout prefix.
        uint64_t div = cap;
        for (uint32_t d = 0; d <= depth; ++d) {
            b.access(kVaBase + (level_start[d] + leaf / div) * page_size, pc_site(d));
            div /= fanout;
        }
    }

    GeneratedTrace t;
    t.events = b.take();
    t.header = make_header("btree", seed, page_size, t.events.size());
    return t;
}

RegularKind parse_regular_kind(const std::string& name) {
    if (name == "sequential") return RegularKind::sequential;
    if (name == "strided") return RegularKind::strided;
    raise(Errc::invalid_arg, "unknown regular kind: " + name);
}

GeneratedTrace gen_regular(RegularKind kind, uint64_t span_bytes, uint64_t stride_bytes,
                           uint64_t seed, uint32_t page_size) {
    if (span_bytes == 0)
        raise(Errc::invalid_arg, "span_bytes must be positive");
    page_shift(page_size);
    uint64_t stride = stride_bytes;
    if (kind == RegularKind::sequential && stride == 0)
        stride = 64;
    if (stride == 0)
        raise(Errc::invalid_arg, "strided access needs a positive stride");

    Builder b;
    const uint64_t pc = pc_site(0);
    for (uint64_t off = 0; off < span_bytes; off += stride)
        b.access(kVaBase + off, pc);

    GeneratedTrace t;
    t.events = b.take();
    t.header = make_header(kind == RegularKind::sequential ? "seq" : "strided", seed, page_size,
                           t.events.size());
    return t;
}

} // namespace farsight::trace
