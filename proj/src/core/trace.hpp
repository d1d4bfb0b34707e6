#pragma once

#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"

namespace farsight::trace {

// One memory reference. Ticks are logical time: strictly increasing, one
// unit per access.
struct AccessEvent {
    uint64_t vaddr = 0;
    uint64_t pc = 0;
    uint64_t tick = 0;

    friend bool operator==(const AccessEvent&, const AccessEvent&) = default;
};

struct TraceHeader {
    uint16_t version = 1;
    uint32_t page_size = 4096;
    uint64_t event_count = 0;
    std::string generator_tag; // at most 15 bytes, stored NUL-padded
    uint64_t seed = 0;

    friend bool operator==(const TraceHeader&, const TraceHeader&) = default;
};

inline constexpr char kTraceMagic[4] = {'F', 'M', 'T', 'R'};
inline constexpr uint16_t kTraceVersion = 1;
inline constexpr size_t kRecordBytes = 24; // vaddr:8 pc:8 tick:8, little-endian

// Validates page_size is a power of two and returns log2(page_size).
uint32_t page_shift(uint32_t page_size);

inline uint64_t page_of(uint64_t vaddr, uint32_t shift) { return vaddr >> shift; }

// Writes header + packed records. Rejects non-monotone ticks before any
// byte is written.
void write_trace(const std::string& path, const TraceHeader& header,
                 std::span<const AccessEvent> events);

// Streaming reader, O(1) memory in the trace length. Detects truncation:
// hitting EOF before header.event_count records is a format error.
class TraceReader {
public:
    explicit TraceReader(const std::string& path);

    const TraceHeader& header() const { return header_; }
    uint32_t page_shift() const { return shift_; }

    // Returns false exactly once, after event_count records.
    bool next(AccessEvent& out);

private:
    std::ifstream is_;
    std::string path_;
    TraceHeader header_;
    uint32_t shift_ = 12;
    uint64_t read_ = 0;
};

std::pair<TraceHeader, std::vector<AccessEvent>> read_trace(const std::string& path);

// Debug-only CSV export (vaddr,pc,tick per line). limit==0 exports everything.
void export_csv(const std::string& trace_path, const std::string& csv_path, uint64_t limit = 0);
void export_csv(std::span<const AccessEvent> events, const std::string& csv_path,
                uint64_t limit = 0);

// ---------------------------------------------------------------------------
// Synthetic workload generators.
//
// All generators are pure functions of their arguments: the same arguments
// produce byte-identical traces. Addresses come from a flat region starting
// at kVaBase; program counters come from a per-generator set of at most 32
// synthetic code sites starting at kPcBase.
// ---------------------------------------------------------------------------

inline constexpr uint64_t kVaBase = 0x100000000000ull; // 2^44
inline constexpr uint64_t kPcBase = 0x400000ull;

struct GeneratedTrace {
    TraceHeader header;
    std::vector<AccessEvent> events;
};

// List traversal over `nodes` records placed one per `node_stride` bytes in
// a seeded random permutation (shuffle_seed == 0 keeps identity placement,
// i.e. list order == address order). The full list is walked `passes` times.
GeneratedTrace gen_linked_list(uint64_t nodes, uint64_t node_stride, uint64_t shuffle_seed,
                               uint64_t passes, uint32_t page_size = 4096);

enum class GraphAlgo { bfs, pagerank_pull, sssp_relax };

GraphAlgo parse_graph_algo(const std::string& name);

// Random directed graph with round(node_count * avg_degree) distinct
// non-self-loop edges. Node records and the edge array live in disjoint
// address regions; traversal interleaves sequential edge-array scans with
// irregular node-record accesses.
GeneratedTrace gen_graph_traversal(uint64_t node_count, double avg_degree, GraphAlgo algo,
                                   uint64_t seed, uint32_t iterations = 1,
                                   uint32_t page_size = 4096);

// Implicit B-tree over keys 0..key_count-1, one node per page, `lookups`
// root-to-leaf descents for uniformly drawn keys. One pc per tree level.
GeneratedTrace gen_btree_lookup(uint64_t key_count, uint32_t fanout, uint64_t lookups,
                                uint64_t seed, uint32_t page_size = 4096);

enum class RegularKind { sequential, strided };

RegularKind parse_regular_kind(const std::string& name);

// Arithmetic address sequence over `span_bytes`. For sequential, stride==0
// defaults to 64 bytes. Single pc.
GeneratedTrace gen_regular(RegularKind kind, uint64_t span_bytes, uint64_t stride_bytes,
                           uint64_t seed, uint32_t page_size = 4096);

} // namespace farsight::trace
