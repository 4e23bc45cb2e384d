#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rrg/tensor.hpp"

namespace rrg {

// One extracted image: p feature rows of dimension d_f. The FVEC container
// keeps p and d_f uniform across a store.
struct FeatureRecord {
    std::string id;
    Tensorf features; // p x d_f
};

// Deterministic stand-in for a vision extractor: the content bytes are
// hashed and the hash seeds a pseudo-random feature matrix. Identical
// (content, d_f, p, seed) always yields identical features.
Tensorf extract_stub(const std::string& content, std::size_t d_f, std::size_t p,
                     std::uint64_t seed);

// FVEC container, little-endian:
//   "FVEC" 0x01 | u32 count | u32 p | u32 d_f | count*p*d_f f32 payload |
//   u32 ids byte-length | newline-separated UTF-8 ids in record order
void save_features(const std::string& path, const std::vector<FeatureRecord>& records);
std::vector<FeatureRecord> load_features(const std::string& path);

// a.b / (|a||b|); throws NumericError on zero-norm input.
double cosine(const std::vector<double>& a, const std::vector<double>& b);

struct RetrievalHit {
    std::string id;
    double score;
    std::string report;
};

// Exhaustive cosine search over pooled feature vectors. Records pool by
// row mean followed by L2 normalization; queries pool identically.
// Immutable once built; concurrent queries are safe.
class RetrievalIndex {
public:
    static RetrievalIndex build(std::vector<FeatureRecord> records,
                                const std::map<std::string, std::string>& report_map);

    // Results sorted by (descending score, ascending id); exclude_id never
    // appears. k is clamped to the available record count.
    std::vector<RetrievalHit> retrieve(const Tensorf& query, std::size_t k,
                                       const std::optional<std::string>& exclude_id = {}) const;

    std::size_t size() const { return pooled_.size(); }
    const std::string& report_of(const std::string& id) const;
    std::vector<std::string> ids() const;

    // Pooled unit vector for one record; exposed for oracle tests.
    const std::vector<double>& pooled_of(const std::string& id) const;

    static std::vector<double> pool(const Tensorf& features);

private:
    struct Entry {
        std::string id;
        std::vector<double> pooled;
        std::string report;
    };
    std::vector<Entry> pooled_; // record order preserved from build input
};

// Sidecar report map, JSONL lines of {"id": ..., "report": ...}.
void save_report_map(const std::string& path, const std::map<std::string, std::string>& reports);
std::map<std::string, std::string> load_report_map(const std::string& path);

} // namespace rrg
