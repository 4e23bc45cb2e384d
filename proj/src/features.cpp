#include "rrg/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "rrg/errors.hpp"
#include "rrg/rng.hpp"

namespace rrg {

namespace {

constexpr char kMagic[4] = {'F', 'V', 'E', 'C'};
constexpr std::uint8_t kVersion = 0x01;

void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

class Reader {
public:
    Reader(const std::string& bytes, const std::string& path)
        : bytes_(bytes), path_(path) {}

    std::uint32_t u32() {
        need(4, "u32");
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i)
            v = (v << 8) | static_cast<std::uint8_t>(bytes_[pos_ + static_cast<std::size_t>(i)]);
        pos_ += 4;
        return v;
    }

    float f32() {
        const std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    std::string raw(std::size_t n, const char* what) {
        need(n, what);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    void need(std::size_t n, const char* what) {
        if (bytes_.size() - pos_ < n) {
            throw DataError(path_ + ": truncated reading " + what + " at byte offset " +
                            std::to_string(pos_) + " (need " + std::to_string(n) + ", have " +
                            std::to_string(bytes_.size() - pos_) + ")");
        }
    }

private:
    const std::string& bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

} // namespace

Tensorf extract_stub(const std::string& content, std::size_t d_f, std::size_t p,
                     std::uint64_t seed) {
    if (d_f < 1 || p < 1) {
        throw UsageError("stub extractor needs d_f, p >= 1 (got " + std::to_string(d_f) + ", " +
                         std::to_string(p) + ")");
    }
    const std::uint64_t h = fnv1a64(content);
    // mix the user seed into the content hash so distinct seeds decorrelate
    Rng rng(h ^ (seed * 0x9e3779b97f4a7c15ULL + 0x243f6a8885a308d3ULL));
    return Tensorf::filled_normal(p, d_f, rng);
}

void save_features(const std::string& path, const std::vector<FeatureRecord>& records) {
    std::size_t p = 0, d_f = 0;
    if (!records.empty()) {
        p = records[0].features.rows();
        d_f = records[0].features.cols();
    }
    std::string ids;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (r.features.rows() != p || r.features.cols() != d_f) {
            throw DataError("feature store requires uniform shapes: record '" + r.id + "' is " +
                            r.features.shape_str() + ", expected " + std::to_string(p) + "x" +
                            std::to_string(d_f));
        }
        if (i > 0) ids.push_back('\n');
        ids += r.id;
    }

    std::string out;
    out.append(kMagic, 4);
    out.push_back(static_cast<char>(kVersion));
    put_u32(out, static_cast<std::uint32_t>(records.size()));
    put_u32(out, static_cast<std::uint32_t>(p));
    put_u32(out, static_cast<std::uint32_t>(d_f));
    for (const auto& r : records)
        for (std::size_t i = 0; i < r.features.size(); ++i) put_f32(out, r.features[i]);
    put_u32(out, static_cast<std::uint32_t>(ids.size()));
    out += ids;

    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open feature file for writing: " + path);
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!os) throw DataError("failed writing feature file: " + path);
}

std::vector<FeatureRecord> load_features(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open feature file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

    Reader r(bytes, path);
    const std::string magic = r.raw(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0) {
        throw DataError(path + ": bad magic at byte offset 0 (not an FVEC file)");
    }
    const std::string ver = r.raw(1, "version");
    if (static_cast<std::uint8_t>(ver[0]) != kVersion) {
        throw DataError(path + ": unsupported FVEC version at byte offset 4");
    }
    const std::uint32_t count = r.u32();
    const std::uint32_t p = r.u32();
    const std::uint32_t d_f = r.u32();
    if (count > 0 && (p == 0 || d_f == 0)) {
        throw DataError(path + ": zero feature dims in header at byte offset 9");
    }

    std::vector<Tensorf> payloads;
    payloads.reserve(count);
    for (std::uint32_t rec = 0; rec < count; ++rec) {
        Tensorf t(p, d_f);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = r.f32();
        payloads.push_back(std::move(t));
    }

    const std::uint32_t ids_len = r.u32();
    const std::size_t ids_at = r.pos();
    const std::string ids_blob = r.raw(ids_len, "ids block");
    if (r.remaining() != 0) {
        throw DataError(path + ": trailing bytes at byte offset " + std::to_string(r.pos()));
    }

    std::vector<std::string> ids;
    if (count > 0) {
        std::size_t start = 0;
        for (;;) {
            const std::size_t nl = ids_blob.find('\n', start);
            if (nl == std::string::npos) {
                ids.push_back(ids_blob.substr(start));
                break;
            }
            ids.push_back(ids_blob.substr(start, nl - start));
            start = nl + 1;
        }
    } else if (ids_len != 0) {
        throw DataError(path + ": nonempty ids block for empty store at byte offset " +
                        std::to_string(ids_at));
    }
    if (ids.size() != count) {
        throw DataError(path + ": id count mismatch at byte offset " + std::to_string(ids_at) +
                        " (header says " + std::to_string(count) + ", ids block has " +
                        std::to_string(ids.size()) + ")");
    }
    for (const auto& id : ids) {
        if (id.empty()) {
            throw DataError(path + ": empty record id in ids block at byte offset " +
                            std::to_string(ids_at));
        }
    }

    std::vector<FeatureRecord> records;
    records.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        records.push_back({ids[i], std::move(payloads[i])});
    }
    return records;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw NumericError("cosine dimension mismatch: " + std::to_string(a.size()) + " vs " +
                           std::to_string(b.size()));
    }
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) {
        throw NumericError("cosine of zero-norm vector");
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> RetrievalIndex::pool(const Tensorf& features) {
    const std::size_t p = features.rows(), d = features.cols();
    if (p == 0 || d == 0) throw NumericError("cannot pool empty feature matrix");
    std::vector<double> v(d, 0.0);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < d; ++j) v[j] += static_cast<double>(features.at(i, j));
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        v[j] /= static_cast<double>(p);
        norm += v[j] * v[j];
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) throw NumericError("pooled feature vector has zero norm");
    for (double& x : v) x /= norm;
    return v;
}

RetrievalIndex RetrievalIndex::build(std::vector<FeatureRecord> records,
                                     const std::map<std::string, std::string>& report_map) {
    RetrievalIndex index;
    index.pooled_.reserve(records.size());
    for (auto& r : records) {
        if (!r.features.all_finite()) {
            throw NumericError("record '" + r.id + "' contains non-finite features");
        }
        auto it = report_map.find(r.id);
        if (it == report_map.end()) {
            throw DataError("record '" + r.id + "' has no report in the report map");
        }
        for (const auto& e : index.pooled_) {
            if (e.id == r.id) throw DataError("duplicate record id '" + r.id + "' in index");
        }
        index.pooled_.push_back({r.id, pool(r.features), it->second});
    }
    return index;
}

std::vector<RetrievalHit> RetrievalIndex::retrieve(
    const Tensorf& query, std::size_t k, const std::optional<std::string>& exclude_id) const {
    if (k < 1) throw UsageError("retrieve requires k >= 1");
    const std::vector<double> q = pool(query);

    std::vector<RetrievalHit> hits;
    hits.reserve(pooled_.size());
    for (const auto& e : pooled_) {
        if (exclude_id && e.id == *exclude_id) continue;
        if (q.size() != e.pooled.size()) {
            throw NumericError("query dim " + std::to_string(q.size()) + " vs index dim " +
                               std::to_string(e.pooled.size()));
        }
        double dot = 0.0;
        for (std::size_t j = 0; j < q.size(); ++j) dot += q[j] * e.pooled[j];
        hits.push_back({e.id, dot, e.report});
    }
    if (hits.empty()) {
        throw DataError("retrieval index empty" +
                        std::string(exclude_id ? " after excluding '" + *exclude_id + "'" : ""));
    }
    std::sort(hits.begin(), hits.end(), [](const RetrievalHit& a, const RetrievalHit& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    });
    if (hits.size() > k) hits.resize(k);
    return hits;
}

const std::string& RetrievalIndex::report_of(const std::string& id) const {
    for (const auto& e : pooled_)
        if (e.id == id) return e.report;
    throw DataError("no record with id '" + id + "' in index");
}

const std::vector<double>& RetrievalIndex::pooled_of(const std::string& id) const {
    for (const auto& e : pooled_)
        if (e.id == id) return e.pooled;
    throw DataError("no record with id '" + id + "' in index");
}

std::vector<std::string> RetrievalIndex::ids() const {
    std::vector<std::string> out;
    out.reserve(pooled_.size());
    for (const auto& e : pooled_) out.push_back(e.id);
    return out;
}

void save_report_map(const std::string& path, const std::map<std::string, std::string>& reports) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open report map for writing: " + path);
    for (const auto& [id, report] : reports) {
        nlohmann::ordered_json j;
        j["id"] = id;
        j["report"] = report;
        os << j.dump() << '\n';
    }
    if (!os) throw DataError("failed writing report map: " + path);
}

std::map<std::string, std::string> load_report_map(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open report map: " + path);
    std::map<std::string, std::string> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": bad JSON: " + e.what());
        }
        if (!j.contains("id") || !j.contains("report") || !j["id"].is_string() ||
            !j["report"].is_string()) {
            throw DataError(path + ":" + std::to_string(line_no) +
                            ": expected {\"id\": string, \"report\": string}");
        }
        const std::string id = j["id"];
        if (out.count(id)) {
            throw DataError(path + ":" + std::to_string(line_no) + ": duplicate id '" + id + "'");
        }
        out[id] = j["report"];
    }
    return out;
}

} // namespace rrg
