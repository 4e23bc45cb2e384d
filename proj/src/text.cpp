#include "rrg/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "rrg/errors.hpp"
#include "rrg/rng.hpp"

namespace rrg {

namespace {

bool is_ascii_alnum(char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9');
}

} // namespace

std::string normalize(const std::string& text) {
    std::string lowered;
    lowered.reserve(text.size());
    for (char c : text) {
        lowered.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a') : c);
    }

    // Digit runs -> " num " before the punctuation pass so "2" and "2000"
    // both land as the single token "num".
    std::string digits_replaced;
    digits_replaced.reserve(lowered.size() + 8);
    for (std::size_t i = 0; i < lowered.size();) {
        if (lowered[i] >= '0' && lowered[i] <= '9') {
            while (i < lowered.size() && lowered[i] >= '0' && lowered[i] <= '9') ++i;
            digits_replaced += " num ";
        } else {
            digits_replaced.push_back(lowered[i]);
            ++i;
        }
    }

    std::string cleaned;
    cleaned.reserve(digits_replaced.size());
    for (std::size_t i = 0; i < digits_replaced.size(); ++i) {
        const char c = digits_replaced[i];
        if (is_ascii_alnum(c)) {
            cleaned.push_back(c);
        } else if (c == '-' && i > 0 && i + 1 < digits_replaced.size() &&
                   is_ascii_alnum(digits_replaced[i - 1]) &&
                   is_ascii_alnum(digits_replaced[i + 1])) {
            cleaned.push_back('-');
        } else {
            cleaned.push_back(' ');
        }
    }

    std::string out;
    out.reserve(cleaned.size());
    bool in_space = true;
    for (char c : cleaned) {
        if (c == ' ') {
            if (!in_space) out.push_back(' ');
            in_space = true;
        } else {
            out.push_back(c);
            in_space = false;
        }
    }
    if (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

std::vector<std::string> tokenize(const std::string& normalized) {
    std::vector<std::string> tokens;
    std::istringstream is(normalized);
    std::string tok;
    while (is >> tok) tokens.push_back(tok);
    return tokens;
}

Vocab Vocab::build(const std::vector<std::string>& corpus, int min_freq) {
    if (min_freq < 1) {
        throw UsageError("min_freq must be >= 1, got " + std::to_string(min_freq));
    }
    std::map<std::string, std::size_t> counts;
    for (const auto& text : corpus) {
        for (const auto& tok : tokenize(normalize(text))) ++counts[tok];
    }

    std::vector<std::pair<std::string, std::size_t>> kept;
    for (const auto& [tok, n] : counts) {
        if (n >= static_cast<std::size_t>(min_freq)) kept.emplace_back(tok, n);
    }
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocab v;
    v.min_freq_ = min_freq;
    v.id_to_token_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
    for (const auto& [tok, n] : kept) {
        v.token_to_id_[tok] = static_cast<int>(v.id_to_token_.size());
        v.id_to_token_.push_back(tok);
    }
    return v;
}

int Vocab::id_of(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocab::token_of(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
        throw DataError("token id " + std::to_string(id) + " out of range [0," +
                        std::to_string(id_to_token_.size()) + ")");
    }
    return id_to_token_[static_cast<std::size_t>(id)];
}

TokenSequence Vocab::encode(const std::string& text, std::size_t max_len) const {
    if (max_len < 2) {
        throw UsageError("max_len must be >= 2 to fit BOS/EOS, got " + std::to_string(max_len));
    }
    TokenSequence ids;
    ids.push_back(kBos);
    const auto tokens = tokenize(normalize(text));
    const std::size_t keep = std::min(tokens.size(), max_len - 2);
    for (std::size_t i = 0; i < keep; ++i) ids.push_back(id_of(tokens[i]));
    ids.push_back(kEos);
    return ids;
}

std::string Vocab::decode(const TokenSequence& ids) const {
    std::string out;
    for (int id : ids) {
        if (id == kPad || id == kBos || id == kEos) continue;
        const std::string& tok = token_of(id);
        if (!out.empty()) out.push_back(' ');
        out += tok;
    }
    return out;
}

void Vocab::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open vocab file for writing: " + path);
    for (std::size_t i = kReserved; i < id_to_token_.size(); ++i) {
        os << id_to_token_[i] << '\n';
    }
    if (!os) throw DataError("failed writing vocab file: " + path);
}

Vocab Vocab::load(const std::string& path, int min_freq) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open vocab file: " + path);
    Vocab v;
    v.min_freq_ = min_freq;
    v.id_to_token_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) {
            throw DataError("vocab file " + path + ": empty token at line " +
                            std::to_string(line_no));
        }
        if (v.token_to_id_.count(line)) {
            throw DataError("vocab file " + path + ": duplicate token '" + line + "' at line " +
                            std::to_string(line_no));
        }
        v.token_to_id_[line] = static_cast<int>(v.id_to_token_.size());
        v.id_to_token_.push_back(line);
    }
    return v;
}

std::uint64_t Vocab::fingerprint() const {
    std::string joined;
    for (std::size_t i = kReserved; i < id_to_token_.size(); ++i) {
        joined += id_to_token_[i];
        joined.push_back('\n');
    }
    return fnv1a64(joined);
}

} // namespace rrg
