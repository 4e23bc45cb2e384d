#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace rrg {

// Report text cleanup applied before any tokenization:
//   - ASCII lowercasing
//   - maximal digit runs become the standalone token "num"
//   - punctuation and non-ASCII bytes become spaces, except '-' between two
//     alphanumeric characters (intra-word hyphen), which is kept
//   - whitespace collapsed to single spaces, trimmed
std::string normalize(const std::string& text);

// Whitespace split of already-normalized text.
std::vector<std::string> tokenize(const std::string& normalized);

// Token ids produced by encode(); BOS/EOS are present whenever the sequence
// is bound for the model.
using TokenSequence = std::vector<int>;

// Bidirectional token<->id map with fixed reserved ids. Immutable once built.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;
    static constexpr int kReserved = 4;

    // Tokens kept iff they occur >= min_freq times across the corpus;
    // id order is (descending count, ascending lexicographic).
    static Vocab build(const std::vector<std::string>& corpus, int min_freq);

    int id_of(const std::string& token) const; // kUnk when absent
    const std::string& token_of(int id) const; // throws DataError out of range
    std::size_t size() const { return id_to_token_.size(); }
    int min_freq() const { return min_freq_; }

    // BOS + up to max_len-2 content tokens + EOS.
    TokenSequence encode(const std::string& text, std::size_t max_len) const;

    // Drops PAD/BOS/EOS, joins remaining tokens with single spaces.
    std::string decode(const TokenSequence& ids) const;

    // One non-reserved token per line, line number = id - 4.
    void save(const std::string& path) const;
    static Vocab load(const std::string& path, int min_freq = 1);

    // FNV-1a over the serialized token list; checkpoint compatibility key.
    std::uint64_t fingerprint() const;

private:
    Vocab() = default;

    std::unordered_map<std::string, int> token_to_id_;
    std::vector<std::string> id_to_token_;
    int min_freq_ = 1;
};

} // namespace rrg
