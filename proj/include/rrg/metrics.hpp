#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace rrg::metrics {

using Tokens = std::vector<std::string>;

struct BleuParams {
    int max_n = 4;
};

struct RougeParams {
    double beta = 1.2;
};

struct MeteorParams {
    double alpha = 0.9;    // recall weight in the harmonic mean
    double beta_pen = 3.0; // fragmentation exponent
    double gamma = 0.5;    // fragmentation weight
};

// Corpus-level BLEU-1..max_n: clipped modified n-gram precision pooled over
// all pairs, geometric mean with uniform 1/k weights, brevity penalty
// min(1, e^(1 - r/c)). A zero precision at any order zeroes that score.
std::vector<double> bleu(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs,
                         int max_n = 4);

std::size_t lcs_length(const Tokens& a, const Tokens& b);

// LCS F-measure: R = LCS/|ref|, P = LCS/|hyp|, F = (1+b^2)RP/(R+b^2 P).
double rouge_l(const Tokens& hyp, const Tokens& ref, double beta = 1.2);

// Exact-then-stem unigram alignment, chunk-minimizing among maximal
// matchings (exhaustive up to 20 matches, greedy beyond), harmonic-mean F
// discounted by the fragmentation penalty gamma*(chunks/matches)^beta_pen.
double meteor(const Tokens& hyp, const Tokens& ref, const MeteorParams& params = {});

// The suffix-stripping stemmer used for METEOR stage-two matches.
std::string stem(const std::string& word);

struct ExampleScores {
    std::string id;
    double bleu[4] = {0, 0, 0, 0}; // sentence-level, same formula on one pair
    double rouge_l = 0;
    double meteor = 0;
};

struct ScoreReport {
    double bleu[4] = {0, 0, 0, 0}; // corpus-level statistics, not means
    double rouge_l = 0;            // mean over examples
    double meteor = 0;             // mean over examples
    std::vector<ExampleScores> examples;
};

// Normalizes and tokenizes both sides of every (hypothesis, reference) text
// pair, then scores. ids label the per-example breakdown; pass {} to use
// positional labels. Per-example scoring fans out over `jobs` threads and
// merges in input order, so the report is identical at any thread count.
ScoreReport score_corpus(const std::vector<std::pair<std::string, std::string>>& pairs,
                         const std::vector<std::string>& ids = {}, std::size_t jobs = 1);

nlohmann::ordered_json to_json(const ScoreReport& report);

} // namespace rrg::metrics
