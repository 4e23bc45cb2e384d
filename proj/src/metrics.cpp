#include "rrg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <unordered_map>

#include "rrg/errors.hpp"
#include "rrg/parallel.hpp"
#include "rrg/text.hpp"

namespace rrg::metrics {

namespace {

// n-gram keyed by its joined tokens; '\x1f' cannot occur inside a token.
std::string ngram_key(const Tokens& toks, std::size_t start, int n) {
    std::string key;
    for (int i = 0; i < n; ++i) {
        if (i) key.push_back('\x1f');
        key += toks[start + static_cast<std::size_t>(i)];
    }
    return key;
}

std::unordered_map<std::string, std::size_t> ngram_counts(const Tokens& toks, int n) {
    std::unordered_map<std::string, std::size_t> counts;
    if (toks.size() < static_cast<std::size_t>(n)) return counts;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i) {
        ++counts[ngram_key(toks, i, n)];
    }
    return counts;
}

} // namespace

std::vector<double> bleu(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs,
                         int max_n) {
    if (hyps.size() != refs.size()) {
        throw UsageError("bleu: " + std::to_string(hyps.size()) + " hypotheses vs " +
                         std::to_string(refs.size()) + " references");
    }
    if (max_n < 1) throw UsageError("bleu: max_n must be >= 1");

    std::vector<double> clipped(static_cast<std::size_t>(max_n), 0.0);
    std::vector<double> total(static_cast<std::size_t>(max_n), 0.0);
    double hyp_len = 0.0, ref_len = 0.0;

    for (std::size_t e = 0; e < hyps.size(); ++e) {
        hyp_len += static_cast<double>(hyps[e].size());
        ref_len += static_cast<double>(refs[e].size());
        for (int n = 1; n <= max_n; ++n) {
            const auto hyp_counts = ngram_counts(hyps[e], n);
            const auto ref_counts = ngram_counts(refs[e], n);
            for (const auto& [gram, cnt] : hyp_counts) {
                total[static_cast<std::size_t>(n - 1)] += static_cast<double>(cnt);
                const auto it = ref_counts.find(gram);
                if (it != ref_counts.end()) {
                    clipped[static_cast<std::size_t>(n - 1)] +=
                        static_cast<double>(std::min(cnt, it->second));
                }
            }
        }
    }

    const double bp = hyp_len == 0.0 ? 0.0 : std::min(1.0, std::exp(1.0 - ref_len / hyp_len));
    std::vector<double> scores(static_cast<std::size_t>(max_n), 0.0);
    for (int k = 1; k <= max_n; ++k) {
        double log_sum = 0.0;
        bool zero = false;
        for (int i = 1; i <= k; ++i) {
            const std::size_t idx = static_cast<std::size_t>(i - 1);
            if (clipped[idx] == 0.0 || total[idx] == 0.0) {
                zero = true;
                break;
            }
            log_sum += std::log(clipped[idx] / total[idx]) / static_cast<double>(k);
        }
        scores[static_cast<std::size_t>(k - 1)] = zero ? 0.0 : bp * std::exp(log_sum);
    }
    return scores;
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<std::size_t> prev(m + 1, 0), cur(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

double rouge_l(const Tokens& hyp, const Tokens& ref, double beta) {
    if (ref.empty()) throw UsageError("rouge_l: empty reference");
    if (hyp.empty()) return 0.0;
    const double lcs = static_cast<double>(lcs_length(hyp, ref));
    if (lcs == 0.0) return 0.0;
    const double r = lcs / static_cast<double>(ref.size());
    const double p = lcs / static_cast<double>(hyp.size());
    const double b2 = beta * beta;
    return (1.0 + b2) * r * p / (r + b2 * p);
}

std::string stem(const std::string& word) {
    auto ends_with = [&](const char* suffix) {
        const std::size_t n = std::string(suffix).size();
        return word.size() >= n && word.compare(word.size() - n, n, suffix) == 0;
    };
    // one rule applies, longest suffix first; never shrink below 3 chars
    if (ends_with("sses")) return word.substr(0, word.size() - 2);
    if (ends_with("ies") && word.size() > 4) return word.substr(0, word.size() - 3) + "i";
    if (ends_with("ing") && word.size() >= 6) return word.substr(0, word.size() - 3);
    if (ends_with("ed") && word.size() >= 5) return word.substr(0, word.size() - 2);
    if (ends_with("ly") && word.size() >= 5) return word.substr(0, word.size() - 2);
    if (ends_with("s") && !ends_with("ss") && !ends_with("us") && word.size() >= 4)
        return word.substr(0, word.size() - 1);
    return word;
}

namespace {

// Alignment search state shared by the exhaustive and greedy paths.
struct AlignProblem {
    const Tokens& hyp;
    const Tokens& ref;
    Tokens hyp_stem, ref_stem;

    // per-word exact budgets and per-stem budgets over exact-stage leftovers
    std::map<std::string, int> exact_need;        // word -> pairs to form
    std::map<std::string, int> stem_need;         // stem -> pairs to form
    std::map<std::string, int> hyp_word_left;     // positions not yet consumed
    std::map<std::string, int> ref_word_left;
    std::size_t total_matches = 0;

    explicit AlignProblem(const Tokens& h, const Tokens& r) : hyp(h), ref(r) {
        std::map<std::string, int> hw, rw;
        for (const auto& w : hyp) ++hw[w];
        for (const auto& w : ref) ++rw[w];
        hyp_word_left = hw;
        ref_word_left = rw;
        for (const auto& [w, c] : hw) {
            const auto it = rw.find(w);
            if (it != rw.end()) exact_need[w] = std::min(c, it->second);
        }
        // leftovers grouped by stem
        std::map<std::string, int> hs, rs;
        for (const auto& [w, c] : hw) {
            const int used = exact_need.count(w) ? exact_need[w] : 0;
            if (c > used) hs[stem(w)] += c - used;
        }
        for (const auto& [w, c] : rw) {
            const int used = exact_need.count(w) ? exact_need[w] : 0;
            if (c > used) rs[stem(w)] += c - used;
        }
        for (const auto& [s, c] : hs) {
            const auto it = rs.find(s);
            if (it != rs.end() && std::min(c, it->second) > 0)
                stem_need[s] = std::min(c, it->second);
        }
        for (const auto& [w, c] : exact_need) total_matches += static_cast<std::size_t>(c);
        for (const auto& [s, c] : stem_need) total_matches += static_cast<std::size_t>(c);
        hyp_stem.reserve(hyp.size());
        ref_stem.reserve(ref.size());
        for (const auto& w : hyp) hyp_stem.push_back(stem(w));
        for (const auto& w : ref) ref_stem.push_back(stem(w));
    }
};

constexpr std::size_t kExhaustiveMatchCap = 20;

class ChunkMinimizer {
public:
    explicit ChunkMinimizer(const AlignProblem& prob) : prob_(prob) {}

    // Minimal chunk count over all stage-maximal alignments; SIZE_MAX when
    // the search found no complete alignment (callers fall back to greedy).
    std::size_t solve() {
        best_ = std::numeric_limits<std::size_t>::max();
        ref_used_.assign(prob_.ref.size(), false);
        exact_left_ = prob_.exact_need;
        stem_left_ = prob_.stem_need;
        hyp_avail_ = prob_.hyp_word_left;
        ref_avail_ = prob_.ref_word_left;
        recurse(0, 0, 0, std::numeric_limits<std::size_t>::max());
        return best_;
    }

private:
    // i: hyp position; matched: pairs so far; chunks: chunks so far;
    // prev_ref: ref position of the previous matched pair (for contiguity).
    // Budget maps enforce stage maximality; availability maps are pruning.
    void recurse(std::size_t i, std::size_t matched, std::size_t chunks, std::size_t prev_ref) {
        if (chunks >= best_) return; // chunk count only grows
        if (matched == prob_.total_matches) {
            best_ = chunks;
            return;
        }
        if (i == prob_.hyp.size()) return;

        const std::string& w = prob_.hyp[i];
        const std::string& s = prob_.hyp_stem[i];
        const bool have_prev = prev_ref != std::numeric_limits<std::size_t>::max();

        --hyp_avail_[w]; // position i is consumed by every branch below

        // candidate ref positions, chunk-continuing one first so the first
        // full dive is already good and prunes hard
        std::vector<std::size_t> candidates;
        candidates.reserve(prob_.ref.size());
        const std::size_t cont =
            have_prev ? prev_ref + 1 : std::numeric_limits<std::size_t>::max();
        if (cont < prob_.ref.size() && !ref_used_[cont]) candidates.push_back(cont);
        for (std::size_t j = 0; j < prob_.ref.size(); ++j) {
            if (!ref_used_[j] && j != cont) candidates.push_back(j);
        }

        const auto exact_need_of = [&](const std::string& word) {
            const auto it = exact_left_.find(word);
            return it == exact_left_.end() ? 0 : it->second;
        };

        for (std::size_t j : candidates) {
            const bool exact = prob_.ref[j] == w;
            int* budget = nullptr;
            if (exact) {
                auto it = exact_left_.find(w);
                if (it != exact_left_.end() && it->second > 0) budget = &it->second;
            } else if (prob_.ref_stem[j] == s) {
                auto it = stem_left_.find(s);
                if (it != stem_left_.end() && it->second > 0 &&
                    hyp_avail_[w] >= exact_need_of(w) &&
                    ref_avail_[prob_.ref[j]] - 1 >= exact_need_of(prob_.ref[j])) {
                    budget = &it->second;
                }
            }
            if (!budget) continue;

            const bool continues = have_prev && j == prev_ref + 1;
            ref_used_[j] = true;
            --*budget;
            --ref_avail_[prob_.ref[j]];
            recurse(i + 1, matched + 1, chunks + (continues ? 0 : 1), j);
            ++ref_avail_[prob_.ref[j]];
            ++*budget;
            ref_used_[j] = false;
        }

        // leave hyp position i unmatched if its word block can spare it
        if (hyp_avail_[w] >= exact_need_of(w)) {
            recurse(i + 1, matched, chunks, std::numeric_limits<std::size_t>::max());
        }

        ++hyp_avail_[w];
    }

    const AlignProblem& prob_;
    std::size_t best_ = 0;
    std::vector<bool> ref_used_;
    std::map<std::string, int> exact_left_, stem_left_;
    std::map<std::string, int> hyp_avail_, ref_avail_;
};

// Left-to-right greedy fallback: prefer continuing the current chunk, then
// the leftmost legal ref position, exact budget before stem budget.
std::size_t greedy_chunks(const AlignProblem& prob) {
    std::vector<bool> ref_used(prob.ref.size(), false);
    auto exact_left = prob.exact_need;
    auto stem_left = prob.stem_need;
    std::size_t chunks = 0, matched = 0;
    std::size_t prev_ref = std::numeric_limits<std::size_t>::max();
    bool prev_matched = false;

    for (std::size_t i = 0; i < prob.hyp.size() && matched < prob.total_matches; ++i) {
        const std::string& w = prob.hyp[i];
        const std::string& s = prob.hyp_stem[i];
        auto try_match = [&](bool want_exact) -> long {
            const std::size_t cont = prev_matched ? prev_ref + 1 : std::numeric_limits<std::size_t>::max();
            if (cont < prob.ref.size() && !ref_used[cont]) {
                const bool is_exact = prob.ref[cont] == w;
                if (is_exact == want_exact &&
                    (is_exact ? exact_left.count(w) && exact_left[w] > 0
                              : prob.ref_stem[cont] == s && stem_left.count(s) && stem_left[s] > 0))
                    return static_cast<long>(cont);
            }
            for (std::size_t j = 0; j < prob.ref.size(); ++j) {
                if (ref_used[j]) continue;
                const bool is_exact = prob.ref[j] == w;
                if (want_exact && is_exact && exact_left.count(w) && exact_left[w] > 0)
                    return static_cast<long>(j);
                if (!want_exact && !is_exact && prob.ref_stem[j] == s && stem_left.count(s) &&
                    stem_left[s] > 0)
                    return static_cast<long>(j);
            }
            return -1;
        };

        long j = try_match(true);
        bool exact = true;
        if (j < 0) {
            j = try_match(false);
            exact = false;
        }
        if (j < 0) {
            prev_matched = false;
            continue;
        }
        if (exact)
            --exact_left[w];
        else
            --stem_left[s];
        ref_used[static_cast<std::size_t>(j)] = true;
        const bool continues = prev_matched && static_cast<std::size_t>(j) == prev_ref + 1;
        if (!continues) ++chunks;
        prev_ref = static_cast<std::size_t>(j);
        prev_matched = true;
        ++matched;
    }
    return chunks;
}

} // namespace

double meteor(const Tokens& hyp, const Tokens& ref, const MeteorParams& params) {
    if (ref.empty()) throw UsageError("meteor: empty reference");
    if (hyp.empty()) return 0.0;

    AlignProblem prob(hyp, ref);
    const double m = static_cast<double>(prob.total_matches);
    if (m == 0.0) return 0.0;

    std::size_t chunks;
    if (prob.total_matches <= kExhaustiveMatchCap) {
        chunks = ChunkMinimizer(prob).solve();
        if (chunks == std::numeric_limits<std::size_t>::max()) chunks = greedy_chunks(prob);
    } else {
        chunks = greedy_chunks(prob);
    }

    const double p = m / static_cast<double>(hyp.size());
    const double r = m / static_cast<double>(ref.size());
    const double f = p * r / (params.alpha * p + (1.0 - params.alpha) * r);
    const double penalty =
        params.gamma * std::pow(static_cast<double>(chunks) / m, params.beta_pen);
    return f * (1.0 - penalty);
}

ScoreReport score_corpus(const std::vector<std::pair<std::string, std::string>>& pairs,
                         const std::vector<std::string>& ids, std::size_t jobs) {
    if (pairs.empty()) throw UsageError("score_corpus: no (hypothesis, reference) pairs");
    if (!ids.empty() && ids.size() != pairs.size()) {
        throw UsageError("score_corpus: " + std::to_string(ids.size()) + " ids for " +
                         std::to_string(pairs.size()) + " pairs");
    }

    std::vector<Tokens> hyps, refs;
    hyps.reserve(pairs.size());
    refs.reserve(pairs.size());
    for (const auto& [h, r] : pairs) {
        hyps.push_back(tokenize(normalize(h)));
        refs.push_back(tokenize(normalize(r)));
    }
    for (std::size_t i = 0; i < refs.size(); ++i) {
        if (refs[i].empty()) {
            throw UsageError("score_corpus: reference " + std::to_string(i) +
                             " is empty after normalization");
        }
    }

    ScoreReport report;
    const auto corpus_bleu = bleu(hyps, refs, 4);
    for (int k = 0; k < 4; ++k) report.bleu[k] = corpus_bleu[static_cast<std::size_t>(k)];

    report.examples.resize(pairs.size());
    const auto score_range = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            ExampleScores& ex = report.examples[i];
            ex.id = ids.empty() ? std::to_string(i) : ids[i];
            const auto sent_bleu = bleu({hyps[i]}, {refs[i]}, 4);
            for (int k = 0; k < 4; ++k) ex.bleu[k] = sent_bleu[static_cast<std::size_t>(k)];
            ex.rouge_l = rouge_l(hyps[i], refs[i]);
            ex.meteor = meteor(hyps[i], refs[i]);
        }
    };
    run_partitioned(pairs.size(), std::min(jobs, pairs.size()), score_range);

    // reduce in input order: the report is independent of the worker count
    double rouge_sum = 0.0, meteor_sum = 0.0;
    for (const auto& ex : report.examples) {
        rouge_sum += ex.rouge_l;
        meteor_sum += ex.meteor;
    }
    report.rouge_l = rouge_sum / static_cast<double>(pairs.size());
    report.meteor = meteor_sum / static_cast<double>(pairs.size());
    return report;
}

nlohmann::ordered_json to_json(const ScoreReport& report) {
    nlohmann::ordered_json j;
    j["bleu1"] = report.bleu[0];
    j["bleu2"] = report.bleu[1];
    j["bleu3"] = report.bleu[2];
    j["bleu4"] = report.bleu[3];
    j["rouge_l"] = report.rouge_l;
    j["meteor"] = report.meteor;
    nlohmann::ordered_json examples = nlohmann::ordered_json::array();
    for (const auto& ex : report.examples) {
        nlohmann::ordered_json e;
        e["id"] = ex.id;
        e["bleu1"] = ex.bleu[0];
        e["bleu2"] = ex.bleu[1];
        e["bleu3"] = ex.bleu[2];
        e["bleu4"] = ex.bleu[3];
        e["rouge_l"] = ex.rouge_l;
        e["meteor"] = ex.meteor;
        examples.push_back(std::move(e));
    }
    j["examples"] = std::move(examples);
    return j;
}

} // namespace rrg::metrics
