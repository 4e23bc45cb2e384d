#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "rrg/errors.hpp"
#include "rrg/features.hpp"
#include "rrg/model.hpp"
#include "rrg/parallel.hpp"
#include "rrg/tape.hpp"
#include "rrg/text.hpp"

namespace rrg {

// ---- optimizer -----------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double lr_main = 5e-4;      // everything except the extractor projection
    double lr_extractor = 5e-5; // the image-feature input projection
};

// The extractor-side parameter group gets its own learning rate.
inline bool is_extractor_param(const std::string& name) { return name == "img.proj"; }

template <typename T>
struct AdamState {
    std::map<std::string, Tensor<T>> m, v;
    std::size_t step = 0;

    static AdamState init(const ModelParams<T>& params) {
        AdamState s;
        for (const auto& [name, t] : params.tensors) {
            s.m.emplace(name, Tensor<T>(t.rows(), t.cols()));
            s.v.emplace(name, Tensor<T>(t.rows(), t.cols()));
        }
        return s;
    }
};

// One bias-corrected Adam update over every parameter with a gradient
// entry. Parameters without an entry are left untouched.
template <typename T>
void adam_step(ModelParams<T>& params, const std::map<std::string, Tensor<T>>& grads,
               AdamState<T>& state, const AdamConfig& cfg) {
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (auto& [name, param] : params.tensors) {
        const auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor<T>& g = git->second;
        if (!g.same_shape(param)) {
            throw NumericError("gradient shape " + g.shape_str() + " for parameter '" + name +
                               "' of shape " + param.shape_str());
        }
        if (!g.all_finite()) {
            throw NumericError("non-finite gradient for parameter '" + name + "'");
        }
        const double lr = is_extractor_param(name) ? cfg.lr_extractor : cfg.lr_main;
        Tensor<T>& m = state.m.at(name);
        Tensor<T>& v = state.v.at(name);
        for (std::size_t i = 0; i < param.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
            param[i] = static_cast<T>(static_cast<double>(param[i]) - update);
        }
    }
}

// ---- beam search -----------------------------------------------------------

// Candidate continuation logits for a batch of content prefixes (BOS
// handling lives in the step closure); one logit row per prefix. Batching
// lets model-backed steps bind parameters once per step.
using BeamStepFn =
    std::function<std::vector<std::vector<double>>(const std::vector<std::vector<int>>&)>;

struct Hypothesis {
    std::vector<int> ids; // generated ids; EOS terminates when present
    double logprob = 0.0;
    bool finished = false;

    double score() const { return logprob / static_cast<double>(ids.size()); }
};

inline std::vector<double> log_softmax(const std::vector<double>& logits) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : logits) mx = std::max(mx, v);
    double denom = 0.0;
    for (double v : logits) denom += std::exp(v - mx);
    const double lse = std::log(denom) + mx;
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

// Length-normalized beam search. Each step expands every active hypothesis
// with the full vocabulary, keeps the top `beam` candidates by
// (score desc, lexicographically smaller ids), and retires the terminal
// ones (EOS, or length hitting max_len). Returns the best retired
// hypothesis under the same ordering.
inline Hypothesis beam_search(const BeamStepFn& step, std::size_t beam, std::size_t max_len,
                              int eos) {
    if (beam < 1) throw UsageError("beam size must be >= 1");
    if (max_len < 1) throw UsageError("beam search needs max_len >= 1");

    const auto better = [](const Hypothesis& a, const Hypothesis& b) {
        const double sa = a.score(), sb = b.score();
        if (sa != sb) return sa > sb;
        return std::lexicographical_compare(a.ids.begin(), a.ids.end(), b.ids.begin(),
                                            b.ids.end());
    };

    std::vector<Hypothesis> active{Hypothesis{}};
    std::vector<Hypothesis> finished;

    for (std::size_t t = 1; t <= max_len && !active.empty(); ++t) {
        std::vector<std::vector<int>> prefixes;
        prefixes.reserve(active.size());
        for (const auto& hyp : active) prefixes.push_back(hyp.ids);
        const auto logits = step(prefixes);
        if (logits.size() != active.size()) {
            throw NumericError("beam step returned " + std::to_string(logits.size()) +
                               " rows for " + std::to_string(active.size()) + " prefixes");
        }

        std::vector<Hypothesis> candidates;
        for (std::size_t h = 0; h < active.size(); ++h) {
            const auto logp = log_softmax(logits[h]);
            candidates.reserve(candidates.size() + logp.size());
            for (std::size_t tok = 0; tok < logp.size(); ++tok) {
                Hypothesis next;
                next.ids = active[h].ids;
                next.ids.push_back(static_cast<int>(tok));
                next.logprob = active[h].logprob + logp[tok];
                next.finished = static_cast<int>(tok) == eos || next.ids.size() == max_len;
                candidates.push_back(std::move(next));
            }
        }
        std::sort(candidates.begin(), candidates.end(), better);
        if (candidates.size() > beam) candidates.resize(beam);
        active.clear();
        for (auto& c : candidates) {
            if (c.finished)
                finished.push_back(std::move(c));
            else
                active.push_back(std::move(c));
        }
    }

    if (finished.empty()) {
        throw NumericError("beam search retired no hypothesis"); // unreachable for vocab >= 1
    }
    std::sort(finished.begin(), finished.end(), better);
    return finished.front();
}

// ---- training loop ---------------------------------------------------------

// One corpus row with its resolved feature matrix.
struct TrainItem {
    std::string id;
    std::string report;
    std::string split; // train | val | test
    Tensorf features;
};

struct EpochStats {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    std::optional<double> val_loss;
};

struct TrainOptions {
    std::size_t epochs = 100;
    std::uint64_t seed = 0;
    AdamConfig adam;
    std::function<void(const EpochStats&)> on_epoch; // optional progress hook
};

template <typename T>
struct TrainOutput {
    ModelParams<T> params;
    std::vector<EpochStats> log;
};

// The retrieval pool is the training split. Training-time retrieval
// excludes the example's own id; validation and inference do not exclude.
inline RetrievalIndex build_train_index(const std::vector<TrainItem>& items) {
    std::vector<FeatureRecord> records;
    std::map<std::string, std::string> reports;
    for (const auto& item : items) {
        if (item.split != "train") continue;
        records.push_back({item.id, item.features});
        reports[item.id] = item.report;
    }
    return RetrievalIndex::build(std::move(records), reports);
}

template <typename T>
TokenSequence retrieved_ids_for(const RetrievalIndex& index, const Vocab& vocab,
                                const ModelConfig& config, const Tensorf& features,
                                const std::optional<std::string>& exclude) {
    const auto hits = index.retrieve(features, 1, exclude);
    return vocab.encode(hits.front().report, config.max_len);
}

// Per-example cross-entropy training (batch size 1) with per-epoch
// shuffling, teacher forcing, and an end-of-epoch validation pass.
// Deterministic for a fixed seed.
template <typename T>
TrainOutput<T> train_model(const std::vector<TrainItem>& items, const Vocab& vocab,
                           const ModelConfig& config, const TrainOptions& opts) {
    config.validate();
    std::vector<std::size_t> train_idx, val_idx;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].split == "train") train_idx.push_back(i);
        if (items[i].split == "val") val_idx.push_back(i);
    }
    if (train_idx.empty()) throw UsageError("training split is empty");
    if (opts.epochs < 1) throw UsageError("epochs must be >= 1");

    std::optional<RetrievalIndex> index;
    if (config.use_retrieval) index = build_train_index(items);

    Rng rng(opts.seed);
    Model<T> model(config);
    auto params = ModelParams<T>::init(config, rng);
    auto adam = AdamState<T>::init(params);

    const auto example_loss = [&](const TrainItem& item, bool training,
                                  const std::optional<std::string>& exclude, Rng& dropout_rng,
                                  bool update) {
        TokenSequence retrieved;
        if (config.use_retrieval) {
            retrieved = retrieved_ids_for<T>(*index, vocab, config, item.features, exclude);
        }
        const TokenSequence ids = vocab.encode(item.report, config.max_len);
        const TokenSequence prefix(ids.begin(), ids.end() - 1);
        const std::vector<int> targets(ids.begin() + 1, ids.end());

        Tape<T> tape;
        auto bound = bind_params(tape, params, update);
        auto f = tape.leaf(item.features.template cast<T>(), false);
        auto logits = model.forward(tape, bound, f, retrieved, prefix, training, dropout_rng);
        auto loss = tape.cross_entropy(logits, targets, Vocab::kPad);
        const double loss_value = static_cast<double>(tape.value(loss)[0]);

        if (update) {
            tape.backward(loss);
            std::map<std::string, Tensor<T>> grads;
            for (const auto& [name, var] : bound.vars) grads.emplace(name, tape.grad(var));
            adam_step(params, grads, adam, opts.adam);
        }
        return loss_value;
    };

    std::vector<EpochStats> log;
    for (std::size_t epoch = 1; epoch <= opts.epochs; ++epoch) {
        rng.shuffle(train_idx);
        double train_sum = 0.0;
        for (std::size_t i : train_idx) {
            train_sum += example_loss(items[i], true, items[i].id, rng, true);
        }
        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = train_sum / static_cast<double>(train_idx.size());
        if (!val_idx.empty()) {
            double val_sum = 0.0;
            Rng eval_rng(0); // unused: no dropout at eval
            for (std::size_t i : val_idx) {
                val_sum += example_loss(items[i], false, std::nullopt, eval_rng, false);
            }
            stats.val_loss = val_sum / static_cast<double>(val_idx.size());
        }
        if (opts.on_epoch) opts.on_epoch(stats);
        log.push_back(stats);
    }
    return {std::move(params), std::move(log)};
}

// ---- generation --------------------------------------------------------

// Beam-decode one report. max_new caps generated tokens (BOS excluded).
template <typename T>
TokenSequence generate_report(const Model<T>& model, const ModelParams<T>& params,
                              const Tensorf& features, const TokenSequence& retrieved,
                              std::size_t beam, std::size_t max_new) {
    BeamStepFn step = [&](const std::vector<std::vector<int>>& batch) {
        Tape<T> tape;
        Rng rng(0); // eval mode, no dropout draws
        auto bound = bind_params(tape, params, false);
        auto f = tape.leaf(features.template cast<T>(), false);
        std::vector<std::vector<double>> rows;
        rows.reserve(batch.size());
        for (const auto& content : batch) {
            TokenSequence prefix{Vocab::kBos};
            prefix.insert(prefix.end(), content.begin(), content.end());
            auto logits = model.forward(tape, bound, f, retrieved, prefix, false, rng);
            const Tensor<T>& L = tape.value(logits);
            std::vector<double> last(L.cols());
            for (std::size_t j = 0; j < L.cols(); ++j)
                last[j] = static_cast<double>(L.at(L.rows() - 1, j));
            rows.push_back(std::move(last));
        }
        return rows;
    };
    const Hypothesis best = beam_search(step, beam, max_new, Vocab::kEos);
    TokenSequence out{Vocab::kBos};
    out.insert(out.end(), best.ids.begin(), best.ids.end());
    if (out.back() != Vocab::kEos) out.push_back(Vocab::kEos);
    return out;
}

// Decode every item, in corpus order, fanning out over `jobs` threads.
// Params are immutable here, so workers share them freely; results merge
// in input order regardless of the thread count. Inference does not exclude
// the query's own id from retrieval; exclude_self restores the
// training-time conditioning when regenerating train-split examples.
template <typename T>
std::vector<std::pair<std::string, std::string>> generate_reports(
    const ModelParams<T>& params, const Vocab& vocab, const std::vector<TrainItem>& items,
    const RetrievalIndex* index, std::size_t beam, std::size_t jobs = 1,
    bool exclude_self = false) {
    const Model<T> model(params.config);
    if (params.config.use_retrieval && index == nullptr) {
        throw UsageError("model uses retrieval but no index was supplied");
    }
    std::vector<std::pair<std::string, std::string>> results(items.size());
    const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, items.size()));

    auto run_range = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            TokenSequence retrieved;
            if (params.config.use_retrieval) {
                const std::optional<std::string> exclude =
                    exclude_self ? std::optional<std::string>(items[i].id) : std::nullopt;
                retrieved = retrieved_ids_for<T>(*index, vocab, params.config, items[i].features,
                                                 exclude);
            }
            const TokenSequence out = generate_report(model, params, items[i].features, retrieved,
                                                      beam, params.config.max_len - 1);
            results[i] = {items[i].id, vocab.decode(out)};
        }
    };

    run_partitioned(items.size(), workers, run_range);
    return results;
}

} // namespace rrg
