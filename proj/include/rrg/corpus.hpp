#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rrg/model.hpp"
#include "rrg/train.hpp"

namespace rrg {

// One dataset row. feature_ref is either "stub" (features synthesized from
// the example id) or a record id in the feature store.
struct CorpusExample {
    std::string id;
    std::string feature_ref;
    std::string report;
    std::string split; // train | val | test
};

// JSONL, one {"id","feature_ref","report","split"} object per line.
// Order-preserving; duplicate ids and malformed lines are data errors that
// carry line numbers.
std::vector<CorpusExample> load_corpus(const std::string& path);
void save_corpus(const std::string& path, const std::vector<CorpusExample>& examples);

// Hypotheses JSONL: {"id","hypothesis"} per line, corpus order.
void save_hypotheses(const std::string& path,
                     const std::vector<std::pair<std::string, std::string>>& hyps);
std::vector<std::pair<std::string, std::string>> load_hypotheses(const std::string& path);

// Per-epoch metrics JSONL: {"epoch","train_loss","val_loss"}.
void save_metrics_log(const std::string& path, const std::vector<EpochStats>& log);

// Flat key = value run configuration. Unknown keys are usage errors; '#'
// starts a comment. Defaults follow the documented training setup: three
// layers, beam 3, 100 epochs, learning rates 5e-4 and 5e-5.
struct RunConfig {
    ModelConfig model;            // model.vocab_size is derived, not a file key
    int min_freq = 3;
    std::size_t beam = 3;
    std::size_t epochs = 100;
    AdamConfig adam;
    std::uint64_t seed = 0;
    std::size_t stub_p = 4;       // feature rows from the stub extractor
    std::uint64_t stub_seed = 1;
    std::size_t retrieval_k = 1;  // retrieve subcommand default
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Serialized model snapshot: manifest JSON followed by concatenated
// little-endian f32 tensor payloads, single file. Canonical: saving a
// loaded checkpoint reproduces the byte stream.
struct Checkpoint {
    ModelConfig config;
    std::uint64_t vocab_hash = 0;
    std::uint64_t seed = 0;
    std::uint32_t epoch = 0;
    std::map<std::string, Tensorf> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

inline Checkpoint make_checkpoint(const ModelParams<float>& params, std::uint64_t vocab_hash,
                                  std::uint64_t seed, std::uint32_t epoch) {
    return Checkpoint{params.config, vocab_hash, seed, epoch, params.tensors};
}

inline ModelParams<float> params_from_checkpoint(const Checkpoint& ckpt) {
    ModelParams<float> params;
    params.config = ckpt.config;
    params.tensors = ckpt.tensors;
    return params;
}

} // namespace rrg
