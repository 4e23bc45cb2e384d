#include "rrg/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "rrg/corpus.hpp"
#include "rrg/errors.hpp"
#include "rrg/features.hpp"
#include "rrg/metrics.hpp"
#include "rrg/model.hpp"
#include "rrg/text.hpp"
#include "rrg/train.hpp"

namespace rrg::cli {

namespace {

bool log_enabled() {
    const char* v = std::getenv("RRG_LOG");
    return v == nullptr || std::string(v) != "quiet";
}

void log_line(const std::string& msg) {
    if (log_enabled()) std::cerr << msg << '\n';
}

struct FeatureStore {
    std::map<std::string, Tensorf> records;

    static FeatureStore from_file(const std::string& path) {
        FeatureStore store;
        for (auto& rec : load_features(path)) {
            store.records.emplace(std::move(rec.id), std::move(rec.features));
        }
        return store;
    }
};

// Feature resolution shared by train/generate/ablate: "stub" feature_refs
// synthesize from the example id; anything else must name a store record.
// force_stub routes every example through the stub extractor (the baseline
// ablation wiring).
Tensorf features_for(const CorpusExample& ex, const FeatureStore* store, const RunConfig& cfg,
                     bool force_stub) {
    if (force_stub || ex.feature_ref == "stub") {
        return extract_stub(ex.id, cfg.model.d_f, cfg.stub_p, cfg.stub_seed);
    }
    if (store == nullptr) {
        throw UsageError("example \"" + ex.id + "\" references feature record \"" +
                         ex.feature_ref + "\" but no --features file was given");
    }
    const auto it = store->records.find(ex.feature_ref);
    if (it == store->records.end()) {
        throw DataError("feature record \"" + ex.feature_ref + "\" (example \"" + ex.id +
                        "\") not found in the feature store");
    }
    if (it->second.cols() != cfg.model.d_f) {
        throw NumericError("feature record \"" + ex.feature_ref + "\" has dim " +
                           std::to_string(it->second.cols()) + ", config d_f is " +
                           std::to_string(cfg.model.d_f));
    }
    return it->second;
}

std::vector<TrainItem> resolve_items(const std::vector<CorpusExample>& corpus,
                                     const FeatureStore* store, const RunConfig& cfg,
                                     bool force_stub) {
    std::vector<TrainItem> items;
    items.reserve(corpus.size());
    for (const auto& ex : corpus) {
        items.push_back({ex.id, ex.report, ex.split, features_for(ex, store, cfg, force_stub)});
    }
    return items;
}

std::vector<std::string> train_split_reports(const std::vector<CorpusExample>& corpus) {
    std::vector<std::string> reports;
    for (const auto& ex : corpus)
        if (ex.split == "train") reports.push_back(ex.report);
    return reports;
}

enum class Mode { Baseline, Extractor, ExtractorRetrieval };

Mode parse_mode(const std::string& s) {
    if (s == "baseline") return Mode::Baseline;
    if (s == "extractor") return Mode::Extractor;
    if (s == "extractor+retrieval") return Mode::ExtractorRetrieval;
    throw UsageError("mode must be one of baseline, extractor, extractor+retrieval; got \"" + s +
                     "\"");
}

void apply_mode(RunConfig& cfg, Mode mode) {
    cfg.model.use_retrieval = mode == Mode::ExtractorRetrieval;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open output file: " + path);
    os << content;
    if (!os) throw DataError("failed writing output file: " + path);
}

// ---- subcommand bodies --------------------------------------------------

int cmd_build_vocab(const std::string& corpus_path, const std::string& out_path, int min_freq) {
    const auto corpus = load_corpus(corpus_path);
    const Vocab vocab = Vocab::build(train_split_reports(corpus), min_freq);
    vocab.save(out_path);
    log_line("vocab: " + std::to_string(vocab.size()) + " ids (" +
             std::to_string(vocab.size() - Vocab::kReserved) + " tokens) -> " + out_path);
    return 0;
}

int cmd_extract_stub(const std::string& corpus_path, const std::string& out_path,
                     const RunConfig& cfg) {
    const auto corpus = load_corpus(corpus_path);
    std::vector<FeatureRecord> records;
    records.reserve(corpus.size());
    for (const auto& ex : corpus) {
        records.push_back(
            {ex.id, extract_stub(ex.id, cfg.model.d_f, cfg.stub_p, cfg.stub_seed)});
    }
    save_features(out_path, records);
    log_line("features: " + std::to_string(records.size()) + " records of " +
             std::to_string(cfg.stub_p) + "x" + std::to_string(cfg.model.d_f) + " -> " + out_path);
    return 0;
}

int cmd_index(const std::string& corpus_path, const std::string& features_path,
              const std::string& out_dir, const std::string& split, const RunConfig& cfg) {
    const auto corpus = load_corpus(corpus_path);
    const auto store = FeatureStore::from_file(features_path);

    std::vector<FeatureRecord> records;
    std::map<std::string, std::string> reports;
    for (const auto& ex : corpus) {
        if (ex.split != split) continue;
        records.push_back({ex.id, features_for(ex, &store, cfg, false)});
        reports[ex.id] = ex.report;
    }
    if (records.empty()) {
        throw DataError("no examples with split \"" + split + "\" in " + corpus_path);
    }
    // validate before writing anything
    RetrievalIndex::build(records, reports);

    std::filesystem::create_directories(out_dir);
    save_features(out_dir + "/features.fvec", records);
    save_report_map(out_dir + "/reports.jsonl", reports);
    log_line("index: " + std::to_string(records.size()) + " records -> " + out_dir);
    return 0;
}

RetrievalIndex load_index_dir(const std::string& dir) {
    return RetrievalIndex::build(load_features(dir + "/features.fvec"),
                                 load_report_map(dir + "/reports.jsonl"));
}

int cmd_retrieve(const std::string& index_dir, const std::string& query_id, std::size_t k,
                 bool exclude_self, const std::optional<std::string>& features_path,
                 const std::optional<std::string>& out_path) {
    const auto index = load_index_dir(index_dir);

    Tensorf query;
    if (features_path) {
        const auto store = FeatureStore::from_file(*features_path);
        const auto it = store.records.find(query_id);
        if (it == store.records.end()) {
            throw DataError("query id \"" + query_id + "\" not found in " + *features_path);
        }
        query = it->second;
    } else {
        const auto records = load_features(index_dir + "/features.fvec");
        const auto it = std::find_if(records.begin(), records.end(),
                                     [&](const FeatureRecord& r) { return r.id == query_id; });
        if (it == records.end()) {
            throw DataError("query id \"" + query_id + "\" not found in the index");
        }
        query = it->features;
    }

    const auto hits =
        index.retrieve(query, k,
                       exclude_self ? std::optional<std::string>(query_id) : std::nullopt);
    nlohmann::ordered_json j;
    j["query_id"] = query_id;
    nlohmann::ordered_json results = nlohmann::ordered_json::array();
    for (const auto& h : hits) {
        nlohmann::ordered_json r;
        r["id"] = h.id;
        r["score"] = h.score;
        r["report"] = h.report;
        results.push_back(std::move(r));
    }
    j["results"] = std::move(results);
    const std::string text = j.dump(2) + "\n";
    if (out_path)
        write_text_file(*out_path, text);
    else
        std::cout << text;
    return 0;
}

int cmd_train(const std::string& corpus_path, const std::string& vocab_path,
              const std::string& ckpt_path, const std::string& metrics_path, RunConfig cfg,
              Mode mode, const std::optional<std::string>& features_path) {
    apply_mode(cfg, mode);
    const auto corpus = load_corpus(corpus_path);
    const Vocab vocab = Vocab::load(vocab_path);
    cfg.model.vocab_size = vocab.size();

    std::optional<FeatureStore> store;
    if (features_path) store = FeatureStore::from_file(*features_path);
    const auto items =
        resolve_items(corpus, store ? &*store : nullptr, cfg, mode == Mode::Baseline);

    TrainOptions opts;
    opts.epochs = cfg.epochs;
    opts.seed = cfg.seed;
    opts.adam = cfg.adam;
    opts.on_epoch = [&](const EpochStats& e) {
        std::string line = "epoch " + std::to_string(e.epoch) + "/" + std::to_string(cfg.epochs) +
                           " train_loss=" + std::to_string(e.train_loss);
        if (e.val_loss) line += " val_loss=" + std::to_string(*e.val_loss);
        log_line(line);
    };

    auto out = train_model<float>(items, vocab, cfg.model, opts);
    save_checkpoint(ckpt_path, make_checkpoint(out.params, vocab.fingerprint(), cfg.seed,
                                               static_cast<std::uint32_t>(cfg.epochs)));
    save_metrics_log(metrics_path, out.log);
    log_line("checkpoint -> " + ckpt_path + ", metrics -> " + metrics_path);
    return 0;
}

int cmd_generate(const std::string& ckpt_path, const std::string& corpus_path,
                 const std::string& vocab_path, const std::string& out_path,
                 const std::string& split, std::size_t beam, std::size_t jobs, RunConfig cfg,
                 const std::optional<std::string>& features_path) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const Vocab vocab = Vocab::load(vocab_path);
    if (vocab.fingerprint() != ckpt.vocab_hash) {
        throw DataError("vocab " + vocab_path + " does not match the checkpoint's vocab hash");
    }
    if (vocab.size() != ckpt.config.vocab_size) {
        throw DataError("vocab has " + std::to_string(vocab.size()) +
                        " ids, checkpoint expects " + std::to_string(ckpt.config.vocab_size));
    }
    cfg.model = ckpt.config; // the checkpoint pins the model wiring

    const auto corpus = load_corpus(corpus_path);
    std::optional<FeatureStore> store;
    if (features_path) store = FeatureStore::from_file(*features_path);
    const auto all_items = resolve_items(corpus, store ? &*store : nullptr, cfg, false);

    std::vector<TrainItem> targets;
    for (const auto& item : all_items)
        if (item.split == split) targets.push_back(item);
    if (targets.empty()) {
        throw DataError("no examples with split \"" + split + "\" in " + corpus_path);
    }

    std::optional<RetrievalIndex> index;
    if (ckpt.config.use_retrieval) index = build_train_index(all_items);

    const auto params = params_from_checkpoint(ckpt);
    const auto hyps =
        generate_reports(params, vocab, targets, index ? &*index : nullptr, beam, jobs);
    save_hypotheses(out_path, hyps);
    log_line("hypotheses: " + std::to_string(hyps.size()) + " -> " + out_path);
    return 0;
}

int cmd_evaluate(const std::string& hyps_path, const std::string& corpus_path,
                 const std::string& out_path, std::size_t jobs) {
    const auto hyps = load_hypotheses(hyps_path);
    const auto corpus = load_corpus(corpus_path);
    std::map<std::string, std::string> refs;
    for (const auto& ex : corpus) refs[ex.id] = ex.report;

    std::vector<std::pair<std::string, std::string>> pairs;
    std::vector<std::string> ids;
    for (const auto& [id, hyp] : hyps) {
        const auto it = refs.find(id);
        if (it == refs.end()) {
            throw DataError("hypothesis id \"" + id + "\" has no reference in " + corpus_path);
        }
        pairs.emplace_back(hyp, it->second);
        ids.push_back(id);
    }

    const auto report = metrics::score_corpus(pairs, ids, jobs);
    write_text_file(out_path, metrics::to_json(report).dump(2) + "\n");
    log_line("scores -> " + out_path);
    return 0;
}

struct AblationRow {
    std::string method;
    metrics::ScoreReport scores;
};

// Runs the three wiring configurations end to end on one corpus with a
// shared vocab and seed; only the model wiring and feature source differ.
int cmd_ablate(const std::string& corpus_path, const std::optional<std::string>& features_path,
               const std::string& out_path, RunConfig base_cfg) {
    const auto corpus = load_corpus(corpus_path);
    const Vocab vocab = Vocab::build(train_split_reports(corpus), base_cfg.min_freq);

    std::optional<FeatureStore> store;
    if (features_path) store = FeatureStore::from_file(*features_path);

    std::vector<AblationRow> rows;
    for (const Mode mode : {Mode::Baseline, Mode::Extractor, Mode::ExtractorRetrieval}) {
        RunConfig cfg = base_cfg;
        apply_mode(cfg, mode);
        cfg.model.vocab_size = vocab.size();
        const bool force_stub = mode == Mode::Baseline;
        const auto items = resolve_items(corpus, store ? &*store : nullptr, cfg, force_stub);

        const char* name = mode == Mode::Baseline ? "baseline"
                           : mode == Mode::Extractor ? "+extractor"
                                                     : "+extractor+retrieval";
        log_line(std::string("ablate: training ") + name);

        TrainOptions opts;
        opts.epochs = cfg.epochs;
        opts.seed = cfg.seed;
        opts.adam = cfg.adam;
        auto trained = train_model<float>(items, vocab, cfg.model, opts);

        std::vector<TrainItem> test_items;
        for (const auto& item : items)
            if (item.split == "test") test_items.push_back(item);
        if (test_items.empty()) {
            throw DataError("ablate needs a nonempty test split in " + corpus_path);
        }
        std::optional<RetrievalIndex> index;
        if (cfg.model.use_retrieval) index = build_train_index(items);
        const auto hyps = generate_reports(trained.params, vocab, test_items,
                                           index ? &*index : nullptr, cfg.beam);

        std::vector<std::pair<std::string, std::string>> pairs;
        std::vector<std::string> ids;
        for (std::size_t i = 0; i < test_items.size(); ++i) {
            pairs.emplace_back(hyps[i].second, test_items[i].report);
            ids.push_back(test_items[i].id);
        }
        rows.push_back({name, metrics::score_corpus(pairs, ids)});
    }

    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& row : rows) {
        nlohmann::ordered_json r;
        r["method"] = row.method;
        r["bleu1"] = row.scores.bleu[0];
        r["bleu2"] = row.scores.bleu[1];
        r["bleu3"] = row.scores.bleu[2];
        r["bleu4"] = row.scores.bleu[3];
        r["rouge_l"] = row.scores.rouge_l;
        r["meteor"] = row.scores.meteor;
        j.push_back(std::move(r));
    }
    write_text_file(out_path, j.dump(2) + "\n");

    // comparison table on stdout, one row per configuration
    std::ostringstream table;
    table << "Method                 BLEU-1  BLEU-2  BLEU-3  BLEU-4  ROUGE-L  METEOR\n";
    table.setf(std::ios::fixed);
    table.precision(4);
    for (const auto& row : rows) {
        table << row.method;
        for (std::size_t pad = row.method.size(); pad < 23; ++pad) table << ' ';
        table << row.scores.bleu[0] << "  " << row.scores.bleu[1] << "  " << row.scores.bleu[2]
              << "  " << row.scores.bleu[3] << "  " << row.scores.rouge_l << "   "
              << row.scores.meteor << "\n";
    }
    std::cout << table.str();
    return 0;
}

} // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"retrieval-augmented radiology report generation pipeline", "rrg"};
    app.require_subcommand(1);

    std::string corpus_path, vocab_path, out_path, ckpt_path, metrics_path, index_dir, query_id,
        hyps_path, split = "test", index_split = "train", mode_str = "extractor+retrieval";
    std::optional<std::string> features_path, config_path, retrieve_out;
    std::optional<std::uint64_t> seed_flag;
    std::optional<std::size_t> epochs_flag;
    std::optional<int> min_freq_flag;
    std::size_t k = 1, beam = 3, jobs = 1;
    bool exclude_self = false;

    auto* sc_vocab = app.add_subcommand("build-vocab", "build a vocabulary from train reports");
    sc_vocab->add_option("--corpus", corpus_path, "corpus JSONL")->required();
    sc_vocab->add_option("--out", out_path, "vocab file to write")->required();
    sc_vocab->add_option("--min-freq", min_freq_flag, "token count threshold");
    sc_vocab->add_option("--config", config_path, "run config file");

    auto* sc_stub = app.add_subcommand("extract-stub", "write stub features for every example");
    sc_stub->add_option("--corpus", corpus_path, "corpus JSONL")->required();
    sc_stub->add_option("--out", out_path, "feature store to write")->required();
    sc_stub->add_option("--config", config_path, "run config file");

    auto* sc_index = app.add_subcommand("index", "build a retrieval index directory");
    sc_index->add_option("--corpus", corpus_path, "corpus JSONL")->required();
    sc_index->add_option("--features", features_path, "feature store")->required();
    sc_index->add_option("--out-dir", out_path, "index directory to create")->required();
    sc_index->add_option("--split", index_split, "corpus split to index (default train)");
    sc_index->add_option("--config", config_path, "run config file");

    auto* sc_retrieve = app.add_subcommand("retrieve", "query an index directory");
    sc_retrieve->add_option("--index", index_dir, "index directory")->required();
    sc_retrieve->add_option("--query-id", query_id, "record id to query with")->required();
    sc_retrieve->add_option("--k", k, "results to return (default 1)");
    sc_retrieve->add_flag("--exclude-self", exclude_self, "drop the query id from results");
    sc_retrieve->add_option("--features", features_path, "feature store for the query");
    sc_retrieve->add_option("--out", retrieve_out, "write results here instead of stdout");

    auto* sc_train = app.add_subcommand("train", "train a model");
    sc_train->add_option("--corpus", corpus_path, "corpus JSONL")->required();
    sc_train->add_option("--vocab", vocab_path, "vocab file")->required();
    sc_train->add_option("--out-checkpoint", ckpt_path, "checkpoint to write")->required();
    sc_train->add_option("--metrics", metrics_path, "metrics JSONL to write")->required();
    sc_train->add_option("--config", config_path, "run config file");
    sc_train->add_option("--features", features_path, "feature store");
    sc_train->add_option("--mode", mode_str,
                         "baseline | extractor | extractor+retrieval (default)");
    sc_train->add_option("--seed", seed_flag, "RNG seed override");
    sc_train->add_option("--epochs", epochs_flag, "epoch count override");

    auto* sc_gen = app.add_subcommand("generate", "decode reports for a split");
    sc_gen->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
    sc_gen->add_option("--corpus", corpus_path, "corpus JSONL")->required();
    sc_gen->add_option("--vocab", vocab_path, "vocab file")->required();
    sc_gen->add_option("--out", out_path, "hypotheses JSONL to write")->required();
    sc_gen->add_option("--split", split, "corpus split to decode (default test)");
    sc_gen->add_option("--beam", beam, "beam size (default 3)");
    sc_gen->add_option("--jobs", jobs, "decoding threads (default 1)");
    sc_gen->add_option("--config", config_path, "run config file (stub feature settings)");
    sc_gen->add_option("--features", features_path, "feature store");

    auto* sc_eval = app.add_subcommand("evaluate", "score hypotheses against references");
    sc_eval->add_option("--hyps", hyps_path, "hypotheses JSONL")->required();
    sc_eval->add_option("--corpus", corpus_path, "corpus JSONL with reference reports")
        ->required();
    sc_eval->add_option("--out", out_path, "scores JSON to write")->required();
    sc_eval->add_option("--jobs", jobs, "scoring threads (default 1)");

    auto* sc_ablate = app.add_subcommand("ablate", "run the three wiring configurations");
    sc_ablate->add_option("--corpus", corpus_path, "corpus JSONL")->required();
    sc_ablate->add_option("--out", out_path, "score rows JSON to write")->required();
    sc_ablate->add_option("--features", features_path, "feature store");
    sc_ablate->add_option("--config", config_path, "run config file");
    sc_ablate->add_option("--seed", seed_flag, "RNG seed override");
    sc_ablate->add_option("--epochs", epochs_flag, "epoch count override");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        RunConfig cfg = config_path ? load_run_config(*config_path) : RunConfig{};
        if (seed_flag) cfg.seed = *seed_flag;
        if (epochs_flag) cfg.epochs = *epochs_flag;
        if (min_freq_flag) cfg.min_freq = *min_freq_flag;

        if (sc_vocab->parsed()) return cmd_build_vocab(corpus_path, out_path, cfg.min_freq);
        if (sc_stub->parsed()) return cmd_extract_stub(corpus_path, out_path, cfg);
        if (sc_index->parsed())
            return cmd_index(corpus_path, *features_path, out_path, index_split, cfg);
        if (sc_retrieve->parsed())
            return cmd_retrieve(index_dir, query_id, k, exclude_self, features_path,
                                retrieve_out);
        if (sc_train->parsed())
            return cmd_train(corpus_path, vocab_path, ckpt_path, metrics_path, cfg,
                             parse_mode(mode_str), features_path);
        if (sc_gen->parsed())
            return cmd_generate(ckpt_path, corpus_path, vocab_path, out_path, split, beam, jobs,
                                cfg, features_path);
        if (sc_eval->parsed()) return cmd_evaluate(hyps_path, corpus_path, out_path, jobs);
        if (sc_ablate->parsed()) return cmd_ablate(corpus_path, features_path, out_path, cfg);
        throw UsageError("no subcommand selected");
    } catch (const Error& e) {
        std::cerr << "rrg: [" << e.code() << "] " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "rrg: [internal] " << e.what() << '\n';
        return 3;
    }
}

int run_main(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args);
}

} // namespace rrg::cli
