#include "rrg/corpus.hpp"

#include <fstream>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "rrg/errors.hpp"

namespace rrg {

namespace {

nlohmann::json parse_line(const std::string& path, std::size_t line_no, const std::string& line) {
    try {
        return nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ":" + std::to_string(line_no) + ": bad JSON: " + e.what());
    }
}

std::string require_string(const nlohmann::json& j, const char* key, const std::string& path,
                           std::size_t line_no) {
    if (!j.contains(key) || !j[key].is_string()) {
        throw DataError(path + ":" + std::to_string(line_no) + ": missing string field \"" +
                        key + "\"");
    }
    return j[key];
}

} // namespace

std::vector<CorpusExample> load_corpus(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open corpus: " + path);

    std::vector<CorpusExample> examples;
    std::unordered_map<std::string, std::size_t> seen; // id -> line number
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto j = parse_line(path, line_no, line);
        CorpusExample ex;
        ex.id = require_string(j, "id", path, line_no);
        ex.feature_ref = require_string(j, "feature_ref", path, line_no);
        ex.report = require_string(j, "report", path, line_no);
        ex.split = require_string(j, "split", path, line_no);

        if (ex.split != "train" && ex.split != "val" && ex.split != "test") {
            throw DataError(path + ":" + std::to_string(line_no) + ": split \"" + ex.split +
                            "\" is not one of train/val/test");
        }
        if (ex.report.empty() && ex.split != "test") {
            throw DataError(path + ":" + std::to_string(line_no) + ": empty report for " +
                            ex.split + " example \"" + ex.id + "\"");
        }
        const auto [it, inserted] = seen.emplace(ex.id, line_no);
        if (!inserted) {
            throw DataError(path + ": duplicate id \"" + ex.id + "\" at lines " +
                            std::to_string(it->second) + " and " + std::to_string(line_no));
        }
        examples.push_back(std::move(ex));
    }
    return examples;
}

void save_corpus(const std::string& path, const std::vector<CorpusExample>& examples) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open corpus for writing: " + path);
    for (const auto& ex : examples) {
        nlohmann::ordered_json j;
        j["id"] = ex.id;
        j["feature_ref"] = ex.feature_ref;
        j["report"] = ex.report;
        j["split"] = ex.split;
        os << j.dump() << '\n';
    }
    if (!os) throw DataError("failed writing corpus: " + path);
}

void save_hypotheses(const std::string& path,
                     const std::vector<std::pair<std::string, std::string>>& hyps) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open hypotheses file for writing: " + path);
    for (const auto& [id, hyp] : hyps) {
        nlohmann::ordered_json j;
        j["id"] = id;
        j["hypothesis"] = hyp;
        os << j.dump() << '\n';
    }
    if (!os) throw DataError("failed writing hypotheses: " + path);
}

std::vector<std::pair<std::string, std::string>> load_hypotheses(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open hypotheses file: " + path);
    std::vector<std::pair<std::string, std::string>> hyps;
    std::unordered_map<std::string, std::size_t> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto j = parse_line(path, line_no, line);
        auto id = require_string(j, "id", path, line_no);
        auto hyp = require_string(j, "hypothesis", path, line_no);
        const auto [it, inserted] = seen.emplace(id, line_no);
        if (!inserted) {
            throw DataError(path + ": duplicate id \"" + id + "\" at lines " +
                            std::to_string(it->second) + " and " + std::to_string(line_no));
        }
        hyps.emplace_back(std::move(id), std::move(hyp));
    }
    return hyps;
}

void save_metrics_log(const std::string& path, const std::vector<EpochStats>& log) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open metrics log for writing: " + path);
    for (const auto& e : log) {
        nlohmann::ordered_json j;
        j["epoch"] = e.epoch;
        j["train_loss"] = e.train_loss;
        if (e.val_loss)
            j["val_loss"] = *e.val_loss;
        else
            j["val_loss"] = nullptr;
        os << j.dump() << '\n';
    }
    if (!os) throw DataError("failed writing metrics log: " + path);
}

namespace {

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const std::uint64_t v = std::stoull(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw UsageError("config key " + key + ": expected an unsigned integer, got \"" + value +
                         "\"");
    }
}

double parse_f64(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw UsageError("config key " + key + ": expected a number, got \"" + value + "\"");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw UsageError("config key " + key + ": expected true/false, got \"" + value + "\"");
}

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    std::size_t e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

} // namespace

RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw UsageError("config line " + std::to_string(line_no) +
                             ": expected key = value, got \"" + line + "\"");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (value.empty()) {
            throw UsageError("config key " + key + ": empty value");
        }

        if (key == "d_model") cfg.model.d_model = parse_u64(key, value);
        else if (key == "n_heads") cfg.model.n_heads = parse_u64(key, value);
        else if (key == "n_layers") cfg.model.n_layers = parse_u64(key, value);
        else if (key == "d_ff") cfg.model.d_ff = parse_u64(key, value);
        else if (key == "dropout") cfg.model.dropout_p = parse_f64(key, value);
        else if (key == "max_len") cfg.model.max_len = parse_u64(key, value);
        else if (key == "d_f") cfg.model.d_f = parse_u64(key, value);
        else if (key == "literal_residual") cfg.model.literal_residual = parse_bool(key, value);
        else if (key == "min_freq") cfg.min_freq = static_cast<int>(parse_u64(key, value));
        else if (key == "beam") cfg.beam = parse_u64(key, value);
        else if (key == "epochs") cfg.epochs = parse_u64(key, value);
        else if (key == "lr") cfg.adam.lr_main = parse_f64(key, value);
        else if (key == "lr_extractor") cfg.adam.lr_extractor = parse_f64(key, value);
        else if (key == "adam_beta1") cfg.adam.beta1 = parse_f64(key, value);
        else if (key == "adam_beta2") cfg.adam.beta2 = parse_f64(key, value);
        else if (key == "adam_eps") cfg.adam.eps = parse_f64(key, value);
        else if (key == "seed") cfg.seed = parse_u64(key, value);
        else if (key == "stub_p") cfg.stub_p = parse_u64(key, value);
        else if (key == "stub_seed") cfg.stub_seed = parse_u64(key, value);
        else if (key == "retrieval_k") cfg.retrieval_k = parse_u64(key, value);
        else throw UsageError("config line " + std::to_string(line_no) + ": unknown key \"" +
                              key + "\"");
    }
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open config file: " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return parse_run_config(text);
}

} // namespace rrg
