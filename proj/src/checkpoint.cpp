#include <cstring>
#include <fstream>

#include <json.hpp>

#include "rrg/corpus.hpp"
#include "rrg/errors.hpp"

namespace rrg {

namespace {

constexpr char kMagic[4] = {'R', 'R', 'G', 'C'};
constexpr std::uint8_t kVersion = 0x01;

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

std::uint64_t unhex64(const std::string& s) {
    if (s.size() != 16) throw DataError("bad hash string \"" + s + "\"");
    std::uint64_t v = 0;
    for (char c : s) {
        v <<= 4;
        if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
        else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
        else throw DataError("bad hash string \"" + s + "\"");
    }
    return v;
}

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["d_model"] = c.d_model;
    j["n_heads"] = c.n_heads;
    j["n_layers"] = c.n_layers;
    j["d_ff"] = c.d_ff;
    j["dropout_p"] = c.dropout_p;
    j["vocab_size"] = c.vocab_size;
    j["max_len"] = c.max_len;
    j["d_f"] = c.d_f;
    j["literal_residual"] = c.literal_residual;
    j["use_retrieval"] = c.use_retrieval;
    return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d_model = j.at("d_model");
    c.n_heads = j.at("n_heads");
    c.n_layers = j.at("n_layers");
    c.d_ff = j.at("d_ff");
    c.dropout_p = j.at("dropout_p");
    c.vocab_size = j.at("vocab_size");
    c.max_len = j.at("max_len");
    c.d_f = j.at("d_f");
    c.literal_residual = j.at("literal_residual");
    c.use_retrieval = j.at("use_retrieval");
    return c;
}

} // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    nlohmann::ordered_json manifest;
    manifest["format_version"] = 1;
    manifest["config"] = config_to_json(ckpt.config);
    manifest["epoch"] = ckpt.epoch;
    manifest["seed"] = ckpt.seed;
    manifest["vocab_hash"] = hex64(ckpt.vocab_hash);

    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    std::size_t offset = 0; // bytes into the payload
    for (const auto& [name, t] : ckpt.tensors) { // std::map: sorted by name
        nlohmann::ordered_json entry;
        entry["name"] = name;
        entry["rows"] = t.rows();
        entry["cols"] = t.cols();
        entry["offset"] = offset;
        entry["length"] = t.size() * 4;
        tensors.push_back(std::move(entry));
        offset += t.size() * 4;
    }
    manifest["tensors"] = std::move(tensors);
    const std::string manifest_text = manifest.dump();

    std::string out;
    out.append(kMagic, 4);
    out.push_back(static_cast<char>(kVersion));
    const std::uint32_t mlen = static_cast<std::uint32_t>(manifest_text.size());
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((mlen >> (8 * i)) & 0xff));
    out += manifest_text;
    for (const auto& [name, t] : ckpt.tensors) {
        for (std::size_t i = 0; i < t.size(); ++i) {
            std::uint32_t bits;
            const float v = t[i];
            std::memcpy(&bits, &v, 4);
            for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
        }
    }

    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path);
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!os) throw DataError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

    if (bytes.size() < 9 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw DataError(path + ": not a checkpoint file (bad magic)");
    }
    if (static_cast<std::uint8_t>(bytes[4]) != kVersion) {
        throw DataError(path + ": unsupported checkpoint version");
    }
    std::uint32_t mlen = 0;
    for (int i = 3; i >= 0; --i)
        mlen = (mlen << 8) | static_cast<std::uint8_t>(bytes[5 + static_cast<std::size_t>(i)]);
    if (bytes.size() < 9 + static_cast<std::size_t>(mlen)) {
        throw DataError(path + ": truncated manifest");
    }

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(9, mlen));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": bad manifest JSON: " + std::string(e.what()));
    }

    Checkpoint ckpt;
    try {
        if (manifest.at("format_version") != 1) {
            throw DataError(path + ": unsupported manifest format version");
        }
        ckpt.config = config_from_json(manifest.at("config"));
        ckpt.epoch = manifest.at("epoch");
        ckpt.seed = manifest.at("seed");
        ckpt.vocab_hash = unhex64(manifest.at("vocab_hash"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": manifest missing fields: " + std::string(e.what()));
    }

    const std::string payload = bytes.substr(9 + mlen);
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name");
        const std::size_t rows = entry.at("rows");
        const std::size_t cols = entry.at("cols");
        const std::size_t offset = entry.at("offset");
        const std::size_t length = entry.at("length");
        if (length != rows * cols * 4 || offset + length > payload.size()) {
            throw DataError(path + ": tensor \"" + name + "\" payload out of bounds");
        }
        Tensorf t(rows, cols);
        for (std::size_t i = 0; i < t.size(); ++i) {
            std::uint32_t bits = 0;
            for (int b = 3; b >= 0; --b) {
                bits = (bits << 8) |
                       static_cast<std::uint8_t>(payload[offset + i * 4 + static_cast<std::size_t>(b)]);
            }
            float v;
            std::memcpy(&v, &bits, 4);
            t[i] = v;
        }
        if (!ckpt.tensors.emplace(name, std::move(t)).second) {
            throw DataError(path + ": duplicate tensor \"" + name + "\" in manifest");
        }
    }

    // the parameter inventory is pinned by the config
    const auto specs = param_specs(ckpt.config);
    if (specs.size() != ckpt.tensors.size()) {
        throw DataError(path + ": checkpoint has " + std::to_string(ckpt.tensors.size()) +
                        " tensors, config requires " + std::to_string(specs.size()));
    }
    for (const auto& spec : specs) {
        const auto it = ckpt.tensors.find(spec.name);
        if (it == ckpt.tensors.end()) {
            throw DataError(path + ": missing tensor \"" + spec.name + "\"");
        }
        if (it->second.rows() != spec.rows || it->second.cols() != spec.cols) {
            throw DataError(path + ": tensor \"" + spec.name + "\" is " +
                            it->second.shape_str() + ", config requires " +
                            std::to_string(spec.rows) + "x" + std::to_string(spec.cols));
        }
    }
    return ckpt;
}

} // namespace rrg
