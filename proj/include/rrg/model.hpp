#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rrg/errors.hpp"
#include "rrg/rng.hpp"
#include "rrg/tape.hpp"
#include "rrg/tensor.hpp"
#include "rrg/text.hpp"

namespace rrg {

struct ModelConfig {
    std::size_t d_model = 128;
    std::size_t n_heads = 4;
    std::size_t n_layers = 3;
    std::size_t d_ff = 512;
    double dropout_p = 0.1;
    std::size_t vocab_size = 0;
    std::size_t max_len = 60;
    std::size_t d_f = 64; // extractor feature dimension
    // Encoder residual wiring: true follows the fused-layer recipe literally
    // (F <- fuse(F); F <- F + Drop(LN(F)); out <- F + Drop(LN(FFN(F)))),
    // false uses conventional pre-norm residuals around each sublayer.
    bool literal_residual = true;
    // false drops the retrieved-report cross-attention branch entirely.
    bool use_retrieval = true;

    void validate() const {
        if (d_model == 0 || n_heads == 0 || n_layers == 0 || d_ff == 0 || vocab_size == 0 ||
            d_f == 0) {
            throw UsageError("model config: all dimensions must be >= 1");
        }
        if (d_model % n_heads != 0) {
            throw UsageError("model config: d_model " + std::to_string(d_model) +
                             " not divisible by n_heads " + std::to_string(n_heads));
        }
        if (max_len < 2) throw UsageError("model config: max_len must be >= 2");
        if (dropout_p < 0.0 || dropout_p >= 1.0) {
            throw UsageError("model config: dropout must be in [0,1)");
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

enum class ParamInit { Xavier, EmbedNormal, Zero, One };

struct ParamSpec {
    std::string name;
    std::size_t rows;
    std::size_t cols;
    ParamInit init;
};

// Fixed, config-determined parameter inventory; declaration order is the
// initialization draw order and the checkpoint manifest is sorted by name.
inline std::vector<ParamSpec> param_specs(const ModelConfig& c) {
    std::vector<ParamSpec> specs;
    const std::size_t d = c.d_model;
    auto proj = [&](const std::string& name) { specs.push_back({name, d, d, ParamInit::Xavier}); };
    auto ln = [&](const std::string& prefix) {
        specs.push_back({prefix + ".g", 1, d, ParamInit::One});
        specs.push_back({prefix + ".b", 1, d, ParamInit::Zero});
    };
    auto ffn = [&](const std::string& prefix) {
        specs.push_back({prefix + ".w1", d, c.d_ff, ParamInit::Xavier});
        specs.push_back({prefix + ".b1", 1, c.d_ff, ParamInit::Zero});
        specs.push_back({prefix + ".w2", c.d_ff, d, ParamInit::Xavier});
        specs.push_back({prefix + ".b2", 1, d, ParamInit::Zero});
    };

    specs.push_back({"embed.tok", c.vocab_size, d, ParamInit::EmbedNormal});
    specs.push_back({"img.proj", c.d_f, d, ParamInit::Xavier});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const std::string enc = "enc" + std::to_string(l);
        proj(enc + ".self.wq");
        proj(enc + ".self.wk");
        proj(enc + ".self.wv");
        proj(enc + ".self.wo");
        if (c.use_retrieval) {
            proj(enc + ".cross.wq");
            proj(enc + ".cross.wk");
            proj(enc + ".cross.wv");
            proj(enc + ".cross.wo");
            specs.push_back({enc + ".fuse.w", 1, 1, ParamInit::Zero});
        }
        ln(enc + ".ln1");
        ln(enc + ".ln2");
        ffn(enc + ".ffn");
    }
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const std::string dec = "dec" + std::to_string(l);
        proj(dec + ".self.wq");
        proj(dec + ".self.wk");
        proj(dec + ".self.wv");
        proj(dec + ".self.wo");
        proj(dec + ".cross.wq");
        proj(dec + ".cross.wk");
        proj(dec + ".cross.wv");
        proj(dec + ".cross.wo");
        ln(dec + ".ln1");
        ln(dec + ".ln2");
        ln(dec + ".ln3");
        ffn(dec + ".ffn");
    }
    specs.push_back({"head.w", d, c.vocab_size, ParamInit::Xavier});
    specs.push_back({"head.b", 1, c.vocab_size, ParamInit::Zero});
    return specs;
}

template <typename T>
struct ModelParams {
    ModelConfig config;
    std::map<std::string, Tensor<T>> tensors;

    static ModelParams init(const ModelConfig& config, Rng& rng) {
        config.validate();
        ModelParams params;
        params.config = config;
        for (const auto& spec : param_specs(config)) {
            Tensor<T> t;
            switch (spec.init) {
                case ParamInit::Xavier:
                    t = Tensor<T>::xavier(spec.rows, spec.cols, rng);
                    break;
                case ParamInit::EmbedNormal:
                    t = Tensor<T>::filled_normal(spec.rows, spec.cols, rng, 0.0,
                                                 1.0 / std::sqrt(static_cast<double>(config.d_model)));
                    break;
                case ParamInit::Zero:
                    t = Tensor<T>(spec.rows, spec.cols, T(0));
                    break;
                case ParamInit::One:
                    t = Tensor<T>(spec.rows, spec.cols, T(1));
                    break;
            }
            params.tensors.emplace(spec.name, std::move(t));
        }
        return params;
    }

    const Tensor<T>& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw NumericError("unknown parameter '" + name + "'");
        return it->second;
    }

    Tensor<T>& at(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw NumericError("unknown parameter '" + name + "'");
        return it->second;
    }

    template <typename U>
    ModelParams<U> cast() const {
        ModelParams<U> out;
        out.config = config;
        for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.template cast<U>());
        return out;
    }
};

// Tape bindings of every parameter, one leaf per tensor.
template <typename T>
struct BoundParams {
    std::map<std::string, typename Tape<T>::Var> vars;

    typename Tape<T>::Var at(const std::string& name) const {
        auto it = vars.find(name);
        if (it == vars.end()) throw NumericError("parameter '" + name + "' not bound");
        return it->second;
    }
};

template <typename T>
BoundParams<T> bind_params(Tape<T>& tape, const ModelParams<T>& params, bool trainable) {
    BoundParams<T> bound;
    for (const auto& [name, tensor] : params.tensors) {
        bound.vars.emplace(name, tape.leaf(tensor, trainable));
    }
    return bound;
}

// Sinusoidal position table: PE[pos, 2i] = sin(pos/10000^(2i/d)),
// PE[pos, 2i+1] = cos(same). Applied to report tokens only; image feature
// rows carry no position signal.
template <typename T>
Tensor<T> positional_encoding(std::size_t positions, std::size_t d_model) {
    Tensor<T> pe(positions, d_model);
    for (std::size_t pos = 0; pos < positions; ++pos) {
        for (std::size_t i = 0; i < d_model; i += 2) {
            const double angle =
                static_cast<double>(pos) /
                std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d_model));
            pe.at(pos, i) = static_cast<T>(std::sin(angle));
            if (i + 1 < d_model) pe.at(pos, i + 1) = static_cast<T>(std::cos(angle));
        }
    }
    return pe;
}

// PAD-visibility vector for a token sequence: 1 everywhere except PAD.
inline std::vector<std::uint8_t> pad_visibility(const TokenSequence& ids) {
    std::vector<std::uint8_t> v(ids.size(), 1);
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] == Vocab::kPad) v[i] = 0;
    return v;
}

// Encoder-decoder with mixture-of-features fusion. Holds configuration
// only; all state lives in ModelParams and the per-call tape, so concurrent
// forward passes over the same params are safe.
template <typename T>
class Model {
public:
    using Var = typename Tape<T>::Var;

    explicit Model(ModelConfig config) : config_(std::move(config)) { config_.validate(); }

    const ModelConfig& config() const { return config_; }

    // Plain scaled dot-product attention over already-projected q/k/v with
    // per-head dimension d = q.cols. The multi-head path reduces to this
    // when n_heads == 1.
    static Var scaled_dot_attention(Tape<T>& tape, Var q, Var k, Var v,
                                    const Mask* mask = nullptr) {
        const std::size_t d = tape.value(q).cols();
        if (tape.value(k).cols() != d || tape.value(k).rows() != tape.value(v).rows()) {
            throw NumericError("attention shape mismatch: q " + tape.value(q).shape_str() +
                               ", k " + tape.value(k).shape_str() + ", v " +
                               tape.value(v).shape_str());
        }
        Var scores = tape.scale(tape.matmul(q, tape.transpose(k)),
                                1.0 / std::sqrt(static_cast<double>(d)));
        if (mask != nullptr) scores = tape.masked_fill(scores, *mask);
        return tape.matmul(tape.softmax_rows(scores), v);
    }

    // Multi-head attention: project, split heads along columns, attend per
    // head, concatenate, output-project.
    Var attention(Tape<T>& tape, const BoundParams<T>& p, const std::string& prefix, Var x_q,
                  Var x_kv, const Mask* mask = nullptr) const {
        Var q = tape.matmul(x_q, p.at(prefix + ".wq"));
        Var k = tape.matmul(x_kv, p.at(prefix + ".wk"));
        Var v = tape.matmul(x_kv, p.at(prefix + ".wv"));
        Var merged;
        if (config_.n_heads == 1) {
            merged = scaled_dot_attention(tape, q, k, v, mask);
        } else {
            const std::size_t dh = config_.d_model / config_.n_heads;
            std::vector<Var> heads;
            heads.reserve(config_.n_heads);
            for (std::size_t h = 0; h < config_.n_heads; ++h) {
                Var qh = tape.slice_cols(q, h * dh, dh);
                Var kh = tape.slice_cols(k, h * dh, dh);
                Var vh = tape.slice_cols(v, h * dh, dh);
                heads.push_back(scaled_dot_attention(tape, qh, kh, vh, mask));
            }
            merged = tape.concat_cols(heads);
        }
        return tape.matmul(merged, p.at(prefix + ".wo"));
    }

    // Token embedding lookup scaled by sqrt(d_model) plus sinusoidal
    // positions. Deterministic; dropout never applies here.
    Var embed_tokens(Tape<T>& tape, const BoundParams<T>& p, const TokenSequence& ids) const {
        Var e = tape.embedding(p.at("embed.tok"), ids);
        e = tape.scale(e, std::sqrt(static_cast<double>(config_.d_model)));
        Var pe = tape.constant(positional_encoding<T>(ids.size(), config_.d_model));
        return tape.add(e, pe);
    }

    // Mixture of features: image self-attention plus the per-layer learnable
    // scalar times report cross-attention.
    Var fuse(Tape<T>& tape, const BoundParams<T>& p, std::size_t layer, Var f_img, Var f_rep,
             const Mask* rep_mask) const {
        const std::string enc = "enc" + std::to_string(layer);
        Var img_attended = attention(tape, p, enc + ".self", f_img, f_img);
        if (!config_.use_retrieval) return img_attended;
        Var rep_attended = attention(tape, p, enc + ".cross", f_img, f_rep, rep_mask);
        return tape.add(img_attended, tape.scale_by(rep_attended, p.at(enc + ".fuse.w")));
    }

    Var ffn(Tape<T>& tape, const BoundParams<T>& p, const std::string& prefix, Var x) const {
        Var h = tape.relu(tape.add_bias_row(tape.matmul(x, p.at(prefix + ".w1")),
                                            p.at(prefix + ".b1")));
        return tape.add_bias_row(tape.matmul(h, p.at(prefix + ".w2")), p.at(prefix + ".b2"));
    }

    Var encoder_layer(Tape<T>& tape, const BoundParams<T>& p, std::size_t layer, Var f, Var f_rep,
                      const Mask* rep_mask, bool training, Rng& rng) const {
        const std::string enc = "enc" + std::to_string(layer);
        auto ln = [&](const char* which, Var x) {
            const std::string prefix = enc + "." + which;
            return tape.layernorm(x, p.at(prefix + ".g"), p.at(prefix + ".b"), kLnEps);
        };
        auto drop = [&](Var x) { return tape.dropout(x, config_.dropout_p, training, rng); };

        if (config_.literal_residual) {
            Var fused = fuse(tape, p, layer, f, f_rep, rep_mask);
            Var after = tape.add(fused, drop(ln("ln1", fused)));
            return tape.add(after, drop(ln("ln2", ffn(tape, p, enc + ".ffn", after))));
        }
        Var fused = tape.add(f, drop(fuse(tape, p, layer, ln("ln1", f), f_rep, rep_mask)));
        return tape.add(fused, drop(ffn(tape, p, enc + ".ffn", ln("ln2", fused))));
    }

    // Full fused encoder stack over projected image features. f_rep is
    // reused untransformed at every layer.
    Var encode(Tape<T>& tape, const BoundParams<T>& p, Var features, Var f_rep,
               const Mask* rep_mask, bool training, Rng& rng) const {
        if (tape.value(features).cols() != config_.d_f) {
            throw NumericError("feature dim " + tape.value(features).shape_str() +
                               " does not match configured d_f " + std::to_string(config_.d_f));
        }
        Var f = tape.matmul(features, p.at("img.proj"));
        for (std::size_t l = 0; l < config_.n_layers; ++l) {
            f = encoder_layer(tape, p, l, f, f_rep, rep_mask, training, rng);
        }
        return f;
    }

    Var decoder_layer(Tape<T>& tape, const BoundParams<T>& p, std::size_t layer, Var y,
                      Var memory, const Mask& causal, bool training, Rng& rng) const {
        const std::string dec = "dec" + std::to_string(layer);
        auto ln = [&](const char* which, Var x) {
            const std::string prefix = dec + "." + which;
            return tape.layernorm(x, p.at(prefix + ".g"), p.at(prefix + ".b"), kLnEps);
        };
        auto drop = [&](Var x) { return tape.dropout(x, config_.dropout_p, training, rng); };

        Var n1 = ln("ln1", y);
        y = tape.add(y, drop(attention(tape, p, dec + ".self", n1, n1, &causal)));
        y = tape.add(y, drop(attention(tape, p, dec + ".cross", ln("ln2", y), memory)));
        return tape.add(y, drop(ffn(tape, p, dec + ".ffn", ln("ln3", y))));
    }

    // features: p x d_f leaf already on the tape. retrieved: ids of the
    // retrieved report (ignored when retrieval is off). prefix: BOS-led
    // decoder input. Returns per-position vocabulary logits.
    Var forward(Tape<T>& tape, const BoundParams<T>& p, Var features,
                const TokenSequence& retrieved, const TokenSequence& prefix, bool training,
                Rng& rng) const {
        if (prefix.empty() || prefix.front() != Vocab::kBos) {
            throw UsageError("decoder prefix must start with BOS");
        }
        Var f_rep = 0;
        Mask rep_mask;
        const Mask* rep_mask_ptr = nullptr;
        if (config_.use_retrieval) {
            if (retrieved.empty()) {
                throw UsageError("retrieval is enabled but no retrieved report was supplied");
            }
            f_rep = embed_tokens(tape, p, retrieved);
            rep_mask = Mask::from_key_visibility(tape.value(features).rows(),
                                                 pad_visibility(retrieved));
            rep_mask_ptr = &rep_mask;
        }
        Var memory = encode(tape, p, features, f_rep, rep_mask_ptr, training, rng);

        Var y = embed_tokens(tape, p, prefix);
        const Mask causal = Mask::causal(prefix.size());
        for (std::size_t l = 0; l < config_.n_layers; ++l) {
            y = decoder_layer(tape, p, l, y, memory, causal, training, rng);
        }
        return tape.add_bias_row(tape.matmul(y, p.at("head.w")), p.at("head.b"));
    }

private:
    static constexpr double kLnEps = 1e-5;

    ModelConfig config_;
};

} // namespace rrg
