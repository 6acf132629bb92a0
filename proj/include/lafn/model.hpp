#pragma once

// Decoder-only pre-norm transformer with learned positional embeddings.
//
// Each FFN comes in one of two forms:
//   classic: out = act(x W1) W2                  W1 [d, f], W2 [f, d]
//   gated:   out = (act(x W1) * (x W2)) W3       W1, W2 [d, f], W3 [f, d]
// In both, the neuron vector is act(x W1), where x is the normed input of
// the FFN. Activation recording and value injection operate on that vector.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lafn/error.hpp"
#include "lafn/random.hpp"
#include "lafn/tensor.hpp"
#include "lafn/tokenizer.hpp"

namespace lafn {

enum class FfnVariant { classic, gated };

inline const char* to_string(FfnVariant v) { return v == FfnVariant::classic ? "classic" : "gated"; }

inline FfnVariant ffn_variant_from_string(std::string_view s) {
    if (s == "classic") return FfnVariant::classic;
    if (s == "gated") return FfnVariant::gated;
    fail(ErrorKind::validation, "unknown ffn variant '" + std::string(s) + "'");
}

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 128;
    std::size_t d_ffn = 512;
    std::size_t n_heads = 4;
    std::size_t vocab_size = 0;
    std::size_t max_seq = 48;
    FfnVariant ffn_variant = FfnVariant::gated;
    Activation act_fn = Activation::silu;

    void validate() const {
        auto bad = [](const std::string& m) { fail(ErrorKind::validation, "model config: " + m); };
        if (n_layers == 0) bad("n_layers must be >= 1");
        if (n_heads == 0 || d_model % n_heads != 0) bad("d_model must be divisible by n_heads");
        if (d_ffn < 1) bad("d_ffn must be >= 1");
        if (vocab_size < 4) bad("vocab_size must be >= 4");
        if (max_seq < 2) bad("max_seq must be >= 2");
    }

    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"n_layers", c.n_layers},       {"d_model", c.d_model},
                       {"d_ffn", c.d_ffn},             {"n_heads", c.n_heads},
                       {"vocab_size", c.vocab_size},   {"max_seq", c.max_seq},
                       {"ffn_variant", to_string(c.ffn_variant)}, {"act_fn", to_string(c.act_fn)}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_ffn = j.at("d_ffn").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq = j.at("max_seq").get<std::size_t>();
    c.ffn_variant = ffn_variant_from_string(j.at("ffn_variant").get<std::string>());
    c.act_fn = activation_from_string(j.at("act_fn").get<std::string>());
}

template <typename T>
struct LayerWeights {
    Tensor<T> attn_norm;  // [d]
    Tensor<T> wq, wk, wv, wo;  // [d, d]
    Tensor<T> ffn_norm;   // [d]
    Tensor<T> w1;         // [d, f]
    Tensor<T> w2;         // gated: [d, f]; classic: [f, d]
    Tensor<T> w3;         // gated: [f, d]; classic: undefined
};

template <typename T>
class TransformerModel {
public:
    ModelConfig config;
    Tokenizer tokenizer;
    Tensor<T> tok_emb;  // [V, d]
    Tensor<T> pos_emb;  // [max_seq, d]
    std::vector<LayerWeights<T>> layers;
    Tensor<T> final_norm;  // [d]
    Tensor<T> head;        // [d, V]

    // Gaussian init with std `init_std`; output projections are scaled by
    // 1/sqrt(2 * n_layers). Norm gains start at one.
    static TransformerModel init(ModelConfig cfg, Tokenizer tok, std::uint64_t seed, double init_std = 0.02) {
        if (cfg.vocab_size == 0) cfg.vocab_size = tok.size();
        cfg.validate();
        if (cfg.vocab_size != tok.size()) {
            fail(ErrorKind::validation, "model config: vocab_size " + std::to_string(cfg.vocab_size) +
                                            " != tokenizer size " + std::to_string(tok.size()));
        }
        Rng rng(seed);
        auto normal = [&rng]() {
            // Box-Muller; one draw per call.
            const double u1 = 1.0 - uniform_unit(rng);
            const double u2 = uniform_unit(rng);
            return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
        };
        auto gauss = [&](Shape s, double std) {
            std::vector<T> v(shape_numel(s));
            for (auto& x : v) x = static_cast<T>(normal() * std);
            return Tensor<T>(std::move(s), std::move(v));
        };
        auto ones = [](std::size_t n) { return Tensor<T>({n}, std::vector<T>(n, T(1))); };
        const std::size_t d = cfg.d_model, f = cfg.d_ffn;
        const double out_std = init_std / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
        TransformerModel m;
        m.config = cfg;
        m.tokenizer = std::move(tok);
        m.tok_emb = gauss({cfg.vocab_size, d}, init_std);
        m.pos_emb = gauss({cfg.max_seq, d}, init_std);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            LayerWeights<T> lw;
            lw.attn_norm = ones(d);
            lw.wq = gauss({d, d}, init_std);
            lw.wk = gauss({d, d}, init_std);
            lw.wv = gauss({d, d}, init_std);
            lw.wo = gauss({d, d}, out_std);
            lw.ffn_norm = ones(d);
            lw.w1 = gauss({d, f}, init_std);
            if (cfg.ffn_variant == FfnVariant::gated) {
                lw.w2 = gauss({d, f}, init_std);
                lw.w3 = gauss({f, d}, out_std);
            } else {
                lw.w2 = gauss({f, d}, out_std);
            }
            m.layers.push_back(std::move(lw));
        }
        m.final_norm = ones(d);
        m.head = gauss({d, cfg.vocab_size}, init_std);
        return m;
    }

    // Stable names used by the container format.
    std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
        std::vector<std::pair<std::string, Tensor<T>*>> out{{"tok_emb", &tok_emb}, {"pos_emb", &pos_emb}};
        for (std::size_t l = 0; l < layers.size(); ++l) {
            auto& lw = layers[l];
            const std::string p = "layers." + std::to_string(l) + ".";
            out.emplace_back(p + "attn_norm", &lw.attn_norm);
            out.emplace_back(p + "attn.wq", &lw.wq);
            out.emplace_back(p + "attn.wk", &lw.wk);
            out.emplace_back(p + "attn.wv", &lw.wv);
            out.emplace_back(p + "attn.wo", &lw.wo);
            out.emplace_back(p + "ffn_norm", &lw.ffn_norm);
            out.emplace_back(p + "ffn.w1", &lw.w1);
            out.emplace_back(p + "ffn.w2", &lw.w2);
            if (config.ffn_variant == FfnVariant::gated) out.emplace_back(p + "ffn.w3", &lw.w3);
        }
        out.emplace_back("final_norm", &final_norm);
        out.emplace_back("head", &head);
        return out;
    }

    std::vector<std::pair<std::string, const Tensor<T>*>> named_parameters() const {
        auto named = const_cast<TransformerModel*>(this)->named_parameters();
        std::vector<std::pair<std::string, const Tensor<T>*>> out;
        for (auto& [n, t] : named) out.emplace_back(n, t);
        return out;
    }

    std::vector<Tensor<T>> parameters() {
        std::vector<Tensor<T>> out;
        for (auto& [n, t] : named_parameters()) out.push_back(*t);
        return out;
    }

    void set_requires_grad(bool on) {
        for (auto& [n, t] : named_parameters()) t->set_requires_grad(on);
    }

    // Deep copy with storage independent from this model.
    TransformerModel clone() const {
        TransformerModel m = *this;
        for (auto& [n, t] : m.named_parameters()) *t = t->clone(t->requires_grad());
        return m;
    }

    template <typename U>
    TransformerModel<U> cast() const {
        TransformerModel<U> m;
        m.config = config;
        m.tokenizer = tokenizer;
        m.layers.resize(layers.size());
        auto src = named_parameters();
        auto dst = m.named_parameters();
        for (std::size_t i = 0; i < src.size(); ++i) {
            auto v = src[i].second->values();
            *dst[i].second = Tensor<U>(src[i].second->shape(), std::vector<U>(v.begin(), v.end()));
        }
        return m;
    }
};

// Per-layer FFN inputs (normed hidden states) and neuron vectors, captured
// before any injection. Each entry is [seq, d] or [seq, f].
template <typename T>
struct ActivationRecord {
    std::vector<Tensor<T>> ffn_inputs;
    std::vector<Tensor<T>> neurons;
};

template <typename T>
struct InjectionEntry {
    std::size_t layer = 0;
    std::vector<std::size_t> neurons;  // sorted, aligned with delta
    std::size_t position = 0;
    Tensor<T> delta;                   // [neurons.size()]
};

template <typename T>
struct InjectionSpec {
    std::vector<InjectionEntry<T>> entries;

    void validate(const ModelConfig& cfg, std::size_t seq_len) const {
        for (const auto& e : entries) {
            auto bad = [&](const std::string& m) {
                fail(ErrorKind::validation, "injection: " + m);
            };
            if (e.layer >= cfg.n_layers) bad("layer " + std::to_string(e.layer) + " >= n_layers " + std::to_string(cfg.n_layers));
            if (e.position >= seq_len) bad("position " + std::to_string(e.position) + " >= sequence length " + std::to_string(seq_len));
            if (!e.delta.defined() || e.delta.rank() != 1 || e.delta.dim(0) != e.neurons.size()) {
                bad("delta length does not match " + std::to_string(e.neurons.size()) + " neuron indices");
            }
            for (std::size_t k = 0; k < e.neurons.size(); ++k) {
                if (e.neurons[k] >= cfg.d_ffn) bad("neuron index " + std::to_string(e.neurons[k]) + " >= d_ffn " + std::to_string(cfg.d_ffn));
                if (k && e.neurons[k] <= e.neurons[k - 1]) bad("neuron indices must be strictly increasing");
            }
        }
    }
};

// FFN on a block of normed inputs `x` [seq, d]; returns (output, neurons).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> ffn_forward(FfnVariant variant, Activation act, const Tensor<T>& x,
                                            const LayerWeights<T>& w) {
    Tensor<T> neurons = activation(matmul(x, w.w1), act);
    if (variant == FfnVariant::classic) return {matmul(neurons, w.w2), neurons};
    return {matmul(mul(neurons, matmul(x, w.w2)), w.w3), neurons};
}

// Remainder of the FFN given a (possibly injected) neuron block.
template <typename T>
Tensor<T> ffn_tail(FfnVariant variant, const Tensor<T>& x, const Tensor<T>& neurons, const LayerWeights<T>& w) {
    if (variant == FfnVariant::classic) return matmul(neurons, w.w2);
    return matmul(mul(neurons, matmul(x, w.w2)), w.w3);
}

template <typename T>
Tensor<T> causal_self_attention(const Tensor<T>& x, const LayerWeights<T>& w, std::size_t n_heads) {
    const std::size_t d = x.dim(1);
    const std::size_t dh = d / n_heads;
    Tensor<T> q = matmul(x, w.wq);
    Tensor<T> k = matmul(x, w.wk);
    Tensor<T> v = matmul(x, w.wv);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Tensor<T>> heads;
    heads.reserve(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
        Tensor<T> qh = slice_cols(q, h * dh, dh);
        Tensor<T> kh = slice_cols(k, h * dh, dh);
        Tensor<T> vh = slice_cols(v, h * dh, dh);
        Tensor<T> scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
        heads.push_back(matmul(softmax(scores, true), vh));
    }
    Tensor<T> merged = n_heads == 1 ? heads[0] : concat_cols(heads);
    return matmul(merged, w.wo);
}

// Logits [seq, V] for a token sequence. `record` receives pre-injection
// neuron vectors; `inject` adds deltas to neuron vectors at given positions.
template <typename T>
Tensor<T> forward(const TransformerModel<T>& model, std::span<const int> tokens,
                  std::type_identity_t<ActivationRecord<T>>* record = nullptr,
                  const std::type_identity_t<InjectionSpec<T>>* inject = nullptr) {
    const auto& cfg = model.config;
    const std::size_t n = tokens.size();
    if (n == 0) fail(ErrorKind::validation, "forward: empty token sequence");
    if (n > cfg.max_seq) {
        fail(ErrorKind::validation, "forward: sequence length " + std::to_string(n) + " exceeds max_seq " + std::to_string(cfg.max_seq));
    }
    for (int t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
            fail(ErrorKind::validation, "forward: token id " + std::to_string(t) + " outside vocabulary");
    }
    if (inject) inject->validate(cfg, n);
    if (record) {
        record->ffn_inputs.clear();
        record->neurons.clear();
    }
    std::vector<int> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<int>(i);

    Tensor<T> h = add(embedding(model.tok_emb, tokens), embedding(model.pos_emb, std::span<const int>(positions)));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& w = model.layers[l];
        h = add(h, causal_self_attention(rmsnorm(h, w.attn_norm), w, cfg.n_heads));
        Tensor<T> x = rmsnorm(h, w.ffn_norm);
        Tensor<T> neurons = activation(matmul(x, w.w1), cfg.act_fn);
        if (record) {
            record->ffn_inputs.push_back(x);
            record->neurons.push_back(neurons);
        }
        if (inject) {
            for (const auto& e : inject->entries)
                if (e.layer == l) neurons = scatter_add(neurons, e.position, e.neurons, e.delta);
        }
        h = add(h, ffn_tail(cfg.ffn_variant, x, neurons, w));
    }
    return matmul(rmsnorm(h, model.final_norm), model.head);
}

// Last-row next-token distribution helper: argmax over the final row.
template <typename T>
int argmax_last(const Tensor<T>& logits) {
    const std::size_t v = logits.dim(1);
    auto row = logits.values().subspan((logits.dim(0) - 1) * v, v);
    std::size_t best = 0;
    for (std::size_t i = 1; i < v; ++i)
        if (row[i] > row[best]) best = i;
    return static_cast<int>(best);
}

// Greedy continuation of `prompt` (which already starts with bos). Stops at
// eos, after `max_new` tokens, or at max_seq. Returned ids exclude eos.
template <typename T>
std::vector<int> generate_greedy(const TransformerModel<T>& model, std::vector<int> prompt, std::size_t max_new = 16,
                                 const std::type_identity_t<InjectionSpec<T>>* inject = nullptr) {
    NoGradScope<T> off;
    std::vector<int> out;
    for (std::size_t step = 0; step < max_new && prompt.size() < model.config.max_seq; ++step) {
        const int next = argmax_last(forward(model, prompt, nullptr, inject));
        if (next == Tokenizer::eos) break;
        out.push_back(next);
        prompt.push_back(next);
    }
    return out;
}

// Autoregressive temperature-1 sample of `length` tokens after bos, seeded.
// Reserved ids (pad/unk/bos/eos) are never drawn.
template <typename T>
std::vector<int> sample_prefix(const TransformerModel<T>& model, std::size_t length, std::uint64_t seed) {
    NoGradScope<T> off;
    Rng rng(seed);
    std::vector<int> seq{Tokenizer::bos};
    std::vector<int> out;
    const std::size_t v = model.config.vocab_size;
    for (std::size_t i = 0; i < length && seq.size() < model.config.max_seq; ++i) {
        Tensor<T> logits = forward(model, seq);
        auto row = logits.values().subspan((logits.dim(0) - 1) * v, v);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t t = Tokenizer::reserved; t < v; ++t) mx = std::max(mx, static_cast<double>(row[t]));
        std::vector<double> w(v, 0.0);
        double total = 0.0;
        for (std::size_t t = Tokenizer::reserved; t < v; ++t) {
            w[t] = std::exp(static_cast<double>(row[t]) - mx);
            total += w[t];
        }
        const double u = uniform_unit(rng) * total;
        double acc = 0.0;
        int pick_id = static_cast<int>(v - 1);
        for (std::size_t t = Tokenizer::reserved; t < v; ++t) {
            acc += w[t];
            if (u < acc) {
                pick_id = static_cast<int>(t);
                break;
            }
        }
        out.push_back(pick_id);
        seq.push_back(pick_id);
    }
    return out;
}

}  // namespace lafn
