#pragma once

// Optimises one additive patch over located neurons at the subject's last
// token, shared by every language of an edit group:
//
//   L = l1 * L_target + l2 * L_kl
//   L_target = mean over languages and prefixes of NLL(answer | prefix + prompt)
//   L_kl     = mean over languages of KL(p_orig || p_edit) at the probe's last position

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lafn/data.hpp"
#include "lafn/locator.hpp"
#include "lafn/model.hpp"
#include "lafn/optim.hpp"
#include "lafn/random.hpp"

namespace lafn {

struct EditorConfig {
    double lambda1 = 1.0;
    double lambda2 = 0.0625;
    std::size_t prefixes = 4;     // M, per language
    std::size_t prefix_len = 5;
    // Also train on the unprefixed prompt (the empty context). Without it the
    // patch never sees the subject at its evaluation-time position.
    bool bare_prompt = true;
    double lr = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::size_t max_steps = 50;
    double target_nll_stop = 0.05;      // per answer token
    double max_delta_norm_factor = 0.0;  // 0 disables the clamp; 4 is the suggested value
    std::uint64_t seed = 0;
    // "{s}"-templates overriding a language entry's "probe_template" field.
    std::map<std::string, std::string> probe_templates;
    // Languages optimised jointly; empty means every language of the group.
    std::vector<std::string> languages;
    // Use every neuron of the edit layers when the located set is empty.
    bool fallback_all = false;

    void validate() const {
        auto bad = [](const std::string& m) { fail(ErrorKind::validation, "editor config: " + m); };
        if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) bad("lambda1 and lambda2 must be >= 0");
        if (max_steps < 1) bad("max_steps must be >= 1");
        if (!(lr > 0.0)) bad("lr must be positive");
        if (max_delta_norm_factor < 0.0) bad("max_delta_norm_factor must be >= 0");
    }
};

// Index of the last token of the last occurrence of `subject` in `prompt`.
inline std::size_t resolve_subject_position(const std::vector<int>& prompt, const std::vector<int>& subject) {
    if (subject.empty()) fail(ErrorKind::validation, "resolve_subject_position: empty subject");
    const std::size_t start = find_last_subsequence(prompt, subject);
    if (start == static_cast<std::size_t>(-1)) fail(ErrorKind::validation, "resolve_subject_position: subject not in prompt");
    return start + subject.size() - 1;
}

struct TraceStep {
    double target = 0.0;
    double kl = 0.0;
    double total = 0.0;

    bool operator==(const TraceStep&) const = default;
};

struct EditPatch {
    std::string id;
    std::map<std::string, std::string> subjects;  // language -> subject
    std::vector<std::size_t> layers;               // only layers with neurons
    std::vector<std::vector<std::size_t>> indices;  // aligned with layers
    std::vector<std::vector<float>> deltas;         // aligned with indices
    std::vector<TraceStep> trace;
    std::size_t steps = 0;  // optimiser updates applied

    std::size_t neuron_count() const {
        std::size_t n = 0;
        for (const auto& i : indices) n += i.size();
        return n;
    }

    template <typename T>
    InjectionSpec<T> injection(std::size_t position) const {
        InjectionSpec<T> spec;
        for (std::size_t k = 0; k < layers.size(); ++k) {
            spec.entries.push_back({layers[k], indices[k], position,
                                    Tensor<T>({deltas[k].size()}, std::vector<T>(deltas[k].begin(), deltas[k].end()))});
        }
        return spec;
    }

    void validate() const {
        if (layers.size() != indices.size() || layers.size() != deltas.size()) {
            fail(ErrorKind::validation, "patch '" + id + "': layers, indices and deltas are misaligned");
        }
        for (std::size_t k = 0; k < layers.size(); ++k) {
            if (indices[k].size() != deltas[k].size()) fail(ErrorKind::validation, "patch '" + id + "': delta length mismatch");
            for (std::size_t i = 1; i < indices[k].size(); ++i)
                if (indices[k][i] <= indices[k][i - 1]) fail(ErrorKind::validation, "patch '" + id + "': indices not increasing");
        }
    }

    bool operator==(const EditPatch&) const = default;
};

namespace detail {

inline std::string fill_template(const std::string& tmpl, const std::string& subject) {
    const auto at = tmpl.find("{s}");
    if (at == std::string::npos) fail(ErrorKind::validation, "probe template '" + tmpl + "' lacks a {s} slot");
    return tmpl.substr(0, at) + subject + tmpl.substr(at + 3);
}

}  // namespace detail

// Precomputed sequences and reference distributions for one group; the
// objective is a function of the per-layer delta tensors only.
template <typename T>
class EditObjective {
public:
    struct Sequence {
        std::string language;
        std::vector<int> tokens;  // bos + prefix + prompt + answer
        std::size_t subject_pos = 0;
        std::size_t answer_begin = 0;  // index of first answer token
    };
    struct Probe {
        std::string language;
        std::vector<int> tokens;
        std::size_t subject_pos = 0;
        std::vector<T> log_p;  // original next-token log-probs at the last position
    };

    EditObjective(const TransformerModel<T>& model, const EditGroup& group, const LafnSet& lafn, const EditorConfig& cfg)
        : model_(model), cfg_(cfg) {
        cfg.validate();
        const auto& tok = model.tokenizer;
        const auto langs = cfg.languages.empty() ? group.languages() : cfg.languages;
        if (langs.empty()) fail(ErrorKind::validation, "editor: no languages to edit");
        for (std::size_t l = 0; l < lafn.set.n_layers(); ++l) {
            if (l >= model.config.n_layers) fail(ErrorKind::validation, "editor: neuron set deeper than the model");
            if (!lafn.set.layers[l].empty()) {
                layers_.push_back(l);
                indices_.push_back(lafn.set.layers[l]);
            }
        }
        NoGradScope<T> off;
        for (const auto& lang : langs) {
            const auto& e = group.lang(lang);
            subjects_[lang] = e.subject;
            const auto subject = tok.encode(e.subject);
            const auto prompt = tok.encode(e.prompt);
            const auto answer = tok.encode(e.target_new);
            if (answer.empty()) fail(ErrorKind::validation, "record '" + group.id + "' [" + lang + "]: target answer is empty");
            const bool with_bare = cfg.bare_prompt || cfg.prefixes == 0;
            for (std::size_t m = with_bare ? 0 : 1; m <= cfg.prefixes; ++m) {
                Sequence s;
                s.language = lang;
                s.tokens.push_back(Tokenizer::bos);
                if (m > 0) {
                    const auto prefix = sample_prefix(model, cfg.prefix_len, mix_seed(mix_seed(cfg.seed, hash_string(lang)), m - 1));
                    s.tokens.insert(s.tokens.end(), prefix.begin(), prefix.end());
                }
                s.tokens.insert(s.tokens.end(), prompt.begin(), prompt.end());
                s.subject_pos = resolve_subject_position(s.tokens, subject);
                s.answer_begin = s.tokens.size();
                s.tokens.insert(s.tokens.end(), answer.begin(), answer.end());
                if (s.tokens.size() > model.config.max_seq) {
                    fail(ErrorKind::validation, "record '" + group.id + "' [" + lang + "]: prefixed prompt exceeds max_seq");
                }
                answer_tokens_ += answer.size();
                seqs_.push_back(std::move(s));
            }
            if (cfg.lambda2 > 0.0) {
                std::string tmpl;
                if (auto it = cfg.probe_templates.find(lang); it != cfg.probe_templates.end()) {
                    tmpl = it->second;
                } else if (auto f = e.extra.find("probe_template"); f != e.extra.end() && f->is_string()) {
                    tmpl = f->template get<std::string>();
                } else {
                    fail(ErrorKind::validation, "record '" + group.id + "' [" + lang + "]: no probe template for the KL term");
                }
                Probe p;
                p.language = lang;
                p.tokens = tok.encode_prompt(detail::fill_template(tmpl, e.subject));
                p.subject_pos = resolve_subject_position(p.tokens, subject);
                Tensor<T> logp = log_softmax(forward(model, p.tokens));
                const std::size_t v = model.config.vocab_size;
                auto row = logp.values().subspan((p.tokens.size() - 1) * v, v);
                p.log_p.assign(row.begin(), row.end());
                probes_.push_back(std::move(p));
            }
            // Reference neuron norms of the bare prompt, for the optional clamp.
            ActivationRecord<T> rec;
            const auto bare = tok.encode_prompt(e.prompt);
            forward(model, bare, &rec);
            const std::size_t pos = resolve_subject_position(bare, subject);
            for (std::size_t k = 0; k < layers_.size(); ++k) {
                double sq = 0.0;
                auto v = rec.neurons[layers_[k]].values().subspan(pos * model.config.d_ffn, model.config.d_ffn);
                for (T x : v) sq += static_cast<double>(x) * static_cast<double>(x);
                const double norm = std::sqrt(sq);
                if (ref_norms_.size() <= k) ref_norms_.push_back(norm);
                else ref_norms_[k] = std::min(ref_norms_[k], norm);
            }
        }
    }

    const std::vector<std::size_t>& layers() const { return layers_; }
    const std::vector<std::vector<std::size_t>>& indices() const { return indices_; }
    const std::vector<Sequence>& sequences() const { return seqs_; }
    const std::vector<Probe>& probes() const { return probes_; }
    const std::map<std::string, std::string>& subjects() const { return subjects_; }
    const std::vector<double>& reference_norms() const { return ref_norms_; }
    std::size_t answer_tokens() const { return answer_tokens_; }

    std::vector<Tensor<T>> zero_deltas() const {
        std::vector<Tensor<T>> out;
        for (const auto& idx : indices_) out.push_back(Tensor<T>::zeros({idx.size()}));
        return out;
    }

    struct Losses {
        Tensor<T> target;  // mean summed answer NLL per sequence
        Tensor<T> kl;      // undefined when lambda2 == 0
        Tensor<T> total;
    };

    Losses evaluate(const std::vector<Tensor<T>>& deltas) const {
        if (deltas.size() != layers_.size()) fail(ErrorKind::validation, "editor: expected one delta tensor per edit layer");
        Losses out;
        for (const auto& s : seqs_) {
            const auto spec = injection(deltas, s.subject_pos);
            Tensor<T> logp = log_softmax(forward(model_, s.tokens, nullptr, &spec));
            std::vector<std::pair<std::size_t, std::size_t>> at;
            for (std::size_t i = s.answer_begin; i < s.tokens.size(); ++i)
                at.emplace_back(i - 1, static_cast<std::size_t>(s.tokens[i]));
            Tensor<T> nll = scale(sum(pick(logp, at)), T(-1));
            out.target = out.target.defined() ? add(out.target, nll) : nll;
        }
        out.target = scale(out.target, T(1) / static_cast<T>(seqs_.size()));
        out.total = scale(out.target, static_cast<T>(cfg_.lambda1));
        if (!probes_.empty()) {
            const std::size_t v = model_.config.vocab_size;
            for (const auto& p : probes_) {
                const auto spec = injection(deltas, p.subject_pos);
                Tensor<T> logq = slice_rows(log_softmax(forward(model_, p.tokens, nullptr, &spec)), p.tokens.size() - 1, 1);
                std::vector<T> probs(v);
                T neg_entropy = T(0);
                for (std::size_t t = 0; t < v; ++t) {
                    probs[t] = std::exp(p.log_p[t]);
                    neg_entropy += probs[t] * p.log_p[t];
                }
                // KL(p || q) = sum p log p - sum p log q
                Tensor<T> cross = sum(mul(logq, Tensor<T>({1, v}, std::move(probs))));
                Tensor<T> kl = add(scale(cross, T(-1)), Tensor<T>::scalar(neg_entropy));
                out.kl = out.kl.defined() ? add(out.kl, kl) : kl;
            }
            out.kl = scale(out.kl, T(1) / static_cast<T>(probes_.size()));
            out.total = add(out.total, scale(out.kl, static_cast<T>(cfg_.lambda2)));
        }
        return out;
    }

    InjectionSpec<T> injection(const std::vector<Tensor<T>>& deltas, std::size_t position) const {
        InjectionSpec<T> spec;
        for (std::size_t k = 0; k < layers_.size(); ++k) spec.entries.push_back({layers_[k], indices_[k], position, deltas[k]});
        return spec;
    }

private:
    const TransformerModel<T>& model_;
    EditorConfig cfg_;
    std::vector<std::size_t> layers_;
    std::vector<std::vector<std::size_t>> indices_;
    std::vector<Sequence> seqs_;
    std::vector<Probe> probes_;
    std::map<std::string, std::string> subjects_;
    std::vector<double> ref_norms_;
    std::size_t answer_tokens_ = 0;
};

inline LafnSet all_neurons(std::size_t n_layers, std::size_t d_ffn, const std::vector<std::size_t>& edit_layers,
                           std::vector<std::string> languages = {}) {
    check_layers(edit_layers, n_layers);
    LafnSet out;
    out.set.d_ffn = d_ffn;
    out.set.label = "all";
    out.set.layers.resize(n_layers);
    for (std::size_t l : edit_layers) {
        out.set.layers[l].resize(d_ffn);
        for (std::size_t j = 0; j < d_ffn; ++j) out.set.layers[l][j] = j;
    }
    out.languages = std::move(languages);
    return out;
}

template <typename T>
EditPatch optimize_patch(const TransformerModel<T>& model, const EditGroup& group, LafnSet lafn, const EditorConfig& cfg,
                         const std::vector<std::size_t>& edit_layers = {}) {
    if (lafn.set.empty()) {
        if (!cfg.fallback_all) {
            fail(ErrorKind::validation, "record '" + group.id +
                                            "': no neurons located in the edit layers; lower beta or enable the all-neurons fallback");
        }
        std::vector<std::size_t> layers = edit_layers;
        if (layers.empty())
            for (std::size_t l = 0; l < model.config.n_layers; ++l) layers.push_back(l);
        lafn = all_neurons(model.config.n_layers, model.config.d_ffn, layers, lafn.languages);
    }
    EditObjective<T> obj(model, group, lafn, cfg);
    auto deltas = obj.zero_deltas();
    for (auto& d : deltas) d.set_requires_grad(true);
    Adam<T> adam(deltas, AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8, 0.0});

    EditPatch patch;
    patch.id = group.id;
    patch.subjects = obj.subjects();
    patch.layers = obj.layers();
    patch.indices = obj.indices();
    const double per_token = static_cast<double>(obj.sequences().size()) / static_cast<double>(obj.answer_tokens());
    for (std::size_t step = 0; step < cfg.max_steps; ++step) {
        Tape<T> tape;
        Gradients<T> grads;
        TraceStep ts;
        {
            TapeScope<T> scope(tape);
            auto losses = obj.evaluate(deltas);
            ts.target = static_cast<double>(losses.target.item());
            ts.kl = losses.kl.defined() ? static_cast<double>(losses.kl.item()) : 0.0;
            ts.total = static_cast<double>(losses.total.item());
            if (!std::isfinite(ts.total)) fail(ErrorKind::numeric, "record '" + group.id + "': edit loss is not finite at step " + std::to_string(step));
            patch.trace.push_back(ts);
            if (ts.target * per_token < cfg.target_nll_stop) break;
            grads = tape.backward(losses.total);
        }
        adam.step(grads);
        ++patch.steps;
        if (cfg.max_delta_norm_factor > 0.0) {
            for (std::size_t k = 0; k < deltas.size(); ++k) {
                auto v = deltas[k].mutable_values();
                double sq = 0.0;
                for (T x : v) sq += static_cast<double>(x) * static_cast<double>(x);
                const double limit = cfg.max_delta_norm_factor * obj.reference_norms()[k];
                if (std::sqrt(sq) > limit && sq > 0.0) {
                    const T f = static_cast<T>(limit / std::sqrt(sq));
                    for (T& x : v) x *= f;
                }
            }
        }
    }
    for (const auto& d : deltas) {
        auto v = d.values();
        patch.deltas.emplace_back(v.begin(), v.end());
    }
    return patch;
}

enum class LocateVariant { lafn, no_pgs, all, random };

inline const char* to_string(LocateVariant v) {
    switch (v) {
        case LocateVariant::lafn: return "lafn";
        case LocateVariant::no_pgs: return "no_pgs";
        case LocateVariant::all: return "all";
        case LocateVariant::random: return "random";
    }
    return "lafn";
}

inline LocateVariant locate_variant_from_string(std::string_view s) {
    if (s == "lafn") return LocateVariant::lafn;
    if (s == "no_pgs") return LocateVariant::no_pgs;
    if (s == "all") return LocateVariant::all;
    if (s == "random") return LocateVariant::random;
    fail(ErrorKind::validation, "unknown locating variant '" + std::string(s) + "' (expected lafn|no_pgs|all|random)");
}

// Uniformly drawn index sets with the same per-layer sizes as `like`.
inline LafnSet random_neurons(const LafnSet& like, std::uint64_t seed) {
    LafnSet out = like;
    out.set.label = "random";
    Rng rng(mix_seed(seed, 0x52414E44ULL));
    for (auto& layer : out.set.layers) {
        const std::size_t k = layer.size();
        if (k == 0) continue;
        std::vector<std::size_t> pool(like.set.d_ffn);
        for (std::size_t j = 0; j < pool.size(); ++j) pool[j] = j;
        for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
        pool.resize(k);
        std::sort(pool.begin(), pool.end());
        layer = std::move(pool);
    }
    return out;
}

// Locating-strategy ablations. `lafn` is the regular result for the group.
template <typename T>
LafnSet ablation_variant(const TransformerModel<T>& model, const EditGroup& group, const LafnSet& lafn, LocateVariant variant,
                         const LocateConfig& cfg, std::uint64_t seed = 0, const std::vector<std::string>& languages = {}) {
    switch (variant) {
        case LocateVariant::lafn: return lafn;
        case LocateVariant::all: return all_neurons(model.config.n_layers, model.config.d_ffn, cfg.edit_layers, lafn.languages);
        case LocateVariant::random: return random_neurons(lafn, seed);
        case LocateVariant::no_pgs: {
            std::map<std::string, std::vector<std::vector<int>>> corpora;
            for (const auto& lang : languages.empty() ? group.languages() : languages)
                corpora[lang].push_back(model.tokenizer.encode_prompt(group.lang(lang).prompt));
            auto out = locate_from_corpora(model, corpora, cfg).lafn;
            out.set.label = "no_pgs";
            return out;
        }
    }
    return lafn;
}

}  // namespace lafn
