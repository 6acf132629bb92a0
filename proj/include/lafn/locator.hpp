#pragma once

// Activation counting, per-language factual-neuron selection and the
// cross-language intersection (language-agnostic factual neurons).

#include <algorithm>
#include <cstdint>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lafn/data.hpp"
#include "lafn/model.hpp"
#include "lafn/parallel.hpp"

namespace lafn {

struct ActivationCounts {
    std::vector<std::vector<std::uint64_t>> counts;  // [layer][neuron]
    std::uint64_t positions = 0;                      // token positions processed
    std::string label;

    static ActivationCounts zeros(std::size_t n_layers, std::size_t d_ffn, std::string label = {}) {
        return {std::vector<std::vector<std::uint64_t>>(n_layers, std::vector<std::uint64_t>(d_ffn, 0)), 0, std::move(label)};
    }

    std::size_t n_layers() const { return counts.size(); }
    std::size_t d_ffn() const { return counts.empty() ? 0 : counts[0].size(); }

    void merge(const ActivationCounts& other) {
        if (other.n_layers() != n_layers() || other.d_ffn() != d_ffn()) {
            fail(ErrorKind::validation, "activation counts: cannot merge mismatched geometries");
        }
        for (std::size_t l = 0; l < counts.size(); ++l)
            for (std::size_t j = 0; j < counts[l].size(); ++j) counts[l][j] += other.counts[l][j];
        positions += other.positions;
    }

    bool operator==(const ActivationCounts&) const = default;
};

struct CountOptions {
    bool include_bos = false;  // the bos position sees no sentence content
    std::size_t threads = 1;
};

// n[l][j] = number of (sentence, position) pairs where neuron j of layer l is
// strictly positive. Sentences start with bos.
template <typename T>
ActivationCounts count_activations(const TransformerModel<T>& model, const std::vector<std::vector<int>>& corpus,
                                   const CountOptions& opt = {}, std::string label = {}) {
    if (corpus.empty()) fail(ErrorKind::validation, "count_activations: corpus is empty");
    const auto& cfg = model.config;
    std::vector<ActivationCounts> partial(corpus.size());
    parallel_for(corpus.size(), opt.threads, [&](std::size_t s) {
        NoGradScope<T> off;
        ActivationRecord<T> rec;
        forward(model, corpus[s], &rec);
        auto c = ActivationCounts::zeros(cfg.n_layers, cfg.d_ffn);
        const std::size_t first = std::min<std::size_t>(opt.include_bos ? 0 : 1, corpus[s].size());
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            auto v = rec.neurons[l].values();
            for (std::size_t p = first; p < corpus[s].size(); ++p)
                for (std::size_t j = 0; j < cfg.d_ffn; ++j)
                    if (v[p * cfg.d_ffn + j] > T(0)) ++c.counts[l][j];
        }
        c.positions = corpus[s].size() - first;
        partial[s] = std::move(c);
    });
    auto total = ActivationCounts::zeros(cfg.n_layers, cfg.d_ffn, std::move(label));
    for (const auto& p : partial) total.merge(p);
    return total;
}

struct NeuronSet {
    std::vector<std::vector<std::size_t>> layers;  // sorted, unique per layer
    std::size_t d_ffn = 0;
    std::string label;  // language code or "intersection"
    double beta = 0.0;

    std::size_t n_layers() const { return layers.size(); }

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.size();
        return n;
    }

    bool empty() const { return total() == 0; }

    void validate() const {
        for (std::size_t l = 0; l < layers.size(); ++l)
            for (std::size_t k = 0; k < layers[l].size(); ++k) {
                if (layers[l][k] >= d_ffn || (k && layers[l][k] <= layers[l][k - 1])) {
                    fail(ErrorKind::validation, "neuron set: layer " + std::to_string(l) + " indices must be strictly increasing and < d_ffn");
                }
            }
    }

    bool operator==(const NeuronSet&) const = default;
};

struct LafnSet {
    NeuronSet set;
    std::vector<std::string> languages;

    bool operator==(const LafnSet&) const = default;
};

inline void check_beta(double beta) {
    if (!(beta >= 0.0 && beta < 1.0)) fail(ErrorKind::validation, "beta must be in [0, 1), got " + std::to_string(beta));
}

// Keeps j with n[l][j] / max_j n[l][j] > beta, normalising per layer.
inline NeuronSet select_factual_neurons(const ActivationCounts& counts, double beta) {
    check_beta(beta);
    NeuronSet out;
    out.d_ffn = counts.d_ffn();
    out.label = counts.label;
    out.beta = beta;
    for (const auto& layer : counts.counts) {
        std::vector<std::size_t> keep;
        const std::uint64_t mx = layer.empty() ? 0 : *std::max_element(layer.begin(), layer.end());
        if (mx > 0) {
            for (std::size_t j = 0; j < layer.size(); ++j)
                if (static_cast<double>(layer[j]) / static_cast<double>(mx) > beta) keep.push_back(j);
        }
        out.layers.push_back(std::move(keep));
    }
    return out;
}

inline LafnSet intersect_languages(const std::vector<NeuronSet>& sets) {
    if (sets.empty()) fail(ErrorKind::validation, "intersect_languages: no sets given");
    LafnSet out;
    out.set = sets[0];
    out.set.label = "intersection";
    out.languages.push_back(sets[0].label);
    for (std::size_t i = 1; i < sets.size(); ++i) {
        const auto& s = sets[i];
        if (s.n_layers() != out.set.n_layers() || s.d_ffn != out.set.d_ffn) {
            fail(ErrorKind::validation, "intersect_languages: set '" + s.label + "' has mismatched model geometry");
        }
        for (std::size_t l = 0; l < s.n_layers(); ++l) {
            std::vector<std::size_t> both;
            std::set_intersection(out.set.layers[l].begin(), out.set.layers[l].end(), s.layers[l].begin(), s.layers[l].end(),
                                  std::back_inserter(both));
            out.set.layers[l] = std::move(both);
        }
        out.languages.push_back(s.label);
    }
    return out;
}

inline void check_layers(const std::vector<std::size_t>& layers, std::size_t n_layers) {
    for (std::size_t l : layers)
        if (l >= n_layers) {
            fail(ErrorKind::validation, "edit layer " + std::to_string(l) + " outside model depth " + std::to_string(n_layers));
        }
}

// Empties every layer not listed in `keep`.
inline LafnSet restrict_to_layers(LafnSet s, const std::vector<std::size_t>& keep) {
    check_layers(keep, s.set.n_layers());
    for (std::size_t l = 0; l < s.set.n_layers(); ++l)
        if (std::find(keep.begin(), keep.end(), l) == keep.end()) s.set.layers[l].clear();
    return s;
}

struct LayerReport {
    std::vector<std::string> languages;
    struct Row {
        std::size_t layer = 0;
        std::vector<std::size_t> per_language;
        std::size_t lafn = 0;
    };
    std::vector<Row> rows;

    std::string to_csv() const {
        std::ostringstream os;
        os << "layer";
        for (const auto& l : languages) os << ',' << l;
        os << ",lafn\n";
        for (const auto& r : rows) {
            os << r.layer;
            for (auto n : r.per_language) os << ',' << n;
            os << ',' << r.lafn << '\n';
        }
        return os.str();
    }
};

inline LayerReport layer_distribution_report(const std::vector<NeuronSet>& per_language, const LafnSet& lafn) {
    LayerReport rep;
    for (const auto& s : per_language) {
        if (s.n_layers() != lafn.set.n_layers()) fail(ErrorKind::validation, "layer report: inconsistent geometry for '" + s.label + "'");
        rep.languages.push_back(s.label);
    }
    for (std::size_t l = 0; l < lafn.set.n_layers(); ++l) {
        LayerReport::Row row{l, {}, lafn.set.layers[l].size()};
        for (const auto& s : per_language) {
            row.per_language.push_back(s.layers[l].size());
            if (row.lafn > s.layers[l].size()) {
                fail(ErrorKind::runtime, "layer report: layer " + std::to_string(l) + " has more shared neurons than language '" + s.label + "'");
            }
        }
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

struct LocateConfig {
    double beta = 0.1;
    std::vector<std::size_t> edit_layers{1, 2, 3};
    CountOptions count;
};

struct LocateResult {
    std::vector<NeuronSet> per_language;  // unrestricted
    LafnSet lafn;                          // restricted to the edit layers
};

// Count -> select per language -> intersect -> restrict. `corpora` maps a
// language code to bos-prefixed token sequences.
template <typename T>
LocateResult locate_from_corpora(const TransformerModel<T>& model, const std::map<std::string, std::vector<std::vector<int>>>& corpora,
                                 const LocateConfig& cfg) {
    check_beta(cfg.beta);
    check_layers(cfg.edit_layers, model.config.n_layers);
    LocateResult out;
    for (const auto& [lang, corpus] : corpora) {
        if (corpus.empty()) fail(ErrorKind::validation, "locate: no paraphrases for language '" + lang + "'");
        out.per_language.push_back(select_factual_neurons(count_activations(model, corpus, cfg.count, lang), cfg.beta));
    }
    if (out.per_language.empty()) fail(ErrorKind::validation, "locate: no languages given");
    out.lafn = restrict_to_layers(intersect_languages(out.per_language), cfg.edit_layers);
    out.lafn.set.beta = cfg.beta;
    return out;
}

// Paraphrase corpora of a group for the given languages (all when empty).
template <typename T>
std::map<std::string, std::vector<std::vector<int>>> paraphrase_corpora(const TransformerModel<T>& model, const EditGroup& group,
                                                                         const std::vector<std::string>& languages = {}) {
    std::map<std::string, std::vector<std::vector<int>>> out;
    for (const auto& lang : languages.empty() ? group.languages() : languages) {
        const auto& e = group.lang(lang);
        if (e.paraphrases.empty()) fail(ErrorKind::validation, "record '" + group.id + "' [" + lang + "]: no paraphrases for locating");
        auto& c = out[lang];
        for (const auto& p : e.paraphrases) c.push_back(model.tokenizer.encode_prompt(p));
    }
    return out;
}

template <typename T>
LafnSet locate_for_group(const TransformerModel<T>& model, const EditGroup& group, const LocateConfig& cfg,
                         const std::vector<std::string>& languages = {}) {
    return locate_from_corpora(model, paraphrase_corpora(model, group, languages), cfg).lafn;
}

}  // namespace lafn
