#pragma once

// Subject-keyed patch store and the gated inference rule: if a query
// contains an edited subject, run the model with that patch injected at the
// subject's last token; otherwise run the untouched model.
//
// Cache file:
//   "LAFC", u16 version (1), u32 entry count, then per entry
//   u32 header length, JSON header {id, subjects, layers: [{layer, indices}], steps, trace},
//   little-endian f32 deltas in layer order.

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lafn/binio.hpp"
#include "lafn/data.hpp"
#include "lafn/editor.hpp"
#include "lafn/model.hpp"

namespace lafn {

struct SubjectMatch {
    const EditPatch* patch = nullptr;
    std::string subject;
    std::size_t begin = 0;  // word index of the first subject word in the query
    std::size_t last = 0;   // word index of the last subject word
    bool ambiguous = false;  // another patch's subject also occurred
};

class EditCache {
public:
    // Last writer wins per (language, subject) key; replacements are logged.
    void insert(EditPatch patch) {
        patch.validate();
        const std::size_t slot = entries_.size();
        for (const auto& [lang, subject] : patch.subjects) {
            Key key{lang, Tokenizer::split(subject)};
            if (key.second.empty()) fail(ErrorKind::validation, "cache: patch '" + patch.id + "' has an empty subject for " + lang);
            auto [it, fresh] = index_.emplace(key, slot);
            if (!fresh) {
                log_.push_back("replaced [" + lang + "] '" + subject + "': patch '" + entries_[it->second].id + "' -> '" + patch.id + "'");
                it->second = slot;
            }
        }
        entries_.push_back(std::move(patch));
    }

    // Longest indexed subject occurring in the query; ties go to the later
    // occurrence, then to the lexicographically smaller subject. The match
    // position is the subject's last occurrence.
    std::optional<SubjectMatch> match_subject(const std::string& query, const std::string& lang) const {
        const auto words = Tokenizer::split(query);
        std::optional<SubjectMatch> best;
        std::size_t best_len = 0;
        std::vector<const EditPatch*> hits;
        for (auto it = index_.lower_bound(Key{lang, {}}); it != index_.end() && it->first.first == lang; ++it) {
            const auto& subject = it->first.second;
            const std::size_t start = find_last_subsequence(words, subject);
            if (start == static_cast<std::size_t>(-1)) continue;
            const EditPatch* p = &entries_[it->second];
            if (std::find(hits.begin(), hits.end(), p) == hits.end()) hits.push_back(p);
            const std::size_t last = start + subject.size() - 1;
            const bool better = !best || subject.size() > best_len || (subject.size() == best_len && last > best->last);
            if (better) {
                best = SubjectMatch{p, Tokenizer::join(subject), start, last, false};
                best_len = subject.size();
            }
        }
        if (best) best->ambiguous = hits.size() > 1;
        return best;
    }

    const std::vector<EditPatch>& entries() const { return entries_; }
    const std::vector<std::string>& log() const { return log_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    // Distinct patches still reachable through the index, in insertion order.
    std::vector<const EditPatch*> live_entries() const {
        std::vector<bool> live(entries_.size(), false);
        for (const auto& [k, slot] : index_) live[slot] = true;
        std::vector<const EditPatch*> out;
        for (std::size_t i = 0; i < entries_.size(); ++i)
            if (live[i]) out.push_back(&entries_[i]);
        return out;
    }

private:
    using Key = std::pair<std::string, std::vector<std::string>>;
    std::vector<EditPatch> entries_;
    std::map<Key, std::size_t> index_;
    std::vector<std::string> log_;
};

// Query -> bos-prefixed ids plus the injection spec chosen by the cache.
template <typename T>
std::pair<std::vector<int>, std::optional<InjectionSpec<T>>> dispatch_inputs(const TransformerModel<T>& model, const EditCache& cache,
                                                                             const std::string& query, const std::string& lang) {
    auto ids = model.tokenizer.encode_prompt(query);
    auto m = cache.match_subject(query, lang);
    if (!m) return {std::move(ids), std::nullopt};
    return {std::move(ids), m->patch->template injection<T>(m->last + 1)};  // +1 for bos
}

template <typename T>
Tensor<T> dispatch_forward(const TransformerModel<T>& model, const EditCache& cache, const std::string& query, const std::string& lang) {
    NoGradScope<T> off;
    auto [ids, spec] = dispatch_inputs(model, cache, query, lang);
    return forward(model, ids, nullptr, spec ? &*spec : nullptr);
}

template <typename T>
std::string dispatch_generate(const TransformerModel<T>& model, const EditCache& cache, const std::string& query,
                              const std::string& lang, std::size_t max_new = 16) {
    auto [ids, spec] = dispatch_inputs(model, cache, query, lang);
    return model.tokenizer.decode(generate_greedy(model, std::move(ids), max_new, spec ? &*spec : nullptr));
}

inline constexpr char kCacheMagic[4] = {'L', 'A', 'F', 'C'};
inline constexpr std::uint16_t kCacheVersion = 1;

inline std::string serialize_cache(const EditCache& cache) {
    ByteWriter out;
    out.raw(std::string_view(kCacheMagic, 4));
    out.uint<std::uint16_t>(kCacheVersion);
    out.uint<std::uint32_t>(static_cast<std::uint32_t>(cache.size()));
    for (const auto& p : cache.entries()) {
        nlohmann::json layers = nlohmann::json::array();
        for (std::size_t k = 0; k < p.layers.size(); ++k) layers.push_back({{"layer", p.layers[k]}, {"indices", p.indices[k]}});
        nlohmann::json trace = nlohmann::json::array();
        for (const auto& t : p.trace) trace.push_back({t.target, t.kl, t.total});
        const nlohmann::json header{{"id", p.id}, {"subjects", p.subjects}, {"layers", layers}, {"steps", p.steps}, {"trace", trace}};
        const std::string h = header.dump();
        out.uint<std::uint32_t>(static_cast<std::uint32_t>(h.size()));
        out.raw(h);
        for (const auto& d : p.deltas)
            for (float v : d) out.f32(v);
    }
    return out.take();
}

inline EditCache deserialize_cache(std::string_view bytes, const std::string& what = "cache") {
    ByteReader in(bytes, what);
    const auto magic = in.raw(4, "magic");
    if (magic != std::string_view(kCacheMagic, 4)) {
        fail(ErrorKind::format, what + ": bad magic (expected \"LAFC\", found \"" + std::string(magic) + "\")");
    }
    const auto version = in.uint<std::uint16_t>("version");
    if (version != kCacheVersion) {
        fail(ErrorKind::format, what + ": unsupported version (expected " + std::to_string(kCacheVersion) + ", found " +
                                    std::to_string(version) + ")");
    }
    const auto count = in.uint<std::uint32_t>("entry count");
    EditCache cache;
    for (std::uint32_t e = 0; e < count; ++e) {
        const std::string where = what + ": entry " + std::to_string(e);
        const auto len = in.uint<std::uint32_t>("entry header length");
        const auto text = in.raw(len, "entry header");
        EditPatch p;
        try {
            const auto h = nlohmann::json::parse(text);
            p.id = h.at("id").get<std::string>();
            p.subjects = h.at("subjects").get<std::map<std::string, std::string>>();
            for (const auto& l : h.at("layers")) {
                p.layers.push_back(l.at("layer").get<std::size_t>());
                p.indices.push_back(l.at("indices").get<std::vector<std::size_t>>());
            }
            p.steps = h.at("steps").get<std::size_t>();
            for (const auto& t : h.at("trace")) p.trace.push_back({t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>()});
        } catch (const nlohmann::json::exception& ex) {
            fail(ErrorKind::format, where + ": invalid header: " + ex.what());
        }
        for (const auto& idx : p.indices) {
            std::vector<float> d(idx.size());
            for (auto& v : d) v = in.f32("delta values");
            p.deltas.push_back(std::move(d));
        }
        try {
            cache.insert(std::move(p));
        } catch (const Error& ex) {
            fail(ErrorKind::format, where + ": " + ex.what());
        }
    }
    if (in.remaining() != 0) fail(ErrorKind::format, what + ": " + std::to_string(in.remaining()) + " trailing bytes");
    return cache;
}

inline void save_cache(const EditCache& cache, const std::string& path) { write_text_file(path, serialize_cache(cache)); }

inline EditCache load_cache(const std::string& path) { return deserialize_cache(read_text_file(path), "cache '" + path + "'"); }

}  // namespace lafn
