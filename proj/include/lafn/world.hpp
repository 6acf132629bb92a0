#pragma once

// Synthetic parallel fact world.
//
// Two pseudo-languages share one set of facts (subject, relation, object)
// but have disjoint surface lexicons: every word of language k is built from
// a consonant inventory used by no other language. Each relation has, per
// language, a list of question templates:
//
//   [0]                     canonical template (edit prompts, locality)
//   [1, 1 + R)              rephrase templates (Generality prompts)
//   [1 + R, 1 + R + P)      locating templates (paraphrase corpus)
//
// The training corpus verbalises every fact with every template, so all
// phrasings are known to the model; the rephrase and locating template sets
// are disjoint.

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "lafn/data.hpp"
#include "lafn/error.hpp"
#include "lafn/random.hpp"
#include "lafn/tokenizer.hpp"

namespace lafn {

struct WorldConfig {
    std::size_t n_entities = 50;
    std::size_t n_relations = 8;
    std::size_t n_facts = 200;
    std::size_t n_rephrase_templates = 2;
    std::size_t n_locate_templates = 3;
    std::size_t n_openers = 10;
    std::size_t n_edit_groups = 20;
    std::size_t n_paraphrases = 30;
    std::size_t n_kinds = 4;  // entity categories, answered by the probe prompt
    double opener_rate = 0.3;
    std::uint64_t seed = 0;
    std::vector<std::string> languages{"l1", "l2"};
};

struct Template {
    std::vector<std::string> words;  // without the subject
    std::size_t subject_slot = 0;    // subject inserted before words[subject_slot]

    std::string render(const std::string& subject) const {
        std::vector<std::string> out;
        for (std::size_t i = 0; i <= words.size(); ++i) {
            if (i == subject_slot) out.push_back(subject);
            if (i < words.size()) out.push_back(words[i]);
        }
        return Tokenizer::join(out);
    }

    bool operator==(const Template&) const = default;
};

struct Fact {
    std::size_t subject = 0;
    std::size_t relation = 0;
    std::size_t object = 0;

    bool operator==(const Fact&) const = default;
};

struct LanguageLexicon {
    std::vector<std::string> entity_names;                // per entity
    std::vector<std::vector<Template>> relation_templates;  // per relation
    std::vector<std::string> relation_words;              // core word per relation
    std::vector<std::string> openers;
    Template probe;  // "{s} is a" equivalent
    std::vector<std::string> kind_words;

    bool operator==(const LanguageLexicon&) const = default;
};

struct FactWorld {
    WorldConfig config;
    std::vector<std::string> languages;
    std::map<std::string, LanguageLexicon> lexicons;
    std::vector<Fact> facts;
    std::vector<std::size_t> entity_kind;

    const LanguageLexicon& lex(const std::string& lang) const {
        auto it = lexicons.find(lang);
        if (it == lexicons.end()) fail(ErrorKind::validation, "world: unknown language '" + lang + "'");
        return it->second;
    }

    std::size_t rephrase_begin() const { return 1; }
    std::size_t locate_begin() const { return 1 + config.n_rephrase_templates; }
    std::size_t template_count() const { return 1 + config.n_rephrase_templates + config.n_locate_templates; }

    std::string question(const Fact& f, const std::string& lang, std::size_t tmpl) const {
        const auto& lx = lex(lang);
        return lx.relation_templates.at(f.relation).at(tmpl).render(lx.entity_names.at(f.subject));
    }

    std::string answer(const Fact& f, const std::string& lang) const { return lex(lang).entity_names.at(f.object); }

    // "{s} is a" style prompt used for KL probing.
    std::string probe_prompt(const std::string& lang, const std::string& subject) const {
        return lex(lang).probe.render(subject);
    }

    // Every distinct surface word of `lang`.
    std::vector<std::string> lexicon_words(const std::string& lang) const {
        const auto& lx = lex(lang);
        std::set<std::string> words(lx.entity_names.begin(), lx.entity_names.end());
        for (const auto& ts : lx.relation_templates)
            for (const auto& t : ts) words.insert(t.words.begin(), t.words.end());
        words.insert(lx.openers.begin(), lx.openers.end());
        words.insert(lx.probe.words.begin(), lx.probe.words.end());
        words.insert(lx.kind_words.begin(), lx.kind_words.end());
        return {words.begin(), words.end()};
    }

    bool operator==(const FactWorld& o) const {
        return languages == o.languages && lexicons == o.lexicons && facts == o.facts && entity_kind == o.entity_kind;
    }
};

struct SyntheticWorld {
    FactWorld world;
    std::map<std::string, std::vector<std::string>> corpus;  // training sentences ("question answer")
    std::map<std::string, std::vector<std::string>> facts;   // canonical "question\tanswer" per fact
    std::vector<EditGroup> groups;
};

namespace detail {

// Disjoint consonant inventories per language index; vowels are shared but
// every generated word contains at least one consonant.
inline const std::vector<std::string> kConsonants{"ptkbdgfh", "mnlrsvzw", "cjqxy"};
inline const std::string kVowels = "aeiou";

class WordMaker {
public:
    WordMaker(std::size_t lang_index, Rng& rng) : rng_(rng) {
        if (lang_index >= kConsonants.size()) fail(ErrorKind::validation, "world: at most 3 languages are supported");
        consonants_ = kConsonants[lang_index];
    }

    std::string make(std::size_t syllables) {
        for (;;) {
            std::string w;
            for (std::size_t s = 0; s < syllables; ++s) {
                w += consonants_[uniform_index(rng_, consonants_.size())];
                w += kVowels[uniform_index(rng_, kVowels.size())];
            }
            if (used_.insert(w).second) return w;
        }
    }

private:
    Rng& rng_;
    std::string consonants_;
    std::set<std::string> used_;
};

}  // namespace detail

// Paraphrases of `prompt` (an instance of one relation template for
// `subject`) drawn from that relation's locating templates, each optionally
// preceded by an opener word. Deterministic per seed; never returns the
// prompt itself.
inline std::vector<std::string> gen_paraphrases_template(const FactWorld& world, const std::string& lang,
                                                         const std::string& prompt, const std::string& subject,
                                                         std::size_t n, std::uint64_t seed) {
    if (n < 1) fail(ErrorKind::validation, "paraphrases: n must be >= 1");
    if (!contains_subject(prompt, subject)) {
        fail(ErrorKind::validation, "paraphrases: subject '" + subject + "' not in prompt '" + prompt + "'");
    }
    const auto& lx = world.lex(lang);
    const std::string norm = Tokenizer::normalize(prompt);
    std::size_t relation = lx.relation_templates.size();
    for (std::size_t r = 0; r < lx.relation_templates.size() && relation == lx.relation_templates.size(); ++r) {
        for (const auto& t : lx.relation_templates[r]) {
            const std::string body = t.render(subject);
            if (norm == body || (norm.size() > body.size() && norm.compare(norm.size() - body.size(), body.size(), body) == 0)) {
                relation = r;
                break;
            }
        }
    }
    if (relation == lx.relation_templates.size()) {
        fail(ErrorKind::validation, "paraphrases: prompt '" + prompt + "' matches no template of language '" + lang + "'");
    }
    std::vector<std::string> candidates;
    const auto& ts = lx.relation_templates[relation];
    for (std::size_t t = world.locate_begin(); t < ts.size(); ++t) {
        const std::string body = ts[t].render(subject);
        if (body != norm) candidates.push_back(body);
        for (const auto& op : lx.openers) {
            std::string s = op + " " + body;
            if (s != norm) candidates.push_back(std::move(s));
        }
    }
    if (n > candidates.size()) {
        fail(ErrorKind::validation, "paraphrases: requested " + std::to_string(n) + " but at most " +
                                        std::to_string(candidates.size()) + " distinct paraphrases are available");
    }
    Rng rng(mix_seed(seed, 0x5041524150ULL));
    shuffle_in_place(candidates, rng);
    candidates.resize(n);
    return candidates;
}

inline SyntheticWorld gen_synthetic_world(const WorldConfig& cfg) {
    auto bad = [](const std::string& m) { fail(ErrorKind::validation, "world: " + m); };
    if (cfg.n_entities < 2) bad("n_entities must be >= 2");
    if (cfg.n_relations < 1) bad("n_relations must be >= 1");
    if (cfg.n_facts < 1) bad("n_facts must be >= 1");
    if (cfg.n_rephrase_templates < 1) bad("n_rephrase_templates must be >= 1");
    if (cfg.n_locate_templates < 1) bad("n_locate_templates must be >= 1");
    if (cfg.languages.empty()) bad("at least one language is required");
    if (cfg.n_kinds < 1) bad("n_kinds must be >= 1");
    if (cfg.n_facts > cfg.n_entities * cfg.n_relations) {
        bad("n_facts " + std::to_string(cfg.n_facts) + " exceeds n_entities * n_relations = " +
            std::to_string(cfg.n_entities * cfg.n_relations));
    }

    SyntheticWorld out;
    FactWorld& w = out.world;
    w.config = cfg;
    w.languages = cfg.languages;
    Rng rng(mix_seed(cfg.seed, 0x574F524CULL));

    // Facts: distinct (subject, relation) pairs, objects differ from subjects.
    std::vector<std::size_t> pairs(cfg.n_entities * cfg.n_relations);
    for (std::size_t i = 0; i < pairs.size(); ++i) pairs[i] = i;
    shuffle_in_place(pairs, rng);
    pairs.resize(cfg.n_facts);
    std::sort(pairs.begin(), pairs.end());
    for (std::size_t p : pairs) {
        Fact f{p / cfg.n_relations, p % cfg.n_relations, 0};
        f.object = static_cast<std::size_t>(uniform_index(rng, cfg.n_entities - 1));
        if (f.object >= f.subject) ++f.object;
        w.facts.push_back(f);
    }

    for (std::size_t e = 0; e < cfg.n_entities; ++e) w.entity_kind.push_back(uniform_index(rng, cfg.n_kinds));

    const std::size_t n_templates = w.template_count();
    for (std::size_t li = 0; li < cfg.languages.size(); ++li) {
        detail::WordMaker maker(li, rng);
        LanguageLexicon lx;
        for (std::size_t e = 0; e < cfg.n_entities; ++e) lx.entity_names.push_back(maker.make(3));
        std::vector<std::string> pool;
        for (std::size_t i = 0; i < 12; ++i) pool.push_back(maker.make(2));
        std::set<std::pair<std::vector<std::string>, std::size_t>> seen;
        for (std::size_t r = 0; r < cfg.n_relations; ++r) {
            lx.relation_words.push_back(maker.make(2));
            std::vector<Template> ts;
            while (ts.size() < n_templates) {
                Template t;
                const std::size_t extra = 1 + uniform_index(rng, 2);
                for (std::size_t k = 0; k < extra; ++k) t.words.push_back(pool[uniform_index(rng, pool.size())]);
                t.words.insert(t.words.begin() + static_cast<std::ptrdiff_t>(uniform_index(rng, t.words.size() + 1)),
                               lx.relation_words[r]);
                // Cloze form: the subject closes the prompt, so the answer is
                // read off the subject's last token.
                t.subject_slot = t.words.size();
                if (seen.insert({t.words, t.subject_slot}).second) ts.push_back(std::move(t));
            }
            lx.relation_templates.push_back(std::move(ts));
        }
        for (std::size_t i = 0; i < cfg.n_openers; ++i) lx.openers.push_back(maker.make(2));
        lx.probe.words = {maker.make(2), maker.make(1)};
        lx.probe.subject_slot = 0;
        for (std::size_t k = 0; k < cfg.n_kinds; ++k) lx.kind_words.push_back(maker.make(2));
        w.lexicons.emplace(cfg.languages[li], std::move(lx));
    }

    // Training corpus: every fact under every template in every language.
    for (const auto& lang : cfg.languages) {
        const auto& lx = w.lex(lang);
        auto& lines = out.corpus[lang];
        auto& facts = out.facts[lang];
        for (std::size_t fi = 0; fi < w.facts.size(); ++fi) {
            const Fact& f = w.facts[fi];
            facts.push_back(w.question(f, lang, 0) + "\t" + w.answer(f, lang));
            for (std::size_t t = 0; t < n_templates; ++t) {
                std::string q = w.question(f, lang, t);
                if (!lx.openers.empty() && uniform_unit(rng) < cfg.opener_rate) {
                    q = lx.openers[uniform_index(rng, lx.openers.size())] + " " + q;
                }
                lines.push_back(q + " " + w.answer(f, lang));
            }
        }
        // Probe sentences: "<subject> is a <kind>".
        for (std::size_t e = 0; e < cfg.n_entities; ++e) {
            lines.push_back(w.probe_prompt(lang, lx.entity_names[e]) + " " + lx.kind_words[w.entity_kind[e]]);
        }
    }

    // Edit groups: distinct subjects, counterfactual objects that have
    // outgoing facts (for the 1-hop portability question).
    const std::size_t n_groups = std::min(cfg.n_edit_groups, cfg.n_facts);
    std::vector<std::size_t> fact_order(w.facts.size());
    for (std::size_t i = 0; i < fact_order.size(); ++i) fact_order[i] = i;
    shuffle_in_place(fact_order, rng);
    std::vector<std::size_t> chosen;
    std::set<std::size_t> edited_subjects;
    for (std::size_t fi : fact_order) {
        if (chosen.size() == n_groups) break;
        if (edited_subjects.insert(w.facts[fi].subject).second) chosen.push_back(fi);
    }
    std::map<std::size_t, std::vector<std::size_t>> outgoing;
    for (std::size_t fi = 0; fi < w.facts.size(); ++fi) outgoing[w.facts[fi].subject].push_back(fi);
    std::vector<std::size_t> locality_pool;
    for (std::size_t fi = 0; fi < w.facts.size(); ++fi)
        if (!edited_subjects.count(w.facts[fi].subject)) locality_pool.push_back(fi);
    if (chosen.size() < n_groups) bad("not enough distinct subjects for " + std::to_string(n_groups) + " edit groups");
    if (n_groups > 0 && locality_pool.empty()) bad("every subject is edited; no locality facts remain");
    shuffle_in_place(locality_pool, rng);

    for (std::size_t gi = 0; gi < chosen.size(); ++gi) {
        const Fact& f = w.facts[chosen[gi]];
        std::vector<std::size_t> candidates;
        for (const auto& [e, fs] : outgoing)
            if (e != f.object && e != f.subject) candidates.push_back(e);
        if (candidates.empty()) bad("no counterfactual object available");
        const std::size_t new_obj = candidates[uniform_index(rng, candidates.size())];
        const auto& hops = outgoing[new_obj];
        const Fact& hop = w.facts[hops[uniform_index(rng, hops.size())]];
        const Fact& loc = w.facts[locality_pool[gi % locality_pool.size()]];

        EditGroup g;
        g.id = "g" + std::to_string(gi);
        for (const auto& lang : cfg.languages) {
            const auto& lx = w.lex(lang);
            LangEntry e;
            e.subject = lx.entity_names[f.subject];
            e.prompt = w.question(f, lang, 0);
            e.target_new = lx.entity_names[new_obj];
            for (std::size_t t = w.rephrase_begin(); t < w.locate_begin(); ++t) e.rephrase_prompts.push_back(w.question(f, lang, t));
            e.locality = {w.question(loc, lang, 0), w.answer(loc, lang)};
            // "<hop relation> of (<edited relation> of subject)"
            const std::string inner = lx.relation_words[f.relation] + " " + e.subject;
            e.portability = {lx.relation_templates[hop.relation][0].render(inner), lx.entity_names[hop.object]};
            e.paraphrases = gen_paraphrases_template(w, lang, e.prompt, e.subject,
                                                     std::min(cfg.n_paraphrases, cfg.n_locate_templates * (cfg.n_openers + 1)),
                                                     mix_seed(cfg.seed, gi));
            e.extra["probe_template"] = "{s} " + Tokenizer::join(lx.probe.words);
            g.langs.emplace(lang, std::move(e));
        }
        g.extra["relation"] = f.relation;
        out.groups.push_back(std::move(g));
    }
    return out;
}

}  // namespace lafn
