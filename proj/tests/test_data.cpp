#include <gtest/gtest.h>

#include <set>

#include "lafn/data.hpp"
#include "lafn/world.hpp"
#include "support.hpp"

using namespace lafn;

namespace {

const char* kFixture = R"([
  {"id": "q1",
   "source": "hand",
   "langs": {
     "en": {"subject": "Danielle Darrieux", "prompt": "What is the mother tongue of Danielle Darrieux?",
            "target_new": "English",
            "rephrase_prompts": ["Which language did Danielle Darrieux speak natively?"],
            "locality": {"prompt": "Who wrote Hamlet?", "answer": "Shakespeare"},
            "portability": {"prompt": "Where is English an official language?", "answer": "UK"},
            "paraphrases": ["Danielle Darrieux's native language is"],
            "note": 7},
     "zh": {"subject": "达妮埃尔·达里约", "prompt": "达妮埃尔·达里约 的母语是什么？", "target_new": "英语",
            "rephrase_prompts": [], "locality": {"prompt": "", "answer": ""},
            "portability": {"prompt": "", "answer": ""}}}}
])";

WorldConfig small_world(std::uint64_t seed = 3) {
    WorldConfig c;
    c.n_entities = 12;
    c.n_relations = 3;
    c.n_facts = 30;
    c.n_edit_groups = 4;
    c.n_paraphrases = 10;
    c.seed = seed;
    return c;
}

std::string error_of(const std::string& text) {
    try {
        parse_edit_dataset(text);
    } catch (const Error& e) {
        return to_string(e.kind()) + std::string(": ") + e.what();
    }
    return "ok";
}

}  // namespace

TEST(Dataset, EmptyArrayGivesEmptyList) { EXPECT_TRUE(parse_edit_dataset("[]").empty()); }

TEST(Dataset, FixtureLoadsBothLanguages) {
    const auto groups = parse_edit_dataset(kFixture);
    ASSERT_EQ(groups.size(), 1u);
    const auto& g = groups[0];
    EXPECT_EQ(g.id, "q1");
    EXPECT_EQ(g.languages(), (std::vector<std::string>{"en", "zh"}));
    EXPECT_EQ(g.lang("en").target_new, "English");
    EXPECT_EQ(g.lang("en").locality.answer, "Shakespeare");
    EXPECT_EQ(g.lang("zh").subject, "达妮埃尔·达里约");
    // Unknown fields survive a round trip.
    EXPECT_EQ(g.extra.at("source"), "hand");
    EXPECT_EQ(g.lang("en").extra.at("note"), 7);
    EXPECT_EQ(parse_edit_dataset(serialize_edit_dataset(groups)), groups);
}

TEST(Dataset, SubjectMissingFromPromptNamesTheRecord) {
    std::string bad = kFixture;
    bad.replace(bad.find("达妮埃尔·达里约 的母语"), std::string("达妮埃尔·达里约").size(), "某人");
    const auto err = error_of(bad);
    EXPECT_EQ(err.rfind("validation:", 0), 0u) << err;
    EXPECT_NE(err.find("'q1' [zh]"), std::string::npos) << err;
}

TEST(Dataset, MalformedJsonReportsByteOffset) {
    const auto err = error_of("[{\"id\": 1,,}]");
    EXPECT_EQ(err.rfind("format:", 0), 0u);
    EXPECT_NE(err.find("byte 11"), std::string::npos) << err;
    EXPECT_EQ(error_of("{}").rfind("format:", 0), 0u);
    EXPECT_EQ(error_of(R"([{"langs": {}}])").rfind("validation:", 0), 0u);
}

TEST(Dataset, SubjectMatchIsWholeWord) {
    EXPECT_TRUE(contains_subject("who is  Ada   Lovelace ?", "Ada Lovelace"));
    EXPECT_FALSE(contains_subject("who is Adam Lovelace", "Ada Lovelace"));
    EXPECT_EQ(find_last_subsequence(std::vector<int>{1, 2, 1, 2}, std::vector<int>{1, 2}), 2u);
}

TEST(Dataset, ZsreImporterMapsFieldNames) {
    const auto j = nlohmann::json::parse(R"([{"case_id": 4, "en": {"src": "Who founded Acme?", "subject": "Acme",
        "alt": ["Bob"], "rephrase": ["Acme was founded by whom?"], "loc": "nq question", "loc_ans": "x"}}])");
    const auto groups = import_zsre(j);
    ASSERT_EQ(groups.size(), 1u);
    EXPECT_EQ(groups[0].id, "4");
    EXPECT_EQ(groups[0].lang("en").target_new, "Bob");
    EXPECT_EQ(groups[0].lang("en").locality.prompt, "nq question");
}

TEST(World, DeterministicPerSeed) {
    const auto a = gen_synthetic_world(small_world(5));
    const auto b = gen_synthetic_world(small_world(5));
    EXPECT_EQ(a.world.facts, b.world.facts);
    EXPECT_EQ(a.world.lexicons, b.world.lexicons);
    EXPECT_EQ(a.corpus, b.corpus);
    EXPECT_EQ(a.groups, b.groups);
    const auto c = gen_synthetic_world(small_world(6));
    EXPECT_NE(a.corpus, c.corpus);
}

TEST(World, FullGridUsesEveryPairOnce) {
    auto cfg = small_world();
    cfg.n_entities = 6;
    cfg.n_relations = 3;
    cfg.n_facts = 18;
    cfg.n_edit_groups = 3;
    const auto w = gen_synthetic_world(cfg);
    std::set<std::pair<std::size_t, std::size_t>> pairs;
    for (const auto& f : w.world.facts) {
        pairs.insert({f.subject, f.relation});
        EXPECT_NE(f.subject, f.object);
    }
    EXPECT_EQ(pairs.size(), 18u);
}

TEST(World, InfeasibleCountsAreRejected) {
    auto cfg = small_world();
    cfg.n_facts = cfg.n_entities * cfg.n_relations + 1;
    EXPECT_THROW(gen_synthetic_world(cfg), Error);
    cfg = small_world();
    cfg.n_entities = 1;
    EXPECT_THROW(gen_synthetic_world(cfg), Error);
}

TEST(World, LexiconsAreDisjointAcrossLanguages) {
    const auto w = gen_synthetic_world(small_world());
    const auto a = w.world.lexicon_words("l1");
    const auto b = w.world.lexicon_words("l2");
    std::set<std::string> sa(a.begin(), a.end());
    for (const auto& word : b) EXPECT_FALSE(sa.count(word)) << word;
}

TEST(World, CorpusVerbalizesEveryFactInEveryLanguage) {
    const auto w = gen_synthetic_world(small_world());
    for (const auto& lang : w.world.languages) {
        const auto& lines = w.corpus.at(lang);
        for (const auto& f : w.world.facts) {
            const std::string s = w.world.question(f, lang, 0) + " " + w.world.answer(f, lang);
            bool found = false;
            for (const auto& l : lines) found |= l.size() >= s.size() && l.compare(l.size() - s.size(), s.size(), s) == 0;
            EXPECT_TRUE(found) << s;
        }
        EXPECT_EQ(w.facts.at(lang).size(), w.world.facts.size());
    }
}

// 200 facts, 20 groups: the defaults used end to end.
TEST(World, GroupInvariantsAtDefaultScale) {
    WorldConfig cfg;
    cfg.seed = 7;
    const auto w = gen_synthetic_world(cfg);
    ASSERT_EQ(w.groups.size(), 20u);
    std::set<std::string> edited;
    for (const auto& g : w.groups)
        for (const auto& [lang, e] : g.langs) edited.insert(lang + ":" + e.subject);
    for (const auto& g : w.groups) {
        validate_group(g);
        for (const auto& [lang, e] : g.langs) {
            const auto& lx = w.world.lex(lang);
            // counterfactual
            const std::size_t rel = g.extra.at("relation").get<std::size_t>();
            bool is_current = false;
            for (const auto& f : w.world.facts)
                if (lx.entity_names[f.subject] == e.subject && f.relation == rel) is_current = lx.entity_names[f.object] == e.target_new;
            EXPECT_FALSE(is_current) << g.id;
            // locality subject is never edited
            for (const auto& name : lx.entity_names) {
                if (contains_subject(e.locality.prompt, name)) {
                    EXPECT_FALSE(edited.count(lang + ":" + name)) << g.id << " " << name;
                }
            }
            // portability asks about an attribute of the new object
            EXPECT_TRUE(contains_subject(e.portability.prompt, e.subject));
            bool hop_ok = false;
            for (const auto& f : w.world.facts)
                hop_ok |= lx.entity_names[f.subject] == e.target_new && lx.entity_names[f.object] == e.portability.answer;
            EXPECT_TRUE(hop_ok) << g.id;
            // rephrases are held out from the locating paraphrases
            std::set<std::string> para(e.paraphrases.begin(), e.paraphrases.end());
            EXPECT_EQ(para.size(), e.paraphrases.size());
            for (const auto& r : e.rephrase_prompts) {
                EXPECT_TRUE(contains_subject(r, e.subject));
                for (const auto& p : e.paraphrases) EXPECT_EQ(p.find(r), std::string::npos) << r;
            }
            EXPECT_EQ(e.paraphrases.size(), 30u);
        }
    }
}

TEST(World, RoundTripThroughJson) {
    const auto w = gen_synthetic_world(small_world());
    EXPECT_EQ(parse_edit_dataset(serialize_edit_dataset(w.groups)), w.groups);
}

TEST(Paraphrases, TemplateContract) {
    const auto w = gen_synthetic_world(small_world());
    const auto& f = w.world.facts[0];
    const std::string subj = w.world.lex("l1").entity_names[f.subject];
    const std::string prompt = w.world.question(f, "l1", 0);
    const auto one = gen_paraphrases_template(w.world, "l1", prompt, subj, 1, 1);
    ASSERT_EQ(one.size(), 1u);
    EXPECT_NE(one[0], prompt);
    const auto ten = gen_paraphrases_template(w.world, "l1", prompt, subj, 10, 1);
    EXPECT_EQ(std::set<std::string>(ten.begin(), ten.end()).size(), 10u);
    for (const auto& p : ten) EXPECT_TRUE(contains_subject(p, subj)) << p;
    EXPECT_EQ(ten, gen_paraphrases_template(w.world, "l1", prompt, subj, 10, 1));
    // 3 locating templates x (1 + 10 openers) = 33 candidates.
    try {
        gen_paraphrases_template(w.world, "l1", prompt, subj, 34, 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("at most 33"), std::string::npos) << e.what();
    }
    EXPECT_THROW(gen_paraphrases_template(w.world, "l1", prompt, "nobody", 1, 1), Error);
}
