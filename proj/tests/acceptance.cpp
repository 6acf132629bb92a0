// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// fails. AC4-AC6 share one trained toy model (about 20 minutes on one core).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "lafn/lafn.hpp"
#include "support.hpp"

using namespace lafn;
using lafn_test::Gen;
using lafn_test::tiny_model;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
    bool pass = true;
    std::ostringstream detail;

    void check(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

int failures = 0;

void report(int n, Verdict& v, double secs) {
    if (!v.pass) ++failures;
    std::cout << "AC" << n << ' ' << (v.pass ? "PASS" : "FAIL") << v.detail.str() << " (" << std::fixed << std::setprecision(1) << secs
              << " s)" << std::endl;
}

// Runs `body`; an exception is a failure, not a crash.
template <typename F>
void criterion(int n, F&& body) {
    Verdict v;
    const auto t0 = Clock::now();
    try {
        body(v);
    } catch (const std::exception& e) {
        v.check(false, std::string("exception: ") + e.what());
    }
    report(n, v, seconds_since(t0));
}

template <typename T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (a.values()[i] != b.values()[i]) return false;
    return true;
}

EditGroup toy_group() {
    EditGroup g;
    g.id = "toy";
    LangEntry a;
    a.subject = "w3 w4";
    a.prompt = "w1 w3 w4";
    a.target_new = "w9 w10";
    a.extra["probe_template"] = "{s} w2";
    g.langs["a"] = a;
    LangEntry b;
    b.subject = "w6";
    b.prompt = "w5 w5 w6";
    b.target_new = "w11";
    b.extra["probe_template"] = "w0 {s}";
    g.langs["b"] = b;
    return g;
}

std::string fmt(double v, int prec = 2) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << v;
    return os.str();
}

// --- shared end-to-end setup ------------------------------------------------

struct Toy {
    SyntheticWorld world;
    TransformerModel<float> model;
    double recall = 0.0;
    double train_s = 0.0;
};

Toy train_toy_world() {
    Toy t;
    WorldConfig wc;
    wc.seed = 7;
    t.world = gen_synthetic_world(wc);
    std::vector<std::string> words;
    for (const auto& l : wc.languages) {
        const auto w = t.world.world.lexicon_words(l);
        words.insert(words.end(), w.begin(), w.end());
    }
    const auto tok = Tokenizer::build(words);
    std::vector<std::vector<int>> corpus;
    std::vector<RecallProbe> probes;
    for (const auto& l : wc.languages) {
        for (const auto& s : t.world.corpus.at(l)) {
            auto ids = tok.encode_prompt(s);
            ids.push_back(Tokenizer::eos);
            corpus.push_back(std::move(ids));
        }
        for (const auto& f : t.world.facts.at(l)) {
            const auto tab = f.find('\t');
            probes.push_back({tok.encode_prompt(f.substr(0, tab)), tok.encode(f.substr(tab + 1))});
        }
    }
    ModelConfig mc;  // 4 layers, d_model 128, d_ffn 512, gated
    TrainConfig tc;
    tc.steps = 3000;
    tc.eval_every = 250;
    const auto t0 = Clock::now();
    auto r = train_toy<float>(mc, tok, corpus, tc, probes);
    t.train_s = seconds_since(t0);
    t.model = std::move(r.model);
    t.recall = r.recall;
    return t;
}

}  // namespace

int main() {
    // AC1: edit-objective gradient vs central differences at 64-bit.
    criterion(1, [](Verdict& v) {
        const auto t0 = Clock::now();
        Gen g(1);
        double worst = 0.0;
        for (int rep = 0; rep < 3; ++rep) {
            auto m = tiny_model<double>(2, 16, 32, 10 + rep);
            LafnSet s;
            s.set.d_ffn = 32;
            s.set.layers = {{0, 3, 8, 21, 31}, {1, 2, 30}};
            EditorConfig cfg;  // default lambdas, prefixes and KL term
            EditObjective<double> obj(m, toy_group(), s, cfg);
            auto deltas = obj.zero_deltas();
            for (auto& d : deltas)
                for (auto& x : d.mutable_values()) x = g.real(-0.5, 0.5);
            auto f = [&](std::vector<Tensor<double>>& p) { return obj.evaluate(p).total; };
            worst = std::max(worst, finite_diff_check<double>(f, deltas, 1e-5));
        }
        const double secs = seconds_since(t0);
        v.detail << " max_rel_err=" << std::scientific << std::setprecision(2) << worst << std::defaultfloat;
        v.check(worst < 1e-4, "relative error >= 1e-4");
        v.check(secs < 30.0, "runtime >= 30 s");
    });

    // AC2: counts vs a brute-force recount, beta nestedness, intersection oracle.
    criterion(2, [](Verdict& v) {
        const auto t0 = Clock::now();
        auto m = tiny_model<double>(2, 16, 32, 5);
        std::vector<std::vector<int>> corpus;
        for (const char* s : {"w1 w2 w3", "w4 w5", "w0 w0 w0 w11", "w7", "w8 w9 w10 w6 w2"}) corpus.push_back(m.tokenizer.encode_prompt(s));
        const auto got = count_activations(m, corpus);
        auto want = ActivationCounts::zeros(2, 32);
        for (const auto& s : corpus) {
            ActivationRecord<double> rec;
            forward(m, s, &rec);
            for (std::size_t p = 1; p < s.size(); ++p) {
                ++want.positions;
                for (std::size_t l = 0; l < 2; ++l)
                    for (std::size_t j = 0; j < 32; ++j) want.counts[l][j] += rec.neurons[l].at(p, j) > 0.0;
            }
        }
        v.check(got.counts == want.counts && got.positions == want.positions, "count mismatch");
        const std::vector<double> betas{0.0, 0.25, 0.5, 0.75};
        std::size_t prev = static_cast<std::size_t>(-1);
        for (std::size_t i = 0; i < betas.size(); ++i) {
            const auto sel = select_factual_neurons(got, betas[i]);
            v.check(sel.total() <= prev, "nestedness size");
            prev = sel.total();
            if (i + 1 < betas.size()) {
                const auto next = select_factual_neurons(got, betas[i + 1]);
                for (std::size_t l = 0; l < 2; ++l)
                    v.check(std::includes(sel.layers[l].begin(), sel.layers[l].end(), next.layers[l].begin(), next.layers[l].end()),
                            "nestedness subset");
            }
        }
        // Per-"language" sets from three corpus splits, against std::set.
        std::vector<NeuronSet> sets;
        for (std::size_t k = 0; k < 3; ++k) {
            std::vector<std::vector<int>> part{corpus[k], corpus[k + 2]};
            sets.push_back(select_factual_neurons(count_activations(m, part), 0.25));
        }
        const auto inter = intersect_languages(sets);
        for (std::size_t l = 0; l < 2; ++l) {
            std::set<std::size_t> oracle(sets[0].layers[l].begin(), sets[0].layers[l].end());
            for (std::size_t k = 1; k < sets.size(); ++k) {
                std::set<std::size_t> keep;
                std::set_intersection(oracle.begin(), oracle.end(), sets[k].layers[l].begin(), sets[k].layers[l].end(),
                                      std::inserter(keep, keep.end()));
                oracle = keep;
            }
            v.check(inter.set.layers[l] == std::vector<std::size_t>(oracle.begin(), oracle.end()), "intersection mismatch");
        }
        v.detail << " positions=" << got.positions << " lafn=" << inter.set.total();
        v.check(seconds_since(t0) < 5.0, "runtime >= 5 s");
    });

    // AC3: zero patch and cache miss reproduce the raw logits exactly.
    criterion(3, [](Verdict& v) {
        const auto t0 = Clock::now();
        std::size_t cases = 0;
        auto run = [&](auto tag) {
            using T = decltype(tag);
            auto m = tiny_model<T>(2, 16, 32, 3);
            EditPatch zero;
            zero.id = "zero";
            zero.subjects = {{"a", "w3"}};
            zero.layers = {0, 1};
            zero.indices = {{0, 7, 31}, {4}};
            zero.deltas = {{0.0f, 0.0f, 0.0f}, {0.0f}};
            EditPatch big = zero;
            big.id = "big";
            big.subjects = {{"a", "w8 w9"}};
            big.deltas = {{5.0f, -5.0f, 5.0f}, {9.0f}};
            EditCache cache;
            cache.insert(zero);
            cache.insert(big);
            for (const char* q : {"w1 w3", "w3 w2 w5", "w1 w2", "w8 w1 w9", "w9", "w10 w11 w0"}) {
                const auto raw = forward(m, m.tokenizer.encode_prompt(q));
                v.check(bit_identical(raw, dispatch_forward(m, cache, q, "a")), std::string("dispatch '") + q + "'");
                v.check(bit_identical(raw, dispatch_forward(m, cache, q, "b")), std::string("other language '") + q + "'");
                cases += 2;
            }
        };
        run(float{});
        run(double{});
        v.detail << " cases=" << cases;
        v.check(seconds_since(t0) < 5.0, "runtime >= 5 s");
    });

    // AC4-AC6 share the trained toy model.
    const auto setup_t0 = Clock::now();
    Toy toy;
    std::string setup_error;
    try {
        toy = train_toy_world();
    } catch (const std::exception& e) {
        setup_error = e.what();
    }
    const double setup_s = seconds_since(setup_t0);
    const auto& groups = toy.world.groups;
    EditCache ac4_cache;

    criterion(4, [&](Verdict& v) {
        if (!setup_error.empty()) throw std::runtime_error("setup: " + setup_error);
        const auto t0 = Clock::now();
        EditRunConfig cfg;  // defaults: beta 0.1, layers {1,2,3}, lr 0.1, 50 steps
        auto run = run_edits(toy.model, groups, cfg);
        const auto rep = evaluate(toy.model, run.cache, groups, EvalConfig{});
        const double total_s = setup_s + seconds_since(t0);
        std::cout << rep.to_markdown();
        v.detail << " recall=" << fmt(toy.recall, 4) << " train=" << fmt(toy.train_s, 0) << "s groups=" << groups.size()
                 << " patched=" << run.cache.size();
        v.check(toy.recall >= 0.95, "training recall < 0.95");
        v.check(toy.train_s < 15 * 60, "training >= 15 min");
        v.check(groups.size() == 20, "expected 20 groups");
        for (const auto& l : rep.languages) {
            v.detail << ' ' << l << ":rel=" << fmt(rep.cell(Category::reliability, l).em()) << ",gen="
                     << fmt(rep.cell(Category::generality, l).em()) << ",loc=" << fmt(rep.cell(Category::locality, l).em())
                     << ",port=" << fmt(rep.cell(Category::portability, l).em());
            v.check(rep.cell(Category::reliability, l).em() >= 0.90, "reliability EM < 0.90 in " + l);
            v.check(rep.cell(Category::generality, l).em() >= 0.70, "generality EM < 0.70 in " + l);
            v.check(rep.cell(Category::locality, l).em() == 1.0, "locality EM != 1 in " + l);
        }
        v.check(rep.languages.size() == 2, "expected two languages");
        v.check(total_s < 25 * 60, "total runtime >= 25 min");
        ac4_cache = std::move(run.cache);
    });

    criterion(5, [&](Verdict& v) {
        if (!setup_error.empty()) throw std::runtime_error("setup: " + setup_error);
        const auto t0 = Clock::now();
        EvalConfig ecfg;
        ecfg.categories = {Category::reliability, Category::generality};
        const auto table = compare_mono_multi(toy.model, groups, EditRunConfig{}, ecfg);
        std::cout << table.to_markdown();
        for (const auto& r : table.rows) {
            if (r.category != Category::reliability) continue;
            // Compare exact-match counts: 1 of 20 is exactly 5 points, which
            // 100 * (0.95 - 1.0) would overshoot in floating point.
            const auto n = static_cast<long>(table.multi.cell(Category::reliability, r.test_language).n);
            const long multi = std::lround(r.multi_em * n), mono = std::lround(r.mono_em * n);
            v.detail << ' ' << r.test_language << ":mono=" << fmt(100 * r.mono_em) << ",multi=" << fmt(100 * r.multi_em);
            v.check(n > 0 && 100 * std::abs(multi - mono) <= 5 * n, "|multi - mono| > 5 points in " + r.test_language);
        }
        v.check(setup_s + seconds_since(t0) < 40 * 60, "runtime >= 40 min");
    });

    criterion(6, [&](Verdict& v) {
        if (!setup_error.empty()) throw std::runtime_error("setup: " + setup_error);
        EvalConfig ecfg;
        const auto betas = sweep_beta(toy.model, groups, EditRunConfig{}, ecfg, {0.1, 0.3, 0.5, 0.7, 0.9});
        std::cout << betas.to_markdown();
        for (std::size_t i = 1; i < betas.rows.size(); ++i)
            v.check(betas.rows[i].proportion <= betas.rows[i - 1].proportion, "proportion increases at beta " + betas.rows[i].value);
        const auto variants = sweep_variants(toy.model, groups, EditRunConfig{}, ecfg,
                                             {LocateVariant::lafn, LocateVariant::all, LocateVariant::random, LocateVariant::no_pgs});
        std::cout << variants.to_markdown();
        v.check(variants.rows.size() == 4, "variant rows");
        for (const auto& r : variants.rows) v.check(std::isfinite(r.report.avg()), "variant " + r.value + " avg");
        const std::size_t last = toy.model.config.n_layers - 1, middle = toy.model.config.n_layers / 2;
        const auto layers = sweep_layers(toy.model, groups, EditRunConfig{}, ecfg, {{middle}, {last}, {middle, last}});
        std::cout << layers.to_markdown();
        v.check(layers.rows.size() == 3, "layer rows");
        v.detail << " beta_props=";
        for (const auto& r : betas.rows) v.detail << fmt(r.proportion, 4) << (&r == &betas.rows.back() ? "" : ",");
        v.detail << " variant_avg=";
        for (const auto& r : variants.rows) v.detail << r.value << ':' << fmt(100 * r.report.avg()) << (&r == &variants.rows.back() ? "" : ",");
        v.detail << " layer_avg=";
        for (const auto& r : layers.rows) v.detail << r.value << ':' << fmt(100 * r.report.avg()) << (&r == &layers.rows.back() ? "" : ",");
    });

    // AC7: metric hand cases and the em => f1 fuzz property.
    criterion(7, [](Verdict& v) {
        const auto t0 = Clock::now();
        v.check(f1("the red fox", "red fox") == 0.8, "F1('the red fox','red fox') != 0.8");
        v.check(em("the red fox", "red fox") == 0.0, "EM hand case");
        v.check(em(" Red  fox", "red fox") == 1.0 && f1(" Red  fox", "red fox") == 1.0, "normalisation");
        v.check(f1("cat", "dog") == 0.0 && f1("", "") == 1.0 && f1("a", "") == 0.0, "edge cases");
        v.check(std::abs(f1("英语", "英国语", "zh") - 0.8) < 1e-12, "character F1");
        Gen g(7);
        const std::vector<std::string> vocab{"a", "A", "fox", "red", "the", "ß", "语"};
        std::size_t exact = 0;
        for (int i = 0; i < 1000; ++i) {
            auto make = [&] {
                std::string s;
                for (std::size_t k = g.index(0, 4); k > 0; --k) s += std::string(g.index(0, 2), ' ') + g.pick(vocab) + (g.coin() ? "\t" : " ");
                return s;
            };
            const std::string a = make(), b = g.coin(0.3) ? a : make();
            const std::string lang = g.coin() ? "zh" : "en";
            if (em(a, b, lang) == 1.0) {
                ++exact;
                v.check(f1(a, b, lang) == 1.0, "em=1 but f1<1 for '" + a + "' / '" + b + "'");
            }
        }
        v.detail << " fuzz=1000 exact=" << exact;
        v.check(seconds_since(t0) < 5.0, "runtime >= 5 s");
    });

    // AC8: byte-identical round trips; corruption is a structured error.
    criterion(8, [&](Verdict& v) {
        const auto t0 = Clock::now();
        lafn_test::TempDir dir;
        auto m = toy.model.layers.empty() ? tiny_model<float>() : toy.model;
        save_model(m, dir.file("m.lafn"));
        const auto model_bytes = serialize_model(m);
        v.check(serialize_model(load_model<float>(dir.file("m.lafn"))) == model_bytes, "model round trip");
        EditCache cache = ac4_cache;
        if (cache.empty()) {
            EditPatch p;
            p.id = "p";
            p.subjects = {{"a", "w1"}};
            p.layers = {1};
            p.indices = {{2, 3}};
            p.deltas = {{0.25f, -1.5f}};
            cache.insert(p);
        }
        save_cache(cache, dir.file("c.lafc"));
        const auto cache_bytes = serialize_cache(cache);
        v.check(serialize_cache(load_cache(dir.file("c.lafc"))) == cache_bytes, "cache round trip");
        std::size_t corrupt = 0, structured = 0;
        auto probe = [&](auto&& load, const std::string& bytes) {
            ++corrupt;
            try {
                load(bytes);
            } catch (const Error& e) {
                structured += e.kind() == ErrorKind::format;
            }
        };
        auto load_m = [](const std::string& b) { deserialize_model<float>(b); };
        auto load_c = [](const std::string& b) { deserialize_cache(b); };
        for (const auto* bytes : {&model_bytes, &cache_bytes}) {
            const bool is_model = bytes == &model_bytes;
            const std::size_t step = std::max<std::size_t>(1, bytes->size() / 200);
            for (std::size_t cut = 0; cut < bytes->size(); cut += step) {
                if (is_model) probe(load_m, bytes->substr(0, cut));
                else probe(load_c, bytes->substr(0, cut));
            }
            std::string bad = *bytes;
            bad[0] ^= 0x20;
            if (is_model) {
                probe(load_m, bad);
                probe(load_m, *bytes + "junk");
            } else {
                probe(load_c, bad);
                probe(load_c, *bytes + "junk");
            }
        }
        v.detail << " model=" << model_bytes.size() << "B cache=" << cache_bytes.size() << "B corrupt=" << corrupt
                 << " structured=" << structured;
        v.check(structured == corrupt, "a corrupted file loaded or failed unstructured");
        v.check(seconds_since(t0) < 5.0, "runtime >= 5 s");
    });

    std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
    return failures == 0 ? 0 : 1;
}
