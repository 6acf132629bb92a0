#pragma once

// Reliability / Generality / Locality / Portability with EM and F1 per test
// language, plus the cross-cell average.

#include <algorithm>
#include <array>
#include <iomanip>
#include <set>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lafn/cache.hpp"
#include "lafn/data.hpp"
#include "lafn/metrics.hpp"
#include "lafn/model.hpp"
#include "lafn/parallel.hpp"

namespace lafn {

enum class Category { reliability, generality, locality, portability };

inline constexpr std::array<Category, 4> kAllCategories{Category::reliability, Category::generality, Category::locality,
                                                        Category::portability};

inline const char* to_string(Category c) {
    switch (c) {
        case Category::reliability: return "reliability";
        case Category::generality: return "generality";
        case Category::locality: return "locality";
        case Category::portability: return "portability";
    }
    return "reliability";
}

inline Category category_from_string(std::string_view s) {
    for (Category c : kAllCategories)
        if (s == to_string(c)) return c;
    fail(ErrorKind::validation, "unknown metric category '" + std::string(s) + "'");
}

struct Cell {
    double f1_sum = 0.0;
    double em_sum = 0.0;
    std::size_t n = 0;

    double f1() const { return n ? f1_sum / static_cast<double>(n) : 0.0; }
    double em() const { return n ? em_sum / static_cast<double>(n) : 0.0; }

    void add(double f, double e) {
        f1_sum += f;
        em_sum += e;
        ++n;
    }

    void merge(const Cell& o) {
        f1_sum += o.f1_sum;
        em_sum += o.em_sum;
        n += o.n;
    }
};

struct MetricsReport {
    std::vector<std::string> languages;
    std::vector<Category> categories;
    std::map<std::pair<Category, std::string>, Cell> cells;
    nlohmann::json meta = nlohmann::json::object();

    const Cell& cell(Category c, const std::string& lang) const {
        auto it = cells.find({c, lang});
        if (it == cells.end()) fail(ErrorKind::validation, std::string("report has no cell ") + to_string(c) + "/" + lang);
        return it->second;
    }

    // Mean over every F1 and EM value of every (category, language) cell.
    double avg() const {
        double total = 0.0;
        std::size_t n = 0;
        for (const auto& [k, c] : cells) {
            total += c.f1() + c.em();
            n += 2;
        }
        return n ? total / static_cast<double>(n) : 0.0;
    }

    std::string to_csv() const {
        std::ostringstream os;
        os << "category,language,f1,em,n\n" << std::fixed << std::setprecision(4);
        for (Category c : categories)
            for (const auto& l : languages) {
                const auto& x = cell(c, l);
                os << to_string(c) << ',' << l << ',' << x.f1() << ',' << x.em() << ',' << x.n << '\n';
            }
        os << "avg,all," << avg() << ',' << avg() << ",\n";
        return os.str();
    }

    // Rows are languages; columns are F1/EM per category, then avg (x100).
    std::string to_markdown() const {
        std::ostringstream os;
        os << std::fixed << std::setprecision(2) << "| lang |";
        for (Category c : categories) os << ' ' << to_string(c) << " F1 | " << to_string(c) << " EM |";
        os << " avg |\n|---|";
        for (std::size_t i = 0; i < categories.size() * 2 + 1; ++i) os << "---|";
        os << '\n';
        for (const auto& l : languages) {
            os << "| " << l << " |";
            for (Category c : categories) os << ' ' << 100.0 * cell(c, l).f1() << " | " << 100.0 * cell(c, l).em() << " |";
            os << (l == languages.front() ? " " + fmt(100.0 * avg()) + " |" : " |") << '\n';
        }
        return os.str();
    }

private:
    static std::string fmt(double v) {
        std::ostringstream os;
        os << std::fixed << std::setprecision(2) << v;
        return os.str();
    }
};

struct EvalConfig {
    std::vector<std::string> test_languages;  // empty: every language in the dataset
    std::vector<Category> categories{kAllCategories.begin(), kAllCategories.end()};
    std::size_t max_new = 16;
    std::size_t threads = 1;
    MetricOptions metric;
};

inline std::vector<std::string> dataset_languages(const std::vector<EditGroup>& dataset) {
    std::set<std::string> langs;
    for (const auto& g : dataset)
        for (const auto& [code, e] : g.langs) langs.insert(code);
    return {langs.begin(), langs.end()};
}

template <typename T>
MetricsReport evaluate(const TransformerModel<T>& model, const EditCache& cache, const std::vector<EditGroup>& dataset,
                       const EvalConfig& cfg) {
    MetricsReport rep;
    const auto present = dataset_languages(dataset);
    rep.languages = cfg.test_languages.empty() ? present : cfg.test_languages;
    for (const auto& l : rep.languages)
        if (std::find(present.begin(), present.end(), l) == present.end()) {
            fail(ErrorKind::validation, "evaluate: test language '" + l + "' is absent from the dataset");
        }
    rep.categories = cfg.categories;
    using Cells = std::map<std::pair<Category, std::string>, Cell>;
    std::vector<Cells> partial(dataset.size());
    // Queries naming subjects of more than one patch (only the longest applies).
    std::vector<std::vector<std::string>> ambiguous(dataset.size());
    const EditCache empty_cache;
    parallel_for(dataset.size(), cfg.threads, [&](std::size_t gi) {
        const auto& g = dataset[gi];
        auto& out = partial[gi];
        for (const auto& lang : rep.languages) {
            auto it = g.langs.find(lang);
            if (it == g.langs.end()) continue;
            const auto& e = it->second;
            auto score = [&](Category c, const std::string& prompt, const std::string& gold) {
                if (auto m = cache.match_subject(prompt, lang); m && m->ambiguous)
                    ambiguous[gi].push_back("[" + lang + "] '" + prompt + "' -> '" + m->patch->id + "'");
                const std::string pred = dispatch_generate(model, cache, prompt, lang, cfg.max_new);
                out[{c, lang}].add(f1(pred, gold, lang, cfg.metric), em(pred, gold, lang, cfg.metric));
            };
            for (Category c : cfg.categories) {
                switch (c) {
                    case Category::reliability: score(c, e.prompt, e.target_new); break;
                    case Category::generality:
                        for (const auto& r : e.rephrase_prompts) score(c, r, e.target_new);
                        break;
                    case Category::locality:
                        // Against the unedited model's own answer.
                        if (!e.locality.prompt.empty())
                            score(c, e.locality.prompt, dispatch_generate(model, empty_cache, e.locality.prompt, lang, cfg.max_new));
                        break;
                    case Category::portability:
                        if (!e.portability.prompt.empty()) score(c, e.portability.prompt, e.portability.answer);
                        break;
                }
            }
        }
    });
    for (Category c : rep.categories)
        for (const auto& l : rep.languages) rep.cells[{c, l}];
    for (const auto& p : partial)
        for (const auto& [k, c] : p) rep.cells[k].merge(c);
    rep.meta["ambiguous_queries"] = nlohmann::json::array();
    for (const auto& a : ambiguous)
        for (const auto& q : a) rep.meta["ambiguous_queries"].push_back(q);
    return rep;
}

}  // namespace lafn
