#pragma once

// locate -> edit -> evaluate runs, the monolingual/multilingual comparison
// and the beta / layer / locating-variant sweeps.

#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lafn/cache.hpp"
#include "lafn/editor.hpp"
#include "lafn/eval.hpp"
#include "lafn/locator.hpp"

namespace lafn {

struct EditRunConfig {
    LocateConfig locate;
    EditorConfig editor;
    LocateVariant variant = LocateVariant::lafn;
    std::uint64_t variant_seed = 0;
    std::vector<std::string> languages;  // edit languages; empty = all in each group
    std::size_t threads = 1;
};

inline nlohmann::json to_json(const EditRunConfig& c) {
    return {{"beta", c.locate.beta},
            {"edit_layers", c.locate.edit_layers},
            {"include_bos", c.locate.count.include_bos},
            {"lambda1", c.editor.lambda1},
            {"lambda2", c.editor.lambda2},
            {"prefixes", c.editor.prefixes},
            {"prefix_len", c.editor.prefix_len},
            {"bare_prompt", c.editor.bare_prompt},
            {"lr", c.editor.lr},
            {"max_steps", c.editor.max_steps},
            {"target_nll_stop", c.editor.target_nll_stop},
            {"max_delta_norm_factor", c.editor.max_delta_norm_factor},
            {"seed", c.editor.seed},
            {"fallback_all", c.editor.fallback_all},
            {"variant", to_string(c.variant)},
            {"variant_seed", c.variant_seed},
            {"edit_languages", c.languages}};
}

struct EditRun {
    EditCache cache;
    std::vector<LafnSet> located;      // per group, after the variant is applied
    std::vector<std::size_t> failed;   // groups without a patch (empty located set)
    std::vector<std::string> errors;   // aligned with `failed`
    std::size_t d_ffn = 0;
    std::size_t edit_layer_count = 0;

    double mean_neurons() const {
        if (located.empty()) return 0.0;
        double total = 0.0;
        for (const auto& l : located) total += static_cast<double>(l.set.total());
        return total / static_cast<double>(located.size());
    }

    // Mean located neurons over all neurons of the edit layers.
    double proportion() const {
        const double denom = static_cast<double>(d_ffn * edit_layer_count);
        return denom > 0.0 ? mean_neurons() / denom : 0.0;
    }

    // Mean located neurons in `layer`.
    double mean_in_layer(std::size_t layer) const {
        if (located.empty()) return 0.0;
        double total = 0.0;
        for (const auto& l : located) total += layer < l.set.n_layers() ? static_cast<double>(l.set.layers[layer].size()) : 0.0;
        return total / static_cast<double>(located.size());
    }
};

// Groups are independent, so they run in parallel; patches are inserted in
// dataset order, making the cache independent of the thread count. Groups
// whose located set is empty (and no fallback) are recorded, not fatal.
template <typename T>
EditRun run_edits(const TransformerModel<T>& model, const std::vector<EditGroup>& dataset, const EditRunConfig& cfg) {
    check_beta(cfg.locate.beta);
    check_layers(cfg.locate.edit_layers, model.config.n_layers);
    cfg.editor.validate();
    EditRun run;
    run.d_ffn = model.config.d_ffn;
    run.edit_layer_count = cfg.locate.edit_layers.size();
    std::vector<std::optional<EditPatch>> patches(dataset.size());
    std::vector<LafnSet> located(dataset.size());
    std::vector<std::string> errors(dataset.size());
    EditorConfig ecfg = cfg.editor;
    ecfg.languages = cfg.languages;
    parallel_for(dataset.size(), cfg.threads, [&](std::size_t gi) {
        const auto& g = dataset[gi];
        LafnSet base;
        if (cfg.variant == LocateVariant::all) {
            base = all_neurons(model.config.n_layers, model.config.d_ffn, cfg.locate.edit_layers, cfg.languages);
        } else {
            base = locate_for_group(model, g, cfg.locate, cfg.languages);
        }
        located[gi] = ablation_variant(model, g, base, cfg.variant, cfg.locate, mix_seed(cfg.variant_seed, gi), cfg.languages);
        try {
            patches[gi] = optimize_patch(model, g, located[gi], ecfg, cfg.locate.edit_layers);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::validation || !located[gi].set.empty()) throw;
            errors[gi] = e.what();
        }
    });
    run.located = std::move(located);
    for (std::size_t gi = 0; gi < dataset.size(); ++gi) {
        if (patches[gi]) {
            run.cache.insert(std::move(*patches[gi]));
        } else {
            run.failed.push_back(gi);
            run.errors.push_back(errors[gi]);
        }
    }
    return run;
}

struct ConflictRow {
    std::string test_language;
    Category category;
    double mono_f1 = 0.0, mono_em = 0.0;    // editing the test language only
    double multi_f1 = 0.0, multi_em = 0.0;  // editing every language jointly
};

struct ConflictTable {
    std::vector<std::string> languages;
    std::map<std::string, MetricsReport> mono;  // keyed by the edited language
    MetricsReport multi;
    std::vector<ConflictRow> rows;

    std::string to_csv() const {
        std::ostringstream os;
        os << "test_language,category,mono_f1,mono_em,multi_f1,multi_em,delta_f1,delta_em\n" << std::fixed << std::setprecision(4);
        for (const auto& r : rows) {
            os << r.test_language << ',' << to_string(r.category) << ',' << r.mono_f1 << ',' << r.mono_em << ',' << r.multi_f1 << ','
               << r.multi_em << ',' << r.multi_f1 - r.mono_f1 << ',' << r.multi_em - r.mono_em << '\n';
        }
        return os.str();
    }

    std::string to_markdown() const {
        std::ostringstream os;
        os << std::fixed << std::setprecision(2);
        os << "| test lang | metric | mono F1 | mono EM | multi F1 | multi EM | delta F1 | delta EM |\n";
        os << "|---|---|---|---|---|---|---|---|\n";
        for (const auto& r : rows) {
            os << "| " << r.test_language << " | " << to_string(r.category) << " | " << 100 * r.mono_f1 << " | " << 100 * r.mono_em
               << " | " << 100 * r.multi_f1 << " | " << 100 * r.multi_em << " | " << std::showpos << 100 * (r.multi_f1 - r.mono_f1)
               << " | " << 100 * (r.multi_em - r.mono_em) << std::noshowpos << " |\n";
        }
        return os.str();
    }
};

// Three genuine runs: edit each language alone, then all jointly; every run
// is evaluated on every language.
template <typename T>
ConflictTable compare_mono_multi(const TransformerModel<T>& model, const std::vector<EditGroup>& dataset, EditRunConfig cfg,
                                 EvalConfig ecfg) {
    ConflictTable table;
    table.languages = dataset_languages(dataset);
    if (table.languages.size() < 2) fail(ErrorKind::validation, "compare_mono_multi: the dataset needs at least two languages");
    ecfg.test_languages = table.languages;
    for (const auto& lang : table.languages) {
        cfg.languages = {lang};
        auto run = run_edits(model, dataset, cfg);
        table.mono[lang] = evaluate(model, run.cache, dataset, ecfg);
    }
    cfg.languages = table.languages;
    auto run = run_edits(model, dataset, cfg);
    table.multi = evaluate(model, run.cache, dataset, ecfg);
    for (const auto& lang : table.languages)
        for (Category c : ecfg.categories) {
            const auto& mono = table.mono[lang].cell(c, lang);
            const auto& multi = table.multi.cell(c, lang);
            table.rows.push_back({lang, c, mono.f1(), mono.em(), multi.f1(), multi.em()});
        }
    return table;
}

struct SweepRow {
    std::string axis;   // "beta", "layers" or "variant"
    std::string value;
    MetricsReport report;
    double mean_neurons = 0.0;
    double proportion = 0.0;
    std::vector<double> per_layer;  // mean located neurons per model layer
    std::size_t failed = 0;
};

struct SweepTable {
    std::vector<SweepRow> rows;
    std::size_t n_layers = 0;

    std::string to_csv() const {
        std::ostringstream os;
        os << "axis,value,avg,mean_neurons,proportion,failed";
        if (!rows.empty())
            for (const auto& l : rows.front().report.languages)
                os << ",reliability_em_" << l << ",generality_em_" << l;
        for (std::size_t l = 0; l < n_layers; ++l) os << ",layer" << l;
        os << '\n' << std::fixed << std::setprecision(4);
        for (const auto& r : rows) {
            os << r.axis << ',' << '"' << r.value << '"' << ',' << r.report.avg() << ',' << r.mean_neurons << ',' << r.proportion << ','
               << r.failed;
            for (const auto& l : r.report.languages) {
                os << ',' << r.report.cell(Category::reliability, l).em() << ',' << r.report.cell(Category::generality, l).em();
            }
            for (double v : r.per_layer) os << ',' << v;
            os << '\n';
        }
        return os.str();
    }

    std::string to_markdown() const {
        std::ostringstream os;
        os << std::fixed << std::setprecision(2);
        os << "| axis | value | avg | neurons (proportion) | failed |\n|---|---|---|---|---|\n";
        for (const auto& r : rows) {
            os << "| " << r.axis << " | " << r.value << " | " << 100 * r.report.avg() << " | " << r.mean_neurons << " ("
               << 100 * r.proportion << "%) | " << r.failed << " |\n";
        }
        return os.str();
    }
};

inline std::string layers_label(const std::vector<std::size_t>& layers) {
    std::string s;
    for (std::size_t l : layers) s += (s.empty() ? "" : " ") + std::to_string(l);
    return s;
}

template <typename T>
SweepRow sweep_point(const TransformerModel<T>& model, const std::vector<EditGroup>& dataset, const EditRunConfig& cfg,
                     const EvalConfig& ecfg, std::string axis, std::string value) {
    auto run = run_edits(model, dataset, cfg);
    SweepRow row{std::move(axis), std::move(value), evaluate(model, run.cache, dataset, ecfg), run.mean_neurons(), run.proportion(), {},
                 run.failed.size()};
    for (std::size_t l = 0; l < model.config.n_layers; ++l) row.per_layer.push_back(run.mean_in_layer(l));
    return row;
}

template <typename T>
SweepTable sweep_beta(const TransformerModel<T>& model, const std::vector<EditGroup>& dataset, EditRunConfig cfg,
                      const EvalConfig& ecfg, const std::vector<double>& betas) {
    if (betas.empty()) fail(ErrorKind::validation, "sweep: no beta values given");
    SweepTable t{{}, model.config.n_layers};
    for (double b : betas) {
        cfg.locate.beta = b;
        std::ostringstream v;
        v << b;
        t.rows.push_back(sweep_point(model, dataset, cfg, ecfg, "beta", v.str()));
    }
    return t;
}

template <typename T>
SweepTable sweep_layers(const TransformerModel<T>& model, const std::vector<EditGroup>& dataset, EditRunConfig cfg,
                        const EvalConfig& ecfg, const std::vector<std::vector<std::size_t>>& layer_sets) {
    if (layer_sets.empty()) fail(ErrorKind::validation, "sweep: no layer sets given");
    SweepTable t{{}, model.config.n_layers};
    for (const auto& ls : layer_sets) {
        cfg.locate.edit_layers = ls;
        t.rows.push_back(sweep_point(model, dataset, cfg, ecfg, "layers", layers_label(ls)));
    }
    return t;
}

template <typename T>
SweepTable sweep_variants(const TransformerModel<T>& model, const std::vector<EditGroup>& dataset, EditRunConfig cfg,
                          const EvalConfig& ecfg, const std::vector<LocateVariant>& variants) {
    if (variants.empty()) fail(ErrorKind::validation, "sweep: no variants given");
    SweepTable t{{}, model.config.n_layers};
    for (LocateVariant v : variants) {
        cfg.variant = v;
        t.rows.push_back(sweep_point(model, dataset, cfg, ecfg, "variant", to_string(v)));
    }
    return t;
}

}  // namespace lafn
