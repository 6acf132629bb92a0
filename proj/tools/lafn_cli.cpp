// lafn: command-line driver for the locate -> edit -> evaluate pipeline.
//
// Exit codes: 0 ok, 1 bad input (validation/io/format), 2 runtime or
// numeric failure. Errors are reported on stderr as
//   error: kind=<kind> msg=<message>

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lafn/lafn.hpp"
#include "lafn/paraphrase_client.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lafn;

namespace {

struct Global {
    std::string precision = "f32";
    std::size_t threads = 1;
    std::uint64_t seed = 0;
    std::string out;
};

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) {
        auto b = cur.find_first_not_of(" \t");
        auto e = cur.find_last_not_of(" \t");
        if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
    }
    return out;
}

std::vector<std::size_t> parse_layers(const std::string& s) {
    std::vector<std::size_t> out;
    for (const auto& t : split_list(s, s.find(',') != std::string::npos ? ',' : ' ')) {
        try {
            std::size_t used = 0;
            const auto v = std::stoul(t, &used);
            if (used != t.size()) throw std::invalid_argument(t);
            out.push_back(v);
        } catch (const std::exception&) {
            fail(ErrorKind::validation, "bad layer index '" + t + "' in '" + s + "'");
        }
    }
    if (out.empty()) fail(ErrorKind::validation, "empty layer list");
    return out;
}

std::vector<std::string> read_lines(const std::string& path) {
    std::vector<std::string> out;
    std::istringstream in(read_text_file(path));
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!Tokenizer::split(line).empty()) out.push_back(line);
    }
    return out;
}

// Language code from a file named <stem>.<lang>.<ext>.
std::string language_of(const fs::path& p) {
    const auto stem = p.stem().string();
    const auto dot = stem.find('.');
    return dot == std::string::npos ? stem : stem.substr(dot + 1);
}

std::map<std::string, std::string> files_in(const std::string& dir, const std::string& prefix, const std::string& ext) {
    std::map<std::string, std::string> out;
    if (!fs::is_directory(dir)) fail(ErrorKind::io, "not a directory: '" + dir + "'");
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (name.rfind(prefix + ".", 0) == 0 && e.path().extension() == ext) out[language_of(e.path())] = e.path().string();
    }
    return out;
}

// "lang=path" pairs, or bare paths named <stem>.<lang>.<ext>.
std::map<std::string, std::string> parse_lang_files(const std::vector<std::string>& specs) {
    std::map<std::string, std::string> out;
    for (const auto& s : specs) {
        const auto eq = s.find('=');
        if (eq != std::string::npos) out[s.substr(0, eq)] = s.substr(eq + 1);
        else out[language_of(s)] = s;
    }
    return out;
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

json options_json(const CLI::App& app) {
    json j = json::object();
    for (const CLI::Option* opt : app.get_options()) {
        const std::string name = opt->get_name();
        if (name == "--help" || name == "-h") continue;
        const auto& res = opt->results();
        if (!res.empty()) j[name] = res.size() == 1 ? json(res[0]) : json(res);
        else if (opt->get_expected_max() == 0) j[name] = false;
        else j[name] = opt->get_default_str();
    }
    return j;
}

// Creates the artifact directory and writes the run configuration into it.
// Without --out the directory is runs/<command>-<config hash>.
std::string prepare_out(const CLI::App& app, const CLI::App& sub, const Global& g) {
    json cfg{{"command", sub.get_name()}, {"global", options_json(app)}, {"options", options_json(sub)}};
    cfg["global"].erase("--out");
    const std::string hash = hex64(hash_string(cfg.dump()));
    const std::string dir = g.out.empty() ? "runs/" + sub.get_name() + "-" + hash.substr(0, 12) : g.out;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorKind::io, "cannot create output directory '" + dir + "': " + ec.message());
    cfg["config_hash"] = hash;
    write_text_file((fs::path(dir) / "run_config.json").string(), cfg.dump(2) + "\n");
    return dir;
}

std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

// ---------------------------------------------------------------------------

struct GenOpts {
    WorldConfig world;
    std::string langs = "l1,l2";
};

void cmd_gen(const GenOpts& o, const std::string& out) {
    WorldConfig wc = o.world;
    wc.languages = split_list(o.langs);
    const auto sw = gen_synthetic_world(wc);
    save_edit_dataset(sw.groups, path_in(out, "dataset.json"));
    for (const auto& lang : wc.languages) {
        std::string corpus, lexicon, facts;
        for (const auto& s : sw.corpus.at(lang)) corpus += s + "\n";
        for (const auto& w : sw.world.lexicon_words(lang)) lexicon += w + "\n";
        for (const auto& f : sw.facts.at(lang)) facts += f + "\n";
        write_text_file(path_in(out, "corpus." + lang + ".txt"), corpus);
        write_text_file(path_in(out, "lexicon." + lang + ".txt"), lexicon);
        write_text_file(path_in(out, "facts." + lang + ".tsv"), facts);
    }
    std::cout << "wrote " << sw.groups.size() << " edit groups, " << sw.world.facts.size() << " facts x " << wc.languages.size()
              << " languages to " << out << "\n";
}

struct TrainOpts {
    std::string data;
    std::vector<std::string> corpus, lexicon, facts;
    ModelConfig model;
    std::string ffn = "gated", act = "silu";
    TrainConfig train;
};

template <typename T>
void cmd_train(TrainOpts o, const Global& g, const std::string& out) {
    std::map<std::string, std::string> corpus = parse_lang_files(o.corpus), lexicon = parse_lang_files(o.lexicon),
                                       facts = parse_lang_files(o.facts);
    if (!o.data.empty()) {
        for (auto& [l, p] : files_in(o.data, "corpus", ".txt")) corpus.emplace(l, p);
        for (auto& [l, p] : files_in(o.data, "lexicon", ".txt")) lexicon.emplace(l, p);
        for (auto& [l, p] : files_in(o.data, "facts", ".tsv")) facts.emplace(l, p);
    }
    if (corpus.empty()) fail(ErrorKind::validation, "train: no corpus given (use --data DIR or --corpus FILE)");
    std::vector<std::string> sentences, words;
    for (const auto& [l, p] : corpus)
        for (auto& s : read_lines(p)) sentences.push_back(std::move(s));
    for (const auto& [l, p] : lexicon)
        for (auto& s : read_lines(p)) words.push_back(std::move(s));
    std::vector<std::string> vocab_source = sentences;
    vocab_source.insert(vocab_source.end(), words.begin(), words.end());
    const Tokenizer tok = Tokenizer::build(vocab_source);

    std::vector<std::vector<int>> seqs;
    for (const auto& s : sentences) {
        auto ids = tok.encode_prompt(s);
        ids.push_back(Tokenizer::eos);
        seqs.push_back(std::move(ids));
    }
    std::vector<RecallProbe> probes;
    for (const auto& [l, p] : facts)
        for (const auto& line : read_lines(p)) {
            const auto tab = line.find('\t');
            if (tab == std::string::npos) fail(ErrorKind::format, "facts file '" + p + "': expected 'question<TAB>answer' lines");
            probes.push_back({tok.encode_prompt(line.substr(0, tab)), tok.encode(line.substr(tab + 1))});
        }
    o.model.ffn_variant = ffn_variant_from_string(o.ffn);
    o.model.act_fn = activation_from_string(o.act);
    o.model.vocab_size = tok.size();
    o.train.seed = g.seed;
    std::string losses = "step,loss\n";
    auto result = train_toy<T>(o.model, tok, seqs, o.train, probes, [&](std::size_t step, double loss) {
        losses += std::to_string(step) + "," + std::to_string(loss) + "\n";
        if (step % 100 == 0) std::cerr << "step " << step << " loss " << loss << "\n";
    });
    save_model(result.model, path_in(out, "model.lafn"));
    write_text_file(path_in(out, "losses.csv"), losses);
    std::cout << "steps=" << result.steps_run << " recall=" << result.recall << " vocab=" << tok.size() << " sequences=" << seqs.size()
              << " model=" << path_in(out, "model.lafn") << "\n";
    if (!probes.empty() && result.recall < o.train.recall_target) {
        std::cerr << "warning: recall " << result.recall << " below target " << o.train.recall_target << "\n";
    }
}

struct AnalyzeOpts {
    std::string model, data;
    std::vector<std::string> corpus;
    double beta = 0.9;
    std::size_t max_sentences = 0;
    bool include_bos = false;
};

template <typename T>
void cmd_analyze(const AnalyzeOpts& o, const Global& g, const std::string& out) {
    const auto model = load_model<T>(o.model);
    auto files = parse_lang_files(o.corpus);
    if (!o.data.empty())
        for (auto& [l, p] : files_in(o.data, "corpus", ".txt")) files.emplace(l, p);
    if (files.empty()) fail(ErrorKind::validation, "analyze: no corpora given (use --data DIR or --corpus LANG=FILE)");
    std::vector<NeuronSet> sets;
    for (const auto& [lang, path] : files) {
        auto lines = read_lines(path);
        if (o.max_sentences > 0 && lines.size() > o.max_sentences) {
            Rng rng(mix_seed(g.seed, hash_string(lang)));
            shuffle_in_place(lines, rng);
            lines.resize(o.max_sentences);
        }
        std::vector<std::vector<int>> corpus;
        for (const auto& s : lines) {
            auto ids = model.tokenizer.encode_prompt(s);
            if (ids.size() > model.config.max_seq) ids.resize(model.config.max_seq);
            corpus.push_back(std::move(ids));
        }
        sets.push_back(select_factual_neurons(count_activations(model, corpus, {o.include_bos, g.threads}, lang), o.beta));
    }
    const auto lafn = intersect_languages(sets);
    const auto report = layer_distribution_report(sets, lafn);
    write_text_file(path_in(out, "layer_report.csv"), report.to_csv());
    json sj = json::object();
    for (const auto& s : sets) sj[s.label] = s.layers;
    sj["lafn"] = lafn.set.layers;
    write_text_file(path_in(out, "neuron_sets.json"), sj.dump() + "\n");
    std::cout << report.to_csv();
}

struct EditOpts {
    std::string dataset, model;
    double beta = 0.1;
    std::string layers = "1,2,3";
    EditorConfig editor;
    std::string variant = "lafn";
    std::uint64_t variant_seed = 0;
    std::string edit_langs;
    std::vector<std::string> probe_templates;

    EditRunConfig build(const Global& g) const {
        EditRunConfig c;
        check_beta(beta);
        c.locate.beta = beta;
        c.locate.edit_layers = parse_layers(layers);
        c.locate.count.threads = 1;
        c.editor = editor;
        c.editor.seed = g.seed;
        for (const auto& p : probe_templates) {
            const auto eq = p.find('=');
            if (eq == std::string::npos) fail(ErrorKind::validation, "--probe expects LANG=TEMPLATE, got '" + p + "'");
            c.editor.probe_templates[p.substr(0, eq)] = p.substr(eq + 1);
        }
        c.editor.validate();
        c.variant = locate_variant_from_string(variant);
        c.variant_seed = variant_seed;
        c.languages = split_list(edit_langs);
        c.threads = g.threads;
        return c;
    }
};

void add_edit_flags(CLI::App* sub, EditOpts& o) {
    sub->add_option("--dataset", o.dataset, "edit dataset JSON")->required();
    sub->add_option("--model", o.model, "model container")->required();
    sub->add_option("--beta", o.beta, "activation-ratio threshold in [0,1)");
    sub->add_option("--layers", o.layers, "edit layers, e.g. 1,2,3");
    sub->add_option("--lambda1", o.editor.lambda1, "weight of the answer loss");
    sub->add_option("--lambda2", o.editor.lambda2, "weight of the KL loss");
    sub->add_option("--prefixes", o.editor.prefixes, "random prefixes per language (M)");
    sub->add_option("--prefix-len", o.editor.prefix_len, "tokens per prefix");
    sub->add_flag("!--no-bare-prompt", o.editor.bare_prompt, "train on prefixed prompts only");
    sub->add_option("--lr", o.editor.lr, "Adam learning rate for the patch");
    sub->add_option("--steps", o.editor.max_steps, "max optimisation steps");
    sub->add_option("--stop-nll", o.editor.target_nll_stop, "early stop when answer NLL per token drops below this");
    sub->add_option("--clamp", o.editor.max_delta_norm_factor, "per-layer delta norm clamp factor (0 = off)");
    sub->add_flag("--fallback-all", o.editor.fallback_all, "use every edit-layer neuron when none is located");
    sub->add_option("--variant", o.variant, "locating strategy: lafn|no_pgs|all|random");
    sub->add_option("--variant-seed", o.variant_seed, "seed of the random variant");
    sub->add_option("--edit-langs", o.edit_langs, "comma-separated edit languages (default: all)");
    sub->add_option("--probe", o.probe_templates, "LANG={s} ... probe template override")->take_all();
}

template <typename T>
void write_run_artifacts(const EditRun& run, const std::vector<EditGroup>& dataset, const std::string& out) {
    save_cache(run.cache, path_in(out, "cache.lafc"));
    std::string traces = "group,step,target,kl,total\n";
    for (const auto& p : run.cache.entries())
        for (std::size_t s = 0; s < p.trace.size(); ++s) {
            traces += p.id + "," + std::to_string(s) + "," + std::to_string(p.trace[s].target) + "," + std::to_string(p.trace[s].kl) + "," +
                      std::to_string(p.trace[s].total) + "\n";
        }
    write_text_file(path_in(out, "traces.csv"), traces);
    std::string located = "group,layer,neurons\n";
    for (std::size_t gi = 0; gi < run.located.size(); ++gi)
        for (std::size_t l = 0; l < run.located[gi].set.n_layers(); ++l)
            if (!run.located[gi].set.layers[l].empty())
                located += dataset[gi].id + "," + std::to_string(l) + "," + std::to_string(run.located[gi].set.layers[l].size()) + "\n";
    write_text_file(path_in(out, "located.csv"), located);
    for (std::size_t k = 0; k < run.failed.size(); ++k)
        std::cerr << "warning: group '" << dataset[run.failed[k]].id << "' not edited: " << run.errors[k] << "\n";
    for (const auto& line : run.cache.log()) std::cerr << "cache: " << line << "\n";
}

template <typename T>
void cmd_edit(const EditOpts& o, const Global& g, const std::string& out) {
    const auto cfg = o.build(g);
    const auto model = load_model<T>(o.model);
    const auto dataset = load_edit_dataset(o.dataset);
    const auto run = run_edits(model, dataset, cfg);
    write_run_artifacts<T>(run, dataset, out);
    std::cout << "patches=" << run.cache.size() << " failed=" << run.failed.size() << " mean_neurons=" << run.mean_neurons()
              << " proportion=" << run.proportion() << " cache=" << path_in(out, "cache.lafc") << "\n";
}

struct EvalOpts {
    EditOpts edit;
    std::string cache;
    std::string test_langs;
    std::string categories;
    std::size_t max_new = 16;
    std::string char_langs = "zh,ja,th";

    EvalConfig build(const Global& g) const {
        EvalConfig c;
        c.test_languages = split_list(test_langs);
        if (!categories.empty()) {
            c.categories.clear();
            for (const auto& s : split_list(categories)) c.categories.push_back(category_from_string(s));
        }
        c.max_new = max_new;
        c.threads = g.threads;
        const auto cl = split_list(char_langs);
        c.metric.char_languages = {cl.begin(), cl.end()};
        return c;
    }
};

void add_eval_flags(CLI::App* sub, EvalOpts& o) {
    sub->add_option("--test-langs", o.test_langs, "comma-separated test languages (default: all)");
    sub->add_option("--categories", o.categories, "subset of reliability,generality,locality,portability");
    sub->add_option("--max-new", o.max_new, "greedy generation budget");
    sub->add_option("--char-langs", o.char_langs, "languages scored per character");
}

template <typename T>
void cmd_eval(const EvalOpts& o, const Global& g, const std::string& out) {
    const auto model = load_model<T>(o.edit.model);
    const auto dataset = load_edit_dataset(o.edit.dataset);
    EditCache cache;
    if (!o.cache.empty()) {
        cache = load_cache(o.cache);
    } else if (!o.edit.edit_langs.empty()) {
        auto run = run_edits(model, dataset, o.edit.build(g));
        write_run_artifacts<T>(run, dataset, out);
        cache = std::move(run.cache);
    }
    auto rep = evaluate(model, cache, dataset, o.build(g));
    rep.meta["cache_entries"] = cache.size();
    for (const auto& q : rep.meta["ambiguous_queries"]) std::cerr << "note: several edited subjects in " << q.template get<std::string>() << '\n';
    write_text_file(path_in(out, "meta.json"), rep.meta.dump(2) + "\n");
    write_text_file(path_in(out, "metrics.csv"), rep.to_csv());
    write_text_file(path_in(out, "metrics.md"), rep.to_markdown());
    std::cout << rep.to_markdown();
}

struct SweepOpts {
    EvalOpts eval;
    std::string axis = "beta";
    std::string values;
};

template <typename T>
void cmd_sweep(const SweepOpts& o, const Global& g, const std::string& out) {
    const auto model = load_model<T>(o.eval.edit.model);
    const auto dataset = load_edit_dataset(o.eval.edit.dataset);
    const auto cfg = o.eval.edit.build(g);
    const auto ecfg = o.eval.build(g);
    SweepTable t;
    if (o.axis == "beta") {
        std::vector<double> betas;
        for (const auto& v : split_list(o.values.empty() ? "0,0.5,0.9" : o.values)) {
            try {
                betas.push_back(std::stod(v));
            } catch (const std::exception&) {
                fail(ErrorKind::validation, "sweep: bad beta '" + v + "'");
            }
            check_beta(betas.back());
        }
        t = sweep_beta(model, dataset, cfg, ecfg, betas);
    } else if (o.axis == "layers") {
        std::vector<std::vector<std::size_t>> sets;
        for (const auto& v : split_list(o.values, ';')) sets.push_back(parse_layers(v));
        t = sweep_layers(model, dataset, cfg, ecfg, sets);
    } else if (o.axis == "variant") {
        std::vector<LocateVariant> vs;
        for (const auto& v : split_list(o.values.empty() ? "lafn,no_pgs,all,random" : o.values)) vs.push_back(locate_variant_from_string(v));
        t = sweep_variants(model, dataset, cfg, ecfg, vs);
    } else {
        fail(ErrorKind::validation, "sweep: unknown axis '" + o.axis + "' (expected beta|layers|variant)");
    }
    write_text_file(path_in(out, "sweep.csv"), t.to_csv());
    write_text_file(path_in(out, "sweep.md"), t.to_markdown());
    std::cout << t.to_markdown();
}

template <typename T>
void cmd_compare(const EvalOpts& o, const Global& g, const std::string& out) {
    const auto model = load_model<T>(o.edit.model);
    const auto dataset = load_edit_dataset(o.edit.dataset);
    const auto table = compare_mono_multi(model, dataset, o.edit.build(g), o.build(g));
    write_text_file(path_in(out, "conflict.csv"), table.to_csv());
    write_text_file(path_in(out, "conflict.md"), table.to_markdown());
    for (const auto& [lang, rep] : table.mono) write_text_file(path_in(out, "metrics.mono_" + lang + ".md"), rep.to_markdown());
    write_text_file(path_in(out, "metrics.multi.md"), table.multi.to_markdown());
    std::cout << table.to_markdown();
}

void cmd_report(const std::vector<std::string>& runs, const std::string& out) {
    std::string md = "# Run report\n";
    std::string csv = "run,command,config_hash,artifact\n";
    for (const auto& dir : runs) {
        const auto cfg_path = path_in(dir, "run_config.json");
        json cfg;
        try {
            cfg = json::parse(read_text_file(cfg_path));
        } catch (const json::exception& e) {
            fail(ErrorKind::format, "report: '" + cfg_path + "' is not valid JSON: " + e.what());
        }
        const std::string command = cfg.value("command", "?");
        md += "\n## " + dir + " (" + command + ")\n\n";
        md += "```json\n" + cfg.value("options", json::object()).dump(2) + "\n```\n";
        for (const char* name : {"metrics.md", "sweep.md", "conflict.md", "layer_report.csv"}) {
            const auto p = path_in(dir, name);
            if (!fs::exists(p)) continue;
            const std::string body = read_text_file(p);
            md += "\n### " + std::string(name) + "\n\n" + (std::string(name).ends_with(".csv") ? "```\n" + body + "```\n" : body);
            csv += dir + "," + command + "," + cfg.value("config_hash", "") + "," + name + "\n";
        }
    }
    write_text_file(path_in(out, "report.md"), md);
    write_text_file(path_in(out, "report.csv"), csv);
    std::cout << md;
}

struct ParaphraseOpts {
    std::string dataset;
    LlmClientConfig client;
    std::vector<std::string> language_names;
    std::size_t n = 30;
};

void cmd_paraphrase(const ParaphraseOpts& o, const std::string& out) {
    auto dataset = load_edit_dataset(o.dataset);
    const auto names = parse_lang_files(o.language_names);
    std::size_t dropped = 0;
    for (auto& g : dataset)
        for (auto& [lang, e] : g.langs) {
            LlmClientConfig c = o.client;
            if (auto it = names.find(lang); it != names.end()) c.language_name = it->second;
            const auto r = fetch_paraphrases_llm(c, e.subject, e.prompt, o.n);
            e.paraphrases = r.sentences;
            dropped += r.dropped;
            if (r.dropped) std::cerr << "warning: " << g.id << " [" << lang << "]: dropped " << r.dropped << " lines without the subject\n";
        }
    save_edit_dataset(dataset, path_in(out, "dataset.json"));
    std::cout << "groups=" << dataset.size() << " dropped=" << dropped << "\n";
}

std::string one_line(std::string s) {
    for (char& c : s)
        if (c == '\n' || c == '\r') c = ' ';
    return s;
}

int report_error(const char* kind, const std::string& msg, int code) {
    std::cerr << "error: kind=" << kind << " msg=" << one_line(msg) << "\n";
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multilingual knowledge editing via language-agnostic factual neurons"};
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);
    Global g;
    app.add_option("--precision", g.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    app.add_option("--threads", g.threads, "worker threads (1 = fully serial)")->check(CLI::Range(1, 1024));
    app.add_option("--seed", g.seed, "global seed");
    app.add_option("--out", g.out, "artifact directory (default runs/<command>-<config hash>)");

    GenOpts gen;
    auto* s_gen = app.add_subcommand("gen", "generate a synthetic bilingual fact world");
    s_gen->add_option("--entities", gen.world.n_entities);
    s_gen->add_option("--relations", gen.world.n_relations);
    s_gen->add_option("--facts", gen.world.n_facts);
    s_gen->add_option("--rephrase", gen.world.n_rephrase_templates, "held-out rephrase templates per relation");
    s_gen->add_option("--locate-templates", gen.world.n_locate_templates, "paraphrase templates per relation");
    s_gen->add_option("--openers", gen.world.n_openers);
    s_gen->add_option("--kinds", gen.world.n_kinds);
    s_gen->add_option("--groups", gen.world.n_edit_groups, "edit groups");
    s_gen->add_option("--paraphrases", gen.world.n_paraphrases, "paraphrases per language and group");
    s_gen->add_option("--opener-rate", gen.world.opener_rate);
    s_gen->add_option("--langs", gen.langs, "language codes");

    TrainOpts tr;
    auto* s_train = app.add_subcommand("train", "train the toy subject model");
    s_train->add_option("--data", tr.data, "directory written by gen");
    s_train->add_option("--corpus", tr.corpus, "training sentences, LANG=FILE or corpus.LANG.txt")->take_all();
    s_train->add_option("--lexicon", tr.lexicon, "extra vocabulary files")->take_all();
    s_train->add_option("--facts", tr.facts, "question<TAB>answer recall probes")->take_all();
    s_train->add_option("--n-layers", tr.model.n_layers);
    s_train->add_option("--d-model", tr.model.d_model);
    s_train->add_option("--d-ffn", tr.model.d_ffn);
    s_train->add_option("--heads", tr.model.n_heads);
    s_train->add_option("--max-seq", tr.model.max_seq);
    s_train->add_option("--ffn", tr.ffn, "gated|classic");
    s_train->add_option("--act", tr.act, "relu|silu|gelu");
    s_train->add_option("--lr", tr.train.lr);
    s_train->add_option("--steps", tr.train.steps);
    s_train->add_option("--batch", tr.train.batch);
    s_train->add_option("--warmup", tr.train.warmup);
    s_train->add_option("--weight-decay", tr.train.weight_decay);
    s_train->add_option("--grad-clip", tr.train.grad_clip);
    s_train->add_option("--eval-every", tr.train.eval_every);
    s_train->add_option("--recall-target", tr.train.recall_target);

    AnalyzeOpts an;
    auto* s_an = app.add_subcommand("analyze", "per-layer distribution of factual neurons");
    s_an->add_option("--model", an.model)->required();
    s_an->add_option("--data", an.data, "directory with corpus.LANG.txt files");
    s_an->add_option("--corpus", an.corpus, "LANG=FILE")->take_all();
    s_an->add_option("--beta", an.beta);
    s_an->add_option("--max-sentences", an.max_sentences, "per-language sample size (0 = all)");
    s_an->add_flag("--include-bos", an.include_bos, "also count the bos position");

    EditOpts ed;
    auto* s_edit = app.add_subcommand("edit", "locate neurons and optimise one patch per edit group");
    add_edit_flags(s_edit, ed);

    EvalOpts ev;
    auto* s_eval = app.add_subcommand("eval", "score reliability, generality, locality and portability");
    add_edit_flags(s_eval, ev.edit);
    s_eval->add_option("--cache", ev.cache, "patch cache (default: edit with --edit-langs, or no edits)");
    add_eval_flags(s_eval, ev);

    SweepOpts sw;
    auto* s_sweep = app.add_subcommand("sweep", "beta, layer-set or locating-variant sweep");
    add_edit_flags(s_sweep, sw.eval.edit);
    add_eval_flags(s_sweep, sw.eval);
    s_sweep->add_option("--axis", sw.axis, "beta|layers|variant");
    s_sweep->add_option("--values", sw.values, "beta: 0,0.5,0.9; layers: 1;3;1 3; variant: lafn,no_pgs,all,random");

    EvalOpts cmp;
    auto* s_cmp = app.add_subcommand("compare", "monolingual vs multilingual editing");
    add_edit_flags(s_cmp, cmp.edit);
    add_eval_flags(s_cmp, cmp);

    std::vector<std::string> runs;
    auto* s_rep = app.add_subcommand("report", "collect tables from run directories");
    s_rep->add_option("--runs", runs, "run directories")->required()->take_all();

    ParaphraseOpts pp;
    auto* s_pp = app.add_subcommand("paraphrase", "fill dataset paraphrases from a chat-completion endpoint");
    s_pp->add_option("--dataset", pp.dataset)->required();
    s_pp->add_option("--endpoint", pp.client.endpoint);
    s_pp->add_option("--llm-model", pp.client.model);
    s_pp->add_option("--token-env", pp.client.token_env, "environment variable holding the bearer token");
    s_pp->add_option("--language-name", pp.language_names, "LANG=Name, e.g. zh=Chinese")->take_all();
    s_pp->add_option("--n", pp.n);
    s_pp->add_option("--retries", pp.client.max_retries);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return report_error("validation", e.what(), 1);
    }

    try {
        const bool f64 = g.precision == "f64";
        const CLI::App* sub = app.get_subcommands().front();
        const std::string out = prepare_out(app, *sub, g);
        if (sub == s_gen) {
            gen.world.seed = g.seed;
            cmd_gen(gen, out);
        } else if (sub == s_train) {
            f64 ? cmd_train<double>(tr, g, out) : cmd_train<float>(tr, g, out);
        } else if (sub == s_an) {
            f64 ? cmd_analyze<double>(an, g, out) : cmd_analyze<float>(an, g, out);
        } else if (sub == s_edit) {
            f64 ? cmd_edit<double>(ed, g, out) : cmd_edit<float>(ed, g, out);
        } else if (sub == s_eval) {
            f64 ? cmd_eval<double>(ev, g, out) : cmd_eval<float>(ev, g, out);
        } else if (sub == s_sweep) {
            f64 ? cmd_sweep<double>(sw, g, out) : cmd_sweep<float>(sw, g, out);
        } else if (sub == s_cmp) {
            f64 ? cmd_compare<double>(cmp, g, out) : cmd_compare<float>(cmp, g, out);
        } else if (sub == s_rep) {
            cmd_report(runs, out);
        } else if (sub == s_pp) {
            cmd_paraphrase(pp, out);
        }
    } catch (const Error& e) {
        switch (e.kind()) {
            case ErrorKind::validation:
            case ErrorKind::io:
            case ErrorKind::format: return report_error(to_string(e.kind()), e.what(), 1);
            default: return report_error(to_string(e.kind()), e.what(), 2);
        }
    } catch (const json::exception& e) {
        return report_error("format", e.what(), 1);
    } catch (const std::exception& e) {
        return report_error("runtime", e.what(), 2);
    }
    return 0;
}
