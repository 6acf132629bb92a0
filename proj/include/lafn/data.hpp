#pragma once

// Edit-dataset schema. A dataset file is a JSON array of groups:
//
//   {"id": "...",
//    "langs": {"<code>": {"subject", "prompt", "target_new",
//                         "rephrase_prompts": [...],
//                         "locality": {"prompt", "answer"},
//                         "portability": {"prompt", "answer"},
//                         "paraphrases": [...]}}}          // optional
//
// Unknown fields are carried through load/save untouched.

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lafn/error.hpp"
#include "lafn/tokenizer.hpp"

namespace lafn {

struct QaPair {
    std::string prompt;
    std::string answer;

    bool operator==(const QaPair&) const = default;
};

struct LangEntry {
    std::string subject;
    std::string prompt;
    std::string target_new;
    std::vector<std::string> rephrase_prompts;
    QaPair locality;
    QaPair portability;
    std::vector<std::string> paraphrases;  // locating corpus for this language
    nlohmann::json extra = nlohmann::json::object();

    bool operator==(const LangEntry&) const = default;
};

struct EditGroup {
    std::string id;
    std::map<std::string, LangEntry> langs;
    nlohmann::json extra = nlohmann::json::object();

    std::vector<std::string> languages() const {
        std::vector<std::string> out;
        for (const auto& [code, e] : langs) out.push_back(code);
        return out;
    }

    const LangEntry& lang(const std::string& code) const {
        auto it = langs.find(code);
        if (it == langs.end()) fail(ErrorKind::validation, "group '" + id + "' has no language '" + code + "'");
        return it->second;
    }

    bool operator==(const EditGroup&) const = default;
};

// Start index of the last occurrence of `needle` in `hay`, or npos.
template <typename Seq>
std::size_t find_last_subsequence(const Seq& hay, const Seq& needle) {
    if (needle.empty() || needle.size() > hay.size()) return static_cast<std::size_t>(-1);
    for (std::size_t start = hay.size() - needle.size() + 1; start-- > 0;) {
        if (std::equal(needle.begin(), needle.end(), hay.begin() + static_cast<std::ptrdiff_t>(start))) return start;
    }
    return static_cast<std::size_t>(-1);
}

// True when `subject` occurs in `text` as a whole-token subsequence.
inline bool contains_subject(const std::string& text, const std::string& subject) {
    return find_last_subsequence(Tokenizer::split(text), Tokenizer::split(subject)) != static_cast<std::size_t>(-1);
}

inline void validate_group(const EditGroup& g) {
    if (g.langs.empty()) fail(ErrorKind::validation, "record '" + g.id + "': no languages");
    for (const auto& [code, e] : g.langs) {
        if (Tokenizer::split(e.subject).empty()) {
            fail(ErrorKind::validation, "record '" + g.id + "' [" + code + "]: empty subject");
        }
        if (!contains_subject(e.prompt, e.subject)) {
            fail(ErrorKind::validation, "record '" + g.id + "' [" + code + "]: subject '" + e.subject +
                                            "' not found in prompt '" + e.prompt + "'");
        }
    }
}

namespace detail {

inline const std::vector<std::string> kLangKeys{"subject",  "prompt",      "target_new", "rephrase_prompts",
                                                "locality", "portability", "paraphrases"};

inline std::string string_field(const nlohmann::json& j, const char* key, const std::string& where) {
    auto it = j.find(key);
    if (it == j.end() || !it->is_string()) fail(ErrorKind::validation, where + ": missing string field '" + key + "'");
    return it->get<std::string>();
}

inline std::vector<std::string> string_list(const nlohmann::json& j, const char* key, const std::string& where) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return {};
    if (it->is_string()) return {it->get<std::string>()};
    if (!it->is_array()) fail(ErrorKind::validation, where + ": field '" + key + "' must be a list of strings");
    std::vector<std::string> out;
    for (const auto& v : *it) {
        if (!v.is_string()) fail(ErrorKind::validation, where + ": field '" + key + "' must be a list of strings");
        out.push_back(v.get<std::string>());
    }
    return out;
}

inline QaPair qa_field(const nlohmann::json& j, const char* key, const std::string& where) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return {};
    if (!it->is_object()) fail(ErrorKind::validation, where + ": field '" + key + "' must be an object");
    return {it->value("prompt", std::string{}), it->value("answer", std::string{})};
}

}  // namespace detail

inline nlohmann::json to_json(const EditGroup& g) {
    nlohmann::json langs = nlohmann::json::object();
    for (const auto& [code, e] : g.langs) {
        nlohmann::json j = e.extra.is_object() ? e.extra : nlohmann::json::object();
        j["subject"] = e.subject;
        j["prompt"] = e.prompt;
        j["target_new"] = e.target_new;
        j["rephrase_prompts"] = e.rephrase_prompts;
        j["locality"] = {{"prompt", e.locality.prompt}, {"answer", e.locality.answer}};
        j["portability"] = {{"prompt", e.portability.prompt}, {"answer", e.portability.answer}};
        if (!e.paraphrases.empty()) j["paraphrases"] = e.paraphrases;
        langs[code] = std::move(j);
    }
    nlohmann::json out = g.extra.is_object() ? g.extra : nlohmann::json::object();
    out["id"] = g.id;
    out["langs"] = std::move(langs);
    return out;
}

inline EditGroup group_from_json(const nlohmann::json& j, std::size_t index) {
    const std::string where = "record #" + std::to_string(index);
    if (!j.is_object()) fail(ErrorKind::validation, where + ": expected an object");
    EditGroup g;
    auto id = j.find("id");
    if (id == j.end()) fail(ErrorKind::validation, where + ": missing 'id'");
    g.id = id->is_string() ? id->get<std::string>() : id->dump();
    auto langs = j.find("langs");
    if (langs == j.end() || !langs->is_object()) fail(ErrorKind::validation, "record '" + g.id + "': missing 'langs' object");
    for (const auto& [code, lj] : langs->items()) {
        const std::string lw = "record '" + g.id + "' [" + code + "]";
        if (!lj.is_object()) fail(ErrorKind::validation, lw + ": expected an object");
        LangEntry e;
        e.subject = detail::string_field(lj, "subject", lw);
        e.prompt = detail::string_field(lj, "prompt", lw);
        e.target_new = detail::string_field(lj, "target_new", lw);
        e.rephrase_prompts = detail::string_list(lj, "rephrase_prompts", lw);
        e.locality = detail::qa_field(lj, "locality", lw);
        e.portability = detail::qa_field(lj, "portability", lw);
        e.paraphrases = detail::string_list(lj, "paraphrases", lw);
        for (const auto& [k, v] : lj.items())
            if (std::find(detail::kLangKeys.begin(), detail::kLangKeys.end(), k) == detail::kLangKeys.end()) e.extra[k] = v;
        g.langs.emplace(code, std::move(e));
    }
    for (const auto& [k, v] : j.items())
        if (k != "id" && k != "langs") g.extra[k] = v;
    validate_group(g);
    return g;
}

inline std::vector<EditGroup> parse_edit_dataset(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::format, "dataset: malformed JSON at byte " + std::to_string(e.byte) + ": " + e.what());
    }
    if (!j.is_array()) fail(ErrorKind::format, "dataset: top level must be an array");
    std::vector<EditGroup> out;
    for (std::size_t i = 0; i < j.size(); ++i) out.push_back(group_from_json(j[i], i));
    return out;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::io, "cannot write '" + path + "'");
    out << text;
    if (!out) fail(ErrorKind::io, "write failed for '" + path + "'");
}

inline std::vector<EditGroup> load_edit_dataset(const std::string& path) {
    return parse_edit_dataset(read_text_file(path));
}

inline std::string serialize_edit_dataset(const std::vector<EditGroup>& groups) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& g : groups) arr.push_back(to_json(g));
    return arr.dump(2) + "\n";
}

inline void save_edit_dataset(const std::vector<EditGroup>& groups, const std::string& path) {
    write_text_file(path, serialize_edit_dataset(groups));
}

// Best-effort import of zsRE-style records: each array element maps language
// codes to {src, alt, rephrase, subject, loc, loc_ans, portability}.
inline std::vector<EditGroup> import_zsre(const nlohmann::json& j) {
    if (!j.is_array()) fail(ErrorKind::format, "zsre import: top level must be an array");
    std::vector<EditGroup> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const auto& rec = j[i];
        if (!rec.is_object()) fail(ErrorKind::format, "zsre import: record #" + std::to_string(i) + " is not an object");
        EditGroup g;
        g.id = rec.contains("case_id") ? rec["case_id"].dump() : std::to_string(i);
        for (const auto& [code, r] : rec.items()) {
            if (!r.is_object() || !r.contains("src")) continue;
            const std::string where = "zsre record #" + std::to_string(i) + " [" + code + "]";
            LangEntry e;
            e.prompt = detail::string_field(r, "src", where);
            e.subject = detail::string_field(r, "subject", where);
            auto alt = r.find("alt");
            if (alt != r.end()) e.target_new = alt->is_array() && !alt->empty() ? (*alt)[0].get<std::string>() : alt->get<std::string>();
            e.rephrase_prompts = detail::string_list(r, "rephrase", where);
            e.locality.prompt = r.value("loc", std::string{});
            auto la = r.find("loc_ans");
            if (la != r.end()) e.locality.answer = la->is_array() && !la->empty() ? (*la)[0].get<std::string>() : la->get<std::string>();
            if (auto p = r.find("portability"); p != r.end() && p->is_object()) {
                e.portability.prompt = p->value("New Question", p->value("prompt", std::string{}));
                e.portability.answer = p->value("New Answer", p->value("answer", std::string{}));
            }
            g.langs.emplace(code, std::move(e));
        }
        validate_group(g);
        out.push_back(std::move(g));
    }
    return out;
}

}  // namespace lafn
