#pragma once

// Exact match and SQuAD-style token F1. Answers are trimmed, whitespace is
// collapsed and ASCII letters are case-folded; scripts written without
// spaces are compared per character.

#include <cctype>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace lafn {

struct MetricOptions {
    std::set<std::string> char_languages{"zh", "ja", "th"};
};

namespace detail {

// Splits UTF-8 into code points; malformed bytes become single units.
inline std::vector<std::string> utf8_chars(const std::string& s) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < s.size();) {
        const auto c = static_cast<unsigned char>(s[i]);
        std::size_t n = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 1;
        if (i + n > s.size()) n = 1;
        out.push_back(s.substr(i, n));
        i += n;
    }
    return out;
}

}  // namespace detail

inline std::vector<std::string> answer_tokens(const std::string& text, const std::string& lang, const MetricOptions& opt = {}) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        const auto u = static_cast<unsigned char>(ch);
        if (u < 0x80 && std::isspace(u)) {
            if (!cur.empty()) words.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : ch);
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    if (!opt.char_languages.count(lang)) return words;
    std::vector<std::string> chars;
    for (const auto& w : words)
        for (auto& c : detail::utf8_chars(w)) chars.push_back(std::move(c));
    return chars;
}

inline double em(const std::string& pred, const std::string& gold, const std::string& lang = {}, const MetricOptions& opt = {}) {
    return answer_tokens(pred, lang, opt) == answer_tokens(gold, lang, opt) ? 1.0 : 0.0;
}

inline double f1(const std::string& pred, const std::string& gold, const std::string& lang = {}, const MetricOptions& opt = {}) {
    const auto p = answer_tokens(pred, lang, opt);
    const auto g = answer_tokens(gold, lang, opt);
    if (p.empty() && g.empty()) return 1.0;
    if (p.empty() || g.empty()) return 0.0;
    std::map<std::string, long> counts;
    for (const auto& t : g) ++counts[t];
    long overlap = 0;
    for (const auto& t : p) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    const double precision = static_cast<double>(overlap) / static_cast<double>(p.size());
    const double recall = static_cast<double>(overlap) / static_cast<double>(g.size());
    return 2.0 * precision * recall / (precision + recall);
}

}  // namespace lafn
