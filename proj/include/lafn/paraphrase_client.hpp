#pragma once

// Optional paraphrase source: an OpenAI-style chat-completion endpoint.
// The bearer token is read from an environment variable, never from flags.

#include <cctype>
#include <chrono>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "lafn/data.hpp"
#include "lafn/error.hpp"

namespace lafn {

struct LlmClientConfig {
    std::string endpoint = "http://127.0.0.1:8000/v1/chat/completions";
    std::string model = "gpt-4o";
    std::string token_env = "LAFN_LLM_TOKEN";
    std::string language_name = "English";
    std::size_t max_retries = 3;      // attempts after the first
    double retry_backoff_s = 0.5;     // doubled per attempt
    int timeout_s = 60;
};

struct ParaphraseResult {
    std::vector<std::string> sentences;
    std::size_t dropped = 0;  // lines without the subject
};

inline std::string paraphrase_instruction(const std::string& subject, const std::string& prompt, std::size_t n,
                                          const std::string& language_name = "English") {
    return "You are an expert at sentence rewriting. Below I will give you a subject and a question containing the subject. "
           "Please give me " + std::to_string(n) + " questions including this subject in " + language_name +
           ". They must have the same semantics as the given question. \nSubject: " + subject +
           ".\nQuestion containing this Subject: " + prompt;
}

// Pulls list items ("1. x", "2) x", "- x", "* x") out of a completion; if no
// line carries a marker, every non-empty line is an item. Keeps at most n.
inline std::vector<std::string> parse_completion_lines(const std::string& text, std::size_t n) {
    std::vector<std::string> marked, plain;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(start, end - start);
        start = end + 1;
        auto trim = [](std::string& s) {
            while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
            std::size_t i = 0;
            while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
            s.erase(0, i);
        };
        trim(line);
        if (line.empty()) continue;
        std::size_t i = 0;
        while (i < line.size() && std::isdigit(static_cast<unsigned char>(line[i]))) ++i;
        bool has_marker = false;
        if (i > 0 && i < line.size() && (line[i] == '.' || line[i] == ')' || line[i] == ':')) {
            line.erase(0, i + 1);
            has_marker = true;
        } else if (line[0] == '-' || line[0] == '*') {
            line.erase(0, 1);
            has_marker = true;
        }
        trim(line);
        if (line.empty()) continue;
        (has_marker ? marked : plain).push_back(line);
    }
    auto& items = marked.empty() ? plain : marked;
    if (items.size() > n) items.resize(n);
    return items;
}

inline ParaphraseResult filter_paraphrases(const std::vector<std::string>& lines, const std::string& subject) {
    ParaphraseResult r;
    for (const auto& l : lines) {
        if (contains_subject(l, subject)) r.sentences.push_back(l);
        else ++r.dropped;
    }
    return r;
}

namespace detail {

inline std::pair<std::string, std::string> split_endpoint(const std::string& url) {
    const auto scheme = url.find("://");
    const auto path = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
    if (scheme == std::string::npos || path == std::string::npos) {
        fail(ErrorKind::validation, "paraphrase client: endpoint must look like http://host:port/path, got '" + url + "'");
    }
    return {url.substr(0, path), url.substr(path)};
}

}  // namespace detail

// One request with bounded retries on transport failures. Returns the raw
// completion text.
inline std::string chat_completion(const LlmClientConfig& cfg, const std::string& user_message) {
    const auto [host, path] = detail::split_endpoint(cfg.endpoint);
    std::string token;
    if (const char* t = std::getenv(cfg.token_env.c_str())) token = t;
    const nlohmann::json body{{"model", cfg.model}, {"messages", nlohmann::json::array({{{"role", "user"}, {"content", user_message}}})}};
    httplib::Headers headers;
    if (!token.empty()) headers.emplace("Authorization", "Bearer " + token);

    std::string last_error;
    double backoff = cfg.retry_backoff_s;
    for (std::size_t attempt = 0; attempt <= cfg.max_retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
            backoff *= 2.0;
        }
        httplib::Client cli(host);
        cli.set_connection_timeout(cfg.timeout_s, 0);
        cli.set_read_timeout(cfg.timeout_s, 0);
        auto res = cli.Post(path, headers, body.dump(), "application/json");
        if (!res) {
            last_error = "request to " + cfg.endpoint + " failed: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 401 || res->status == 403) {
            last_error = "authentication rejected (HTTP " + std::to_string(res->status) + "); check $" + cfg.token_env;
            continue;
        }
        if (res->status < 200 || res->status >= 300) {
            last_error = "HTTP " + std::to_string(res->status) + " from " + cfg.endpoint;
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(res->body);
            return j.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception&) {
            fail(ErrorKind::format, "paraphrase client: unparseable completion: " + res->body);
        }
    }
    fail(ErrorKind::transport, "paraphrase client: " + last_error + " (after " + std::to_string(cfg.max_retries + 1) + " attempts)");
}

inline ParaphraseResult fetch_paraphrases_llm(const LlmClientConfig& cfg, const std::string& subject, const std::string& prompt,
                                              std::size_t n = 30) {
    if (n < 1) fail(ErrorKind::validation, "paraphrase client: n must be >= 1");
    const std::string text = chat_completion(cfg, paraphrase_instruction(subject, prompt, n, cfg.language_name));
    const auto lines = parse_completion_lines(text, n);
    if (lines.empty()) fail(ErrorKind::format, "paraphrase client: no sentences in completion: " + text);
    return filter_paraphrases(lines, subject);
}

}  // namespace lafn
