#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lafn/error.hpp"

namespace lafn {

// Whitespace + ASCII-punctuation word tokenizer with a corpus-derived
// vocabulary. Ids 0..3 are reserved for pad/unk/bos/eos.
class Tokenizer {
public:
    static constexpr int pad = 0;
    static constexpr int unk = 1;
    static constexpr int bos = 2;
    static constexpr int eos = 3;
    static constexpr int reserved = 4;

    Tokenizer() : vocab_{"<pad>", "<unk>", "<bos>", "<eos>"} { reindex(); }

    // Splits on whitespace; every ASCII punctuation character is its own
    // token. Non-ASCII bytes stay inside words.
    static std::vector<std::string> split(std::string_view text) {
        std::vector<std::string> out;
        std::string cur;
        auto flush = [&]() {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        };
        for (char ch : text) {
            const auto u = static_cast<unsigned char>(ch);
            if (u < 0x80 && std::isspace(u)) {
                flush();
            } else if (u < 0x80 && std::ispunct(u)) {
                flush();
                out.emplace_back(1, ch);
            } else {
                cur.push_back(ch);
            }
        }
        flush();
        return out;
    }

    static std::string join(std::span<const std::string> words) {
        std::string out;
        for (std::size_t i = 0; i < words.size(); ++i) {
            if (i) out += ' ';
            out += words[i];
        }
        return out;
    }

    // Canonical single-spaced form of `text`.
    static std::string normalize(std::string_view text) {
        auto words = split(text);
        return join(words);
    }

    static Tokenizer build(std::span<const std::string> corpus) {
        std::set<std::string> words;
        for (const auto& line : corpus)
            for (auto& w : split(line)) words.insert(std::move(w));
        std::vector<std::string> vocab{"<pad>", "<unk>", "<bos>", "<eos>"};
        for (const auto& w : words)
            if (std::find(vocab.begin(), vocab.end(), w) == vocab.end()) vocab.push_back(w);
        return from_vocabulary(std::move(vocab));
    }

    static Tokenizer from_vocabulary(std::vector<std::string> vocab) {
        if (vocab.size() < static_cast<std::size_t>(reserved) || vocab[0] != "<pad>" || vocab[1] != "<unk>" ||
            vocab[2] != "<bos>" || vocab[3] != "<eos>") {
            fail(ErrorKind::format, "tokenizer: vocabulary must start with <pad>,<unk>,<bos>,<eos>");
        }
        Tokenizer t;
        t.vocab_ = std::move(vocab);
        t.reindex();
        if (t.index_.size() != t.vocab_.size()) fail(ErrorKind::format, "tokenizer: duplicate vocabulary entries");
        return t;
    }

    std::vector<int> encode(std::string_view text) const {
        std::vector<int> ids;
        for (const auto& w : split(text)) ids.push_back(id_of(w).value_or(unk));
        return ids;
    }

    // bos + encode(text)
    std::vector<int> encode_prompt(std::string_view text) const {
        std::vector<int> ids{bos};
        auto body = encode(text);
        ids.insert(ids.end(), body.begin(), body.end());
        return ids;
    }

    std::string decode(std::span<const int> ids) const {
        std::vector<std::string> words;
        for (int id : ids) {
            if (id == pad || id == bos || id == eos) continue;
            words.push_back(token(id));
        }
        return join(words);
    }

    std::optional<int> id_of(const std::string& word) const {
        auto it = index_.find(word);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) return vocab_[unk];
        return vocab_[static_cast<std::size_t>(id)];
    }

    std::size_t size() const { return vocab_.size(); }
    const std::vector<std::string>& vocabulary() const { return vocab_; }

    bool operator==(const Tokenizer& other) const { return vocab_ == other.vocab_; }

private:
    void reindex() {
        index_.clear();
        for (std::size_t i = 0; i < vocab_.size(); ++i) index_.emplace(vocab_[i], static_cast<int>(i));
    }

    std::vector<std::string> vocab_;
    std::map<std::string, int> index_;
};

}  // namespace lafn
