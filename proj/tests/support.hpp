#pragma once

// Shared helpers for the test binaries: a seeded generator for property
// tests, scratch directories and tiny random models.

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <string>
#include <vector>

#include "lafn/model.hpp"
#include "lafn/random.hpp"
#include "lafn/tokenizer.hpp"

namespace lafn_test {

class Gen {
public:
    explicit Gen(std::uint64_t seed) : rng_(seed) {}

    // Inclusive range.
    std::size_t index(std::size_t lo, std::size_t hi) { return lo + static_cast<std::size_t>(lafn::uniform_index(rng_, hi - lo + 1)); }
    double real(double lo, double hi) { return lo + (hi - lo) * lafn::uniform_unit(rng_); }
    bool coin(double p = 0.5) { return lafn::uniform_unit(rng_) < p; }

    std::string word(std::size_t min_len = 1, std::size_t max_len = 6) {
        static const char* letters = "abcdefghijklmnopqrstuvwxyz";
        std::string w;
        const std::size_t n = index(min_len, max_len);
        for (std::size_t i = 0; i < n; ++i) w += letters[index(0, 25)];
        return w;
    }

    template <typename V>
    const auto& pick(const V& v) { return v[index(0, v.size() - 1)]; }

    lafn::Rng& rng() { return rng_; }

private:
    lafn::Rng rng_;
};

class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("lafn_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::string file(const std::string& name) const { return (path_ / name).string(); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline lafn::Tokenizer small_tokenizer(std::size_t words = 12) {
    std::vector<std::string> corpus;
    for (std::size_t i = 0; i < words; ++i) corpus.push_back("w" + std::to_string(i));
    return lafn::Tokenizer::build(corpus);
}

template <typename T>
lafn::TransformerModel<T> tiny_model(std::size_t layers = 2, std::size_t d = 16, std::size_t f = 32, std::uint64_t seed = 1,
                                     lafn::FfnVariant v = lafn::FfnVariant::gated, lafn::Tokenizer tok = small_tokenizer(),
                                     double init_std = 0.3) {
    lafn::ModelConfig c;
    c.n_layers = layers;
    c.d_model = d;
    c.d_ffn = f;
    c.n_heads = 2;
    c.max_seq = 24;
    c.ffn_variant = v;
    return lafn::TransformerModel<T>::init(c, std::move(tok), seed, init_std);
}

}  // namespace lafn_test
