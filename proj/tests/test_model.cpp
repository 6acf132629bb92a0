#include <gtest/gtest.h>

#include <cmath>

#include "lafn/model.hpp"
#include "lafn/model_io.hpp"
#include "lafn/train.hpp"
#include "support.hpp"

using namespace lafn;
using lafn_test::Gen;
using lafn_test::tiny_model;

namespace {

template <typename T>
void expect_bit_identical(const Tensor<T>& a, const Tensor<T>& b) {
    ASSERT_EQ(a.shape(), b.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.values()[i], b.values()[i]) << "entry " << i;
}

std::vector<int> random_ids(Gen& g, const TransformerModel<double>& m, std::size_t n) {
    std::vector<int> ids{Tokenizer::bos};
    for (std::size_t i = 1; i < n; ++i) ids.push_back(static_cast<int>(g.index(Tokenizer::reserved, m.config.vocab_size - 1)));
    return ids;
}

}  // namespace

TEST(Ffn, ClassicHandEvaluation) {
    LayerWeights<double> w;
    w.w1 = Tensor<double>({1, 1}, {2.0});
    w.w2 = Tensor<double>({1, 1}, {3.0});
    auto [out, neurons] = ffn_forward(FfnVariant::classic, Activation::relu, Tensor<double>({1, 1}, {1.0}), w);
    EXPECT_EQ(neurons.item(), 2.0);
    EXPECT_EQ(out.item(), 6.0);
}

TEST(Ffn, GatedHandEvaluation) {
    // (act(x W1) * (x W2)) W3 with x = [1, -1].
    LayerWeights<double> w;
    w.w1 = Tensor<double>({2, 2}, {1.0, 0.0, 0.0, -2.0});  // x W1 = [1, 2]
    w.w2 = Tensor<double>({2, 2}, {3.0, 1.0, 1.0, 0.0});   // x W2 = [2, 1]
    w.w3 = Tensor<double>({2, 1}, {1.0, 10.0});
    auto [out, neurons] = ffn_forward(FfnVariant::gated, Activation::relu, Tensor<double>({1, 2}, {1.0, -1.0}), w);
    EXPECT_EQ(neurons.at(0), 1.0);
    EXPECT_EQ(neurons.at(1), 2.0);
    EXPECT_EQ(out.item(), 1.0 * 2.0 * 1.0 + 2.0 * 1.0 * 10.0);
}

TEST(Model, ConfigValidation) {
    ModelConfig c;
    c.vocab_size = 10;
    c.d_model = 10;
    c.n_heads = 3;
    EXPECT_THROW(c.validate(), Error);
    c.n_heads = 2;
    EXPECT_NO_THROW(c.validate());
    c.vocab_size = 3;
    EXPECT_THROW(c.validate(), Error);
}

TEST(Model, RecordCapturesPreInjectionNeurons) {
    auto m = tiny_model<double>();
    Gen g(1);
    const auto ids = random_ids(g, m, 7);
    ActivationRecord<double> plain, injected;
    forward(m, ids, &plain);
    InjectionSpec<double> spec{{{1, {2, 5}, 3, Tensor<double>::vector({4.0, -4.0})}}};
    forward(m, ids, &injected, &spec);
    ASSERT_EQ(plain.neurons.size(), 2u);
    // Layer 1 itself records the pre-injection value; its position 3 is unchanged.
    expect_bit_identical(plain.neurons[0], injected.neurons[0]);
    expect_bit_identical(plain.neurons[1], injected.neurons[1]);
    EXPECT_EQ(plain.neurons[1].dim(1), 32u);
}

// Property: logits before the injection position are bit-identical; the
// injection position itself changes.
TEST(ModelProperty, InjectionIsCausal) {
    Gen g(7);
    for (int rep = 0; rep < 20; ++rep) {
        const auto v = g.coin() ? FfnVariant::gated : FfnVariant::classic;
        auto m = tiny_model<double>(2, 16, 32, 100 + rep, v);
        const std::size_t n = g.index(3, 12);
        const auto ids = random_ids(g, m, n);
        const std::size_t pos = g.index(0, n - 1);
        const std::size_t layer = g.index(0, 1);
        const std::size_t neuron = g.index(0, 31);
        InjectionSpec<double> spec{{{layer, {neuron}, pos, Tensor<double>::vector({g.real(1.0, 3.0)})}}};
        auto base = forward(m, ids);
        auto hit = forward(m, ids, nullptr, &spec);
        const std::size_t vsz = m.config.vocab_size;
        for (std::size_t i = 0; i < pos * vsz; ++i) ASSERT_EQ(base.values()[i], hit.values()[i]);
        bool changed = false;
        for (std::size_t i = pos * vsz; i < (pos + 1) * vsz; ++i) changed |= base.values()[i] != hit.values()[i];
        // A gated neuron whose gate (x W2) is exactly zero would be inert; with random weights it never is.
        EXPECT_TRUE(changed) << "rep " << rep;
    }
}

TEST(ModelProperty, ZeroInjectionIsBitIdentical) {
    Gen g(8);
    for (int rep = 0; rep < 10; ++rep) {
        auto m = tiny_model<double>(2, 16, 32, 200 + rep);
        const auto ids = random_ids(g, m, g.index(2, 10));
        std::vector<std::size_t> idx{0, 3, 9, 31};
        InjectionSpec<double> spec{{{0, idx, ids.size() - 1, Tensor<double>::zeros({4})}, {1, idx, 0, Tensor<double>::zeros({4})}}};
        expect_bit_identical(forward(m, ids), forward(m, ids, nullptr, &spec));
    }
}

TEST(Model, InjectionValidation) {
    auto m = tiny_model<double>();
    const std::vector<int> ids{Tokenizer::bos, 5, 6};
    auto bad = [&](InjectionEntry<double> e) {
        InjectionSpec<double> s{{std::move(e)}};
        EXPECT_THROW(forward(m, ids, nullptr, &s), Error);
    };
    bad({2, {0}, 0, Tensor<double>::vector({1.0})});        // layer
    bad({0, {32}, 0, Tensor<double>::vector({1.0})});       // neuron
    bad({0, {0}, 3, Tensor<double>::vector({1.0})});        // position
    bad({0, {3, 1}, 0, Tensor<double>::vector({1.0, 1.0})});  // unsorted
    bad({0, {0, 1}, 0, Tensor<double>::vector({1.0})});     // length
    EXPECT_THROW(forward(m, std::vector<int>{2, 99}), Error);
}

TEST(Model, FullModelGradientMatchesFiniteDifferences) {
    auto m = tiny_model<double>(2, 8, 8, 3);
    const std::vector<int> ids{Tokenizer::bos, 5, 7, 6};
    std::vector<Tensor<double>> ps{m.layers[0].w1, m.layers[1].w3, m.layers[0].wq, m.tok_emb};
    auto f = [&](std::vector<Tensor<double>>&) { return language_model_loss(m, {&ids}); };
    EXPECT_LT(finite_diff_check<double>(f, ps, 1e-6), 1e-5);
}

TEST(Model, GenerateStopsAtBudgetAndIsDeterministic) {
    auto m = tiny_model<double>();
    const std::vector<int> p{Tokenizer::bos, 4};
    auto a = generate_greedy(m, p, 5);
    auto b = generate_greedy(m, p, 5);
    EXPECT_EQ(a, b);
    EXPECT_LE(a.size(), 5u);
    auto prefix = sample_prefix(m, 5, 42);
    EXPECT_EQ(prefix.size(), 5u);
    for (int t : prefix) EXPECT_GE(t, Tokenizer::reserved);
    EXPECT_EQ(prefix, sample_prefix(m, 5, 42));
}

TEST(ModelIo, RoundTripIsByteIdentical) {
    lafn_test::TempDir dir;
    for (auto v : {FfnVariant::gated, FfnVariant::classic}) {
        auto m = tiny_model<float>(2, 16, 32, 9, v);
        const std::string bytes = serialize_model(m);
        save_model(m, dir.file("m.lafn"));
        auto back = load_model<float>(dir.file("m.lafn"));
        EXPECT_EQ(serialize_model(back), bytes);
        EXPECT_EQ(back.config, m.config);
        EXPECT_EQ(back.tokenizer, m.tokenizer);
        const std::vector<int> ids{Tokenizer::bos, 4, 5};
        expect_bit_identical(forward(m, ids), forward(back, ids));
    }
}

TEST(ModelIo, CorruptionYieldsStructuredErrors) {
    auto m = tiny_model<float>();
    const std::string good = serialize_model(m);
    auto kind_of = [](const std::string& bytes) -> std::string {
        try {
            deserialize_model<float>(bytes);
        } catch (const Error& e) {
            return to_string(e.kind()) + std::string(":") + e.what();
        }
        return "loaded";
    };
    std::string bad_magic = good;
    bad_magic[0] = 'X';
    EXPECT_NE(kind_of(bad_magic).find("format:"), std::string::npos);
    EXPECT_NE(kind_of(bad_magic).find("magic"), std::string::npos);
    std::string bad_version = good;
    bad_version[4] = 9;
    EXPECT_NE(kind_of(bad_version).find("expected 1, found 9"), std::string::npos);
    // Every truncation point fails cleanly.
    for (std::size_t cut = 0; cut < good.size(); cut += 97) EXPECT_EQ(kind_of(good.substr(0, cut)).rfind("format:", 0), 0u) << cut << " " << kind_of(good.substr(0, cut));
    EXPECT_EQ(kind_of(good + "x").rfind("format:", 0), 0u);
    // Shape mismatch inside metadata.
    std::string shape = good;
    const auto at = shape.find("[16,16]");
    ASSERT_NE(at, std::string::npos);
    shape.replace(at, 7, "[16,17]");
    EXPECT_EQ(kind_of(shape).rfind("format:", 0), 0u);
    lafn_test::TempDir dir;
    try {
        load_model<float>(dir.file("missing.lafn"));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::io);
    }
}

TEST(Tokenizer, RoundTripAndReservedIds) {
    auto tok = Tokenizer::build(std::vector<std::string>{"b a", "c a"});
    EXPECT_EQ(tok.size(), 7u);
    EXPECT_EQ(tok.decode(tok.encode("a b c")), "a b c");
    EXPECT_EQ(tok.encode("zzz").front(), Tokenizer::unk);
    EXPECT_EQ(tok.encode_prompt("a").front(), Tokenizer::bos);
}

TEST(Train, MemorizesTinyCorpus) {
    auto tok = Tokenizer::build(std::vector<std::string>{"x1 r y1", "x2 r y2", "x3 r y3"});
    std::vector<std::vector<int>> corpus;
    std::vector<RecallProbe> probes;
    for (int i = 1; i <= 3; ++i) {
        const std::string q = "x" + std::to_string(i) + " r", a = "y" + std::to_string(i);
        auto ids = tok.encode_prompt(q + " " + a);
        ids.push_back(Tokenizer::eos);
        corpus.push_back(ids);
        probes.push_back({tok.encode_prompt(q), tok.encode(a)});
    }
    ModelConfig c;
    c.n_layers = 1;
    c.d_model = 16;
    c.d_ffn = 32;
    c.n_heads = 2;
    c.max_seq = 8;
    TrainConfig tc;
    tc.steps = 300;
    tc.batch = 3;
    tc.lr = 1e-2;
    tc.eval_every = 50;
    auto r = train_toy<float>(c, tok, corpus, tc, probes);
    EXPECT_EQ(r.recall, 1.0);
    EXPECT_LT(r.losses.back(), r.losses.front());
}
