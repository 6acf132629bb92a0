#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lafn/model.hpp"
#include "lafn/optim.hpp"
#include "lafn/random.hpp"

namespace lafn {

struct TrainConfig {
    double lr = 3e-3;
    std::size_t steps = 2000;
    std::size_t batch = 32;
    std::uint64_t seed = 0;
    double init_std = 0.02;
    double weight_decay = 0.0;
    double grad_clip = 1.0;       // global-norm clip; <= 0 disables
    std::size_t warmup = 50;
    double min_lr_ratio = 0.1;    // cosine floor
    std::size_t eval_every = 200;  // recall probe cadence (0 disables)
    double recall_target = 0.95;   // early stop once reached (> 1 never stops)
};

// A prompt (with bos) whose greedy continuation should equal `answer`.
struct RecallProbe {
    std::vector<int> prompt;
    std::vector<int> answer;
};

template <typename T>
struct TrainResult {
    TransformerModel<T> model;
    std::vector<double> losses;  // one per step
    double recall = 0.0;         // fraction of probes answered exactly (NaN without probes)
    std::size_t steps_run = 0;
};

template <typename T>
double recall(const TransformerModel<T>& model, std::span<const RecallProbe> probes, std::size_t max_new = 16) {
    if (probes.empty()) return std::nan("");
    std::size_t hits = 0;
    for (const auto& p : probes) hits += generate_greedy(model, p.prompt, max_new) == p.answer ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(probes.size());
}

// Mean next-token NLL over every position of every sequence in `batch`.
template <typename T>
Tensor<T> language_model_loss(const TransformerModel<T>& model, const std::vector<const std::vector<int>*>& batch) {
    std::vector<Tensor<T>> per_seq;
    Tensor<T> total;
    for (const auto* seq : batch) {
        Tensor<T> logp = log_softmax(forward(model, *seq));
        std::vector<std::pair<std::size_t, std::size_t>> at;
        for (std::size_t i = 0; i + 1 < seq->size(); ++i) at.emplace_back(i, static_cast<std::size_t>((*seq)[i + 1]));
        Tensor<T> nll = scale(mean(pick(logp, at)), T(-1));
        total = total.defined() ? add(total, nll) : nll;
    }
    return scale(total, T(1) / static_cast<T>(batch.size()));
}

// Trains a fresh model on `corpus` (token sequences that start with bos and
// end with eos). Fully deterministic for a given seed.
template <typename T>
TrainResult<T> train_toy(ModelConfig config, const Tokenizer& tokenizer, const std::vector<std::vector<int>>& corpus,
                         const TrainConfig& cfg, std::span<const RecallProbe> probes = {},
                         const std::function<void(std::size_t, double)>& on_step = {}) {
    if (corpus.empty()) fail(ErrorKind::validation, "train: corpus is empty");
    if (config.vocab_size == 0) config.vocab_size = tokenizer.size();
    for (std::size_t s = 0; s < corpus.size(); ++s) {
        if (corpus[s].size() < 2) fail(ErrorKind::validation, "train: sequence " + std::to_string(s) + " shorter than 2 tokens");
        if (corpus[s].size() > config.max_seq) {
            fail(ErrorKind::validation, "train: sequence " + std::to_string(s) + " longer than max_seq");
        }
        for (int t : corpus[s])
            if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size)
                fail(ErrorKind::validation, "train: token id " + std::to_string(t) + " outside vocabulary in sequence " + std::to_string(s));
    }
    if (cfg.batch == 0) fail(ErrorKind::validation, "train: batch must be >= 1");

    TrainResult<T> result{TransformerModel<T>::init(config, tokenizer, cfg.seed, cfg.init_std), {}, std::nan(""), 0};
    auto& model = result.model;
    model.set_requires_grad(true);
    auto params = model.parameters();
    Adam<T> adam(params, AdamConfig{cfg.lr, 0.9, 0.98, 1e-8, cfg.weight_decay});

    Rng rng(mix_seed(cfg.seed, 1));
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<const std::vector<int>*> batch;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            if (cursor == order.size()) {
                shuffle_in_place(order, rng);
                cursor = 0;
            }
            batch.push_back(&corpus[order[cursor++]]);
        }
        Tape<T> tape;
        Gradients<T> grads;
        double loss_value = 0.0;
        {
            TapeScope<T> scope(tape);
            Tensor<T> loss = language_model_loss(model, batch);
            loss_value = static_cast<double>(loss.item());
            if (!std::isfinite(loss_value)) fail(ErrorKind::numeric, "train: loss is not finite at step " + std::to_string(step));
            grads = tape.backward(loss);
        }
        double lr_scale = 1.0;
        if (cfg.warmup > 0 && step < cfg.warmup) {
            lr_scale = static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
        } else if (cfg.steps > cfg.warmup) {
            const double progress = static_cast<double>(step - cfg.warmup) / static_cast<double>(cfg.steps - cfg.warmup);
            lr_scale = cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
        }
        if (cfg.grad_clip > 0.0) {
            double sq = 0.0;
            for (const auto& p : params)
                for (T g : grads.view(p)) sq += static_cast<double>(g) * static_cast<double>(g);
            const double norm = std::sqrt(sq);
            if (!std::isfinite(norm)) fail(ErrorKind::numeric, "train: gradient is not finite at step " + std::to_string(step));
            if (norm > cfg.grad_clip) {
                const T factor = static_cast<T>(cfg.grad_clip / norm);
                for (const auto& p : params) {
                    auto it = grads.raw().find(p.id());
                    if (it == grads.raw().end()) continue;
                    for (T& x : it->second) x *= factor;
                }
            }
        }
        adam.step(grads, lr_scale);
        result.losses.push_back(loss_value);
        result.steps_run = step + 1;
        if (on_step) on_step(step, loss_value);
        if (!probes.empty() && cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            result.recall = recall(model, probes);
            if (result.recall >= cfg.recall_target) break;
        }
    }
    model.set_requires_grad(false);
    if (!probes.empty()) result.recall = recall(model, probes);
    return result;
}

}  // namespace lafn
