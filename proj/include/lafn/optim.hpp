#pragma once

#include <cmath>
#include <vector>

#include "lafn/tensor.hpp"

namespace lafn {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled (AdamW)
};

// Adam over a fixed list of parameter tensors, updated in place.
template <typename T>
class Adam {
public:
    Adam(std::vector<Tensor<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) {
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    void step(const Gradients<T>& grads, double lr_scale = 1.0) {
        ++t_;
        const double lr = cfg_.lr * lr_scale;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto g = grads.view(params_[k]);
            auto w = params_[k].mutable_values();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
                if (cfg_.weight_decay != 0.0) update += cfg_.weight_decay * static_cast<double>(w[i]);
                w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * update);
            }
        }
    }

    std::size_t steps() const { return t_; }

private:
    std::vector<Tensor<T>> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::size_t t_ = 0;
};

}  // namespace lafn
