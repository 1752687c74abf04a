#pragma once

#include <cmath>
#include <vector>

#include "vlmforge/layers.hpp"

namespace vlmforge {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.05;
    double clip_norm = 1.0;  // global norm over trainable parameters; <= 0 disables
};

// Linear warmup to peak, then cosine decay to min_ratio * peak at the last step.
inline double scheduled_lr(std::size_t step, std::size_t total_steps, std::size_t warmup, double peak,
                           double min_ratio = 0.1) {
    if (warmup > 0 && step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const std::size_t decay_steps = total_steps > warmup + 1 ? total_steps - warmup - 1 : 1;
    const double progress = std::min(1.0, static_cast<double>(step - std::min(step, warmup)) / static_cast<double>(decay_steps));
    return peak * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + std::cos(M_PI * progress)));
}

// Decoupled weight decay Adam. Parameters outside `trainable` are left
// untouched, moments and step counters included.
template <class T>
class AdamW {
public:
    AdamW(const ParameterStore<T>& ps, AdamWConfig cfg) : cfg_(cfg) {
        for (std::size_t i = 0; i < ps.size(); ++i) {
            m_.emplace_back(ps.info(i).size(), T(0));
            v_.emplace_back(ps.info(i).size(), T(0));
        }
        steps_.assign(ps.size(), 0);
    }

    // Returns the pre-clip global gradient norm over trainable parameters.
    double step(ParameterStore<T>& ps, const Gradients<T>& grads, double lr, const std::vector<bool>& trainable) {
        double sq = 0.0;
        for (std::size_t i = 0; i < ps.size(); ++i) {
            if (!trainable[i]) continue;
            for (T g : grads.g[i]) sq += static_cast<double>(g) * static_cast<double>(g);
        }
        const double norm = std::sqrt(sq);
        const double scale = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        for (std::size_t i = 0; i < ps.size(); ++i) {
            if (!trainable[i]) continue;
            const std::uint64_t t = ++steps_[i];
            const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t)));
            const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t)));
            const T step_lr = static_cast<T>(lr);
            const T decay = ps.info(i).decay ? static_cast<T>(cfg_.weight_decay) : T(0);
            auto& p = ps.values(i);
            auto& m = m_[i];
            auto& v = v_[i];
            const auto& g = grads.g[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                const T gj = g[j] * static_cast<T>(scale);
                m[j] = b1 * m[j] + (T(1) - b1) * gj;
                v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
                const T update = (m[j] / c1) / (std::sqrt(v[j] / c2) + static_cast<T>(cfg_.eps)) + decay * p[j];
                p[j] -= step_lr * update;
            }
        }
        return norm;
    }

    std::vector<std::vector<T>>& first_moments() { return m_; }
    std::vector<std::vector<T>>& second_moments() { return v_; }
    std::vector<std::uint64_t>& step_counts() { return steps_; }
    const std::vector<std::vector<T>>& first_moments() const { return m_; }
    const std::vector<std::vector<T>>& second_moments() const { return v_; }
    const std::vector<std::uint64_t>& step_counts() const { return steps_; }

private:
    AdamWConfig cfg_;
    std::vector<std::vector<T>> m_, v_;
    std::vector<std::uint64_t> steps_;
};

}  // namespace vlmforge
