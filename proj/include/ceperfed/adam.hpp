#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ceperfed/tensor.hpp"

namespace ceperfed {

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// First/second moment accumulators for one parameter set. Single-owner
/// mutable; structurally tied to the set it tracks.
struct OptimizerState {
    std::vector<LayerSpec> specs;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::int64_t step = 0;
    AdamConfig config;
};

inline OptimizerState make_optimizer_state(const ParameterSet& params,
                                           const AdamConfig& config = {}) {
    OptimizerState state;
    state.specs = params.specs;
    state.config = config;
    for (const auto& layer : params.values) {
        state.m.emplace_back(layer.size(), 0.0);
        state.v.emplace_back(layer.size(), 0.0);
    }
    return state;
}

/// One bias-corrected Adam update, in place. Zero gradient leaves the
/// parameters unchanged.
inline void adam_step(ParameterSet& params, const ParameterSet& grad, OptimizerState& state) {
    require_compatible(params, grad, "adam_step");
    if (state.specs != params.specs)
        throw StructuralError("adam_step: optimizer state tracks a different parameter set");

    const AdamConfig& c = state.config;
    state.step += 1;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    for (std::size_t l = 0; l < params.values.size(); ++l) {
        double* p = params.values[l].data();
        const double* g = grad.values[l].data();
        double* m = state.m[l].data();
        double* v = state.v[l].data();
        const std::size_t n = params.values[l].size();
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            p[i] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
        }
    }
}

}  // namespace ceperfed
