#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "damoe/autodiff.hpp"
#include "damoe/error.hpp"
#include "damoe/tensor.hpp"

namespace damoe {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First/second moment estimates, one slot pair per parameter.
template <typename T>
struct AdamState {
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    std::uint64_t step = 0;

    explicit AdamState(const std::vector<Param<T>>& params) {
        m.reserve(params.size());
        v.reserve(params.size());
        for (const Param<T>& p : params) {
            m.emplace_back(p.value.shape());
            v.emplace_back(p.value.shape());
        }
    }
};

/// One bias-corrected Adam update over all parameters, reading Param::grad.
template <typename T>
void adam_step(std::vector<Param<T>>& params, AdamState<T>& state, const AdamConfig& cfg) {
    if (params.size() != state.m.size()) throw ContractError("adam_step: state/parameter count mismatch");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Param<T>& p = params[i];
        if (!p.value.same_shape(p.grad) || !p.value.same_shape(state.m[i]))
            throw ContractError("adam_step: shape mismatch for parameter " + p.name);
        Tensor<T>& m = state.m[i];
        Tensor<T>& v = state.v[i];
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            const double g = static_cast<double>(p.grad[j]);
            const double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * g;
            const double vj = cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * g * g;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double mhat = mj / bc1;
            const double vhat = vj / bc2;
            p.value[j] = static_cast<T>(static_cast<double>(p.value[j]) -
                                        cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

} // namespace damoe
