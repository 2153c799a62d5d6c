#pragma once

#include <cstddef>
#include <vector>

#include "damoe/error.hpp"
#include "damoe/ops.hpp"
#include "damoe/router.hpp"
#include "damoe/tensor.hpp"

namespace damoe {

/// Bank of E two-layer FFN experts with identical shapes.
template <typename T>
struct ExpertParams {
    Activation activation = Activation::relu;
    std::vector<Tensor<T>> w1, b1; // [d_model, d_ff], [d_ff] per expert
    std::vector<Tensor<T>> w2, b2; // [d_ff, d_model], [d_model] per expert

    int count() const { return static_cast<int>(w1.size()); }
};

template <typename T>
ExpertParams<T> init_expert_params(int num_experts, int d_model, int d_ff, Activation act, Rng& rng) {
    ExpertParams<T> p;
    p.activation = act;
    const double s1 = 1.0 / std::sqrt(double(d_model));
    const double s2 = 1.0 / std::sqrt(double(d_ff));
    for (int e = 0; e < num_experts; ++e) {
        p.w1.push_back(random_truncated_normal<T>({d_model, d_ff}, rng, s1));
        p.b1.push_back(Tensor<T>({d_ff}));
        p.w2.push_back(random_truncated_normal<T>({d_ff, d_model}, rng, s2));
        p.b2.push_back(Tensor<T>({d_model}));
    }
    return p;
}

/// One expert's FFN over a gathered token buffer. n may be 0 (idle expert);
/// n beyond capacity means the dispatch bookkeeping is broken.
template <typename T>
Tensor<T> expert_forward(const Tensor<T>& x_subset, int e, const ExpertParams<T>& experts,
                         int capacity) {
    if (e < 0 || e >= experts.count()) throw IndexError("expert id out of range");
    if (x_subset.dim(0) > capacity) throw ContractError("expert received more tokens than capacity");
    if (x_subset.dim(0) == 0) return Tensor<T>({0, experts.w2[static_cast<std::size_t>(e)].dim(1)});
    Tensor<T> h = matmul(x_subset, experts.w1[static_cast<std::size_t>(e)]);
    for (int r = 0; r < h.dim(0); ++r)
        for (int c = 0; c < h.dim(1); ++c) h.at(r, c) += experts.b1[static_cast<std::size_t>(e)][static_cast<std::size_t>(c)];
    apply_activation(h, experts.activation);
    Tensor<T> y = matmul(h, experts.w2[static_cast<std::size_t>(e)]);
    for (int r = 0; r < y.dim(0); ++r)
        for (int c = 0; c < y.dim(1); ++c) y.at(r, c) += experts.b2[static_cast<std::size_t>(e)][static_cast<std::size_t>(c)];
    return y;
}

struct MoEStats {
    std::vector<int> expert_load; // tokens kept per expert
    double drop_rate = 0.0;       // dropped assignments / total assignments
    double mean_k = 0.0;          // mean K over unmasked tokens
};

template <typename T>
struct MoEOutput {
    Tensor<T> output; // same shape as input
    MoEStats stats;
};

template <typename T>
MoEStats plan_stats(const RoutingPlan<T>& plan) {
    MoEStats s;
    s.expert_load.assign(static_cast<std::size_t>(plan.num_experts), 0);
    const int tokens = plan.expert_mask.dim(0);
    long long total_k = 0, dropped = 0;
    int live = 0;
    for (int t = 0; t < tokens; ++t) {
        const int k = plan.counts[static_cast<std::size_t>(t)];
        if (k > 0) {
            ++live;
            total_k += k;
        }
        for (int e = 0; e < plan.num_experts; ++e) {
            s.expert_load[static_cast<std::size_t>(e)] += plan.expert_mask.at(t, e);
            dropped += plan.dropped.at(t, e);
        }
    }
    if (total_k > 0) s.drop_rate = double(dropped) / double(total_k);
    if (live > 0) s.mean_k = double(total_k) / double(live);
    return s;
}

/// Dispatch/combine: gather each expert's kept tokens, run its FFN, and
/// scatter the gate-weighted rows back. Fully dropped tokens yield zero.
template <typename T>
MoEOutput<T> moe_forward(const Tensor<T>& x, const RoutingPlan<T>& plan,
                         const ExpertParams<T>& experts) {
    if (x.rank() != 3) throw DimensionError("moe_forward expects [B, L, d_model]");
    const int B = x.dim(0), L = x.dim(1), d = x.dim(2);
    const int tokens = B * L;
    if (plan.expert_mask.dim(0) != tokens) throw ContractError("routing plan token count mismatch");
    if (plan.num_experts != experts.count()) throw ContractError("routing plan expert count mismatch");

    MoEOutput<T> out;
    out.output = Tensor<T>({B, L, d});
    out.stats = plan_stats(plan);

    const T* xd = x.data();
    T* od = out.output.data();
    for (int e = 0; e < plan.num_experts; ++e) {
        std::vector<int> kept;
        for (int t = 0; t < tokens; ++t)
            if (plan.expert_mask.at(t, e)) kept.push_back(t);
        if (kept.empty()) continue;
        Tensor<T> buf({static_cast<int>(kept.size()), d});
        for (std::size_t r = 0; r < kept.size(); ++r)
            for (int c = 0; c < d; ++c)
                buf.at(static_cast<int>(r), c) = xd[static_cast<std::size_t>(kept[r]) * d + c];
        Tensor<T> y = expert_forward(buf, e, experts, plan.capacity);
        for (std::size_t r = 0; r < kept.size(); ++r) {
            const int t = kept[r];
            T gate = T(0);
            const auto& idx = plan.expert_index[static_cast<std::size_t>(t)];
            for (std::size_t i = 0; i < idx.size(); ++i)
              if (idx[i] == e) { gate = plan.expert_gate[static_cast<std::size_t>(t)][i]; break; }
            for (int c = 0; c < d; ++c)
                od[static_cast<std::size_t>(t) * d + c] += gate * y.at(static_cast<int>(r), c);
        }
    }
    return out;
}

} // namespace damoe
