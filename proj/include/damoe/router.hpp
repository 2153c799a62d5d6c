#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include "damoe/error.hpp"
#include "damoe/importance.hpp"
#include "damoe/ops.hpp"
#include "damoe/tensor.hpp"

namespace damoe {

template <typename T>
struct RouterParams {
    Tensor<T> w_r; // [E, d_model]
};

struct CapacityConfig {
    double capacity_factor = 1.25;
};

inline int derive_capacity(const CapacityConfig& cfg, int num_tokens, int num_experts) {
    if (cfg.capacity_factor <= 0.0) throw ConfigError("capacity_factor must be positive");
    if (num_experts < 1) throw ConfigError("num_experts must be >= 1");
    const int c = static_cast<int>(std::ceil(cfg.capacity_factor * num_tokens / num_experts));
    return std::max(c, 1);
}

/// Everything downstream needs to dispatch tokens to experts. Ragged
/// per-token lists hold the pre-capacity selection in descending-probability
/// order; the mask/position/dropped tensors reflect the capacity-adjusted
/// outcome. position_in_expert is -1 where the mask is 0.
template <typename T>
struct RoutingPlan {
    int num_experts = 0;
    int capacity = 0;
    Tensor<int> counts;                       // [tokens], K per token (0 on padding)
    Tensor<T> importance;                     // [tokens] (0 on padding; 0 in fixed mode)
    std::vector<std::vector<int>> expert_index;
    std::vector<std::vector<T>> expert_gate;
    Tensor<int> expert_mask;                  // [tokens, E], post-capacity
    Tensor<int> position_in_expert;           // [tokens, E]
    Tensor<int> dropped;                      // [tokens, E]
};

template <typename T>
Tensor<T> router_probabilities(const Tensor<T>& x, const RouterParams<T>& params) {
    if (x.rank() != 2 || params.w_r.rank() != 2 || x.dim(1) != params.w_r.dim(1))
        throw DimensionError("router input/weight shape mismatch");
    Tensor<T> logits = matmul_nt(x, params.w_r); // [tokens, E]
    for (int t = 0; t < logits.dim(0); ++t)
        softmax_row(logits.data() + static_cast<std::size_t>(t) * logits.dim(1), logits.dim(1));
    return logits;
}

/// Top-K expert ids (descending probability, ties to the lower index) plus
/// their raw probabilities as gates.
template <typename T>
std::pair<std::vector<int>, std::vector<T>> select_topk(const T* probs, int num_experts, int k) {
    if (k < 1 || k > num_experts) throw ContractError("top-K K out of range [1, E]");
    std::vector<int> order(num_experts);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (probs[a] != probs[b]) return probs[a] > probs[b];
        return a < b;
    });
    std::vector<int> idx(order.begin(), order.begin() + k);
    std::vector<T> gates(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) gates[static_cast<std::size_t>(i)] = probs[idx[static_cast<std::size_t>(i)]];
    return {std::move(idx), std::move(gates)};
}

template <typename T>
std::pair<std::vector<int>, std::vector<T>> select_topk(const std::vector<T>& probs, int k) {
    return select_topk(probs.data(), static_cast<int>(probs.size()), k);
}

inline Tensor<int> build_expert_mask(const std::vector<std::vector<int>>& selections, int num_experts) {
    const int tokens = static_cast<int>(selections.size());
    Tensor<int> mask({tokens, num_experts});
    for (int t = 0; t < tokens; ++t) {
        for (int e : selections[static_cast<std::size_t>(t)]) {
            if (e < 0 || e >= num_experts) throw IndexError("expert id out of range");
            if (mask.at(t, e)) throw ContractError("duplicate expert id in one token's selection");
            mask.at(t, e) = 1;
        }
    }
    return mask;
}

struct CapacityResult {
    Tensor<int> final_mask;
    Tensor<int> position_in_expert;
    Tensor<int> dropped;
};

/// Greedy slot assignment in flattened token order: the first C tokens that
/// want an expert keep it, later ones are dropped.
inline CapacityResult apply_capacity(const Tensor<int>& mask, int capacity) {
    if (capacity < 1) throw ContractError("capacity must be >= 1");
    const int tokens = mask.dim(0), num_experts = mask.dim(1);
    CapacityResult r;
    r.final_mask = Tensor<int>({tokens, num_experts});
    r.position_in_expert = Tensor<int>({tokens, num_experts}, std::vector<int>(static_cast<std::size_t>(tokens) * num_experts, -1));
    r.dropped = Tensor<int>({tokens, num_experts});
    std::vector<int> used(static_cast<std::size_t>(num_experts), 0);
    for (int t = 0; t < tokens; ++t) {
        for (int e = 0; e < num_experts; ++e) {
            if (!mask.at(t, e)) continue;
            if (used[static_cast<std::size_t>(e)] < capacity) {
                r.final_mask.at(t, e) = 1;
                r.position_in_expert.at(t, e) = used[static_cast<std::size_t>(e)]++;
            } else {
                r.dropped.at(t, e) = 1;
            }
        }
    }
    return r;
}

namespace detail {

template <typename T>
RoutingPlan<T> finish_plan(const Tensor<T>& probs, Tensor<int> counts, Tensor<T> importance,
                           const std::vector<std::uint8_t>& valid, const CapacityConfig& capacity) {
    const int tokens = probs.dim(0), num_experts = probs.dim(1);
    RoutingPlan<T> plan;
    plan.num_experts = num_experts;
    plan.counts = std::move(counts);
    plan.importance = std::move(importance);
    plan.expert_index.resize(static_cast<std::size_t>(tokens));
    plan.expert_gate.resize(static_cast<std::size_t>(tokens));

    int num_unmasked = 0;
    for (int t = 0; t < tokens; ++t)
        if (valid[static_cast<std::size_t>(t)]) ++num_unmasked;
    plan.capacity = derive_capacity(capacity, num_unmasked, num_experts);

    for (int t = 0; t < tokens; ++t) {
        if (!valid[static_cast<std::size_t>(t)]) continue;
        auto [idx, gates] = select_topk(probs.data() + static_cast<std::size_t>(t) * num_experts,
                                        num_experts, plan.counts[static_cast<std::size_t>(t)]);
        plan.expert_index[static_cast<std::size_t>(t)] = std::move(idx);
        plan.expert_gate[static_cast<std::size_t>(t)] = std::move(gates);
    }

    Tensor<int> mask = build_expert_mask(plan.expert_index, num_experts);
    CapacityResult cap = apply_capacity(mask, plan.capacity);
    plan.expert_mask = std::move(cap.final_mask);
    plan.position_in_expert = std::move(cap.position_in_expert);
    plan.dropped = std::move(cap.dropped);
    return plan;
}

} // namespace detail

/// Algorithm end-to-end: importance -> per-token K -> probabilities -> top-K
/// -> mask -> capacity.
template <typename T>
RoutingPlan<T> route_dynamic(const Tensor<T>& x, const Tensor<T>& attention_weights,
                             const RouterParams<T>& params, const CapacityConfig& capacity,
                             const std::vector<std::uint8_t>& valid) {
    const int B = attention_weights.dim(0), L = attention_weights.dim(2);
    if (x.dim(0) != B * L) throw DimensionError("token count does not match attention weights");
    ImportanceScores<T> scores = compute_token_importance(attention_weights, valid);
    ExpertCounts counts = experts_per_token(scores, params.w_r.dim(0), valid);
    Tensor<T> probs = router_probabilities(x, params);
    Tensor<T> flat_importance({B * L}, std::vector<T>(scores.scores.data(), scores.scores.data() + scores.scores.size()));
    Tensor<int> flat_counts({B * L}, std::vector<int>(counts.counts.data(), counts.counts.data() + counts.counts.size()));
    return detail::finish_plan(probs, std::move(flat_counts), std::move(flat_importance), valid, capacity);
}

/// Constant-K baseline on the same pipeline; importance is bypassed.
template <typename T>
RoutingPlan<T> route_fixed(const Tensor<T>& x, const RouterParams<T>& params, int k,
                           const CapacityConfig& capacity, const std::vector<std::uint8_t>& valid) {
    const int num_experts = params.w_r.dim(0);
    if (k < 1 || k > num_experts) throw ConfigError("fixed K out of range [1, E]");
    const int tokens = x.dim(0);
    if (static_cast<int>(valid.size()) != tokens) throw DimensionError("padding mask size mismatch");
    Tensor<T> probs = router_probabilities(x, params);
    Tensor<int> counts({tokens});
    for (int t = 0; t < tokens; ++t)
        if (valid[static_cast<std::size_t>(t)]) counts[static_cast<std::size_t>(t)] = k;
    return detail::finish_plan(probs, std::move(counts), Tensor<T>({tokens}), valid, capacity);
}

/// Switch-style auxiliary loss: E * sum_e f_e * P_e. Disabled by default at
/// the model level; provided for ablation.
template <typename T>
T load_balance_loss(const Tensor<T>& probs, const Tensor<int>& final_mask,
                    const std::vector<std::uint8_t>& valid = {}) {
    if (probs.shape() != final_mask.shape()) throw DimensionError("probs/mask shape mismatch");
    const int tokens = probs.dim(0), num_experts = probs.dim(1);
    int live = 0;
    double assigned = 0.0;
    std::vector<double> frac(static_cast<std::size_t>(num_experts), 0.0);
    std::vector<double> mean_prob(static_cast<std::size_t>(num_experts), 0.0);
    for (int t = 0; t < tokens; ++t) {
        if (!valid.empty() && !valid[static_cast<std::size_t>(t)]) continue;
        ++live;
        for (int e = 0; e < num_experts; ++e) {
            frac[static_cast<std::size_t>(e)] += final_mask.at(t, e);
            assigned += final_mask.at(t, e);
            mean_prob[static_cast<std::size_t>(e)] += probs.at(t, e);
        }
    }
    if (live == 0 || assigned == 0.0) return T(0);
    double loss = 0.0;
    for (int e = 0; e < num_experts; ++e)
        loss += (frac[static_cast<std::size_t>(e)] / assigned) * (mean_prob[static_cast<std::size_t>(e)] / live);
    return T(loss * num_experts);
}

} // namespace damoe
