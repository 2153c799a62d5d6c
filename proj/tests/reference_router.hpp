#pragma once

// Straight-line reference for the routing pipeline, written independently of
// the library internals: scalar loops only, repeated-argmax top-K, explicit
// greedy capacity. Tests compare library RoutingPlans against this.

#include <cmath>
#include <cstdint>
#include <vector>

#include "damoe/tensor.hpp"

namespace refimpl {

struct RefPlan {
    int num_experts = 0;
    int capacity = 0;
    std::vector<int> counts;
    std::vector<double> importance;
    std::vector<std::vector<int>> expert_index;
    std::vector<std::vector<double>> expert_gate;
    std::vector<std::vector<int>> final_mask;        // [tokens][E]
    std::vector<std::vector<int>> position_in_expert; // -1 where not kept
    std::vector<std::vector<int>> dropped;
};

inline std::vector<std::vector<double>> ref_probs(const damoe::Tensor<double>& x,
                                                  const damoe::Tensor<double>& w_r) {
    const int tokens = x.dim(0), d = x.dim(1), E = w_r.dim(0);
    std::vector<std::vector<double>> probs((std::size_t)tokens, std::vector<double>((std::size_t)E));
    for (int t = 0; t < tokens; ++t) {
        std::vector<double> logits((std::size_t)E, 0.0);
        for (int e = 0; e < E; ++e)
            for (int c = 0; c < d; ++c) logits[(std::size_t)e] += w_r.at(e, c) * x.at(t, c);
        double mx = logits[0];
        for (int e = 1; e < E; ++e) mx = std::max(mx, logits[(std::size_t)e]);
        double sum = 0;
        for (int e = 0; e < E; ++e) sum += std::exp(logits[(std::size_t)e] - mx);
        for (int e = 0; e < E; ++e) probs[(std::size_t)t][(std::size_t)e] = std::exp(logits[(std::size_t)e] - mx) / sum;
    }
    return probs;
}

// Repeated argmax with lowest-index tie break.
inline void ref_topk(const std::vector<double>& probs, int k, std::vector<int>& idx,
                     std::vector<double>& gates) {
    const int E = (int)probs.size();
    std::vector<bool> taken((std::size_t)E, false);
    for (int pick = 0; pick < k; ++pick) {
        int best = -1;
        for (int e = 0; e < E; ++e) {
            if (taken[(std::size_t)e]) continue;
            if (best < 0 || probs[(std::size_t)e] > probs[(std::size_t)best]) best = e;
        }
        taken[(std::size_t)best] = true;
        idx.push_back(best);
        gates.push_back(probs[(std::size_t)best]);
    }
}

// counts[t] == 0 marks a padded token.
inline RefPlan ref_route(const damoe::Tensor<double>& x, const damoe::Tensor<double>& w_r,
                         const std::vector<int>& counts, const std::vector<double>& importance,
                         double capacity_factor) {
    const int tokens = x.dim(0), E = w_r.dim(0);
    RefPlan plan;
    plan.num_experts = E;
    plan.counts = counts;
    plan.importance = importance;
    plan.expert_index.resize((std::size_t)tokens);
    plan.expert_gate.resize((std::size_t)tokens);
    plan.final_mask.assign((std::size_t)tokens, std::vector<int>((std::size_t)E, 0));
    plan.position_in_expert.assign((std::size_t)tokens, std::vector<int>((std::size_t)E, -1));
    plan.dropped.assign((std::size_t)tokens, std::vector<int>((std::size_t)E, 0));

    int live = 0;
    for (int t = 0; t < tokens; ++t)
        if (counts[(std::size_t)t] > 0) ++live;
    plan.capacity = (int)std::ceil(capacity_factor * live / E);
    if (plan.capacity < 1) plan.capacity = 1;

    auto probs = ref_probs(x, w_r);
    std::vector<int> used((std::size_t)E, 0);
    for (int t = 0; t < tokens; ++t) {
        if (counts[(std::size_t)t] == 0) continue;
        ref_topk(probs[(std::size_t)t], counts[(std::size_t)t], plan.expert_index[(std::size_t)t],
                 plan.expert_gate[(std::size_t)t]);
        for (int e : plan.expert_index[(std::size_t)t]) {
            if (used[(std::size_t)e] < plan.capacity) {
                plan.final_mask[(std::size_t)t][(std::size_t)e] = 1;
                plan.position_in_expert[(std::size_t)t][(std::size_t)e] = used[(std::size_t)e]++;
            } else {
                plan.dropped[(std::size_t)t][(std::size_t)e] = 1;
            }
        }
    }
    return plan;
}

// Eq. 3/4 scalar reference over a [B,H,L,L] attention tensor.
inline void ref_importance(const damoe::Tensor<double>& weights,
                           const std::vector<std::uint8_t>& valid, int E,
                           std::vector<double>& importance, std::vector<int>& counts) {
    const int B = weights.dim(0), H = weights.dim(1), L = weights.dim(2);
    importance.assign((std::size_t)(B * L), 0.0);
    counts.assign((std::size_t)(B * L), 0);
    for (int b = 0; b < B; ++b)
        for (int q = 0; q < L; ++q) {
            if (!valid[(std::size_t)(b * L + q)]) continue;
            double acc = 0;
            for (int h = 0; h < H; ++h) {
                double best = weights.at(b, h, q, 0);
                for (int j = 1; j < L; ++j) best = std::max(best, weights.at(b, h, q, j));
                acc += best;
            }
            const double score = acc / H;
            importance[(std::size_t)(b * L + q)] = score;
            int k = (int)std::ceil(score * E);
            if (k < 1) k = 1;
            if (k > E) k = E;
            counts[(std::size_t)(b * L + q)] = k;
        }
}

} // namespace refimpl
