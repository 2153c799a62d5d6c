#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "damoe/error.hpp"
#include "damoe/tensor.hpp"

namespace damoe {

/// Per-token importance in (0,1], zero on padded positions.
template <typename T>
struct ImportanceScores {
    Tensor<T> scores; // [B, L]
};

/// Per-token expert count in [1,E], zero on padded positions.
struct ExpertCounts {
    Tensor<int> counts; // [B, L]
};

/// Mean over heads of the max attention weight in each token's query row.
template <typename T>
ImportanceScores<T> compute_token_importance(const Tensor<T>& weights,
                                             const std::vector<std::uint8_t>& valid) {
    if (weights.rank() != 4) throw DimensionError("attention weights must be [B, H, L, L]");
    const int B = weights.dim(0), H = weights.dim(1), L = weights.dim(2);
    if (weights.dim(3) != L) throw DimensionError("attention weights must be square over positions");
    if (static_cast<int>(valid.size()) != B * L) throw DimensionError("padding mask size mismatch");

    ImportanceScores<T> out;
    out.scores = Tensor<T>({B, L});
    const T* w = weights.data();
    for (int b = 0; b < B; ++b) {
        for (int q = 0; q < L; ++q) {
            if (!valid[static_cast<std::size_t>(b) * L + q]) continue;
            T acc = T(0);
            for (int h = 0; h < H; ++h) {
                const T* row = w + ((static_cast<std::size_t>(b) * H + h) * L + q) * L;
                T best = row[0];
                for (int d = 1; d < L; ++d) best = std::max(best, row[d]);
                acc += best;
            }
            out.scores.at(b, q) = acc / T(H);
        }
    }
    return out;
}

/// K = clamp(ceil(score * E), 1, E); padded tokens get 0.
template <typename T>
ExpertCounts experts_per_token(const ImportanceScores<T>& scores, int num_experts,
                               const std::vector<std::uint8_t>& valid) {
    if (num_experts < 1) throw ConfigError("num_experts must be >= 1");
    const int B = scores.scores.dim(0), L = scores.scores.dim(1);
    if (static_cast<int>(valid.size()) != B * L) throw DimensionError("padding mask size mismatch");

    ExpertCounts out;
    out.counts = Tensor<int>({B, L});
    for (int b = 0; b < B; ++b) {
        for (int q = 0; q < L; ++q) {
            if (!valid[static_cast<std::size_t>(b) * L + q]) continue;
            const double raw = std::ceil(double(scores.scores.at(b, q)) * num_experts);
            int k = static_cast<int>(raw);
            k = std::clamp(k, 1, num_experts);
            out.counts.at(b, q) = k;
        }
    }
    return out;
}

} // namespace damoe
