#pragma once

#include <cstdint>
#include <vector>

#include "damoe/error.hpp"
#include "damoe/ops.hpp"
#include "damoe/tensor.hpp"

namespace damoe {

/// Projection weights for multi-head self-attention. Per-head projections are
/// packed column-blockwise into [d_model, d_model] matrices.
template <typename T>
struct AttentionParams {
    int heads = 1;
    Tensor<T> wq, bq;
    Tensor<T> wk, bk;
    Tensor<T> wv, bv;
    Tensor<T> wo, bo;
};

template <typename T>
struct AttentionOutput {
    Tensor<T> output;  // [B, L, d_model]
    Tensor<T> weights; // [B, H, L, L], post-softmax, post-masking
};

/// Multi-head self-attention over a [B, L, d_model] input. The attention
/// weight tensor is part of the result; the router consumes it downstream.
template <typename T>
AttentionOutput<T> mhsa_forward(const Tensor<T>& x, const AttentionParams<T>& params,
                                const std::vector<std::uint8_t>& valid, bool causal = false) {
    if (x.rank() != 3) throw DimensionError("mhsa_forward expects [B, L, d_model]");
    const int B = x.dim(0), L = x.dim(1), d = x.dim(2);
    if (d % params.heads != 0)
        throw ConfigError("d_model " + std::to_string(d) + " not divisible by " +
                          std::to_string(params.heads) + " heads");
    if (params.wq.rank() != 2 || params.wq.dim(0) != d || params.wq.dim(1) != d)
        throw DimensionError("attention projection shape mismatch");
    if (static_cast<int>(valid.size()) != B * L) throw DimensionError("padding mask size mismatch");

    const Tensor<T> flat({B * L, d}, std::vector<T>(x.data(), x.data() + x.size()));
    auto project = [&](const Tensor<T>& w, const Tensor<T>& b) {
        Tensor<T> p = matmul(flat, w);
        for (int r = 0; r < B * L; ++r)
            for (int c = 0; c < d; ++c) p.at(r, c) += b[static_cast<std::size_t>(c)];
        return p;
    };
    const Tensor<T> q = project(params.wq, params.bq);
    const Tensor<T> k = project(params.wk, params.bk);
    const Tensor<T> v = project(params.wv, params.bv);

    AttentionCore<T> core = attention_core(q, k, v, B, params.heads, L, valid, causal);
    Tensor<T> out = matmul(core.context, params.wo);
    for (int r = 0; r < B * L; ++r)
        for (int c = 0; c < d; ++c) out.at(r, c) += params.bo[static_cast<std::size_t>(c)];

    AttentionOutput<T> result;
    result.output = Tensor<T>({B, L, d}, std::vector<T>(out.data(), out.data() + out.size()));
    result.weights = std::move(core.weights);
    return result;
}

template <typename T>
AttentionParams<T> init_attention_params(int d_model, int heads, Rng& rng) {
    AttentionParams<T> p;
    p.heads = heads;
    const double stddev = 1.0 / std::sqrt(double(d_model));
    p.wq = random_truncated_normal<T>({d_model, d_model}, rng, stddev);
    p.wk = random_truncated_normal<T>({d_model, d_model}, rng, stddev);
    p.wv = random_truncated_normal<T>({d_model, d_model}, rng, stddev);
    p.wo = random_truncated_normal<T>({d_model, d_model}, rng, stddev);
    p.bq = Tensor<T>({d_model});
    p.bk = Tensor<T>({d_model});
    p.bv = Tensor<T>({d_model});
    p.bo = Tensor<T>({d_model});
    return p;
}

} // namespace damoe
