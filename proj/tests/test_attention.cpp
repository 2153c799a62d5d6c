#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "damoe/attention.hpp"
#include "damoe/tensor.hpp"

using damoe::AttentionParams;
using damoe::Rng;
using damoe::Tensor;

namespace {

// Straight-line per-head reference: explicit loops, no shared kernels.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> reference_mhsa(const Tensor<T>& x, const AttentionParams<T>& p,
                                               const std::vector<std::uint8_t>& valid, bool causal) {
    const int B = x.dim(0), L = x.dim(1), d = x.dim(2);
    const int H = p.heads, dh = d / H;
    auto proj = [&](const Tensor<T>& w, const Tensor<T>& b, int b_i, int t, int c) {
        T acc = b[(std::size_t)c];
        for (int i = 0; i < d; ++i) acc += x.at(b_i, t, i) * w.at(i, c);
        return acc;
    };
    Tensor<T> weights({B, H, L, L});
    Tensor<T> out({B, L, d});
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
            for (int i = 0; i < L; ++i) {
                std::vector<double> scores(L, -1e300);
                bool any = false;
                for (int j = 0; j < L; ++j) {
                    if (causal && j > i) continue;
                    if (!valid[(std::size_t)(b * L + j)]) continue;
                    double s = 0;
                    for (int c = 0; c < dh; ++c)
                        s += double(proj(p.wq, p.bq, b, i, h * dh + c)) *
                             double(proj(p.wk, p.bk, b, j, h * dh + c));
                    scores[(std::size_t)j] = s / std::sqrt(double(dh));
                    any = true;
                }
                if (!any) continue;
                double mx = *std::max_element(scores.begin(), scores.end());
                double sum = 0;
                for (int j = 0; j < L; ++j)
                    if (scores[(std::size_t)j] > -1e299) sum += std::exp(scores[(std::size_t)j] - mx);
                for (int j = 0; j < L; ++j) {
                    if (scores[(std::size_t)j] <= -1e299) continue;
                    weights.at(b, h, i, j) = T(std::exp(scores[(std::size_t)j] - mx) / sum);
                }
            }
        }
    }
    // context then output projection
    for (int b = 0; b < B; ++b) {
        for (int i = 0; i < L; ++i) {
            std::vector<T> ctx((std::size_t)d, T(0));
            for (int h = 0; h < H; ++h)
                for (int j = 0; j < L; ++j) {
                    const T w = weights.at(b, h, i, j);
                    if (w == T(0)) continue;
                    for (int c = 0; c < dh; ++c)
                        ctx[(std::size_t)(h * dh + c)] += w * proj(p.wv, p.bv, b, j, h * dh + c);
                }
            for (int c = 0; c < d; ++c) {
                T acc = p.bo[(std::size_t)c];
                for (int i2 = 0; i2 < d; ++i2) acc += ctx[(std::size_t)i2] * p.wo.at(i2, c);
                out.at(b, i, c) = acc;
            }
        }
    }
    return {out, weights};
}

} // namespace

TEST_CASE("mhsa output and weight shapes") {
    Rng rng(11);
    const int B = 2, L = 3, d = 4, H = 2;
    auto p = damoe::init_attention_params<double>(d, H, rng);
    Tensor<double> x = damoe::random_normal<double>({B, L, d}, rng);
    std::vector<std::uint8_t> valid((std::size_t)(B * L), 1);
    auto r = damoe::mhsa_forward(x, p, valid);
    REQUIRE(r.output.shape() == std::vector<int>{B, L, d});
    REQUIRE(r.weights.shape() == std::vector<int>{B, H, L, L});
}

TEST_CASE("attention rows are distributions over allowed keys") {
    Rng rng(12);
    const int B = 2, L = 5, d = 8, H = 2;
    auto p = damoe::init_attention_params<double>(d, H, rng);
    Tensor<double> x = damoe::random_normal<double>({B, L, d}, rng);
    std::vector<std::uint8_t> valid((std::size_t)(B * L), 1);
    valid[3] = 0; // batch 0, position 3 padded
    auto r = damoe::mhsa_forward(x, p, valid);
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < H; ++h)
            for (int i = 0; i < L; ++i) {
                double sum = 0;
                for (int j = 0; j < L; ++j) {
                    const double w = r.weights.at(b, h, i, j);
                    REQUIRE(w >= 0.0);
                    if (b == 0 && j == 3) REQUIRE(w == 0.0); // exact zero on padding
                    sum += w;
                }
                REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-12));
            }
}

TEST_CASE("single valid key gives weight exactly 1") {
    Rng rng(13);
    const int B = 1, L = 4, d = 4, H = 2;
    auto p = damoe::init_attention_params<double>(d, H, rng);
    Tensor<double> x = damoe::random_normal<double>({B, L, d}, rng);
    std::vector<std::uint8_t> valid = {1, 0, 0, 0};
    auto r = damoe::mhsa_forward(x, p, valid);
    for (int h = 0; h < H; ++h) REQUIRE(r.weights.at(0, h, 0, 0) == 1.0);
}

TEST_CASE("causal mask zeroes future keys") {
    Rng rng(14);
    const int B = 1, L = 4, d = 4, H = 1;
    auto p = damoe::init_attention_params<double>(d, H, rng);
    Tensor<double> x = damoe::random_normal<double>({B, L, d}, rng);
    std::vector<std::uint8_t> valid((std::size_t)L, 1);
    auto r = damoe::mhsa_forward(x, p, valid, /*causal=*/true);
    for (int i = 0; i < L; ++i)
        for (int j = i + 1; j < L; ++j) REQUIRE(r.weights.at(0, 0, i, j) == 0.0);
    REQUIRE(r.weights.at(0, 0, 0, 0) == 1.0); // first token only sees itself
}

TEST_CASE("zero query/key projections give uniform attention") {
    Rng rng(15);
    const int B = 1, L = 4, d = 4, H = 2;
    auto p = damoe::init_attention_params<double>(d, H, rng);
    p.wq = Tensor<double>({d, d});
    p.wk = Tensor<double>({d, d});
    p.bq = Tensor<double>({d});
    p.bk = Tensor<double>({d});
    Tensor<double> x = damoe::random_normal<double>({B, L, d}, rng);
    std::vector<std::uint8_t> valid((std::size_t)L, 1);
    auto r = damoe::mhsa_forward(x, p, valid);
    for (int h = 0; h < H; ++h)
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < L; ++j) REQUIRE(r.weights.at(0, h, i, j) == 0.25);
}

TEST_CASE("mhsa matches straight-line reference") {
    Rng rng(16);
    const int B = 2, L = 6, d = 8, H = 2;
    auto p = damoe::init_attention_params<double>(d, H, rng);
    Tensor<double> x = damoe::random_normal<double>({B, L, d}, rng);
    std::vector<std::uint8_t> valid((std::size_t)(B * L), 1);
    valid[4] = valid[5] = 0;

    for (bool causal : {false, true}) {
        auto got = damoe::mhsa_forward(x, p, valid, causal);
        auto [ref_out, ref_w] = reference_mhsa(x, p, valid, causal);
        for (std::size_t i = 0; i < got.weights.size(); ++i)
            REQUIRE_THAT(got.weights[i], Catch::Matchers::WithinAbs(ref_w[i], 1e-10));
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < L; ++t) {
                if (!valid[(std::size_t)(b * L + t)]) continue;
                for (int c = 0; c < d; ++c)
                    REQUIRE_THAT(got.output.at(b, t, c),
                                 Catch::Matchers::WithinAbs(ref_out.at(b, t, c), 1e-10));
            }
    }
}

TEST_CASE("head count must divide model width") {
    Rng rng(17);
    auto p = damoe::init_attention_params<double>(4, 2, rng);
    p.heads = 3;
    Tensor<double> x = damoe::random_normal<double>({1, 2, 4}, rng);
    std::vector<std::uint8_t> valid = {1, 1};
    REQUIRE_THROWS_AS(damoe::mhsa_forward(x, p, valid), damoe::ConfigError);
}
