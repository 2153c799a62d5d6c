#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "damoe/error.hpp"
#include "damoe/tensor.hpp"

namespace damoe {

constexpr double kLayerNormEps = 1e-5;

// ---------------------------------------------------------------------------
// Matrix products. A, B, C are row-major 2-D tensors. The three variants
// cover forward products and the transposed products needed by backward.
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] * B[k,n].
template <typename T>
void matmul_nn_into(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
    if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, T(0));
    for (int i = 0; i < m; ++i) {
        T* ci = c + static_cast<std::size_t>(i) * n;
        const T* ai = a + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const T aval = ai[p];
            const T* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += aval * bp[j];
        }
    }
}

/// C[m,n] = A[m,k] * B[n,k]^T.
template <typename T>
void matmul_nt_into(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
    for (int i = 0; i < m; ++i) {
        const T* ai = a + static_cast<std::size_t>(i) * k;
        T* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* bj = b + static_cast<std::size_t>(j) * k;
            T acc = 0;
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            if (accumulate)
                ci[j] += acc;
            else
                ci[j] = acc;
        }
    }
}

/// C[m,n] = A[k,m]^T * B[k,n].
template <typename T>
void matmul_tn_into(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
    if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, T(0));
    for (int p = 0; p < k; ++p) {
        const T* ap = a + static_cast<std::size_t>(p) * m;
        const T* bp = b + static_cast<std::size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const T aval = ap[i];
            T* ci = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += aval * bp[j];
        }
    }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw DimensionError("matmul expects 2-D tensors, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw DimensionError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    Tensor<T> c({a.dim(0), b.dim(1)});
    matmul_nn_into(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
    return c;
}

/// a[m,k] * b[n,k]^T without materializing the transpose.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw DimensionError("matmul_nt shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    Tensor<T> c({a.dim(0), b.dim(0)});
    matmul_nt_into(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(0));
    return c;
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// In-place stabilized softmax over a contiguous row of length n.
template <typename T>
void softmax_row(T* row, int n) {
    T mx = row[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, row[i]);
    T sum = 0;
    for (int i = 0; i < n; ++i) {
        row[i] = std::exp(row[i] - mx);
        sum += row[i];
    }
    const T inv = T(1) / sum;
    for (int i = 0; i < n; ++i) row[i] *= inv;
}

/// Softmax along an arbitrary axis (max-subtraction stabilized).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    if (axis < 0 || axis >= x.rank())
        throw DimensionError("softmax axis " + std::to_string(axis) + " invalid for shape " +
                             shape_str(x.shape()));
    Tensor<T> y = x;
    std::size_t inner = 1, outer = 1;
    for (int i = axis + 1; i < x.rank(); ++i) inner *= static_cast<std::size_t>(x.dim(i));
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(x.dim(i));
    const int n = x.dim(axis);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            T* base = y.data() + o * n * inner + in;
            T mx = base[0];
            for (int i = 1; i < n; ++i) mx = std::max(mx, base[i * inner]);
            T sum = 0;
            for (int i = 0; i < n; ++i) {
                T e = std::exp(base[i * inner] - mx);
                base[i * inner] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (int i = 0; i < n; ++i) base[i * inner] *= inv;
        }
    }
    return y;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
    if (x.rank() < 1) throw DimensionError("layernorm expects rank >= 1");
    const int n = x.dim(x.rank() - 1);
    if (static_cast<int>(gain.size()) != n || static_cast<int>(bias.size()) != n)
        throw DimensionError("layernorm gain/bias must match last axis extent " + std::to_string(n));
    Tensor<T> y(x.shape());
    const std::size_t rows = x.size() / static_cast<std::size_t>(n);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * n;
        T* yr = y.data() + r * n;
        T mean = 0;
        for (int i = 0; i < n; ++i) mean += xr[i];
        mean /= T(n);
        T var = 0;
        for (int i = 0; i < n; ++i) {
            const T d = xr[i] - mean;
            var += d * d;
        }
        var /= T(n);
        const T inv = T(1) / std::sqrt(var + T(kLayerNormEps));
        for (int i = 0; i < n; ++i) yr[i] = gain[static_cast<std::size_t>(i)] * (xr[i] - mean) * inv + bias[static_cast<std::size_t>(i)];
    }
    return y;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { relu, gelu };

template <typename T>
T gelu_scalar(T x) {
    const T c = T(0.7978845608028654); // sqrt(2/pi)
    const T u = c * (x + T(0.044715) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_grad_scalar(T x) {
    const T c = T(0.7978845608028654);
    const T u = c * (x + T(0.044715) * x * x * x);
    const T t = std::tanh(u);
    const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

template <typename T>
void apply_activation(T* data, std::size_t n, Activation act) {
    if (act == Activation::relu) {
        for (std::size_t i = 0; i < n; ++i) data[i] = data[i] > T(0) ? data[i] : T(0);
    } else {
        for (std::size_t i = 0; i < n; ++i) data[i] = gelu_scalar(data[i]);
    }
}

template <typename T>
void apply_activation(Tensor<T>& x, Activation act) {
    apply_activation(x.data(), x.size(), act);
}

// ---------------------------------------------------------------------------
// Cross entropy
// ---------------------------------------------------------------------------

/// Mean negative log-softmax probability of the target class.
/// Targets of -1 are ignored; at least one target must be live.
template <typename T>
T cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
    if (logits.rank() != 2) throw DimensionError("cross_entropy expects 2-D logits");
    const int rows = logits.dim(0), classes = logits.dim(1);
    if (static_cast<int>(targets.size()) != rows)
        throw DimensionError("cross_entropy target count does not match logit rows");
    T total = 0;
    int live = 0;
    for (int r = 0; r < rows; ++r) {
        const int label = targets[static_cast<std::size_t>(r)];
        if (label < 0) continue;
        if (label >= classes)
            throw IndexError("cross_entropy label " + std::to_string(label) + " out of range for " +
                             std::to_string(classes) + " classes");
        const T* row = logits.data() + static_cast<std::size_t>(r) * classes;
        T mx = row[0];
        for (int c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
        T sum = 0;
        for (int c = 0; c < classes; ++c) sum += std::exp(row[c] - mx);
        total += mx + std::log(sum) - row[label];
        ++live;
    }
    if (live == 0) throw ContractError("cross_entropy: no live targets");
    return total / T(live);
}

// ---------------------------------------------------------------------------
// Scaled dot-product attention core.
// q, k, v are [B*L, H*dh] with heads laid out as contiguous column blocks.
// Weights come back as [B, H, L, L]; disallowed keys hold exact zeros.
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionCore {
    Tensor<T> context; // [B*L, H*dh]
    Tensor<T> weights; // [B, H, L, L]
};

template <typename T>
AttentionCore<T> attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int B,
                                int H, int L, const std::vector<std::uint8_t>& valid, bool causal) {
    const int d = q.dim(1);
    const int dh = d / H;
    if (d % H != 0) throw ConfigError("model width not divisible by head count");
    if (q.dim(0) != B * L || !q.same_shape(k) || !q.same_shape(v))
        throw DimensionError("attention_core shape mismatch");
    if (static_cast<int>(valid.size()) != B * L)
        throw DimensionError("attention_core mask size mismatch");

    AttentionCore<T> out;
    out.context = Tensor<T>({B * L, d});
    out.weights = Tensor<T>({B, H, L, L});
    const T scale = T(1) / std::sqrt(T(dh));

    std::vector<T> row(static_cast<std::size_t>(L));
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
            T* wbase = out.weights.data() +
                       ((static_cast<std::size_t>(b) * H + h) * L) * L;
            for (int i = 0; i < L; ++i) {
                const T* qi = q.data() + static_cast<std::size_t>(b * L + i) * d + h * dh;
                const int limit = causal ? i + 1 : L;
                T mx = T(0);
                bool any = false;
                for (int j = 0; j < limit; ++j) {
                    if (!valid[static_cast<std::size_t>(b * L + j)]) continue;
                    const T* kj = k.data() + static_cast<std::size_t>(b * L + j) * d + h * dh;
                    T s = 0;
                    for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
                    s *= scale;
                    row[static_cast<std::size_t>(j)] = s;
                    mx = any ? std::max(mx, s) : s;
                    any = true;
                }
                T* wrow = wbase + static_cast<std::size_t>(i) * L;
                std::fill(wrow, wrow + L, T(0));
                if (!any) continue; // query over an empty key set; row stays zero
                T sum = 0;
                for (int j = 0; j < limit; ++j) {
                    if (!valid[static_cast<std::size_t>(b * L + j)]) continue;
                    const T e = std::exp(row[static_cast<std::size_t>(j)] - mx);
                    wrow[j] = e;
                    sum += e;
                }
                const T inv = T(1) / sum;
                T* ctx = out.context.data() + static_cast<std::size_t>(b * L + i) * d + h * dh;
                std::fill(ctx, ctx + dh, T(0));
                for (int j = 0; j < limit; ++j) {
                    if (wrow[j] == T(0)) continue;
                    wrow[j] *= inv;
                    const T w = wrow[j];
                    const T* vj = v.data() + static_cast<std::size_t>(b * L + j) * d + h * dh;
                    for (int c = 0; c < dh; ++c) ctx[c] += w * vj[c];
                }
            }
        }
    }
    return out;
}

} // namespace damoe
