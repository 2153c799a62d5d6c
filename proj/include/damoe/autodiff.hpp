#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "damoe/error.hpp"
#include "damoe/ops.hpp"
#include "damoe/tensor.hpp"

namespace damoe {

/// A named, trainable tensor. Gradients accumulate here across backward calls
/// until zero_grad is invoked.
template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Param() = default;
    Param(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { std::fill(grad.data(), grad.data() + grad.size(), T(0)); }
};

template <typename T>
class Graph;

/// Handle to a node on a graph's tape.
template <typename T>
struct Var {
    Graph<T>* graph = nullptr;
    int id = -1;

    const Tensor<T>& value() const { return graph->value(id); }
};

/// Reverse-mode tape over whole-tensor operations. A graph is built per
/// forward pass and must stay confined to one thread.
template <typename T>
class Graph {
public:
    const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].val; }

    /// Gradient of the last backward's loss w.r.t. this node (zeros if unreached).
    Tensor<T> grad(Var<T> v) const {
        const Node& n = nodes_[static_cast<std::size_t>(v.id)];
        if (n.grad.empty()) return Tensor<T>(n.val.shape());
        return n.grad;
    }

    /// Auxiliary forward output of an op (attention keeps its weights here).
    const Tensor<T>& aux(Var<T> v) const { return nodes_[static_cast<std::size_t>(v.id)].aux; }

    Var<T> input(Tensor<T> value, bool requires_grad = false) {
        return make_leaf(std::move(value), requires_grad, nullptr);
    }

    Var<T> param(Param<T>& p) { return make_leaf(p.value, true, &p); }

    /// Runs the pullbacks in reverse tape order and accumulates parameter
    /// gradients. The loss must be scalar.
    void backward(Var<T> loss) {
        if (loss.graph != this) throw ContractError("backward: var belongs to another graph");
        Node& ln = node(loss.id);
        if (ln.val.size() != 1) throw ContractError("backward requires a scalar loss");
        if (!ln.needs_grad) return;
        grad_buf(loss.id)[0] = T(1);
        for (int id = loss.id; id >= 0; --id) {
            Node& n = node(id);
            if (!n.needs_grad || n.grad.empty() || !n.pull) continue;
            n.pull(*this, id);
        }
        for (int id : param_leaves_) {
            Node& n = node(id);
            if (n.grad.empty()) continue;
            Tensor<T>& pg = n.bound->grad;
            for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
        }
    }

    std::size_t num_nodes() const { return nodes_.size(); }

    // -- operations ---------------------------------------------------------

    Var<T> matmul(Var<T> a, Var<T> b) {
        const Tensor<T>& av = value(a.id);
        const Tensor<T>& bv = value(b.id);
        Tensor<T> c = damoe::matmul(av, bv);
        return make(std::move(c), {a.id, b.id}, [](Graph& g, int id) {
            Node& n = g.node(id);
            const int ai = n.parents[0], bi = n.parents[1];
            const Tensor<T>& av = g.value(ai);
            const Tensor<T>& bv = g.value(bi);
            const int m = av.dim(0), k = av.dim(1), nn = bv.dim(1);
            if (g.wants(ai))
                matmul_nt_into(n.grad.data(), bv.data(), g.grad_buf(ai).data(), m, nn, k, true);
            if (g.wants(bi))
                matmul_tn_into(av.data(), n.grad.data(), g.grad_buf(bi).data(), k, m, nn, true);
        });
    }

    /// a[m,k] * b[n,k]^T; the layout used by the router, whose weights are [E, d].
    Var<T> matmul_nt(Var<T> a, Var<T> b) {
        Tensor<T> c = damoe::matmul_nt(value(a.id), value(b.id));
        return make(std::move(c), {a.id, b.id}, [](Graph& g, int id) {
            Node& n = g.node(id);
            const int ai = n.parents[0], bi = n.parents[1];
            const Tensor<T>& av = g.value(ai);
            const Tensor<T>& bv = g.value(bi);
            const int m = av.dim(0), k = av.dim(1), nn = bv.dim(0);
            if (g.wants(ai))
                matmul_nn_into(n.grad.data(), bv.data(), g.grad_buf(ai).data(), m, nn, k, true);
            if (g.wants(bi))
                matmul_tn_into(n.grad.data(), av.data(), g.grad_buf(bi).data(), nn, m, k, true);
        });
    }

    Var<T> add(Var<T> a, Var<T> b) {
        const Tensor<T>& av = value(a.id);
        const Tensor<T>& bv = value(b.id);
        if (!av.same_shape(bv)) throw DimensionError("add shape mismatch");
        Tensor<T> c(av.shape());
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = av[i] + bv[i];
        return make(std::move(c), {a.id, b.id}, [](Graph& g, int id) {
            Node& n = g.node(id);
            for (int p : n.parents) {
                if (!g.wants(p)) continue;
                Tensor<T>& pg = g.grad_buf(p);
                for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
            }
        });
    }

    /// Adds a length-n vector to every row of an [m, n] tensor.
    Var<T> add_rowvec(Var<T> a, Var<T> b) {
        const Tensor<T>& av = value(a.id);
        const Tensor<T>& bv = value(b.id);
        const int n = av.dim(av.rank() - 1);
        if (static_cast<int>(bv.size()) != n) throw DimensionError("add_rowvec width mismatch");
        Tensor<T> c = av;
        const std::size_t rows = av.size() / static_cast<std::size_t>(n);
        for (std::size_t r = 0; r < rows; ++r)
            for (int j = 0; j < n; ++j) c[r * n + j] += bv[static_cast<std::size_t>(j)];
        return make(std::move(c), {a.id, b.id}, [](Graph& g, int id) {
            Node& n = g.node(id);
            const int ai = n.parents[0], bi = n.parents[1];
            const int w = g.value(bi).size();
            const std::size_t rows = n.grad.size() / static_cast<std::size_t>(w);
            if (g.wants(ai)) {
                Tensor<T>& ag = g.grad_buf(ai);
                for (std::size_t i = 0; i < ag.size(); ++i) ag[i] += n.grad[i];
            }
            if (g.wants(bi)) {
                Tensor<T>& bg = g.grad_buf(bi);
                for (std::size_t r = 0; r < rows; ++r)
                    for (int j = 0; j < w; ++j) bg[static_cast<std::size_t>(j)] += n.grad[r * w + j];
            }
        });
    }

    Var<T> scale(Var<T> a, T factor) {
        const Tensor<T>& av = value(a.id);
        Tensor<T> c(av.shape());
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = av[i] * factor;
        return make(std::move(c), {a.id}, [factor](Graph& g, int id) {
            Node& n = g.node(id);
            if (!g.wants(n.parents[0])) return;
            Tensor<T>& pg = g.grad_buf(n.parents[0]);
            for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += factor * n.grad[i];
        });
    }

    Var<T> activation(Var<T> a, Activation act) {
        const Tensor<T>& av = value(a.id);
        Tensor<T> c = av;
        apply_activation(c.data(), c.size(), act);
        return make(std::move(c), {a.id}, [act](Graph& g, int id) {
            Node& n = g.node(id);
            const int p = n.parents[0];
            if (!g.wants(p)) return;
            const Tensor<T>& x = g.value(p);
            Tensor<T>& pg = g.grad_buf(p);
            if (act == Activation::relu) {
                for (std::size_t i = 0; i < pg.size(); ++i)
                    if (x[i] > T(0)) pg[i] += n.grad[i];
            } else {
                for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += gelu_grad_scalar(x[i]) * n.grad[i];
            }
        });
    }

    Var<T> relu(Var<T> a) { return activation(a, Activation::relu); }

    Var<T> layernorm(Var<T> x, Var<T> gain, Var<T> bias) {
        Tensor<T> y = damoe::layernorm(value(x.id), value(gain.id), value(bias.id));
        return make(std::move(y), {x.id, gain.id, bias.id}, [](Graph& g, int id) {
            Node& node_ = g.node(id);
            const int xi = node_.parents[0], gi = node_.parents[1], bi = node_.parents[2];
            const Tensor<T>& x = g.value(xi);
            const Tensor<T>& gain = g.value(gi);
            const int n = x.dim(x.rank() - 1);
            const std::size_t rows = x.size() / static_cast<std::size_t>(n);
            const bool wx = g.wants(xi), wg = g.wants(gi), wb = g.wants(bi);
            std::vector<T> xhat(static_cast<std::size_t>(n));
            for (std::size_t r = 0; r < rows; ++r) {
                const T* xr = x.data() + r * n;
                const T* dy = node_.grad.data() + r * n;
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
                for (int i = 0; i < n; ++i) xhat[static_cast<std::size_t>(i)] = (xr[i] - mean) * inv;
                if (wg) {
                    Tensor<T>& gg = g.grad_buf(gi);
                    for (int i = 0; i < n; ++i) gg[static_cast<std::size_t>(i)] += dy[i] * xhat[static_cast<std::size_t>(i)];
                }
                if (wb) {
                    Tensor<T>& bg = g.grad_buf(bi);
                    for (int i = 0; i < n; ++i) bg[static_cast<std::size_t>(i)] += dy[i];
                }
                if (wx) {
                    T mean_dyh = 0, mean_dyh_xhat = 0;
                    for (int i = 0; i < n; ++i) {
                        const T dyh = dy[i] * gain[static_cast<std::size_t>(i)];
                        mean_dyh += dyh;
                        mean_dyh_xhat += dyh * xhat[static_cast<std::size_t>(i)];
                    }
                    mean_dyh /= T(n);
                    mean_dyh_xhat /= T(n);
                    Tensor<T>& xg = g.grad_buf(xi);
                    T* dx = xg.data() + r * n;
                    for (int i = 0; i < n; ++i) {
                        const T dyh = dy[i] * gain[static_cast<std::size_t>(i)];
                        dx[i] += inv * (dyh - mean_dyh - xhat[static_cast<std::size_t>(i)] * mean_dyh_xhat);
                    }
                }
            }
        });
    }

    Var<T> softmax_lastdim(Var<T> x) {
        const Tensor<T>& xv = value(x.id);
        Tensor<T> y = damoe::softmax(xv, xv.rank() - 1);
        return make(std::move(y), {x.id}, [](Graph& g, int id) {
            Node& n = g.node(id);
            const int p = n.parents[0];
            if (!g.wants(p)) return;
            const Tensor<T>& y = n.val;
            const int w = y.dim(y.rank() - 1);
            const std::size_t rows = y.size() / static_cast<std::size_t>(w);
            Tensor<T>& pg = g.grad_buf(p);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* yr = y.data() + r * w;
                const T* dy = n.grad.data() + r * w;
                T dot = 0;
                for (int j = 0; j < w; ++j) dot += dy[j] * yr[j];
                T* dx = pg.data() + r * w;
                for (int j = 0; j < w; ++j) dx[j] += yr[j] * (dy[j] - dot);
            }
        });
    }

    /// Mean negative log-likelihood over rows whose target is >= 0.
    Var<T> cross_entropy_mean(Var<T> logits, std::vector<int> targets) {
        const Tensor<T>& lv = value(logits.id);
        if (lv.rank() != 2) throw DimensionError("cross_entropy_mean expects 2-D logits");
        const int rows = lv.dim(0), classes = lv.dim(1);
        if (static_cast<int>(targets.size()) != rows)
            throw DimensionError("cross_entropy_mean target count mismatch");
        Tensor<T> probs(lv.shape());
        T total = 0;
        int live = 0;
        for (int r = 0; r < rows; ++r) {
            const int label = targets[static_cast<std::size_t>(r)];
            const T* row = lv.data() + static_cast<std::size_t>(r) * classes;
            T* prow = probs.data() + static_cast<std::size_t>(r) * classes;
            T mx = row[0];
            for (int c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
            T sum = 0;
            for (int c = 0; c < classes; ++c) sum += std::exp(row[c] - mx);
            const T lse = mx + std::log(sum);
            for (int c = 0; c < classes; ++c) prow[c] = std::exp(row[c] - lse);
            if (label < 0) continue;
            if (label >= classes) throw IndexError("cross_entropy_mean label out of range");
            total += lse - row[label];
            ++live;
        }
        if (live == 0) throw ContractError("cross_entropy_mean: no live targets");
        Tensor<T> loss({1});
        loss[0] = total / T(live);
        Var<T> out = make(std::move(loss), {logits.id},
                          [targets = std::move(targets), live](Graph& g, int id) {
                              Node& n = g.node(id);
                              const int p = n.parents[0];
                              if (!g.wants(p)) return;
                              const Tensor<T>& probs = n.aux;
                              const int classes = probs.dim(1);
                              const T upstream = n.grad[0] / T(live);
                              Tensor<T>& pg = g.grad_buf(p);
                              for (std::size_t r = 0; r < targets.size(); ++r) {
                                  const int label = targets[r];
                                  if (label < 0) continue;
                                  T* dx = pg.data() + r * classes;
                                  const T* pr = probs.data() + r * classes;
                                  for (int c = 0; c < classes; ++c) dx[c] += upstream * pr[c];
                                  dx[label] -= upstream;
                              }
                          });
        node(out.id).aux = std::move(probs);
        return out;
    }

    /// Gathers rows of x by index; doubles as embedding lookup.
    Var<T> rows_gather(Var<T> x, std::vector<int> ids) {
        const Tensor<T>& xv = value(x.id);
        if (xv.rank() != 2) throw DimensionError("rows_gather expects a 2-D source");
        const int m = xv.dim(0), d = xv.dim(1);
        Tensor<T> y({static_cast<int>(ids.size()), d});
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const int r = ids[i];
            if (r < 0 || r >= m) throw IndexError("rows_gather index " + std::to_string(r) + " out of range");
            std::copy_n(xv.data() + static_cast<std::size_t>(r) * d, d, y.data() + i * d);
        }
        return make(std::move(y), {x.id}, [ids = std::move(ids)](Graph& g, int id) {
            Node& n = g.node(id);
            const int p = n.parents[0];
            if (!g.wants(p)) return;
            const int d = n.val.dim(1);
            Tensor<T>& pg = g.grad_buf(p);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                T* dst = pg.data() + static_cast<std::size_t>(ids[i]) * d;
                const T* src = n.grad.data() + i * d;
                for (int c = 0; c < d; ++c) dst[c] += src[c];
            }
        });
    }

    /// Scatters rows of x into a zero [rows, d] tensor, adding on collisions.
    Var<T> rows_scatter_add(Var<T> x, std::vector<int> ids, int rows) {
        const Tensor<T>& xv = value(x.id);
        if (xv.rank() != 2 || static_cast<int>(ids.size()) != xv.dim(0))
            throw DimensionError("rows_scatter_add shape mismatch");
        const int d = xv.dim(1);
        Tensor<T> y({rows, d});
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const int r = ids[i];
            if (r < 0 || r >= rows) throw IndexError("rows_scatter_add index out of range");
            T* dst = y.data() + static_cast<std::size_t>(r) * d;
            const T* src = xv.data() + i * d;
            for (int c = 0; c < d; ++c) dst[c] += src[c];
        }
        return make(std::move(y), {x.id}, [ids = std::move(ids)](Graph& g, int id) {
            Node& n = g.node(id);
            const int p = n.parents[0];
            if (!g.wants(p)) return;
            const int d = n.val.dim(1);
            Tensor<T>& pg = g.grad_buf(p);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                const T* src = n.grad.data() + static_cast<std::size_t>(ids[i]) * d;
                T* dst = pg.data() + i * d;
                for (int c = 0; c < d; ++c) dst[c] += src[c];
            }
        });
    }

    /// Picks scalar entries (row, col) out of a 2-D tensor into a vector.
    Var<T> gather_elements(Var<T> x, std::vector<std::pair<int, int>> at) {
        const Tensor<T>& xv = value(x.id);
        if (xv.rank() != 2) throw DimensionError("gather_elements expects a 2-D source");
        Tensor<T> y({static_cast<int>(at.size())});
        for (std::size_t i = 0; i < at.size(); ++i) y[i] = xv.at(at[i].first, at[i].second);
        return make(std::move(y), {x.id}, [at = std::move(at)](Graph& g, int id) {
            Node& n = g.node(id);
            const int p = n.parents[0];
            if (!g.wants(p)) return;
            Tensor<T>& pg = g.grad_buf(p);
            const int w = pg.dim(1);
            for (std::size_t i = 0; i < at.size(); ++i)
                pg[static_cast<std::size_t>(at[i].first) * w + at[i].second] += n.grad[i];
        });
    }

    /// Multiplies row i of x by s[i].
    Var<T> scale_rows(Var<T> x, Var<T> s) {
        const Tensor<T>& xv = value(x.id);
        const Tensor<T>& sv = value(s.id);
        if (xv.rank() != 2 || static_cast<int>(sv.size()) != xv.dim(0))
            throw DimensionError("scale_rows shape mismatch");
        const int d = xv.dim(1);
        Tensor<T> y(xv.shape());
        for (int r = 0; r < xv.dim(0); ++r) {
            const T f = sv[static_cast<std::size_t>(r)];
            for (int c = 0; c < d; ++c) y.at(r, c) = f * xv.at(r, c);
        }
        return make(std::move(y), {x.id, s.id}, [](Graph& g, int id) {
            Node& n = g.node(id);
            const int xi = n.parents[0], si = n.parents[1];
            const Tensor<T>& x = g.value(xi);
            const Tensor<T>& s = g.value(si);
            const int rows = x.dim(0), d = x.dim(1);
            if (g.wants(xi)) {
                Tensor<T>& xg = g.grad_buf(xi);
                for (int r = 0; r < rows; ++r) {
                    const T f = s[static_cast<std::size_t>(r)];
                    for (int c = 0; c < d; ++c) xg.at(r, c) += f * n.grad.at(r, c);
                }
            }
            if (g.wants(si)) {
                Tensor<T>& sg = g.grad_buf(si);
                for (int r = 0; r < rows; ++r) {
                    T acc = 0;
                    for (int c = 0; c < d; ++c) acc += n.grad.at(r, c) * x.at(r, c);
                    sg[static_cast<std::size_t>(r)] += acc;
                }
            }
        });
    }

    /// Mean over valid positions of each sequence: [B*L, d] -> [B, d].
    Var<T> masked_mean_pool(Var<T> x, std::vector<std::uint8_t> valid, int B, int L) {
        const Tensor<T>& xv = value(x.id);
        if (xv.dim(0) != B * L || static_cast<int>(valid.size()) != B * L)
            throw DimensionError("masked_mean_pool shape mismatch");
        const int d = xv.dim(1);
        Tensor<T> y({B, d});
        std::vector<int> counts(static_cast<std::size_t>(B), 0);
        for (int b = 0; b < B; ++b) {
            for (int i = 0; i < L; ++i) {
                if (!valid[static_cast<std::size_t>(b * L + i)]) continue;
                ++counts[static_cast<std::size_t>(b)];
                for (int c = 0; c < d; ++c) y.at(b, c) += xv.at(b * L + i, c);
            }
            if (counts[static_cast<std::size_t>(b)] == 0)
                throw ContractError("masked_mean_pool: sequence with no valid positions");
            for (int c = 0; c < d; ++c) y.at(b, c) /= T(counts[static_cast<std::size_t>(b)]);
        }
        return make(std::move(y), {x.id},
                    [valid = std::move(valid), counts = std::move(counts), B, L](Graph& g, int id) {
                        Node& n = g.node(id);
                        const int p = n.parents[0];
                        if (!g.wants(p)) return;
                        const int d = n.val.dim(1);
                        Tensor<T>& pg = g.grad_buf(p);
                        for (int b = 0; b < B; ++b) {
                            const T inv = T(1) / T(counts[static_cast<std::size_t>(b)]);
                            for (int i = 0; i < L; ++i) {
                                if (!valid[static_cast<std::size_t>(b * L + i)]) continue;
                                for (int c = 0; c < d; ++c)
                                    pg.at(b * L + i, c) += inv * n.grad.at(b, c);
                            }
                        }
                    });
    }

    Var<T> sum(Var<T> x) {
        const Tensor<T>& xv = value(x.id);
        Tensor<T> y({1});
        for (std::size_t i = 0; i < xv.size(); ++i) y[0] += xv[i];
        return make(std::move(y), {x.id}, [](Graph& g, int id) {
            Node& n = g.node(id);
            const int p = n.parents[0];
            if (!g.wants(p)) return;
            Tensor<T>& pg = g.grad_buf(p);
            const T up = n.grad[0];
            for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += up;
        });
    }

    /// Elementwise product with a constant tensor of the same shape.
    Var<T> mul_const(Var<T> x, Tensor<T> w) {
        const Tensor<T>& xv = value(x.id);
        if (!xv.same_shape(w)) throw DimensionError("mul_const shape mismatch");
        Tensor<T> y(xv.shape());
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * w[i];
        return make(std::move(y), {x.id}, [w = std::move(w)](Graph& g, int id) {
            Node& n = g.node(id);
            const int p = n.parents[0];
            if (!g.wants(p)) return;
            Tensor<T>& pg = g.grad_buf(p);
            for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += w[i] * n.grad[i];
        });
    }

    /// Elementwise reciprocal.
    Var<T> recip(Var<T> x) {
        const Tensor<T>& xv = value(x.id);
        Tensor<T> y(xv.shape());
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = T(1) / xv[i];
        return make(std::move(y), {x.id}, [](Graph& g, int id) {
            Node& n = g.node(id);
            const int p = n.parents[0];
            if (!g.wants(p)) return;
            const Tensor<T>& y = n.val;
            Tensor<T>& pg = g.grad_buf(p);
            for (std::size_t i = 0; i < pg.size(); ++i) pg[i] -= y[i] * y[i] * n.grad[i];
        });
    }

    /// Same data, new shape.
    Var<T> reshape(Var<T> x, Shape shape) {
        const Tensor<T>& xv = value(x.id);
        if (shape_numel(shape) != xv.size()) throw DimensionError("reshape element count mismatch");
        Tensor<T> y(std::move(shape), std::vector<T>(xv.data(), xv.data() + xv.size()));
        return make(std::move(y), {x.id}, [](Graph& g, int id) {
            Node& n = g.node(id);
            const int p = n.parents[0];
            if (!g.wants(p)) return;
            Tensor<T>& pg = g.grad_buf(p);
            for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
        });
    }

    /// Frobenius inner product with a constant weight tensor -> scalar.
    Var<T> dot_const(Var<T> x, Tensor<T> w) {
        const Tensor<T>& xv = value(x.id);
        if (!xv.same_shape(w)) throw DimensionError("dot_const shape mismatch");
        Tensor<T> y({1});
        for (std::size_t i = 0; i < xv.size(); ++i) y[0] += xv[i] * w[i];
        return make(std::move(y), {x.id}, [w = std::move(w)](Graph& g, int id) {
            Node& n = g.node(id);
            const int p = n.parents[0];
            if (!g.wants(p)) return;
            Tensor<T>& pg = g.grad_buf(p);
            const T up = n.grad[0];
            for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += up * w[i];
        });
    }

    /// Multi-head scaled dot-product attention over projected q/k/v.
    /// The post-softmax weights [B, H, L, L] are kept as the node's aux output.
    Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int B, int H, int L,
                     std::vector<std::uint8_t> valid, bool causal) {
        AttentionCore<T> core = attention_core(value(q.id), value(k.id), value(v.id), B, H, L, valid, causal);
        // Disallowed keys carry exactly zero weight, so the pullback can rely
        // on the stored weights alone and needs no mask.
        Var<T> out = make(std::move(core.context), {q.id, k.id, v.id},
                          [B, H, L, causal](Graph& g, int id) { g.attention_pull(id, B, H, L, causal); });
        node(out.id).aux = std::move(core.weights);
        return out;
    }

private:
    struct Node {
        Tensor<T> val;
        Tensor<T> grad;
        Tensor<T> aux;
        std::vector<int> parents;
        std::function<void(Graph&, int)> pull;
        Param<T>* bound = nullptr;
        bool needs_grad = false;
    };

    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    bool wants(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    Tensor<T>& grad_buf(int id) {
        Node& n = node(id);
        if (n.grad.empty()) n.grad = Tensor<T>(n.val.shape());
        return n.grad;
    }

    Var<T> make_leaf(Tensor<T> value, bool requires_grad, Param<T>* bound) {
        Node n;
        n.val = std::move(value);
        n.needs_grad = requires_grad;
        n.bound = bound;
        nodes_.push_back(std::move(n));
        const int id = static_cast<int>(nodes_.size()) - 1;
        if (bound) param_leaves_.push_back(id);
        return Var<T>{this, id};
    }

    Var<T> make(Tensor<T> value, std::vector<int> parents, std::function<void(Graph&, int)> pull) {
        Node n;
        n.val = std::move(value);
        n.parents = std::move(parents);
        for (int p : n.parents)
            if (wants(p)) n.needs_grad = true;
        if (n.needs_grad) n.pull = std::move(pull);
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    void attention_pull(int id, int B, int H, int L, bool causal) {
        Node& n = node(id);
        const int qi = n.parents[0], ki = n.parents[1], vi = n.parents[2];
        const Tensor<T>& q = value(qi);
        const Tensor<T>& k = value(ki);
        const Tensor<T>& v = value(vi);
        const Tensor<T>& w = n.aux;
        const int d = q.dim(1);
        const int dh = d / H;
        const T scale = T(1) / std::sqrt(T(dh));
        Tensor<T>& dq = grad_buf(qi);
        Tensor<T>& dk = grad_buf(ki);
        Tensor<T>& dv = grad_buf(vi);
        std::vector<T> dwrow(static_cast<std::size_t>(L));
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                const T* wbase = w.data() + ((static_cast<std::size_t>(b) * H + h) * L) * L;
                for (int i = 0; i < L; ++i) {
                    const T* wrow = wbase + static_cast<std::size_t>(i) * L;
                    const T* dctx = n.grad.data() + static_cast<std::size_t>(b * L + i) * d + h * dh;
                    const int limit = causal ? i + 1 : L;
                    // dw and softmax jacobian restricted to allowed keys (w == 0 elsewhere)
                    T dot = 0;
                    for (int j = 0; j < limit; ++j) {
                        if (wrow[j] == T(0)) {
                            dwrow[static_cast<std::size_t>(j)] = T(0);
                            continue;
                        }
                        const T* vj = v.data() + static_cast<std::size_t>(b * L + j) * d + h * dh;
                        T acc = 0;
                        for (int c = 0; c < dh; ++c) acc += dctx[c] * vj[c];
                        dwrow[static_cast<std::size_t>(j)] = acc;
                        dot += acc * wrow[j];
                    }
                    const T* qrow = q.data() + static_cast<std::size_t>(b * L + i) * d + h * dh;
                    T* dqrow = dq.data() + static_cast<std::size_t>(b * L + i) * d + h * dh;
                    for (int j = 0; j < limit; ++j) {
                        if (wrow[j] == T(0)) continue;
                        const T ds = wrow[j] * (dwrow[static_cast<std::size_t>(j)] - dot) * scale;
                        const T* krow = k.data() + static_cast<std::size_t>(b * L + j) * d + h * dh;
                        T* dkrow = dk.data() + static_cast<std::size_t>(b * L + j) * d + h * dh;
                        T* dvrow = dv.data() + static_cast<std::size_t>(b * L + j) * d + h * dh;
                        const T wij = wrow[j];
                        for (int c = 0; c < dh; ++c) {
                            dqrow[c] += ds * krow[c];
                            dkrow[c] += ds * qrow[c];
                            dvrow[c] += wij * dctx[c];
                        }
                    }
                }
            }
        }
    }

    std::vector<Node> nodes_;
    std::vector<int> param_leaves_;
};

} // namespace damoe
