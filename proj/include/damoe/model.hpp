#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "damoe/attention.hpp"
#include "damoe/autodiff.hpp"
#include "damoe/error.hpp"
#include "damoe/moe.hpp"
#include "damoe/ops.hpp"
#include "damoe/router.hpp"
#include "damoe/tensor.hpp"

namespace damoe {

enum class RouterMode { dynamic, fixed };
enum class HeadKind { lm, classifier };

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 64;
    int d_ff = 256;
    int heads = 4;
    int blocks = 2;
    int experts = 4;
    int l_max = 128;
    double capacity_factor = 1.25;
    RouterMode router_mode = RouterMode::dynamic;
    int fixed_k = 1;
    HeadKind head = HeadKind::lm;
    int num_classes = 2;
    Activation activation = Activation::relu;
    bool causal = false;
    double aux_loss_weight = 0.0; // load-balance loss stays off unless asked for
    bool renorm_gates = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
        if (d_model < 1 || d_ff < 1 || blocks < 1 || l_max < 1) throw ConfigError("model dimensions must be positive");
        if (heads < 1 || d_model % heads != 0)
            throw ConfigError("d_model must be divisible by heads");
        if (experts < 1) throw ConfigError("experts must be >= 1");
        if (fixed_k < 1 || fixed_k > experts) throw ConfigError("fixed_k must lie in [1, experts]");
        if (capacity_factor <= 0.0) throw ConfigError("capacity_factor must be positive");
        if (head == HeadKind::classifier && num_classes < 2)
            throw ConfigError("classifier head needs >= 2 classes");
        if (aux_loss_weight < 0.0) throw ConfigError("aux_loss_weight must be >= 0");
    }
};

/// Per-block byproducts of one forward pass.
template <typename T>
struct BlockTrace {
    Tensor<T> attention; // [B, H, L, L]
    RoutingPlan<T> plan;
    MoEStats stats;
};

template <typename T>
struct ForwardResult {
    Var<T> logits;   // [B*L, vocab] for lm, [B, num_classes] for classifier
    Var<T> aux_loss; // scalar; graph == nullptr when aux loss is disabled
    std::vector<BlockTrace<T>> blocks;

    bool has_aux() const { return aux_loss.graph != nullptr; }
};

/// Encoder stack with MoE feed-forward blocks. Owns all parameters in a fixed
/// canonical order so optimizer state and checkpoints line up by index.
template <typename T>
class Model {
public:
    explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        build_params();
        init_params();
    }

    const ModelConfig& config() const { return cfg_; }
    std::vector<Param<T>>& params() { return params_; }
    const std::vector<Param<T>>& params() const { return params_; }

    Param<T>& param(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter " + name);
        return params_[it->second];
    }

    void zero_grad() {
        for (Param<T>& p : params_) p.zero_grad();
    }

    /// Builds the whole forward computation on g. ids are row-major [B, L];
    /// valid marks real (non-pad) positions.
    ForwardResult<T> forward(Graph<T>& g, const std::vector<int>& ids,
                             const std::vector<std::uint8_t>& valid, int B, int L) {
        if (static_cast<int>(ids.size()) != B * L || static_cast<int>(valid.size()) != B * L)
            throw DimensionError("forward: ids/mask size mismatch with B*L");
        if (L > cfg_.l_max) throw ConfigError("sequence length exceeds l_max");
        for (int id : ids)
            if (id < 0 || id >= cfg_.vocab_size) throw IndexError("token id out of range");

        std::vector<int> positions(static_cast<std::size_t>(B) * L);
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < L; ++i) positions[static_cast<std::size_t>(b) * L + i] = i;

        Var<T> x = g.add(g.rows_gather(g.param(param("embed.tok")), ids),
                         g.rows_gather(g.param(param("embed.pos")), positions));

        ForwardResult<T> result;
        Var<T> aux_sum{};
        for (int blk = 0; blk < cfg_.blocks; ++blk) {
            BlockTrace<T> trace;
            x = block_forward(g, x, blk, B, L, valid, trace, aux_sum);
            result.blocks.push_back(std::move(trace));
        }
        x = g.layernorm(x, g.param(param("final.ln.gain")), g.param(param("final.ln.bias")));

        if (cfg_.head == HeadKind::lm) {
            result.logits = g.add_rowvec(g.matmul(x, g.param(param("head.w"))), g.param(param("head.b")));
        } else {
            Var<T> pooled = g.masked_mean_pool(x, valid, B, L);
            result.logits = g.add_rowvec(g.matmul(pooled, g.param(param("head.w"))), g.param(param("head.b")));
        }
        if (aux_sum.graph != nullptr)
            result.aux_loss = g.scale(aux_sum, T(cfg_.aux_loss_weight / cfg_.blocks));
        return result;
    }

private:
    static std::string bname(int blk, const std::string& suffix) {
        return "block" + std::to_string(blk) + "." + suffix;
    }

    void add_param(const std::string& name, Shape shape) {
        index_[name] = params_.size();
        params_.emplace_back(name, Tensor<T>(std::move(shape)));
    }

    void build_params() {
        const int d = cfg_.d_model, ff = cfg_.d_ff, E = cfg_.experts;
        add_param("embed.tok", {cfg_.vocab_size, d});
        add_param("embed.pos", {cfg_.l_max, d});
        for (int blk = 0; blk < cfg_.blocks; ++blk) {
            add_param(bname(blk, "ln1.gain"), {d});
            add_param(bname(blk, "ln1.bias"), {d});
            for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
                add_param(bname(blk, w), {d, d});
            for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"})
                add_param(bname(blk, b), {d});
            add_param(bname(blk, "ln2.gain"), {d});
            add_param(bname(blk, "ln2.bias"), {d});
            add_param(bname(blk, "router.w"), {E, d});
            for (int e = 0; e < E; ++e) {
                add_param(bname(blk, "expert" + std::to_string(e) + ".w1"), {d, ff});
                add_param(bname(blk, "expert" + std::to_string(e) + ".b1"), {ff});
                add_param(bname(blk, "expert" + std::to_string(e) + ".w2"), {ff, d});
                add_param(bname(blk, "expert" + std::to_string(e) + ".b2"), {d});
            }
        }
        add_param("final.ln.gain", {d});
        add_param("final.ln.bias", {d});
        const int out = cfg_.head == HeadKind::lm ? cfg_.vocab_size : cfg_.num_classes;
        add_param("head.w", {cfg_.d_model, out});
        add_param("head.b", {out});
    }

    // Each parameter draws from its own derived seed stream, so experts start
    // distinct (symmetric experts never separate under top-K gradients) and
    // one parameter's init cannot shift another's.
    void init_params() {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Param<T>& p = params_[i];
            const std::string& n = p.name;
            if (n.ends_with("gain")) {
                p.value = Tensor<T>::ones(p.value.shape());
                continue;
            }
            if (p.value.rank() == 1) continue; // biases stay zero
            Rng rng(derive_seed(cfg_.seed, i));
            // fan-in: row width for the router (used as x * W^T), first extent
            // for ordinary [in, out] matrices, d_model for embedding tables
            double fan_in = p.value.dim(0);
            if (n.ends_with("router.w")) fan_in = p.value.dim(1);
            if (n == "embed.tok" || n == "embed.pos") fan_in = cfg_.d_model;
            p.value = random_truncated_normal<T>(p.value.shape(), rng, 1.0 / std::sqrt(fan_in));
        }
    }

    Var<T> block_forward(Graph<T>& g, Var<T> x, int blk, int B, int L,
                         const std::vector<std::uint8_t>& valid, BlockTrace<T>& trace,
                         Var<T>& aux_sum) {
        const int H = cfg_.heads, E = cfg_.experts;
        const int tokens = B * L;

        Var<T> h = g.layernorm(x, g.param(param(bname(blk, "ln1.gain"))),
                               g.param(param(bname(blk, "ln1.bias"))));
        Var<T> q = g.add_rowvec(g.matmul(h, g.param(param(bname(blk, "attn.wq")))),
                                g.param(param(bname(blk, "attn.bq"))));
        Var<T> k = g.add_rowvec(g.matmul(h, g.param(param(bname(blk, "attn.wk")))),
                                g.param(param(bname(blk, "attn.bk"))));
        Var<T> v = g.add_rowvec(g.matmul(h, g.param(param(bname(blk, "attn.wv")))),
                                g.param(param(bname(blk, "attn.bv"))));
        Var<T> ctx = g.attention(q, k, v, B, H, L, valid, cfg_.causal);
        trace.attention = g.aux(ctx);
        Var<T> attn_out = g.add_rowvec(g.matmul(ctx, g.param(param(bname(blk, "attn.wo")))),
                                       g.param(param(bname(blk, "attn.bo"))));
        Var<T> x2 = g.add(x, attn_out);

        Var<T> h2 = g.layernorm(x2, g.param(param(bname(blk, "ln2.gain"))),
                                g.param(param(bname(blk, "ln2.bias"))));

        // Routing decisions are made at value level (stop-gradient through the
        // importance/K path); gates re-enter the graph through the router
        // probabilities below.
        Param<T>& wr = param(bname(blk, "router.w"));
        RouterParams<T> rp{wr.value};
        const CapacityConfig cap{cfg_.capacity_factor};
        if (cfg_.router_mode == RouterMode::dynamic)
            trace.plan = route_dynamic(h2.value(), trace.attention, rp, cap, valid);
        else
            trace.plan = route_fixed(h2.value(), rp, cfg_.fixed_k, cap, valid);
        trace.stats = plan_stats(trace.plan);

        Var<T> probs = g.softmax_lastdim(g.matmul_nt(h2, g.param(wr)));
        Var<T> gate_src = probs;
        if (cfg_.renorm_gates) {
            // divide each token's gates by the sum of its selected probabilities
            Tensor<T> sel({tokens, E});
            for (int t = 0; t < tokens; ++t) {
                if (trace.plan.expert_index[static_cast<std::size_t>(t)].empty())
                    sel.at(t, 0) = T(1); // keep the row sum positive; never gathered
                else
                    for (int e : trace.plan.expert_index[static_cast<std::size_t>(t)]) sel.at(t, e) = T(1);
            }
            Var<T> sums = g.matmul(g.mul_const(probs, std::move(sel)),
                                   g.input(Tensor<T>::ones({E, 1})));
            Var<T> inv = g.recip(g.reshape(sums, {tokens}));
            gate_src = g.scale_rows(probs, inv);
        }

        Var<T> moe_out{};
        for (int e = 0; e < E; ++e) {
            std::vector<int> kept;
            std::vector<std::pair<int, int>> pairs;
            for (int t = 0; t < tokens; ++t)
                if (trace.plan.expert_mask.at(t, e)) {
                    kept.push_back(t);
                    pairs.emplace_back(t, e);
                }
            if (kept.empty()) continue;
            const std::string en = "expert" + std::to_string(e);
            Var<T> sub = g.rows_gather(h2, kept);
            Var<T> h1 = g.activation(g.add_rowvec(g.matmul(sub, g.param(param(bname(blk, en + ".w1")))),
                                                  g.param(param(bname(blk, en + ".b1")))),
                                     cfg_.activation);
            Var<T> y = g.add_rowvec(g.matmul(h1, g.param(param(bname(blk, en + ".w2")))),
                                    g.param(param(bname(blk, en + ".b2"))));
            Var<T> gated = g.scale_rows(y, g.gather_elements(gate_src, std::move(pairs)));
            Var<T> contrib = g.rows_scatter_add(gated, std::move(kept), tokens);
            moe_out = moe_out.graph ? g.add(moe_out, contrib) : contrib;
        }

        if (cfg_.aux_loss_weight > 0.0) {
            Var<T> block_aux = g.dot_const(probs, aux_loss_coefficients(trace.plan, valid));
            aux_sum = aux_sum.graph ? g.add(aux_sum, block_aux) : block_aux;
        }

        return moe_out.graph ? g.add(x2, moe_out) : x2;
    }

    /// Constant tensor W with dot(probs, W) = E * sum_e f_e * P_e over live tokens.
    Tensor<T> aux_loss_coefficients(const RoutingPlan<T>& plan, const std::vector<std::uint8_t>& valid) {
        const int tokens = plan.expert_mask.dim(0), E = plan.num_experts;
        int live = 0;
        double assigned = 0.0;
        std::vector<double> kept(static_cast<std::size_t>(E), 0.0);
        for (int t = 0; t < tokens; ++t) {
            if (!valid[static_cast<std::size_t>(t)]) continue;
            ++live;
            for (int e = 0; e < E; ++e) {
                kept[static_cast<std::size_t>(e)] += plan.expert_mask.at(t, e);
                assigned += plan.expert_mask.at(t, e);
            }
        }
        Tensor<T> w({tokens, E});
        if (live == 0 || assigned == 0.0) return w;
        for (int t = 0; t < tokens; ++t) {
            if (!valid[static_cast<std::size_t>(t)]) continue;
            for (int e = 0; e < E; ++e)
                w.at(t, e) = T(E * kept[static_cast<std::size_t>(e)] / (assigned * live));
        }
        return w;
    }

    ModelConfig cfg_;
    std::vector<Param<T>> params_;
    std::map<std::string, std::size_t> index_;
};

} // namespace damoe
