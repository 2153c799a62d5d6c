#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "damoe/model.hpp"
#include "damoe/ops.hpp"
#include "damoe/router.hpp"
#include "damoe/importance.hpp"

using damoe::Graph;
using damoe::Model;
using damoe::ModelConfig;
using damoe::Tensor;
using damoe::Var;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 13;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.heads = 2;
    cfg.blocks = 2;
    cfg.experts = 4;
    cfg.l_max = 12;
    cfg.seed = 7;
    return cfg;
}

std::vector<int> tiny_ids(int n, std::uint64_t seed, int vocab) {
    damoe::Rng rng(seed);
    std::vector<int> ids;
    for (int i = 0; i < n; ++i) ids.push_back(static_cast<int>(rng.uniform_int(vocab)));
    return ids;
}

// value-level add of a row vector, mirroring the graph op's arithmetic
template <typename T>
Tensor<T> add_rowvec_ref(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> c = a;
    const int n = a.dim(a.rank() - 1);
    const std::size_t rows = a.size() / static_cast<std::size_t>(n);
    for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < n; ++j) c[r * n + j] += b[static_cast<std::size_t>(j)];
    return c;
}

template <typename T>
Tensor<T> add_ref(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
    return c;
}

// Straight-line dense transformer with a single plain FFN per block -- the
// network an E=1 mixture must match exactly.
Tensor<float> dense_reference(Model<float>& m, const std::vector<int>& ids,
                              const std::vector<std::uint8_t>& valid, int B, int L) {
    const ModelConfig& cfg = m.config();
    auto P = [&](const std::string& n) -> const Tensor<float>& { return m.param(n).value; };

    Tensor<float> x({B * L, cfg.d_model});
    for (int t = 0; t < B * L; ++t)
        for (int c = 0; c < cfg.d_model; ++c)
            x.at(t, c) = P("embed.tok").at(ids[static_cast<std::size_t>(t)], c) +
                         P("embed.pos").at(t % L, c);

    for (int blk = 0; blk < cfg.blocks; ++blk) {
        const std::string b = "block" + std::to_string(blk) + ".";
        Tensor<float> h = damoe::layernorm(x, P(b + "ln1.gain"), P(b + "ln1.bias"));
        Tensor<float> q = add_rowvec_ref(damoe::matmul(h, P(b + "attn.wq")), P(b + "attn.bq"));
        Tensor<float> k = add_rowvec_ref(damoe::matmul(h, P(b + "attn.wk")), P(b + "attn.bk"));
        Tensor<float> v = add_rowvec_ref(damoe::matmul(h, P(b + "attn.wv")), P(b + "attn.bv"));
        auto core = damoe::attention_core(q, k, v, B, cfg.heads, L, valid, cfg.causal);
        Tensor<float> attn = add_rowvec_ref(damoe::matmul(core.context, P(b + "attn.wo")), P(b + "attn.bo"));
        Tensor<float> x2 = add_ref(x, attn);
        Tensor<float> h2 = damoe::layernorm(x2, P(b + "ln2.gain"), P(b + "ln2.bias"));
        Tensor<float> a1 = add_rowvec_ref(damoe::matmul(h2, P(b + "expert0.w1")), P(b + "expert0.b1"));
        damoe::apply_activation(a1, cfg.activation);
        Tensor<float> ffn = add_rowvec_ref(damoe::matmul(a1, P(b + "expert0.w2")), P(b + "expert0.b2"));
        // E=1 gate is softmax over one logit: exactly 1, so the scale is a
        // no-op. Padded rows are never dispatched, so they skip the FFN.
        for (int t = 0; t < B * L; ++t)
            if (!valid[static_cast<std::size_t>(t)])
                for (int c = 0; c < cfg.d_model; ++c) ffn.at(t, c) = 0.0f;
        x = add_ref(x2, ffn);
    }
    Tensor<float> y = damoe::layernorm(x, P("final.ln.gain"), P("final.ln.bias"));
    return add_rowvec_ref(damoe::matmul(y, P("head.w")), P("head.b"));
}

} // namespace

TEST_CASE("forward produces the right logit shapes") {
    ModelConfig cfg = tiny_config();
    const int B = 2, L = 5;
    const std::vector<int> ids = tiny_ids(B * L, 11, cfg.vocab_size);
    const std::vector<std::uint8_t> valid(static_cast<std::size_t>(B * L), 1);

    SECTION("lm head") {
        Model<float> m(cfg);
        Graph<float> g;
        auto fwd = m.forward(g, ids, valid, B, L);
        REQUIRE(fwd.logits.value().dim(0) == B * L);
        REQUIRE(fwd.logits.value().dim(1) == cfg.vocab_size);
        REQUIRE(static_cast<int>(fwd.blocks.size()) == cfg.blocks);
        REQUIRE_FALSE(fwd.has_aux());
    }
    SECTION("classifier head") {
        cfg.head = damoe::HeadKind::classifier;
        cfg.num_classes = 3;
        Model<float> m(cfg);
        Graph<float> g;
        auto fwd = m.forward(g, ids, valid, B, L);
        REQUIRE(fwd.logits.value().dim(0) == B);
        REQUIRE(fwd.logits.value().dim(1) == 3);
    }
}

TEST_CASE("single-expert model equals the dense reference") {
    ModelConfig cfg = tiny_config();
    cfg.experts = 1;
    cfg.causal = true;
    Model<float> m(cfg);
    const int B = 2, L = 6;
    const std::vector<int> ids = tiny_ids(B * L, 21, cfg.vocab_size);
    std::vector<std::uint8_t> valid(static_cast<std::size_t>(B * L), 1);
    valid[11] = 0; // one padded slot exercises the masked paths too

    Graph<float> g;
    const Tensor<float>& got = m.forward(g, ids, valid, B, L).logits.value();
    const Tensor<float> want = dense_reference(m, ids, valid, B, L);
    REQUIRE(got.same_shape(want));
    for (std::size_t i = 0; i < got.size(); ++i)
        REQUIRE_THAT(got[i], Catch::Matchers::WithinAbs(want[i], 1e-6));
}

TEST_CASE("length-one sequences give importance 1 and match fixed K=E") {
    // with a single position every attention row is the identity, so the
    // dynamic router must allocate all experts -- exactly what fixed K=E does
    ModelConfig dyn_cfg = tiny_config();
    ModelConfig fix_cfg = dyn_cfg;
    fix_cfg.router_mode = damoe::RouterMode::fixed;
    fix_cfg.fixed_k = fix_cfg.experts;

    Model<float> dyn(dyn_cfg);
    Model<float> fix(fix_cfg);
    const int B = 3, L = 1;
    const std::vector<int> ids = {4, 9, 2};
    const std::vector<std::uint8_t> valid(3, 1);

    Graph<float> g1, g2;
    auto f1 = dyn.forward(g1, ids, valid, B, L);
    auto f2 = fix.forward(g2, ids, valid, B, L);

    for (int blk = 0; blk < dyn_cfg.blocks; ++blk) {
        const auto& p1 = f1.blocks[static_cast<std::size_t>(blk)].plan;
        const auto& p2 = f2.blocks[static_cast<std::size_t>(blk)].plan;
        for (int t = 0; t < B; ++t) {
            REQUIRE(p1.importance[static_cast<std::size_t>(t)] == 1.0f);
            REQUIRE(p1.counts[static_cast<std::size_t>(t)] == dyn_cfg.experts);
            REQUIRE(p1.counts[static_cast<std::size_t>(t)] == p2.counts[static_cast<std::size_t>(t)]);
            REQUIRE(p1.expert_index[static_cast<std::size_t>(t)] ==
                    p2.expert_index[static_cast<std::size_t>(t)]);
        }
        for (std::size_t i = 0; i < p1.expert_mask.size(); ++i)
            REQUIRE(p1.expert_mask[i] == p2.expert_mask[i]);
    }
    const Tensor<float>& l1 = f1.logits.value();
    const Tensor<float>& l2 = f2.logits.value();
    for (std::size_t i = 0; i < l1.size(); ++i) REQUIRE(l1[i] == l2[i]);
}

TEST_CASE("zeroed expert outputs make routing invisible") {
    ModelConfig cfg = tiny_config();
    Model<float> m(cfg);
    for (int blk = 0; blk < cfg.blocks; ++blk)
        for (int e = 0; e < cfg.experts; ++e) {
            const std::string base = "block" + std::to_string(blk) + ".expert" + std::to_string(e);
            m.param(base + ".w2").value = Tensor<float>({cfg.d_ff, cfg.d_model});
            m.param(base + ".b2").value = Tensor<float>({cfg.d_model});
        }
    const int B = 1, L = 6;
    const std::vector<int> ids = tiny_ids(L, 5, cfg.vocab_size);
    const std::vector<std::uint8_t> valid(static_cast<std::size_t>(L), 1);

    Graph<float> g1;
    const Tensor<float> before = g1.value(m.forward(g1, ids, valid, B, L).logits.id);

    // completely different router weights must change nothing
    for (int blk = 0; blk < cfg.blocks; ++blk) {
        auto& w = m.param("block" + std::to_string(blk) + ".router.w").value;
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = -w[i] + 0.3f;
    }
    Graph<float> g2;
    const Tensor<float> after = g2.value(m.forward(g2, ids, valid, B, L).logits.id);
    for (std::size_t i = 0; i < before.size(); ++i) REQUIRE(before[i] == after[i]);
}

TEST_CASE("padding does not disturb live positions") {
    ModelConfig cfg = tiny_config();
    cfg.head = damoe::HeadKind::classifier;
    cfg.capacity_factor = 8.0; // headroom so no assignment is dropped either way
    Model<float> m(cfg);

    const std::vector<int> ids3 = {5, 8, 3};
    const std::vector<int> ids5 = {5, 8, 3, 0, 0};
    const std::vector<std::uint8_t> valid3 = {1, 1, 1};
    const std::vector<std::uint8_t> valid5 = {1, 1, 1, 0, 0};

    Graph<float> g1, g2;
    const Tensor<float>& a = g1.value(m.forward(g1, ids3, valid3, 1, 3).logits.id);
    const Tensor<float>& b = g2.value(m.forward(g2, ids5, valid5, 1, 5).logits.id);
    REQUIRE(a.same_shape(b));
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);
}

TEST_CASE("sequences in a batch do not interact") {
    ModelConfig cfg = tiny_config();
    cfg.causal = true;
    cfg.capacity_factor = 8.0; // joint and solo runs see different capacity otherwise
    Model<float> m(cfg);
    const int L = 6;
    const std::vector<int> s0 = tiny_ids(L, 41, cfg.vocab_size);
    const std::vector<int> s1 = tiny_ids(L, 42, cfg.vocab_size);
    std::vector<int> joint = s0;
    joint.insert(joint.end(), s1.begin(), s1.end());
    const std::vector<std::uint8_t> valid1(static_cast<std::size_t>(L), 1);
    const std::vector<std::uint8_t> valid2(static_cast<std::size_t>(2 * L), 1);

    Graph<float> gj, ga, gb;
    const Tensor<float>& lj = gj.value(m.forward(gj, joint, valid2, 2, L).logits.id);
    const Tensor<float>& la = ga.value(m.forward(ga, s0, valid1, 1, L).logits.id);
    const Tensor<float>& lb = gb.value(m.forward(gb, s1, valid1, 1, L).logits.id);

    const int V = cfg.vocab_size;
    for (int t = 0; t < L; ++t)
        for (int c = 0; c < V; ++c) {
            REQUIRE(lj.at(t, c) == la.at(t, c));
            REQUIRE(lj.at(L + t, c) == lb.at(t, c));
        }
}

TEST_CASE("traced plans agree with a recomputation from traced attention") {
    ModelConfig cfg = tiny_config();
    Model<float> m(cfg);
    const int B = 2, L = 7;
    const std::vector<int> ids = tiny_ids(B * L, 77, cfg.vocab_size);
    std::vector<std::uint8_t> valid(static_cast<std::size_t>(B * L), 1);
    valid[6] = valid[13] = 0;

    Graph<float> g;
    auto fwd = m.forward(g, ids, valid, B, L);
    for (const auto& blk : fwd.blocks) {
        auto scores = damoe::compute_token_importance(blk.attention, valid);
        auto counts = damoe::experts_per_token(scores, cfg.experts, valid);
        for (int t = 0; t < B * L; ++t) {
            REQUIRE_THAT(blk.plan.importance[static_cast<std::size_t>(t)],
                         Catch::Matchers::WithinAbs(scores.scores[static_cast<std::size_t>(t)], 1e-6));
            REQUIRE(blk.plan.counts[static_cast<std::size_t>(t)] == counts.counts[static_cast<std::size_t>(t)]);
        }
    }
}

TEST_CASE("fixed mode assigns exactly K experts to live tokens") {
    ModelConfig cfg = tiny_config();
    cfg.router_mode = damoe::RouterMode::fixed;
    cfg.fixed_k = 2;
    Model<float> m(cfg);
    const int B = 1, L = 5;
    const std::vector<int> ids = tiny_ids(L, 3, cfg.vocab_size);
    std::vector<std::uint8_t> valid = {1, 1, 0, 1, 1};

    Graph<float> g;
    auto fwd = m.forward(g, ids, valid, B, L);
    for (const auto& blk : fwd.blocks)
        for (int t = 0; t < L; ++t)
            REQUIRE(blk.plan.counts[static_cast<std::size_t>(t)] == (valid[static_cast<std::size_t>(t)] ? 2 : 0));
}

TEST_CASE("aux loss with a zeroed router is exactly the weight") {
    // uniform probabilities make E * sum_e f_e * P_e collapse to sum_e f_e = 1
    ModelConfig cfg = tiny_config();
    cfg.aux_loss_weight = 0.25;
    Model<float> m(cfg);
    for (int blk = 0; blk < cfg.blocks; ++blk)
        m.param("block" + std::to_string(blk) + ".router.w").value =
            Tensor<float>({cfg.experts, cfg.d_model});

    const int B = 2, L = 4;
    const std::vector<int> ids = tiny_ids(B * L, 55, cfg.vocab_size);
    const std::vector<std::uint8_t> valid(static_cast<std::size_t>(B * L), 1);
    Graph<float> g;
    auto fwd = m.forward(g, ids, valid, B, L);
    REQUIRE(fwd.has_aux());
    REQUIRE_THAT(fwd.aux_loss.value()[0], Catch::Matchers::WithinAbs(0.25, 1e-6));
}

TEST_CASE("seeds make models reproducible and distinct") {
    ModelConfig cfg = tiny_config();
    Model<float> a(cfg), b(cfg);
    cfg.seed = 8;
    Model<float> c(cfg);

    const auto& pa = a.param("block0.attn.wq").value;
    const auto& pb = b.param("block0.attn.wq").value;
    const auto& pc = c.param("block0.attn.wq").value;
    bool differs = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i] == pb[i]);
        differs = differs || pa[i] != pc[i];
    }
    REQUIRE(differs);
}

TEST_CASE("init conventions: unit gains, zero biases, bounded draws") {
    ModelConfig cfg = tiny_config();
    Model<float> m(cfg);
    for (const auto& p : m.params()) {
        if (p.name.ends_with("gain")) {
            for (std::size_t i = 0; i < p.value.size(); ++i) REQUIRE(p.value[i] == 1.0f);
        } else if (p.value.rank() == 1) {
            for (std::size_t i = 0; i < p.value.size(); ++i) REQUIRE(p.value[i] == 0.0f);
        }
    }
    // truncated normal keeps |w| <= 2 sigma; attn matrices use sigma = 1/sqrt(d)
    const float bound = 2.0f / std::sqrt(static_cast<float>(cfg.d_model));
    const auto& w = m.param("block1.attn.wv").value;
    for (std::size_t i = 0; i < w.size(); ++i) REQUIRE(std::fabs(w[i]) <= bound + 1e-6f);
}

TEST_CASE("forward validates its inputs") {
    ModelConfig cfg = tiny_config();
    Model<float> m(cfg);
    const std::vector<std::uint8_t> valid(4, 1);

    Graph<float> g;
    REQUIRE_THROWS_AS(m.forward(g, {1, 2, 3}, valid, 1, 4), damoe::DimensionError);
    REQUIRE_THROWS_AS(m.forward(g, {1, 2, 3, 99}, valid, 1, 4), damoe::IndexError);
    REQUIRE_THROWS_AS(m.forward(g, {1, 2, 3, -1}, valid, 1, 4), damoe::IndexError);
    const std::vector<int> long_ids(static_cast<std::size_t>(cfg.l_max) + 1, 1);
    const std::vector<std::uint8_t> long_valid(long_ids.size(), 1);
    REQUIRE_THROWS_AS(m.forward(g, long_ids, long_valid, 1, cfg.l_max + 1), damoe::ConfigError);
    REQUIRE_THROWS_AS(m.param("no.such.param"), damoe::ContractError);
}

TEST_CASE("config validation rejects inconsistent settings") {
    ModelConfig cfg = tiny_config();
    cfg.heads = 3; // does not divide d_model = 8
    REQUIRE_THROWS_AS(Model<float>(cfg), damoe::ConfigError);
    cfg = tiny_config();
    cfg.vocab_size = 0;
    REQUIRE_THROWS_AS(Model<float>(cfg), damoe::ConfigError);
    cfg = tiny_config();
    cfg.fixed_k = 5; // > experts
    REQUIRE_THROWS_AS(Model<float>(cfg), damoe::ConfigError);
    cfg = tiny_config();
    cfg.capacity_factor = 0.0;
    REQUIRE_THROWS_AS(Model<float>(cfg), damoe::ConfigError);
}

namespace {

// Central-difference gradient of the training loss w.r.t. one coordinate.
double fd_grad(Model<double>& m, damoe::Param<double>& p, std::size_t i,
               const std::vector<int>& ids, const std::vector<std::uint8_t>& valid, int B, int L,
               const std::vector<int>& targets, double h) {
    const double keep = p.value[i];
    auto eval = [&](double v) {
        p.value[i] = v;
        Graph<double> g;
        auto fwd = m.forward(g, ids, valid, B, L);
        Var<double> loss = g.cross_entropy_mean(fwd.logits, targets);
        if (fwd.has_aux()) loss = g.add(loss, fwd.aux_loss);
        const double out = g.value(loss.id)[0];
        return out;
    };
    const double up = eval(keep + h);
    const double down = eval(keep - h);
    p.value[i] = keep;
    return (up - down) / (2.0 * h);
}

void check_model_gradients(ModelConfig cfg, std::uint64_t seed, int coords_per_param) {
    Model<double> m(cfg);
    const int B = 2, L = 6;
    const std::vector<int> ids = tiny_ids(B * L, seed, cfg.vocab_size);
    std::vector<std::uint8_t> valid(static_cast<std::size_t>(B * L), 1);
    valid[4] = valid[11] = 0;
    std::vector<int> targets = tiny_ids(B * L, seed + 1, cfg.vocab_size);
    targets[4] = targets[11] = -1; // padded rows carry no loss

    Graph<double> g;
    auto fwd = m.forward(g, ids, valid, B, L);
    Var<double> loss = g.cross_entropy_mean(fwd.logits, targets);
    if (fwd.has_aux()) loss = g.add(loss, fwd.aux_loss);
    m.zero_grad();
    g.backward(loss);

    const double h = 1e-5;
    damoe::Rng pick(seed + 2);
    for (auto& p : m.params()) {
        for (int c = 0; c < coords_per_param; ++c) {
            const std::size_t i = pick.uniform_int(p.value.size());
            const double ad = p.grad[i];
            const double fd = fd_grad(m, p, i, ids, valid, B, L, targets, h);
            if (std::fabs(ad) < 1e-8 && std::fabs(fd) < 1e-6) continue;
            const double rel = std::fabs(ad - fd) / std::max(1e-8, std::fabs(fd));
            INFO(p.name << "[" << i << "] analytic " << ad << " fd " << fd);
            REQUIRE(rel < 1e-4);
        }
    }
}

} // namespace

TEST_CASE("model gradients match finite differences") {
    check_model_gradients(tiny_config(), 301, 4);
}

TEST_CASE("model gradients hold with causal attention and a fixed router") {
    ModelConfig cfg = tiny_config();
    cfg.causal = true;
    cfg.router_mode = damoe::RouterMode::fixed;
    cfg.fixed_k = 2;
    check_model_gradients(cfg, 303, 3);
}

TEST_CASE("model gradients hold with renormalized gates and aux loss") {
    ModelConfig cfg = tiny_config();
    cfg.renorm_gates = true;
    cfg.aux_loss_weight = 0.02;
    cfg.activation = damoe::Activation::gelu;
    check_model_gradients(cfg, 305, 3);
}

TEST_CASE("classifier head gradients match finite differences") {
    ModelConfig cfg = tiny_config();
    cfg.head = damoe::HeadKind::classifier;
    cfg.num_classes = 2;
    Model<double> m(cfg);
    const int B = 2, L = 5;
    const std::vector<int> ids = tiny_ids(B * L, 71, cfg.vocab_size);
    std::vector<std::uint8_t> valid(static_cast<std::size_t>(B * L), 1);
    valid[3] = valid[9] = 0;
    const std::vector<int> targets = {1, 0};

    Graph<double> g;
    auto fwd = m.forward(g, ids, valid, B, L);
    auto loss = g.cross_entropy_mean(fwd.logits, targets);
    m.zero_grad();
    g.backward(loss);

    damoe::Rng pick(72);
    for (auto& p : m.params()) {
        for (int c = 0; c < 3; ++c) {
            const std::size_t i = pick.uniform_int(p.value.size());
            const double ad = p.grad[i];
            const double keep = p.value[i];
            auto eval = [&](double v) {
                p.value[i] = v;
                Graph<double> gg;
                auto f = m.forward(gg, ids, valid, B, L);
                return gg.value(gg.cross_entropy_mean(f.logits, targets).id)[0];
            };
            const double fd = (eval(keep + 1e-5) - eval(keep - 1e-5)) / 2e-5;
            p.value[i] = keep;
            if (std::fabs(ad) < 1e-8 && std::fabs(fd) < 1e-6) continue;
            const double rel = std::fabs(ad - fd) / std::max(1e-8, std::fabs(fd));
            INFO(p.name << "[" << i << "] analytic " << ad << " fd " << fd);
            REQUIRE(rel < 1e-4);
        }
    }
}
