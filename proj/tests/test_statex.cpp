#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fixtures.hpp"
#include "statex/error.hpp"
#include "statex/statex.hpp"

#include <algorithm>
#include <cmath>

using namespace statex;

namespace {

// Hand-enumerated parameter count of one GLA mixer block.
std::size_t gla_block_params(std::size_t d, std::size_t h, std::size_t dk, std::size_t dv) {
    const std::size_t hk = h * dk, hv = h * dv;
    return d + 3 * d * hk + 2 * d * hv + hv + hv + hv * d;
}

ExpansionPlan gla_plan(std::size_t m, std::size_t target = 1, ReinitPolicy p = ReinitPolicy::Reinit) {
    ExpansionPlan plan;
    plan.family = Family::Gla;
    plan.m = m;
    plan.gla_merge_to = target;
    plan.reinit_policy = p;
    plan.seed = 5;
    return plan;
}

ExpansionPlan mamba_plan(std::size_t m, std::size_t E = 4, ReinitPolicy p = ReinitPolicy::Reinit) {
    ExpansionPlan plan;
    plan.family = Family::Mamba2;
    plan.m = m;
    plan.ssm_E = E;
    plan.reinit_policy = p;
    plan.seed = 5;
    return plan;
}

ModelConfig paper_gla() {
    return fixtures::config(Family::Gla, 24, 2048, 4, 256, 512, 50304);
}

ModelConfig paper_mamba() {
    return fixtures::config(Family::Mamba2, 48, 2048, 64, 128, 64, 50304);
}

} // namespace

TEST_CASE("select_layers examples") {
    CHECK(select_layers(24, 4) == std::vector<std::size_t>{0, 6, 12, 18});
    CHECK(select_layers(48, 4) == std::vector<std::size_t>{0, 12, 24, 36});
    CHECK(select_layers(8, 8) == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7});
    CHECK(select_layers(4, 2) == std::vector<std::size_t>{0, 2});
    CHECK_THROWS_AS(select_layers(4, 5), ConfigError);
    CHECK_THROWS_AS(select_layers(4, 0), ConfigError);
}

TEST_CASE("select_layers property: m strictly increasing indices below L starting at 0") {
    for (std::size_t L = 1; L <= 64; ++L) {
        for (std::size_t m = 1; m <= L; ++m) {
            auto idx = select_layers(L, m);
            REQUIRE(idx.size() == m);
            CHECK(idx.front() == 0);
            for (std::size_t i = 1; i < m; ++i) {
                CHECK(idx[i] > idx[i - 1]);
            }
            CHECK(idx.back() < L);
        }
    }
}

TEST_CASE("merge_heads on toy layer preserves every tensor and parameter count") {
    auto cfg = fixtures::config(Family::Gla, 2, 8, 2, 2, 2, 16);
    auto ckpt = fixtures::perturbed(init_checkpoint(cfg, 1), 2);
    LayerParams p = extract_layer(ckpt, 0);
    LayerParams q = merge_heads(p, 2, 1);
    CHECK(q.shape.heads == 1);
    CHECK(q.shape.d_k == 4);
    CHECK(q.shape.d_v == 4);
    CHECK(q.shape.state_size() == 2 * p.shape.state_size());
    std::size_t before = 0, after = 0;
    for (auto & [n, t] : p.tensors) {
        before += t.size();
        CHECK(t == q.at(n));
    }
    for (auto & [n, t] : q.tensors) {
        after += t.size();
    }
    CHECK(before == after);
    CHECK(before == gla_block_params(8, 2, 2, 2));
    CHECK(after == gla_block_params(8, 1, 4, 4));

    CHECK_THROWS_AS(merge_heads(p, 2, 3), ConfigError);
    CHECK_THROWS_AS(merge_heads(p, 4, 1), ConfigError);
}

TEST_CASE("merge_heads identity for a single head") {
    auto cfg = fixtures::config(Family::Gla, 1, 8, 1, 4, 4, 16);
    auto ckpt = init_checkpoint(cfg, 1);
    LayerParams p = extract_layer(ckpt, 0);
    LayerParams q = merge_heads(p, 1, 1);
    CHECK(q.shape == p.shape);
    CHECK(q.tensors == p.tensors);
}

TEST_CASE("merge_heads property: parameters conserved and state scaled by H/target") {
    Rng rng(77);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t H = 1 + rng.index(8);
        std::vector<std::size_t> divisors;
        for (std::size_t t = 1; t <= H; ++t) {
            if (H % t == 0) {
                divisors.push_back(t);
            }
        }
        const std::size_t target = divisors[rng.index(divisors.size())];
        const std::size_t dk = 1 + rng.index(4), dv = 1 + rng.index(4);
        const std::size_t d = H * dk + rng.index(4);
        auto cfg = fixtures::config(Family::Gla, 2, d, H, dk, dv, 8);
        auto ckpt = init_checkpoint(cfg, trial);
        auto res = apply_statex(ckpt, gla_plan(1, target));
        CHECK(parameter_count(res.checkpoint.config) == parameter_count(cfg));
        CHECK(res.report.param_delta == 0);
        CHECK(res.checkpoint.config.layer(0).state_size() * target == cfg.layer(0).state_size() * H);
        CHECK(gla_block_params(d, target, dk * H / target, dv * H / target) == gla_block_params(d, H, dk, dv));
    }
}

TEST_CASE("expand_key_dim widens keys and queries with zero columns") {
    auto cfg = fixtures::config(Family::Mamba2, 2, 8, 2, 3, 2, 16);
    auto ckpt = fixtures::perturbed(init_checkpoint(cfg, 1), 2);
    LayerParams p = extract_layer(ckpt, 1);
    LayerParams q = expand_key_dim(p, 4);
    CHECK(q.shape.d_k == 12);
    for (const char * name : {"w_k", "w_q"}) {
        const Tensor & a = p.at(name);
        const Tensor & b = q.at(name);
        REQUIRE(b.shape() == Shape{8, 12});
        for (std::size_t r = 0; r < 8; ++r) {
            for (std::size_t c = 0; c < 12; ++c) {
                CHECK(b.at(r, c) == (c < 3 ? a.at(r, c) : 0.0));
            }
        }
    }
    for (auto & [n, t] : p.tensors) {
        if (n != "w_k" && n != "w_q") {
            CHECK(t == q.at(n));
        }
    }
    CHECK(expand_key_dim(p, 1).tensors == p.tensors);
    CHECK_THROWS_AS(expand_key_dim(p, 0), ConfigError);
    CHECK_THROWS_AS(merge_heads(p, 2, 1), ConfigError);
}

TEST_CASE("Mamba2 inherit expansion is forward-exact") {
    for (std::size_t E : {1, 2, 4}) {
        auto cfg = fixtures::config(Family::Mamba2, 3, 16, 2, 4, 4, 20);
        auto ckpt = fixtures::perturbed(init_checkpoint(cfg, 3), 4);
        auto toks = fixtures::tokens(24, 20, 9);
        Tensor before = model_forward(ckpt, toks);
        auto res = apply_statex(ckpt, mamba_plan(2, E, ReinitPolicy::Inherit));
        Tensor after = model_forward(res.checkpoint, toks);
        CHECK(max_abs_diff(before, after) == 0.0);
    }
}

TEST_CASE("identity plan leaves logits unchanged") {
    auto cfg = fixtures::config(Family::Gla, 3, 16, 2, 4, 4, 20);
    auto ckpt = fixtures::perturbed(init_checkpoint(cfg, 3), 4);
    auto toks = fixtures::tokens(16, 20, 9);
    auto res = apply_statex(ckpt, gla_plan(3, 2, ReinitPolicy::Inherit));
    CHECK(res.report.ratio == 1.0);
    CHECK(max_abs_diff(model_forward(ckpt, toks), model_forward(res.checkpoint, toks)) == 0.0);
}

TEST_CASE("reinitialize GLA redraws exactly the expanded blocks") {
    auto cfg = fixtures::config(Family::Gla, 4, 16, 4, 4, 4, 20);
    auto src = fixtures::perturbed(init_checkpoint(cfg, 3), 4);
    auto res = apply_statex(src, gla_plan(2));
    const auto & out = res.checkpoint;
    for (auto & [name, t] : src.tensors) {
        const bool expanded = name.rfind("layers.0.gla.", 0) == 0 || name.rfind("layers.2.gla.", 0) == 0;
        if (expanded) {
            CHECK_MESSAGE(!(t == out.at(name)), name);
        } else {
            CHECK_MESSAGE(t == out.at(name), name);
        }
    }
    const Tensor & norm = out.at("layers.0.gla.norm");
    for (double v : norm.values()) {
        CHECK(v == 1.0);
    }
    CHECK(out.config.layer(0) == LayerShape{1, 16, 16});
    CHECK(out.config.layer(1) == cfg.layer(1));
    CHECK(out.meta.stage == "expanded");
    CHECK(out.meta.accounting.find("ratio") != std::string::npos);
}

TEST_CASE("reinitialize Mamba2 redraws only the SSM mechanism tensors") {
    auto cfg = fixtures::config(Family::Mamba2, 4, 16, 2, 4, 4, 20);
    auto src = fixtures::perturbed(init_checkpoint(cfg, 3), 4);
    auto out = apply_statex(src, mamba_plan(1)).checkpoint;
    const Tensor fresh_dt = default_dt_bias(2);
    for (auto & [name, t] : src.tensors) {
        const bool expanded_layer = name.rfind("layers.0.ssm.", 0) == 0;
        const std::string local = expanded_layer ? name.substr(13) : "";
        if (local == "a" || local == "w_k" || local == "w_q" || local == "dt_bias") {
            CHECK_MESSAGE(!(t == out.at(name)), name);
        } else {
            CHECK_MESSAGE(t == out.at(name), name);
        }
    }
    CHECK(out.at("layers.0.ssm.dt_bias") == fresh_dt);
    for (double a : out.at("layers.0.ssm.a").values()) {
        CHECK(a >= 1.0);
        CHECK(a <= 16.0);
    }
}

TEST_CASE("reinitialize is deterministic and a no-op under Inherit") {
    auto cfg = fixtures::config(Family::Gla, 4, 16, 4, 4, 4, 20);
    auto src = fixtures::perturbed(init_checkpoint(cfg, 3), 4);
    auto a = apply_statex(src, gla_plan(2)).checkpoint;
    auto b = apply_statex(src, gla_plan(2)).checkpoint;
    CHECK(a == b);
    CHECK(serialize(a) == serialize(b));
    CHECK(reinitialize(src, gla_plan(2, 1, ReinitPolicy::Inherit)) == src);
    CHECK_THROWS_AS(reinitialize(src, mamba_plan(1)), ConfigError);
}

TEST_CASE("reinitialize names a mismatched tensor") {
    auto cfg = fixtures::config(Family::Gla, 2, 16, 2, 4, 4, 20);
    auto src = init_checkpoint(cfg, 3);
    src.tensors["layers.0.gla.w_q"] = Tensor({16, 3});
    try {
        reinitialize(src, gla_plan(1));
        FAIL("expected SchemaError");
    } catch (const SchemaError & e) {
        CHECK(std::string(e.what()).find("layers.0.gla.w_q") != std::string::npos);
    }
}

TEST_CASE("account on published GLA shape") {
    auto r = account(paper_gla(), gla_plan(4));
    CHECK(r.layer_indices == std::vector<std::size_t>{0, 6, 12, 18});
    CHECK(r.factor == 4);
    CHECK(r.ratio == 1.5);
    CHECK(std::abs(12.48 * r.ratio - 18.72) < 1e-12);
    CHECK(r.param_delta == 0);
    CHECK(r.total_after * 2 == r.total_before * 3);
}

TEST_CASE("account on published Mamba2 shape flags the totals tension") {
    auto r = account(paper_mamba(), mamba_plan(4));
    CHECK(r.layer_indices == std::vector<std::size_t>{0, 12, 24, 36});
    CHECK(r.ratio == 1.25);
    CHECK(r.param_delta == 2 * 2048 * 384 * 4);
    CHECK(r.param_delta == 6291456);
    CHECK(!r.note.empty());
    CHECK(format_report(r).find("note:") != std::string::npos);
    CHECK(account(paper_mamba(), mamba_plan(8)).ratio == 1.5);
}

TEST_CASE("account ratio formula equals per-layer brute force") {
    for (auto family : {Family::Gla, Family::Mamba2}) {
        for (std::size_t L = 1; L <= 12; ++L) {
            auto cfg = family == Family::Gla ? fixtures::config(family, L, 32, 4, 4, 8, 10)
                                             : fixtures::config(family, L, 32, 4, 4, 8, 10);
            for (std::size_t m = 1; m <= L; ++m) {
                for (std::size_t f : {1, 2, 4}) {
                    auto plan = family == Family::Gla ? gla_plan(m, 4 / f) : mamba_plan(m, f);
                    auto r = account(cfg, plan);
                    std::size_t brute_before = 0, brute_after = 0;
                    for (std::size_t l = 0; l < L; ++l) {
                        const std::size_t s = cfg.layer(l).state_size();
                        brute_before += s;
                        bool hit = std::find(r.layer_indices.begin(), r.layer_indices.end(), l) !=
                                   r.layer_indices.end();
                        brute_after += hit ? s * f : s;
                        CHECK(r.state_after[l] == (hit ? s * f : s));
                    }
                    CHECK(r.total_before == brute_before);
                    CHECK(r.total_after == brute_after);
                    const double formula = static_cast<double>(L - m + m * f) / static_cast<double>(L);
                    CHECK(std::abs(r.ratio - formula) < 1e-15);
                }
            }
        }
    }
}

TEST_CASE("plan family must match checkpoint") {
    auto cfg = fixtures::config(Family::Gla, 2, 16, 2, 4, 4, 20);
    auto ckpt = init_checkpoint(cfg, 1);
    CHECK_THROWS_AS(apply_statex(ckpt, mamba_plan(1)), ConfigError);
    CHECK_THROWS_AS(apply_statex(ckpt, gla_plan(3)), ConfigError);
    CHECK_THROWS_AS(apply_statex(ckpt, gla_plan(1, 3)), ConfigError);
}

TEST_CASE("expanded checkpoint round-trips through serialization") {
    auto cfg = fixtures::config(Family::Mamba2, 4, 16, 2, 4, 4, 20);
    auto out = apply_statex(init_checkpoint(cfg, 1), mamba_plan(2)).checkpoint;
    auto back = deserialize(serialize(out));
    CHECK(back.config == out.config);
    CHECK(back.config.layer(2).d_k == 16);
    CHECK(back.meta.accounting == out.meta.accounting);
}

TEST_CASE("report csv lists every layer") {
    auto r = account(fixtures::config(Family::Gla, 4, 16, 4, 4, 4, 10), gla_plan(2));
    const std::string csv = report_csv(r);
    CHECK(csv.find("0,1,64,256") != std::string::npos);
    CHECK(csv.find("1,0,64,64") != std::string::npos);
    CHECK(csv.find("ratio,,2.5,") != std::string::npos);
}
