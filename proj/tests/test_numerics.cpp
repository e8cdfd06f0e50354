#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "statex/error.hpp"
#include "statex/grad_check.hpp"
#include "statex/ops.hpp"
#include "statex/rng.hpp"

#include <cmath>

using namespace statex;

TEST_CASE("grad_check on sum of squares") {
    Objective f = [](const Tensor & x, Tensor * g) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            s += x[i] * x[i];
            if (g) {
                (*g)[i] = 2.0 * x[i];
            }
        }
        return s;
    };
    CHECK(grad_check(f, Tensor::from({1.0, 2.0}), 1e-5) < 1e-6);
}

TEST_CASE("grad_check on a linear sum") {
    Objective f = [](const Tensor & x, Tensor * g) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            s += x[i];
            if (g) {
                (*g)[i] = 1.0;
            }
        }
        return s;
    };
    Rng rng(3);
    CHECK(grad_check(f, seeded_normal(rng, {7}, 1.0), 1e-5) < 1e-9);
}

TEST_CASE("grad_check rejects non-finite objectives and bad eps") {
    Objective f = [](const Tensor &, Tensor *) { return std::nan(""); };
    CHECK_THROWS_AS(grad_check(f, Tensor::from({1.0}), 1e-5), NumericError);
    Objective ok = [](const Tensor &, Tensor *) { return 0.0; };
    CHECK_THROWS_AS(grad_check(ok, Tensor::from({1.0}), 0.1), ConfigError);
}

TEST_CASE("seeded_normal examples") {
    Rng a(1);
    Tensor z = seeded_normal(a, {3}, 0.0);
    CHECK(z == Tensor::zeros({3}));

    Rng r1(1), r2(1);
    CHECK(seeded_normal(r1, {4, 4}, 1.0) == seeded_normal(r2, {4, 4}, 1.0));

    Rng r3(1);
    Tensor t = seeded_normal(r3, {10000}, 0.02);
    double mean = 0.0;
    for (double v : t.values()) {
        mean += v;
    }
    mean /= 10000.0;
    double var = 0.0;
    for (double v : t.values()) {
        var += (v - mean) * (v - mean);
    }
    double sd = std::sqrt(var / 9999.0);
    CHECK(sd >= 0.018);
    CHECK(sd <= 0.022);
    CHECK(std::abs(mean) < 0.001);
}

TEST_CASE("derived streams do not depend on draw interleaving") {
    Rng base(42);
    Rng a1 = base.derive("layers.0.gla.w_q");
    double first = a1.normal();

    Rng base2(42);
    Rng other = base2.derive("embed");
    for (int i = 0; i < 100; ++i) {
        other.normal();
    }
    Rng a2 = base2.derive("layers.0.gla.w_q");
    CHECK(a2.normal() == first);
    CHECK(Rng(42).derive("x").next_u64() != Rng(43).derive("x").next_u64());
}

TEST_CASE("index draws are in range and shuffle is a permutation") {
    Rng rng(9);
    std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
    rng.shuffle(std::span<int>(v));
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
    for (int i = 0; i < 1000; ++i) {
        CHECK(rng.index(7) < 7);
    }
}

namespace {

// Checks a primitive's backward against central differences on a random
// linear functional of its output.
template <typename Fwd, typename Bwd>
double check_primitive(Tensor x, Fwd fwd, Bwd bwd, std::uint64_t seed) {
    Rng rng(seed);
    Tensor probe = fwd(x);
    Tensor w = seeded_normal(rng, probe.shape(), 1.0);
    Objective f = [&](const Tensor & in, Tensor * g) {
        Tensor y = fwd(in);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            s += w[i] * y[i];
        }
        if (g) {
            *g = bwd(in, w);
        }
        return s;
    };
    return grad_check(f, x, 1e-5);
}

} // namespace

TEST_CASE("primitive gradients agree with central differences") {
    Rng rng(5);
    Tensor x = seeded_normal(rng, {4, 6}, 1.0);
    Tensor b = seeded_normal(rng, {6, 3}, 1.0);
    Tensor scale = seeded_normal(rng, {6}, 1.0);

    SUBCASE("matmul wrt A") {
        double err = check_primitive(
            x, [&](const Tensor & a) { return ops::matmul(a, b); },
            [&](const Tensor & a, const Tensor & dy) {
                Tensor da(a.shape());
                ops::matmul_backward(dy, a, b, &da, nullptr);
                return da;
            },
            1);
        CHECK(err < 1e-6);
    }
    SUBCASE("matmul wrt B") {
        double err = check_primitive(
            b, [&](const Tensor & bb) { return ops::matmul(x, bb); },
            [&](const Tensor & bb, const Tensor & dy) {
                Tensor db(bb.shape());
                ops::matmul_backward(dy, x, bb, nullptr, &db);
                return db;
            },
            2);
        CHECK(err < 1e-6);
    }
    SUBCASE("elementwise") {
        CHECK(check_primitive(
                  x, [](const Tensor & a) { return ops::silu(a); },
                  [](const Tensor & a, const Tensor & dy) { return ops::silu_backward(a, dy); }, 3) < 1e-6);
        CHECK(check_primitive(
                  x, [](const Tensor & a) { return ops::softplus(a); },
                  [](const Tensor & a, const Tensor & dy) { return ops::softplus_backward(a, dy); }, 4) < 1e-6);
        CHECK(check_primitive(
                  x, [](const Tensor & a) { return ops::sigmoid(a); },
                  [](const Tensor & a, const Tensor & dy) {
                      Tensor s = ops::sigmoid(a);
                      Tensor g = dy;
                      for (std::size_t i = 0; i < g.size(); ++i) {
                          g[i] *= s[i] * (1.0 - s[i]);
                      }
                      return g;
                  },
                  5) < 1e-6);
        CHECK(check_primitive(
                  x, [](const Tensor & a) { return ops::exp(a); },
                  [](const Tensor & a, const Tensor & dy) { return ops::mul(ops::exp(a), dy); }, 6) < 1e-6);
        CHECK(check_primitive(
                  x, [&](const Tensor & a) { return ops::mul(a, x); },
                  [&](const Tensor &, const Tensor & dy) { return ops::mul(x, dy); }, 7) < 1e-6);
    }
    SUBCASE("rms norm wrt input and scale") {
        for (std::size_t group : {std::size_t{6}, std::size_t{3}, std::size_t{2}}) {
            double ex = check_primitive(
                x, [&](const Tensor & a) { return ops::rms_norm(a, scale, group); },
                [&](const Tensor & a, const Tensor & dy) {
                    Tensor inv;
                    ops::rms_norm(a, scale, group, &inv);
                    return ops::rms_norm_backward(dy, a, scale, group, inv, nullptr);
                },
                8);
            CHECK(ex < 1e-5);
            double es = check_primitive(
                scale, [&](const Tensor & s) { return ops::rms_norm(x, s, group); },
                [&](const Tensor & s, const Tensor & dy) {
                    Tensor inv;
                    ops::rms_norm(x, s, group, &inv);
                    Tensor ds(s.shape());
                    ops::rms_norm_backward(dy, x, s, group, inv, &ds);
                    return ds;
                },
                9);
            CHECK(es < 1e-5);
        }
    }
    SUBCASE("cross entropy") {
        std::vector<int> targets{1, -1, 5, 0};
        Objective f = [&](const Tensor & logits, Tensor * g) { return ops::cross_entropy(logits, targets, g); };
        CHECK(grad_check(f, x, 1e-5) < 1e-6);
    }
}

TEST_CASE("cross entropy of uniform logits is ln(vocab)") {
    Tensor logits({3, 10});
    std::vector<int> targets{0, 4, 9};
    CHECK(ops::cross_entropy(logits, targets) == doctest::Approx(std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("shape errors") {
    CHECK_THROWS_AS(ops::matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>(3)), ShapeError);
    CHECK_THROWS_AS(ops::rms_norm(Tensor({2, 6}), Tensor({6}), 4), ShapeError);
}
