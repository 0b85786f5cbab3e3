#include <catch2/catch_amalgamated.hpp>

#include "faceflow/core/autograd.hpp"
#include "faceflow/core/rng.hpp"
#include "test_util.hpp"

using namespace faceflow;

namespace {

Var<double> leaf(Shape s, Rng& rng, double scale = 1.0) {
    return Var<double>(Tensor<double>::randn(std::move(s), rng, scale), true);
}

}  // namespace

TEST_CASE("elementwise grads", "[autograd]") {
    Rng rng(1);
    auto a = leaf({2, 3}, rng);
    auto b = leaf({2, 3}, rng);
    check_grad([&] { return mean_all(add(a, b)); }, {a, b});
    check_grad([&] { return mean_all(sub(a, b)); }, {a, b});
    check_grad([&] { return mean_all(mul(a, b)); }, {a, b});
    check_grad([&] { return mean_all(neg(a)); }, {a});
    check_grad([&] { return mean_all(add_scalar(a, 1.5)); }, {a});
    check_grad([&] { return mean_all(mul_scalar(a, -2.0)); }, {a});
    check_grad([&] { return mean_all(rsub_scalar(1.0, a)); }, {a});

    auto denom = Var<double>(Tensor<double>::uniform({2, 3}, rng, 0.5, 2.0), true);
    check_grad([&] { return mean_all(div(a, denom)); }, {a, denom});
}

TEST_CASE("activation grads", "[autograd]") {
    Rng rng(2);
    auto x = leaf({3, 4}, rng);
    check_grad([&] { return mean_all(silu(x)); }, {x});
    check_grad([&] { return mean_all(gelu(x)); }, {x});
    check_grad([&] { return mean_all(sigmoid(x)); }, {x});
    check_grad([&] { return mean_all(tanh_(x)); }, {x});
}

TEST_CASE("matmul value and grads", "[autograd]") {
    Rng rng(3);
    auto x = leaf({2, 3}, rng);
    auto w = leaf({3, 4}, rng);
    {
        NoGradGuard ng;
        auto y = matmul(x, w);
        REQUIRE(y.shape() == Shape{2, 4});
        for (int64_t i = 0; i < 2; ++i)
            for (int64_t j = 0; j < 4; ++j) {
                double want = 0;
                for (int64_t k = 0; k < 3; ++k) want += x.value().at(i, k) * w.value().at(k, j);
                REQUIRE_THAT(y.value().at(i, j), Catch::Matchers::WithinAbs(want, 1e-12));
            }
    }
    check_grad([&] { return mean_all(matmul(x, w)); }, {x, w});

    auto x3 = leaf({2, 2, 3}, rng);
    check_grad([&] { return mean_all(matmul(x3, w)); }, {x3, w});

    REQUIRE_THROWS_AS(matmul(leaf({2, 5}, rng), w), ShapeError);
}

TEST_CASE("bmm grads", "[autograd]") {
    Rng rng(4);
    auto a = leaf({2, 3, 4}, rng);
    auto b = leaf({2, 4, 5}, rng);
    check_grad([&] { return mean_all(bmm(a, b)); }, {a, b});

    auto bt = leaf({2, 5, 4}, rng);
    check_grad([&] { return mean_all(bmm(a, bt, true)); }, {a, bt});

    auto a4 = leaf({2, 2, 3, 4}, rng);
    auto b4 = leaf({2, 2, 4, 3}, rng);
    check_grad([&] { return mean_all(bmm(a4, b4)); }, {a4, b4});
    check_grad([&] { return mean_all(bmm(a4, a4, true)); }, {a4});

    REQUIRE_THROWS_AS(bmm(a, leaf({2, 5, 5}, rng)), ShapeError);
    REQUIRE_THROWS_AS(bmm(a, leaf({3, 4, 5}, rng)), ShapeError);
}

TEST_CASE("bias grads", "[autograd]") {
    Rng rng(5);
    auto x = leaf({2, 3, 4}, rng);
    auto b = leaf({4}, rng);
    check_grad([&] { return mean_all(add_bias(x, b)); }, {x, b});
    check_grad([&] { return mean_all(mul_bias(x, b)); }, {x, b});
    REQUIRE_THROWS_AS(add_bias(x, leaf({3}, rng)), ShapeError);
}

TEST_CASE("shape op grads", "[autograd]") {
    Rng rng(6);
    auto x = leaf({2, 3, 4}, rng);
    check_grad([&] { return mean_all(reshape(x, {6, 4})); }, {x});
    check_grad([&] { return mean_all(mul(permute(x, {2, 0, 1}), permute(x, {2, 0, 1}))); }, {x});

    auto a = leaf({2, 2, 4}, rng);
    auto b = leaf({2, 3, 4}, rng);
    check_grad([&] { return mean_all(concat<double>({a, b}, 1)); }, {a, b});
    check_grad([&] { return mean_all(concat<double>({a, b, a}, -2)); }, {a, b});
    check_grad([&] { return mean_all(slice(x, 1, 1, 2)); }, {x});
    check_grad([&] { return mean_all(slice(x, -1, 0, 3)); }, {x});

    // repeated gather indices must accumulate, not overwrite
    auto emb = leaf({5, 3}, rng);
    check_grad([&] { return mean_all(rows(emb, {1, 3, 1, 0})); }, {emb});
    REQUIRE_THROWS_AS(rows(emb, {5}), LookupError);
    REQUIRE_THROWS_AS(slice(x, 1, 2, 5), ShapeError);
}

TEST_CASE("permute value is a transpose", "[autograd]") {
    Rng rng(7);
    NoGradGuard ng;
    auto x = leaf({2, 3, 4}, rng);
    auto y = permute(x, {1, 2, 0});
    REQUIRE(y.shape() == Shape{3, 4, 2});
    for (int64_t i = 0; i < 2; ++i)
        for (int64_t j = 0; j < 3; ++j)
            for (int64_t k = 0; k < 4; ++k)
                REQUIRE(y.value().at(j, k, i) == x.value().at(i, j, k));
}

TEST_CASE("normalization grads", "[autograd]") {
    Rng rng(8);
    auto x = leaf({3, 6}, rng);
    check_grad([&] { return mean_all(mul(layer_norm(x), x)); }, {x}, 1e-5, 1e-5);
    check_grad([&] { return mean_all(mul(softmax_last(x), x)); }, {x});
    check_grad([&] { return mean_all(mul(normalize_rows(x), x)); }, {x});
}

TEST_CASE("layer_norm normalizes rows", "[autograd]") {
    Rng rng(9);
    NoGradGuard ng;
    auto x = leaf({4, 8}, rng, 3.0);
    auto y = layer_norm(x);
    for (int64_t r = 0; r < 4; ++r) {
        double mean = 0, var = 0;
        for (int64_t i = 0; i < 8; ++i) mean += y.value().at(r, i);
        mean /= 8;
        for (int64_t i = 0; i < 8; ++i) {
            double d = y.value().at(r, i) - mean;
            var += d * d;
        }
        var /= 8;
        REQUIRE_THAT(mean, Catch::Matchers::WithinAbs(0.0, 1e-12));
        REQUIRE_THAT(var, Catch::Matchers::WithinAbs(1.0, 1e-5));
    }
}

TEST_CASE("softmax rows sum to one", "[autograd]") {
    Rng rng(10);
    NoGradGuard ng;
    auto x = leaf({3, 5}, rng, 4.0);
    auto y = softmax_last(x);
    for (int64_t r = 0; r < 3; ++r) {
        double s = 0;
        for (int64_t i = 0; i < 5; ++i) {
            s += y.value().at(r, i);
            REQUIRE(y.value().at(r, i) > 0.0);
        }
        REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
}

TEST_CASE("modulation grads", "[autograd]") {
    Rng rng(11);
    auto x = leaf({2, 3, 4}, rng);
    auto s = leaf({2, 4}, rng);
    auto t = leaf({2, 4}, rng);
    check_grad([&] { return mean_all(scale_shift(x, s, t)); }, {x, s, t});
    check_grad([&] { return mean_all(gate_mul(x, s)); }, {x, s});
    REQUIRE_THROWS_AS(scale_shift(x, leaf({2, 3}, rng), t), ShapeError);

    auto v = leaf({2, 3, 4}, rng);
    check_grad([&] { return mean_all(axpy_rows(x, v, {0.3, -1.2})); }, {x, v});
    REQUIRE_THROWS_AS(axpy_rows(x, v, std::vector<double>{1.0}), ShapeError);
}

TEST_CASE("reduction and loss grads", "[autograd]") {
    Rng rng(12);
    auto a = leaf({3, 4}, rng);
    auto b = leaf({3, 4}, rng);
    check_grad([&] { return sum_all(mul(a, a)); }, {a});
    check_grad([&] { return mse_loss(a, b); }, {a, b});
    check_grad([&] { return mean_all(cosine_sim_rows(a, b)); }, {a, b});
    check_grad([&] { return cross_entropy_logits(a, {1, 3, 0}); }, {a});
    REQUIRE_THROWS_AS(cross_entropy_logits(a, {1, 3}), ShapeError);
}

TEST_CASE("cosine similarity values", "[autograd]") {
    NoGradGuard ng;
    Tensor<double> a({2, 3}), b({2, 3});
    a[0] = 1; a[1] = 0; a[2] = 0; b[0] = 0; b[1] = 2; b[2] = 0;  // orthogonal
    a[3] = 1; a[4] = 2; a[5] = -1; b[3] = -2; b[4] = -4; b[5] = 2;  // anti-parallel
    auto c = cosine_sim_rows(Var<double>(a), Var<double>(b));
    REQUIRE_THAT(c.value()[0], Catch::Matchers::WithinAbs(0.0, 1e-12));
    REQUIRE_THAT(c.value()[1], Catch::Matchers::WithinAbs(-1.0, 1e-12));
}

TEST_CASE("cross entropy matches log softmax", "[autograd]") {
    NoGradGuard ng;
    Tensor<double> x({2, 3});
    x[0] = 1.0; x[1] = 2.0; x[2] = 0.5;
    x[3] = -1.0; x[4] = 0.0; x[5] = 3.0;
    auto l = cross_entropy_logits(Var<double>(x), {1, 2});
    auto logp = [&](int64_t r, int64_t k) {
        double lse = 0;
        for (int64_t j = 0; j < 3; ++j) lse += std::exp(x.at(r, j));
        return x.at(r, k) - std::log(lse);
    };
    double want = -(logp(0, 1) + logp(1, 2)) / 2;
    REQUIRE_THAT(l.value()[0], Catch::Matchers::WithinAbs(want, 1e-12));
}

TEST_CASE("conv and pooling grads", "[autograd]") {
    Rng rng(13);
    auto x = leaf({2, 5, 5, 3}, rng);
    auto w = leaf({3, 3, 3, 4}, rng, 0.5);
    auto b = leaf({4}, rng);
    check_grad([&] { return mean_all(conv2d(x, w, b, 1, 1)); }, {x, w, b}, 1e-5, 1e-5);
    check_grad([&] { return mean_all(conv2d(x, w, b, 2, 1)); }, {x, w, b}, 1e-5, 1e-5);
    check_grad([&] { return mean_all(mul(avg_pool_all(x), avg_pool_all(x))); }, {x});

    auto small = leaf({1, 2, 3, 2}, rng);
    check_grad([&] { return mean_all(mul(upsample2x(small), upsample2x(small))); }, {small});
    REQUIRE_THROWS_AS(conv2d(x, leaf({3, 3, 4, 4}, rng), b, 1, 1), ShapeError);
}

TEST_CASE("conv2d matches naive loops", "[autograd]") {
    Rng rng(14);
    NoGradGuard ng;
    auto x = leaf({1, 4, 4, 2}, rng);
    auto w = leaf({3, 3, 2, 3}, rng);
    auto b = leaf({3}, rng);
    auto y = conv2d(x, w, b, 2, 1);
    REQUIRE(y.shape() == Shape{1, 2, 2, 3});
    for (int64_t oy = 0; oy < 2; ++oy)
        for (int64_t ox = 0; ox < 2; ++ox)
            for (int64_t oc = 0; oc < 3; ++oc) {
                double want = b.value()[oc];
                for (int64_t ky = 0; ky < 3; ++ky)
                    for (int64_t kx = 0; kx < 3; ++kx) {
                        int64_t iy = oy * 2 + ky - 1, ix = ox * 2 + kx - 1;
                        if (iy < 0 || iy >= 4 || ix < 0 || ix >= 4) continue;
                        for (int64_t c = 0; c < 2; ++c)
                            want += x.value().at(0, iy, ix, c) * w.value().at(ky, kx, c, oc);
                    }
                REQUIRE_THAT(y.value().at(0, oy, ox, oc), Catch::Matchers::WithinAbs(want, 1e-12));
            }
}

TEST_CASE("upsample2x repeats pixels", "[autograd]") {
    NoGradGuard ng;
    Tensor<double> x({1, 1, 2, 1});
    x[0] = 3.0;
    x[1] = 7.0;
    auto y = upsample2x(Var<double>(x));
    REQUIRE(y.shape() == Shape{1, 2, 4, 1});
    REQUIRE(y.value().at(0, 0, 0, 0) == 3.0);
    REQUIRE(y.value().at(0, 1, 1, 0) == 3.0);
    REQUIRE(y.value().at(0, 0, 2, 0) == 7.0);
    REQUIRE(y.value().at(0, 1, 3, 0) == 7.0);
}

TEST_CASE("shared leaf accumulates through both consumers", "[autograd]") {
    Rng rng(15);
    auto x = leaf({3}, rng);
    check_grad([&] { return sum_all(add(mul(x, x), x)); }, {x});
    // d/dx sum(x*x + x) = 2x + 1
    x.zero_grad();
    auto loss = sum_all(add(mul(x, x), x));
    loss.backward();
    for (int64_t i = 0; i < 3; ++i)
        REQUIRE_THAT(x.grad()[i], Catch::Matchers::WithinAbs(2 * x.value()[i] + 1, 1e-12));
}

TEST_CASE("no-grad mode builds no graph", "[autograd]") {
    Rng rng(16);
    auto x = leaf({2, 2}, rng);
    NoGradGuard ng;
    auto y = mul(x, x);
    REQUIRE_FALSE(y.requires_grad());
    REQUIRE(y.node->parents.empty());
}

TEST_CASE("backward demands a scalar root", "[autograd]") {
    Rng rng(17);
    auto x = leaf({2, 2}, rng);
    auto y = mul(x, x);
    REQUIRE_THROWS_AS(y.backward(), ShapeError);
}

TEST_CASE("grad flows through deep chains without recursion limits", "[autograd]") {
    Rng rng(18);
    auto x = leaf({4}, rng, 0.01);
    Var<double> h = x;
    for (int i = 0; i < 2000; ++i) h = add_scalar(mul_scalar(h, 1.0001), 1e-6);
    auto loss = sum_all(h);
    loss.backward();
    REQUIRE(x.grad().defined());
    double want = std::pow(1.0001, 2000);
    for (int64_t i = 0; i < 4; ++i)
        REQUIRE_THAT(x.grad()[i], Catch::Matchers::WithinRel(want, 1e-9));
}
