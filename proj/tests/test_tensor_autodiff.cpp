#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "nsl/convolution.hpp"
#include "nsl/gradcheck.hpp"
#include "nsl/graph.hpp"
#include "nsl/rng.hpp"
#include "nsl/tensor.hpp"
#include "oracles.hpp"

using namespace nsl;

TEST_CASE("tensor shape and storage invariants") {
    Tensor t = Tensor::from({1, 2, 3, 4, 5, 6}, {2, 3});
    CHECK(t.size() == 6);
    CHECK(t(1, 2) == 6.0);
    CHECK_THROWS_AS(Tensor::from({1, 2}, {3}), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({0, 2}), ShapeError);
    CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
    CHECK(t.reshaped({3, 2})(2, 1) == 6.0);
}

TEST_CASE("matmul identity and hand-sum cases") {
    Graph g;
    const int a = g.value(Tensor::from({1, 2, 3, 4}, {2, 2}));
    const int i2 = g.value(Tensor::identity(2));
    const int c = matmul(g, a, i2);
    CHECK(g.val(c)(0, 0) == 1.0);
    CHECK(g.val(c)(0, 1) == 2.0);
    CHECK(g.val(c)(1, 0) == 3.0);
    CHECK(g.val(c)(1, 1) == 4.0);

    const int r = g.value(Tensor::from({1, 2}, {1, 2}));
    const int col = g.value(Tensor::from({5, 6}, {2, 1}));
    const int s = matmul(g, r, col);
    CHECK(g.val(s)[0] == 17.0);
}

TEST_CASE("matmul matches the triple-loop oracle") {
    Rng rng(7);
    Tensor a = oracle::random_tensor({3, 4}, rng);
    Tensor b = oracle::random_tensor({4, 2}, rng);
    Graph g;
    const int c = matmul(g, g.value(a), g.value(b));
    const Tensor want = oracle::matmul(a, b);
    CHECK(oracle::max_abs_diff(g.val(c), want) < 1e-12);
}

TEST_CASE("matmul shape error names both shapes") {
    Graph g;
    const int a = g.value(Tensor::zeros({2, 3}));
    const int b = g.value(Tensor::zeros({2, 3}));
    CHECK_THROWS_WITH_AS(matmul(g, a, b), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("im2col single-window and 3x3 read-off") {
    Tensor x = Tensor::from({1, 2, 3, 4}, {1, 2, 2});
    Tensor cols = im2col(x, 2, 2, 1, 0);
    CHECK(cols.shape() == std::vector<int>{4, 1});
    for (int i = 0; i < 4; ++i) CHECK(cols[i] == x[i]);

    Tensor x9 = Tensor::from({1, 2, 3, 4, 5, 6, 7, 8, 9}, {1, 3, 3});
    Tensor c9 = im2col(x9, 2, 2, 1, 0);
    CHECK(c9.shape() == std::vector<int>{4, 4});
    CHECK(c9(0, 0) == 1.0);
    CHECK(c9(1, 0) == 2.0);
    CHECK(c9(2, 0) == 4.0);
    CHECK(c9(3, 0) == 5.0);
}

TEST_CASE("im2col rejects non-positive output dims") {
    Tensor x = Tensor::zeros({1, 2, 2});
    CHECK_THROWS_AS(im2col(x, 3, 3, 1, 0), ShapeError);
    CHECK_THROWS_AS(im2col(x, 2, 2, 0, 0), ShapeError);
}

TEST_CASE("im2col + matmul equals the sliding-window convolution oracle") {
    Rng rng(11);
    Tensor x = oracle::random_tensor({2, 5, 5}, rng);
    Tensor w = oracle::random_tensor({3, 2, 3, 3}, rng);
    const Tensor want = oracle::conv2d(x, w, 2, 1);

    Tensor cols = im2col(x, 3, 3, 2, 1);
    Tensor wmat = w.reshaped({3, 2 * 3 * 3});
    Graph g;
    const int y = matmul(g, g.value(wmat), g.value(cols));
    const Tensor got = g.val(y).reshaped(want.shape());
    CHECK(oracle::max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("backward of linear and quadratic losses") {
    Graph g;
    const int w = g.param(Tensor::from({1, -2, 3, 4}, {2, 2}));
    const int loss = sum(g, w);
    g.backward(loss);
    for (int i = 0; i < 4; ++i) CHECK(g.grad(w)[i] == 1.0);

    Graph g2;
    const int w2 = g2.param(Tensor::from({1, -2, 3, 4}, {2, 2}));
    const int l2 = scale(g2, sum(g2, mul(g2, w2, w2)), 0.5);
    g2.backward(l2);
    for (int i = 0; i < 4; ++i) CHECK(g2.grad(w2)[i] == g2.val(w2)[i]);
}

TEST_CASE("backward requires a scalar loss") {
    Graph g;
    const int w = g.param(Tensor::zeros({2, 2}));
    CHECK_THROWS_AS(g.backward(w), ContractError);
}

TEST_CASE("repeated forward/backward is bit-identical") {
    Rng rng(3);
    Tensor a = oracle::random_tensor({4, 3}, rng);
    Tensor b = oracle::random_tensor({3, 5}, rng);
    auto run = [&]() {
        Graph g;
        const int pa = g.param(a);
        const int pb = g.param(b);
        const int loss = sum(g, relu(g, matmul(g, pa, pb)));
        g.backward(loss);
        return std::pair{g.val(loss)[0], Tensor(g.grad(pa))};
    };
    auto [l1, g1] = run();
    auto [l2, g2] = run();
    CHECK(l1 == l2);
    for (int i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("finite_diff_check: quadratic is exact, constants are zero") {
    auto square = [](const ParamList& p, ParamList* grads) {
        const double w = p[0].second[0];
        if (grads) grads->push_back({"w", Tensor::scalar(2.0 * w)});
        return w * w;
    };
    auto report = finite_diff_check(square, {{"w", Tensor::scalar(3.0)}}, 1e-4, 1e-8);
    CHECK(report.pass);
    CHECK(report.worst < 1e-10);

    auto constant = [](const ParamList&, ParamList* grads) {
        if (grads) grads->push_back({"w", Tensor::scalar(0.0)});
        return 42.0;
    };
    auto creport = finite_diff_check(constant, {{"w", Tensor::scalar(1.0)}}, 1e-4, 1e-12);
    CHECK(creport.pass);
    CHECK(creport.worst == 0.0);
}

TEST_CASE("finite_diff_check flags non-finite evaluations") {
    auto bad = [](const ParamList& p, ParamList* grads) {
        if (grads) grads->push_back({"w", Tensor::scalar(1.0)});
        const double w = p[0].second[0];
        return w == 1.0 ? 1.0 : std::numeric_limits<double>::quiet_NaN();
    };
    CHECK_THROWS_AS(finite_diff_check(bad, {{"w", Tensor::scalar(1.0)}}, 1e-3, 1e-5), EvalError);
}

// Builds a small composite graph (conv via im2col + bilinear block + cross
// entropy) and checks every op's backward against central differences.
TEST_CASE("composite conv + bilinear + cross-entropy gradient check") {
    Rng rng(19);
    const int B = 2, C = 2, H = 5, W = 5, K = 3;
    Tensor x = oracle::random_tensor({B, C, H, W}, rng);
    const ConvGeom geom = conv_geometry(C, H, W, 3, 3, 1, 1);
    std::vector<int> labels = {1, 0};

    ParamList params = {
        {"w", oracle::random_tensor({K, C * 9}, rng, -0.5, 0.5)},
        {"ms", oracle::random_tensor({9, 9}, rng, -0.5, 0.5)},
        {"bias", oracle::random_tensor({K}, rng, -0.5, 0.5)},
        {"head", oracle::random_tensor({2, K}, rng, -0.5, 0.5)},
    };

    auto f = [&](const ParamList& p, ParamList* grads) {
        Graph g;
        const int xw = g.value(x);
        const int w = g.param(p[0].second);
        const int ms = g.param(p[1].second);
        const int bias = g.param(p[2].second);
        const int head = g.param(p[3].second);
        const int cols = im2col_node(g, xw, geom);
        const int mcols = block_matmul(g, ms, cols, C);
        const int y = bias_channels(g, matmul_cols(g, w, mcols), bias);
        const int pooled = gap_cols(g, relu(g, y));
        const int logits = matmul(g, pooled, transpose(g, head));
        const int loss = softmax_cross_entropy(g, logits, labels);
        if (grads) {
            g.backward(loss);
            grads->push_back({"w", g.grad(w)});
            grads->push_back({"ms", g.grad(ms)});
            grads->push_back({"bias", g.grad(bias)});
            grads->push_back({"head", g.grad(head)});
        }
        return g.val(loss)[0];
    };

    auto report = finite_diff_check(f, params, 1e-5, 1e-5);
    CHECK(report.pass);
}

TEST_CASE("gradients of remaining ops pass finite differences") {
    Rng rng(23);
    const int B = 2;

    SUBCASE("batchnorm_train") {
        Tensor x = oracle::random_tensor({B, 3, 4}, rng);
        ParamList params = {{"x", x},
                            {"gamma", oracle::random_tensor({3}, rng, 0.5, 1.5)},
                            {"beta", oracle::random_tensor({3}, rng)}};
        auto f = [&](const ParamList& p, ParamList* grads) {
            Graph g;
            const int xi = g.param(p[0].second);
            const int ga = g.param(p[1].second);
            const int be = g.param(p[2].second);
            const int y = batchnorm_train(g, xi, ga, be, 1e-5);
            // weight the outputs so the loss is not permutation symmetric
            Tensor wgt(g.val(y).shape());
            for (int i = 0; i < wgt.size(); ++i) wgt[i] = 0.3 + 0.1 * i;
            const int loss = sum(g, mul(g, y, g.value(wgt)));
            if (grads) {
                g.backward(loss);
                grads->push_back({"x", g.grad(xi)});
                grads->push_back({"gamma", g.grad(ga)});
                grads->push_back({"beta", g.grad(be)});
            }
            return g.val(loss)[0];
        };
        CHECK(finite_diff_check(f, params, 1e-5, 1e-5).pass);
    }

    SUBCASE("batchnorm_eval") {
        Tensor x = oracle::random_tensor({B, 3, 4}, rng);
        Tensor rm = oracle::random_tensor({3}, rng);
        Tensor rv = oracle::random_tensor({3}, rng, 0.5, 1.5);
        ParamList params = {{"x", x},
                            {"gamma", oracle::random_tensor({3}, rng, 0.5, 1.5)},
                            {"beta", oracle::random_tensor({3}, rng)}};
        auto f = [&](const ParamList& p, ParamList* grads) {
            Graph g;
            const int xi = g.param(p[0].second);
            const int ga = g.param(p[1].second);
            const int be = g.param(p[2].second);
            const int y = batchnorm_eval(g, xi, ga, be, rm, rv, 1e-5);
            Tensor wgt(g.val(y).shape());
            for (int i = 0; i < wgt.size(); ++i) wgt[i] = 0.2 + 0.05 * i;
            const int loss = sum(g, mul(g, y, g.value(wgt)));
            if (grads) {
                g.backward(loss);
                grads->push_back({"x", g.grad(xi)});
                grads->push_back({"gamma", g.grad(ga)});
                grads->push_back({"beta", g.grad(be)});
            }
            return g.val(loss)[0];
        };
        CHECK(finite_diff_check(f, params, 1e-5, 1e-5).pass);
    }

    SUBCASE("maxpool with gap-protected windows") {
        Tensor x({1, 1, 4, 4});
        for (int i = 0; i < 16; ++i) x[i] = 0.37 * i - 2.0;  // strictly increasing, no ties
        ParamList params = {{"x", x}};
        auto f = [&](const ParamList& p, ParamList* grads) {
            Graph g;
            const int xi = g.param(p[0].second);
            const int y = maxpool(g, xi, 2, 2);
            Tensor wgt(g.val(y).shape());
            for (int i = 0; i < wgt.size(); ++i) wgt[i] = 1.0 + 0.25 * i;
            const int loss = sum(g, mul(g, y, g.value(wgt)));
            if (grads) {
                g.backward(loss);
                grads->push_back({"x", g.grad(xi)});
            }
            return g.val(loss)[0];
        };
        CHECK(finite_diff_check(f, params, 1e-5, 1e-5).pass);
    }

    SUBCASE("sphere_matmul all modes") {
        for (SphereNorm mode : {SphereNorm::Both, SphereNorm::XOnly, SphereNorm::None}) {
            ParamList params = {{"w", oracle::random_tensor({3, 4}, rng, 0.2, 1.0)},
                                {"cols", oracle::random_tensor({B, 4, 5}, rng, 0.2, 1.0)}};
            auto f = [&, mode](const ParamList& p, ParamList* grads) {
                Graph g;
                const int w = g.param(p[0].second);
                const int cols = g.param(p[1].second);
                const int y = sphere_matmul(g, w, cols, mode, 1e-6);
                Tensor wgt(g.val(y).shape());
                for (int i = 0; i < wgt.size(); ++i) wgt[i] = 0.4 + 0.03 * i;
                const int loss = sum(g, mul(g, y, g.value(wgt)));
                if (grads) {
                    g.backward(loss);
                    grads->push_back({"w", g.grad(w)});
                    grads->push_back({"cols", g.grad(cols)});
                }
                return g.val(loss)[0];
            };
            CHECK(finite_diff_check(f, params, 1e-5, 1e-5).pass);
        }
    }

    SUBCASE("sphere_linear both modes") {
        for (SphereNorm mode : {SphereNorm::Both, SphereNorm::XOnly}) {
            ParamList params = {{"x", oracle::random_tensor({B, 4}, rng, 0.2, 1.0)},
                                {"w", oracle::random_tensor({3, 4}, rng, 0.2, 1.0)}};
            auto f = [&, mode](const ParamList& p, ParamList* grads) {
                Graph g;
                const int x = g.param(p[0].second);
                const int w = g.param(p[1].second);
                const int y = sphere_linear(g, x, w, mode, 1e-6);
                Tensor wgt(g.val(y).shape());
                for (int i = 0; i < wgt.size(); ++i) wgt[i] = 0.4 + 0.05 * i;
                const int loss = sum(g, mul(g, y, g.value(wgt)));
                if (grads) {
                    g.backward(loss);
                    grads->push_back({"x", g.grad(x)});
                    grads->push_back({"w", g.grad(w)});
                }
                return g.val(loss)[0];
            };
            CHECK(finite_diff_check(f, params, 1e-5, 1e-5).pass);
        }
    }

    SUBCASE("colscale and dynamic variants") {
        ParamList params = {{"cols", oracle::random_tensor({B, 8, 3}, rng)},
                            {"d", oracle::random_tensor({4}, rng)},
                            {"db", oracle::random_tensor({B, 4}, rng)}};
        auto f = [&](const ParamList& p, ParamList* grads) {
            Graph g;
            const int cols = g.param(p[0].second);
            const int d = g.param(p[1].second);
            const int db = g.param(p[2].second);
            const int y1 = colscale_blocks(g, cols, d, 2);
            const int y2 = colscale_blocks_dyn(g, y1, db, 2);
            const int loss = sum(g, mul(g, y2, y2));
            if (grads) {
                g.backward(loss);
                grads->push_back({"cols", g.grad(cols)});
                grads->push_back({"d", g.grad(d)});
                grads->push_back({"db", g.grad(db)});
            }
            return g.val(loss)[0];
        };
        CHECK(finite_diff_check(f, params, 1e-5, 1e-5).pass);
    }

    SUBCASE("block_matmul_dyn, cholesky_product, softmax, abs_sum") {
        ParamList params = {{"mb", oracle::random_tensor({B, 3, 3}, rng)},
                            {"cols", oracle::random_tensor({B, 6, 2}, rng)},
                            {"l", oracle::random_tensor({3, 3}, rng, 0.3, 1.0)},
                            {"a", oracle::random_tensor({2, 4}, rng)}};
        auto f = [&](const ParamList& p, ParamList* grads) {
            Graph g;
            const int mb = g.param(p[0].second);
            const int cols = g.param(p[1].second);
            const int l = g.param(p[2].second);
            const int a = g.param(p[3].second);
            const int y = block_matmul_dyn(g, mb, cols, 2);
            const int m = cholesky_product(g, l);
            const int sm = row_softmax(g, a);
            Tensor wgt(g.val(sm).shape());
            for (int i = 0; i < wgt.size(); ++i) wgt[i] = 0.1 * (i + 1);
            int loss = add(g, sum(g, mul(g, y, y)), abs_sum(g, m));
            loss = add(g, loss, sum(g, mul(g, sm, g.value(wgt))));
            if (grads) {
                g.backward(loss);
                grads->push_back({"mb", g.grad(mb)});
                grads->push_back({"cols", g.grad(cols)});
                grads->push_back({"l", g.grad(l)});
                grads->push_back({"a", g.grad(a)});
            }
            return g.val(loss)[0];
        };
        CHECK(finite_diff_check(f, params, 1e-5, 1e-5).pass);
    }
}

TEST_CASE("cross entropy hand values and stabilization") {
    Graph g;
    const int logits = g.value(Tensor::from({0, 0}, {1, 2}));
    const int loss = softmax_cross_entropy(g, logits, {0});
    CHECK(g.val(loss)[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Graph g2;
    const int big = g2.value(Tensor::from({1000, 0, 0}, {1, 3}));
    const int l2 = softmax_cross_entropy(g2, big, {0});
    CHECK(g2.val(l2)[0] < 1e-6);
    CHECK(std::isfinite(g2.val(l2)[0]));

    Graph g3;
    const int lg = g3.value(Tensor::zeros({1, 2}));
    CHECK_THROWS_AS(softmax_cross_entropy(g3, lg, {2}), ArgumentError);
}

TEST_CASE("dual scalar drives exact Hessian-vector products") {
    // f(w) = sum(w^3): grad = 3 w^2, H.u = 6 w .* u, checked via tangents.
    Tensor w0 = Tensor::from({0.5, -1.25, 2.0}, {3});
    Tensor u = Tensor::from({1.0, 0.5, -2.0}, {3});
    GraphT<Dual> g;
    const int w = g.param(lift<Dual>(w0, &u));
    const int w2 = mul(g, w, w);
    const int loss = sum(g, mul(g, w2, w));
    g.backward(loss);
    const Tensor hvp = tangents_of(g.grad(w));
    for (int i = 0; i < 3; ++i) CHECK(hvp[i] == doctest::Approx(6.0 * w0[i] * u[i]).epsilon(1e-12));
}
