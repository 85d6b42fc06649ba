#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "robal/rng.hpp"
#include "robal/tape.hpp"

using namespace robal;

namespace {

Array random_array(Shape s, Rng& rng, double lo = -2.0, double hi = 2.0) {
    Array a = Array::zeros(std::move(s));
    for (double& v : a.v) v = rng.uniform(lo, hi);
    return a;
}

// independent central-difference oracle (plain function evaluations only)
double fd_slope(const std::function<double(const Array&)>& f, Array p, size_t i, double h) {
    const double orig = p.v[i];
    p.v[i] = orig + h;
    const double fp = f(p);
    p.v[i] = orig - h;
    const double fm = f(p);
    return (fp - fm) / (2.0 * h);
}

}  // namespace

TEST_CASE("elementwise forward values") {
    Tape t;
    Var a = t.constant(Array::from({2}, {-1.0, 2.0}));
    CHECK(t.relu(a).val().v == std::vector<double>{0.0, 2.0});

    Var ls = t.log_softmax(t.constant(Array::from({1, 2}, {0.0, 0.0})), 1);
    CHECK(ls.val().v[0] == doctest::Approx(-0.6931471805599453).epsilon(1e-15));
    CHECK(ls.val().v[1] == doctest::Approx(-0.6931471805599453).epsilon(1e-15));
}

TEST_CASE("shape mismatch is rejected with shapes reported") {
    Tape t;
    Var a = t.constant(Array::zeros({2, 3}));
    Var b = t.constant(Array::zeros({3, 2}));
    try {
        t.add(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("(2,3)") != std::string::npos);
        CHECK(msg.find("(3,2)") != std::string::npos);
    }
}

TEST_CASE("log and div domain errors") {
    Tape t;
    CHECK_THROWS_AS(t.log(t.constant(Array::from({1}, {0.0}))), DomainError);
    CHECK_THROWS_AS(t.log(t.constant(Array::from({1}, {-1.0}))), DomainError);
    Var a = t.constant(Array::from({2}, {1.0, 1.0}));
    Var b = t.constant(Array::from({2}, {1.0, 0.0}));
    CHECK_THROWS_AS(t.div(a, b), DomainError);
}

TEST_CASE("conv2d with a 1x1 kernel equals elementwise scale") {
    Rng rng(7);
    Array x = random_array({2, 3, 4, 4}, rng);
    Array k = Array::zeros({3, 3, 1, 1});
    // diagonal 1x1 kernel: out channel i = 2.5 * in channel i
    for (int i = 0; i < 3; ++i) k.v[static_cast<size_t>(i * 3 + i)] = 2.5;
    Tape t;
    Var out = t.conv2d(t.constant(x), t.constant(k), 1, 0);
    Var ref = t.scale(t.constant(x), 2.5);
    REQUIRE(out.shape() == ref.shape());
    for (size_t i = 0; i < x.v.size(); ++i)
        CHECK(out.val().v[i] == doctest::Approx(ref.val().v[i]).epsilon(1e-15));
}

TEST_CASE("backward of CE equals softmax minus onehot") {
    // symmetric two-logit case: z = [0,0], y = 0 -> [-0.5, 0.5]
    Tape t;
    Var z = t.leaf(Array::from({1, 2}, {0.0, 0.0}), true);
    Var loss = t.scale(t.sum_all(t.gather_rows(t.log_softmax(z, 1), {0})), -1.0);
    t.backward(loss);
    const auto& g = t.grad(z.id);
    CHECK(g[0] == doctest::Approx(-0.5).epsilon(1e-14));
    CHECK(g[1] == doctest::Approx(0.5).epsilon(1e-14));

    // general case: grad is softmax(z) - onehot(y) to 1e-12
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const int C = 2 + static_cast<int>(rng.index(6));
        Array zv = random_array({1, C}, rng, -3.0, 3.0);
        const int y = static_cast<int>(rng.index(C));
        Tape t2;
        Var zz = t2.leaf(zv, true);
        Var l = t2.scale(t2.sum_all(t2.gather_rows(t2.log_softmax(zz, 1), {y})), -1.0);
        t2.backward(l);
        const auto& gg = t2.grad(zz.id);
        double denom = 0.0, mx = -1e300;
        for (double v : zv.v) mx = std::max(mx, v);
        for (double v : zv.v) denom += std::exp(v - mx);
        for (int i = 0; i < C; ++i) {
            const double p = std::exp(zv.v[static_cast<size_t>(i)] - mx) / denom;
            const double expect = p - (i == y ? 1.0 : 0.0);
            CHECK(gg[static_cast<size_t>(i)] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
}

TEST_CASE("feature gradient of CE through a linear head matches the closed form") {
    // W rows [1,0],[0,1], f = [0,0], y = 0 -> [-0.5, 0.5]
    Array w = Array::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tape t;
    Var f = t.leaf(Array::from({1, 2}, {0.0, 0.0}), true);
    Var z = t.matmul(f, t.constant(w), false, true);
    Var loss = t.scale(t.sum_all(t.gather_rows(t.log_softmax(z, 1), {0})), -1.0);
    t.backward(loss);
    const auto& g = t.grad(f.id);
    CHECK(g[0] == doctest::Approx(-0.5).epsilon(1e-14));
    CHECK(g[1] == doctest::Approx(0.5).epsilon(1e-14));

    // random heads: grad_f = sum_{i != y} p_i (W_i - W_y), checked to 1e-10,
    // and against central finite differences
    Rng rng(11);
    for (int trial = 0; trial < 30; ++trial) {
        const int C = 3, d = 4;
        Array wv = random_array({C, d}, rng);
        Array fv = random_array({1, d}, rng);
        const int y = static_cast<int>(rng.index(C));
        Tape t2;
        Var ff = t2.leaf(fv, true);
        Var zz = t2.matmul(ff, t2.constant(wv), false, true);
        Var l = t2.scale(t2.sum_all(t2.gather_rows(t2.log_softmax(zz, 1), {y})), -1.0);
        t2.backward(l);
        const auto& g2 = t2.grad(ff.id);

        // closed form
        std::vector<double> z(static_cast<size_t>(C), 0.0);
        for (int i = 0; i < C; ++i)
            for (int j = 0; j < d; ++j)
                z[static_cast<size_t>(i)] +=
                    wv.v[static_cast<size_t>(i * d + j)] * fv.v[static_cast<size_t>(j)];
        double mx = *std::max_element(z.begin(), z.end()), denom = 0.0;
        for (double v : z) denom += std::exp(v - mx);
        for (int j = 0; j < d; ++j) {
            double expect = 0.0;
            for (int i = 0; i < C; ++i) {
                if (i == y) continue;
                const double p = std::exp(z[static_cast<size_t>(i)] - mx) / denom;
                expect += p * (wv.v[static_cast<size_t>(i * d + j)] -
                               wv.v[static_cast<size_t>(y * d + j)]);
            }
            CHECK(std::abs(g2[static_cast<size_t>(j)] - expect) <= 1e-10);
        }

        // finite differences, step 1e-6
        auto eval = [&](const Array& p) {
            Tape tt;
            Var x = tt.leaf(p, false);
            Var zv2 = tt.matmul(x, tt.constant(wv), false, true);
            return tt.scale(tt.sum_all(tt.gather_rows(tt.log_softmax(zv2, 1), {y})), -1.0)
                .scalar();
        };
        for (size_t j = 0; j < fv.v.size(); ++j) {
            const double fd = fd_slope(eval, fv, j, 1e-6);
            CHECK(std::abs(g2[j] - fd) / std::max(1.0, std::abs(g2[j])) <= 1e-5);
        }
    }
}

TEST_CASE("gradients accumulate additively over fan-out") {
    Rng rng(5);
    Array xv = random_array({3}, rng);
    Tape t;
    Var x = t.leaf(xv, true);
    Var g1 = t.sum_all(t.mul(x, x));
    Tape t2;
    Var x2 = t2.leaf(xv, true);
    Var doubled = t2.add(t2.mul(x2, x2), t2.mul(x2, x2));
    Var g2 = t2.sum_all(doubled);
    t.backward(g1);
    t2.backward(g2);
    for (size_t i = 0; i < xv.v.size(); ++i)
        CHECK(std::abs(2.0 * t.grad(x.id)[i] - t2.grad(x2.id)[i]) <= 1e-12);
}

TEST_CASE("backward requires a scalar output") {
    Tape t;
    Var x = t.leaf(Array::zeros({2, 2}), true);
    Var y = t.relu(x);
    CHECK_THROWS_AS(t.backward(y), ShapeError);
}

TEST_CASE("grad_check: linear map is exact, relu kinks are excluded") {
    Array point = Array::from({3}, {0.5, -1.5, 2.0});
    auto linear = [](Tape& t, Var x) {
        Var c = t.constant(Array::from({3}, {2.0, -3.0, 0.5}));
        return t.sum_all(t.mul(x, c));
    };
    // central differences are exact for a linear map at any step; a larger
    // step keeps f64 roundoff below the bound
    auto rep = grad_check(linear, point, 1e-3);
    CHECK(rep.skipped == 0);
    CHECK(rep.max_rel_err <= 1e-10);

    // relu evaluated exactly at a kink coordinate
    Array kink = Array::from({2}, {0.0, 1.0});
    auto relu_sum = [](Tape& t, Var x) { return t.sum_all(t.relu(x)); };
    auto rep2 = grad_check(relu_sum, kink, 1e-6);
    CHECK(rep2.skipped == 1);
    CHECK(rep2.checked == 1);
    CHECK(rep2.max_rel_err <= 1e-8);
}

TEST_CASE("every primitive passes finite-difference checks on random inputs") {
    Rng rng(2024);
    // smooth (or locally smooth) scalar-valued compositions per primitive
    struct Case {
        const char* name;
        std::function<Var(Tape&, Var)> fn;
        Shape shape;
        double lo, hi;
    };
    Array mat = random_array({4, 3}, rng);
    Array mat2 = random_array({5, 4}, rng);
    Array kernel = random_array({2, 3, 3, 3}, rng, -0.5, 0.5);
    std::vector<Case> cases = {
        {"add", [&](Tape& t, Var x) {
             Var c = t.constant(Array::full(x.shape(), 0.7));
             return t.sum_all(t.mul(t.add(x, c), t.add(x, c)));
         }, {6}, -2, 2},
        {"sub", [&](Tape& t, Var x) {
             Var c = t.constant(Array::full(x.shape(), 0.3));
             return t.sum_all(t.mul(t.sub(x, c), x));
         }, {6}, -2, 2},
        {"mul", [&](Tape& t, Var x) { return t.sum_all(t.mul(x, x)); }, {7}, -2, 2},
        {"div", [&](Tape& t, Var x) {
             Var c = t.constant(Array::full(x.shape(), 2.5));
             return t.sum_all(t.div(x, c));
         }, {5}, -2, 2},
        {"div-by-x", [&](Tape& t, Var x) {
             Var c = t.constant(Array::full(x.shape(), 1.0));
             return t.sum_all(t.div(c, x));
         }, {5}, 0.5, 3},
        {"matmul", [&](Tape& t, Var x) {
             return t.sum_all(t.mul(t.matmul(x, t.constant(mat)),
                                    t.matmul(x, t.constant(mat))));
         }, {2, 4}, -1, 1},
        {"matmul-transposed", [&](Tape& t, Var x) {
             return t.sum_all(t.matmul(x, t.constant(mat2), false, true));
         }, {2, 4}, -1, 1},
        {"conv2d", [&](Tape& t, Var x) {
             Var c = t.conv2d(x, t.constant(kernel), 1, 1);
             return t.sum_all(t.mul(c, c));
         }, {1, 3, 4, 4}, -1, 1},
        {"avgpool2d", [&](Tape& t, Var x) {
             Var p = t.avgpool2d(x, 2);
             return t.sum_all(t.mul(p, p));
         }, {1, 2, 4, 4}, -1, 1},
        {"reshape", [&](Tape& t, Var x) {
             Var r = t.reshape(x, {3, 2});
             return t.sum_all(t.mul(r, r));
         }, {6}, -1, 1},
        {"relu", [&](Tape& t, Var x) { return t.sum_all(t.relu(x)); }, {8}, -2, 2},
        {"exp", [&](Tape& t, Var x) { return t.sum_all(t.exp(x)); }, {6}, -2, 2},
        {"log", [&](Tape& t, Var x) { return t.sum_all(t.log(x)); }, {6}, 0.2, 3},
        {"tanh", [&](Tape& t, Var x) { return t.sum_all(t.tanh(x)); }, {6}, -2, 2},
        {"clamp", [&](Tape& t, Var x) { return t.sum_all(t.clamp(x, -1.0, 1.0)); }, {8}, -2, 2},
        {"scale", [&](Tape& t, Var x) { return t.sum_all(t.scale(x, -1.7)); }, {6}, -2, 2},
        {"broadcast", [&](Tape& t, Var x) {
             Var b = t.broadcast_to(x, {4, 3});
             return t.sum_all(t.mul(b, b));
         }, {1, 3}, -2, 2},
        {"sum-axes", [&](Tape& t, Var x) {
             Var s = t.sum(x, {1});
             return t.sum_all(t.mul(s, s));
         }, {3, 4}, -1, 1},
        {"mean-axes", [&](Tape& t, Var x) {
             Var s = t.mean(x, {0});
             return t.sum_all(t.mul(s, s));
         }, {3, 4}, -1, 1},
        {"l2norm", [&](Tape& t, Var x) { return t.sum_all(t.l2norm(x, 1)); }, {3, 4}, 0.2, 2},
        {"log-softmax", [&](Tape& t, Var x) {
             Var ls = t.log_softmax(x, 1);
             return t.sum_all(t.mul(ls, ls));
         }, {2, 5}, -2, 2},
        {"gather", [&](Tape& t, Var x) {
             Var g = t.gather_rows(x, {1, 0, 2});
             return t.sum_all(t.mul(g, g));
         }, {3, 4}, -2, 2},
    };

    for (const auto& c : cases) {
        CAPTURE(c.name);
        int checked = 0;
        for (int trial = 0; trial < 100; ++trial) {
            Array p = random_array(c.shape, rng, c.lo, c.hi);
            auto rep = grad_check(c.fn, p, 1e-6);
            checked += rep.checked;
            CHECK(rep.max_rel_err <= 1e-5);
        }
        CHECK(checked > 0);
    }
}

TEST_CASE("composed network input gradient matches finite differences") {
    // MLP-like composition over 100 random 8-dimensional inputs
    Rng rng(99);
    Array w0 = random_array({6, 8}, rng);
    Array b0 = random_array({1, 6}, rng, -0.1, 0.1);
    Array w1 = random_array({4, 6}, rng);
    const int y = 1;
    auto net = [&](Tape& t, Var x) {
        Var h = t.matmul(x, t.constant(w0), false, true);
        h = t.add(h, t.constant(b0));
        h = t.relu(h);
        Var z = t.matmul(h, t.constant(w1), false, true);
        return t.scale(t.sum_all(t.gather_rows(t.log_softmax(z, 1), {y})), -1.0);
    };
    for (int trial = 0; trial < 100; ++trial) {
        Array x = random_array({1, 8}, rng, -1.0, 1.0);
        auto rep = grad_check(net, x, 1e-6);
        CHECK(rep.max_rel_err <= 1e-5);
    }
}
