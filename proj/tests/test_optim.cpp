#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "calm/optim.hpp"

using namespace calm;

TEST_SUITE_BEGIN("optim");

namespace {

// Reference Adam on a single scalar, written independently of the library.
struct ScalarAdam {
    double lr, b1, b2, eps;
    double m = 0, v = 0;
    long t = 0;
    double step(double param, double grad) {
        t += 1;
        m = b1 * m + (1 - b1) * grad;
        v = b2 * v + (1 - b2) * grad * grad;
        double mhat = m / (1 - std::pow(b1, double(t)));
        double vhat = v / (1 - std::pow(b2, double(t)));
        return param - lr * mhat / (std::sqrt(vhat) + eps);
    }
};

} // namespace

TEST_CASE("adam with zero gradients from a fresh state leaves params unchanged") {
    Matrix p = Matrix::filled(2, 3, real(1.5));
    Matrix g(2, 3);
    std::vector<ParamRef> params{{"p", &p, &g}};
    AdamState state = AdamState::init(params);
    Matrix before = p;
    for (int i = 0; i < 5; ++i) adam_step(state, params);
    CHECK(p.data == before.data);
    CHECK(state.t == 5);
}

TEST_CASE("first adam step approaches -lr*sign(g) for small eps") {
    Matrix p(1, 1);
    p.at(0, 0) = real(0.7);
    Matrix g(1, 1);
    g.at(0, 0) = real(-0.42);
    std::vector<ParamRef> params{{"p", &p, &g}};
    AdamState state = AdamState::init(params);
    adam_step(state, params);
    // mhat = g, vhat = g^2, so the update is lr*g/(|g|+eps) = lr*sign(g) up to eps.
    CHECK(double(p.at(0, 0)) == doctest::Approx(0.7 + 1e-3).epsilon(1e-6));
}

TEST_CASE("adam matches an independent reference over several steps") {
    Rng rng(55);
    for (int trial = 0; trial < 20; ++trial) {
        double start = rng.uniform(-2, 2);
        Matrix p(1, 1);
        p.at(0, 0) = real(start);
        Matrix g(1, 1);
        std::vector<ParamRef> params{{"p", &p, &g}};
        AdamHyper hyper;
        AdamState state = AdamState::init(params, hyper);
        ScalarAdam ref{hyper.lr, hyper.beta1, hyper.beta2, hyper.eps};
        double ref_param = start;
        for (int step = 0; step < 7; ++step) {
            double grad = rng.uniform(-1, 1);
            g.at(0, 0) = real(grad);
            adam_step(state, params);
            ref_param = ref.step(ref_param, grad);
            CHECK(double(p.at(0, 0)) == doctest::Approx(ref_param).epsilon(1e-12));
        }
    }
}

TEST_CASE("adam rejects non-finite gradients without touching params") {
    Matrix p = Matrix::filled(1, 2, real(3));
    Matrix g(1, 2);
    g.at(0, 1) = std::numeric_limits<real>::infinity();
    std::vector<ParamRef> params{{"p", &p, &g}};
    AdamState state = AdamState::init(params);
    Matrix before = p;
    CHECK_THROWS_AS(adam_step(state, params), NumericError);
    CHECK(p.data == before.data);
    CHECK(state.t == 0);
}

TEST_CASE("sgd applies p -= lr*g") {
    Matrix p = Matrix::filled(2, 2, real(1));
    Matrix g = Matrix::filled(2, 2, real(0.5));
    std::vector<ParamRef> params{{"p", &p, &g}};
    sgd_step(params, 0.1);
    for (real v : p.data) CHECK(double(v) == doctest::Approx(0.95).epsilon(1e-12));
}

TEST_CASE("zero_grads clears every buffer") {
    Matrix p(2, 2);
    Matrix g = Matrix::filled(2, 2, real(7));
    std::vector<ParamRef> params{{"p", &p, &g}};
    zero_grads(params);
    for (real v : g.data) CHECK(v == real(0));
}

TEST_CASE("grad_check on a quadratic is nearly exact") {
    Rng rng(56);
    Matrix x = Matrix::uniform(3, 4, real(-1), real(1), rng);
    Matrix gx(3, 4);
    // f = 0.5*||x||^2, exact gradient x.
    auto loss = [&]() {
        double s = 0;
        for (real v : x.data) s += 0.5 * double(v) * double(v);
        return s;
    };
    gx.data.assign(x.data.begin(), x.data.end());
    std::vector<ParamRef> params{{"x", &x, &gx}};
    CHECK(grad_check(loss, params, 1e-5) < 1e-9);
}

TEST_CASE("grad_check flags a wrong gradient") {
    Matrix x = Matrix::filled(1, 2, real(0.5));
    Matrix gx = Matrix::filled(1, 2, real(3)); // true gradient is x
    auto loss = [&]() {
        double s = 0;
        for (real v : x.data) s += 0.5 * double(v) * double(v);
        return s;
    };
    std::vector<ParamRef> params{{"x", &x, &gx}};
    CHECK(grad_check(loss, params, 1e-5) > 0.5);
}

TEST_SUITE_END();
