#include <doctest.h>

#include <cmath>
#include <vector>

#include "calm/lstm.hpp"

using namespace calm;

TEST_SUITE_BEGIN("lstm");

namespace {

// Independent scalar reference for a single-unit cell, gates packed i,f,g,o.
struct ScalarLstm {
    double h = 0, c = 0;
    static double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }
    void step(double x, const double* wx, const double* wh, const double* b) {
        double i = sig(wx[0] * x + wh[0] * h + b[0]);
        double f = sig(wx[1] * x + wh[1] * h + b[1]);
        double g = std::tanh(wx[2] * x + wh[2] * h + b[2]);
        double o = sig(wx[3] * x + wh[3] * h + b[3]);
        c = f * c + i * g;
        h = o * std::tanh(c);
    }
};

} // namespace

TEST_CASE("zero weights, state and input give zero outputs") {
    LstmLayer layer;
    Rng rng(1);
    layer.init(3, 4, rng);
    layer.w_x.zero();
    layer.w_h.zero();
    layer.b.zero();
    RecurrentState state;
    state.reset(2, 4);
    Matrix x(2 * 5, 3);
    LstmLayerCache cache;
    lstm_forward(layer, x, 2, 5, state, cache);
    for (real v : cache.h_all.data) CHECK(double(v) == doctest::Approx(0.0).epsilon(1).scale(1e-15));
    for (real v : state.c.data) CHECK(double(v) == doctest::Approx(0.0).epsilon(1).scale(1e-15));
}

TEST_CASE("single-unit cell matches the scalar oracle") {
    Rng rng(7);
    LstmLayer layer;
    layer.init(1, 1, rng);
    double wx[4], wh[4], b[4];
    for (int g = 0; g < 4; ++g) {
        layer.w_x.at(0, g) = real(rng.uniform(-1, 1));
        layer.w_h.at(0, g) = real(rng.uniform(-1, 1));
        layer.b.at(0, g) = real(rng.uniform(-0.5, 0.5));
        wx[g] = double(layer.w_x.at(0, g));
        wh[g] = double(layer.w_h.at(0, g));
        b[g] = double(layer.b.at(0, g));
    }
    const int steps = 6;
    Matrix x(steps, 1);
    for (int t = 0; t < steps; ++t) x.at(t, 0) = real(rng.uniform(-2, 2));

    RecurrentState state;
    state.reset(1, 1);
    LstmLayerCache cache;
    lstm_forward(layer, x, 1, steps, state, cache);

    ScalarLstm ref;
    for (int t = 0; t < steps; ++t) {
        ref.step(double(x.at(t, 0)), wx, wh, b);
        CHECK(double(cache.h_all.at(t, 0)) == doctest::Approx(ref.h).epsilon(1e-12));
        CHECK(double(cache.c_all.at(t, 0)) == doctest::Approx(ref.c).epsilon(1e-12));
    }
    CHECK(double(state.h.at(0, 0)) == doctest::Approx(ref.h).epsilon(1e-12));
}

TEST_CASE("state keeps its shape across windows") {
    Rng rng(9);
    LstmLayer layer;
    layer.init(5, 8, rng);
    RecurrentState state;
    state.reset(3, 8);
    LstmLayerCache cache;
    for (int window = 0; window < 4; ++window) {
        Matrix x = Matrix::uniform(3 * 2, 5, real(-1), real(1), rng);
        lstm_forward(layer, x, 3, 2, state, cache);
        CHECK(state.h.rows == 3);
        CHECK(state.h.cols == 8);
        CHECK(state.c.rows == 3);
        CHECK(state.c.cols == 8);
        CHECK(state.h.all_finite());
    }
}

TEST_CASE("layer backward matches finite differences") {
    Rng rng(11);
    LstmLayer layer;
    layer.init(3, 4, rng);
    const int rows = 2, steps = 3;
    Matrix x = Matrix::uniform(rows * steps, 3, real(-1), real(1), rng);
    Matrix h0 = Matrix::uniform(rows, 4, real(-0.5), real(0.5), rng);
    Matrix c0 = Matrix::uniform(rows, 4, real(-0.5), real(0.5), rng);

    auto loss_fn = [&]() {
        RecurrentState st;
        st.h = h0;
        st.c = c0;
        LstmLayerCache cache;
        lstm_forward(layer, x, rows, steps, st, cache);
        double s = 0;
        for (real v : cache.h_all.data) s += 0.5 * double(v) * double(v);
        return s;
    };

    RecurrentState st;
    st.h = h0;
    st.c = c0;
    LstmLayerCache cache;
    lstm_forward(layer, x, rows, steps, st, cache);
    Matrix dh = cache.h_all;
    layer.g_w_x.zero();
    layer.g_w_h.zero();
    layer.g_b.zero();
    Matrix dx = lstm_backward(layer, cache, dh);

    std::vector<ParamRef> params;
    layer.collect_params("l", params);
    CHECK(grad_check(loss_fn, params, 1e-5) < 1e-7);

    // Input gradient via the same finite-difference scheme.
    Matrix gx_analytic = dx;
    std::vector<ParamRef> xparam{{"x", &x, &gx_analytic}};
    CHECK(grad_check(loss_fn, xparam, 1e-5) < 1e-7);
}

TEST_CASE("gradients never flow across a window boundary") {
    Rng rng(13);
    LstmLayer layer;
    layer.init(2, 3, rng);
    const int rows = 2, steps = 2;
    Matrix x1 = Matrix::uniform(rows * steps, 2, real(-1), real(1), rng);
    Matrix x2 = Matrix::uniform(rows * steps, 2, real(-1), real(1), rng);

    // Path A: two windows in sequence, backward only through the second.
    RecurrentState state;
    state.reset(rows, 3);
    LstmLayerCache c1, c2;
    lstm_forward(layer, x1, rows, steps, state, c1);
    RecurrentState mid;
    mid.h = state.h;
    mid.c = state.c;
    lstm_forward(layer, x2, rows, steps, state, c2);
    Matrix dh = Matrix::filled(rows * steps, 3, real(1));
    layer.g_w_x.zero();
    layer.g_w_h.zero();
    layer.g_b.zero();
    lstm_backward(layer, c2, dh);
    Matrix ga = layer.g_w_x, gb = layer.g_w_h;

    // Path B: same second window, state injected directly.
    LstmLayerCache c3;
    lstm_forward(layer, x2, rows, steps, mid, c3);
    layer.g_w_x.zero();
    layer.g_w_h.zero();
    layer.g_b.zero();
    lstm_backward(layer, c3, dh);
    CHECK(layer.g_w_x.data == ga.data);
    CHECK(layer.g_w_h.data == gb.data);
}

TEST_CASE("stack forward is deterministic and staging leaves committed state alone") {
    Rng rng(21);
    LstmStackConfig cfg{/*vocab=*/11, /*embed=*/6, /*hidden=*/5, /*layers=*/2, /*dropout=*/0.0};
    LstmStack stack(cfg, rng);
    stack.reset_state(2);
    std::vector<TokenId> tokens{1, 4, 9, 2, 7, 3}; // 2 rows x 3 steps
    Matrix first = stack.forward(tokens.data(), 2, 3, false, true, nullptr);
    Matrix second = stack.forward(tokens.data(), 2, 3, false, true, nullptr);
    CHECK(first.data == second.data); // committed state unchanged by staging
    stack.commit_staged();
    Matrix third = stack.forward(tokens.data(), 2, 3, false, true, nullptr);
    CHECK(third.data != first.data); // state advanced after the commit
}

TEST_CASE("two-layer stack gradients pass finite differences") {
    Rng rng(23);
    LstmStackConfig cfg{7, 4, 3, 2, 0.0};
    LstmStack stack(cfg, rng);
    stack.reset_state(2);
    std::vector<TokenId> tokens{1, 6, 0, 3, 5, 2}; // 2 rows x 3 steps

    auto loss_fn = [&]() {
        const Matrix& h = stack.forward(tokens.data(), 2, 3, false, false, nullptr);
        double s = 0;
        for (real v : h.data) s += 0.5 * double(v) * double(v);
        return s;
    };

    std::vector<ParamRef> params;
    stack.collect_params("m", params);
    zero_grads(params);
    Matrix h = stack.forward(tokens.data(), 2, 3, false, false, nullptr);
    stack.backward(h);
    CHECK(grad_check(loss_fn, params, 1e-5) < 1e-6);
}

TEST_CASE("dropout only acts on training passes and respects the rate") {
    Rng rng(25);
    LstmStackConfig cfg{9, 8, 16, 2, 0.5};
    LstmStack stack(cfg, rng);
    stack.reset_state(2);
    std::vector<TokenId> tokens{1, 2, 3, 4, 5, 6, 7, 8}; // 2 rows x 4 steps

    Matrix eval1 = stack.forward(tokens.data(), 2, 4, false, false, nullptr);
    Matrix eval2 = stack.forward(tokens.data(), 2, 4, false, false, nullptr);
    CHECK(eval1.data == eval2.data); // evaluation ignores dropout

    Rng drop(31);
    Matrix train1 = stack.forward(tokens.data(), 2, 4, true, false, &drop);
    Matrix train2 = stack.forward(tokens.data(), 2, 4, true, false, &drop);
    CHECK(train1.data != train2.data); // fresh masks per pass
}

TEST_CASE("dropout zero makes training and evaluation passes identical") {
    Rng rng(27);
    LstmStackConfig cfg{9, 4, 6, 2, 0.0};
    LstmStack stack(cfg, rng);
    stack.reset_state(1);
    std::vector<TokenId> tokens{1, 2, 3};
    Rng drop(5);
    Matrix eval = stack.forward(tokens.data(), 1, 3, false, false, nullptr);
    Matrix train = stack.forward(tokens.data(), 1, 3, true, false, &drop);
    CHECK(eval.data == train.data);
}

TEST_CASE("stack parameter count matches enumerated shapes") {
    Rng rng(29);
    LstmStackConfig cfg{13, 5, 4, 2, 0.0};
    LstmStack stack(cfg, rng);
    std::vector<ParamRef> params;
    stack.collect_params("m", params);
    long total = 0;
    for (const auto& p : params) total += long(p.value->size());
    CHECK(total == stack.param_count());
    // embedding 13*5 + layer1 (5*16+4*16+16) + layer2 (4*16+4*16+16)
    CHECK(stack.param_count() == 13 * 5 + (5 * 16 + 4 * 16 + 16) + (4 * 16 + 4 * 16 + 16));
}

TEST_SUITE_END();
