#include "calm/lstm.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <utility>

namespace calm {
namespace {

using EMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<EMat> emap(Matrix& m) { return {m.data.data(), m.rows, m.cols}; }
Eigen::Map<const EMat> emap(const Matrix& m) { return {m.data.data(), m.rows, m.cols}; }

void ensure_shape(Matrix& m, int rows, int cols) {
    if (m.rows != rows || m.cols != cols) m = Matrix(rows, cols);
}

} // namespace

void RecurrentState::reset(int rows, int hidden) {
    h = Matrix(rows, hidden);
    c = Matrix(rows, hidden);
}

void LstmLayer::init(int in_dim, int hidden_dim, Rng& rng) {
    in = in_dim;
    hidden = hidden_dim;
    const real bound = real(1.0 / std::sqrt(double(hidden_dim)));
    w_x = Matrix::uniform(in_dim, 4 * hidden_dim, -bound, bound, rng);
    w_h = Matrix::uniform(hidden_dim, 4 * hidden_dim, -bound, bound, rng);
    b = Matrix(1, 4 * hidden_dim);
    // Open forget gates keep early cell state alive under online updates.
    for (int j = hidden_dim; j < 2 * hidden_dim; ++j) b.at(0, j) = real(1);
    g_w_x = Matrix(in_dim, 4 * hidden_dim);
    g_w_h = Matrix(hidden_dim, 4 * hidden_dim);
    g_b = Matrix(1, 4 * hidden_dim);
}

void LstmLayer::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".w_x", &w_x, &g_w_x});
    out.push_back({prefix + ".w_h", &w_h, &g_w_h});
    out.push_back({prefix + ".b", &b, &g_b});
}

long LstmLayer::param_count() const {
    return long(w_x.size()) + long(w_h.size()) + long(b.size());
}

void lstm_forward(const LstmLayer& layer, const Matrix& x_all, int rows, int steps,
                  RecurrentState& state, LstmLayerCache& cache) {
    const int H = layer.hidden;
    if (rows < 1 || steps < 1) throw ShapeError("lstm_forward: rows and steps must be positive");
    if (x_all.rows != rows * steps || x_all.cols != layer.in)
        throw ShapeError("lstm_forward: input shape does not match rows*steps x in");
    if (state.h.rows != rows || state.h.cols != H || state.c.rows != rows || state.c.cols != H)
        throw ShapeError("lstm_forward: state shape does not match rows x hidden");

    cache.rows = rows;
    cache.steps = steps;
    cache.x_all = x_all;
    ensure_shape(cache.gates_all, rows * steps, 4 * H);
    ensure_shape(cache.c_all, rows * steps, H);
    ensure_shape(cache.tanhc_all, rows * steps, H);
    ensure_shape(cache.h_all, rows * steps, H);
    ensure_shape(cache.h_prev_all, rows * steps, H);
    ensure_shape(cache.c_prev_all, rows * steps, H);

    auto G = emap(cache.gates_all);
    // One matmul projects every position's input; the recurrent term joins per step.
    G.noalias() = emap(cache.x_all) * emap(layer.w_x);

    for (int t = 0; t < steps; ++t) {
        auto hp = emap(cache.h_prev_all).middleRows(t * rows, rows);
        auto cp = emap(cache.c_prev_all).middleRows(t * rows, rows);
        if (t == 0) {
            hp = emap(state.h);
            cp = emap(state.c);
        } else {
            hp = emap(cache.h_all).middleRows((t - 1) * rows, rows);
            cp = emap(cache.c_all).middleRows((t - 1) * rows, rows);
        }

        auto g = G.middleRows(t * rows, rows);
        g.noalias() += hp * emap(layer.w_h);
        g.rowwise() += emap(layer.b).row(0);

        auto gi = g.middleCols(0, H).array();
        auto gf = g.middleCols(H, H).array();
        auto gg = g.middleCols(2 * H, H).array();
        auto go = g.middleCols(3 * H, H).array();
        gi = real(1) / (real(1) + (-gi).exp());
        gf = real(1) / (real(1) + (-gf).exp());
        gg = gg.tanh();
        go = real(1) / (real(1) + (-go).exp());

        auto cb = emap(cache.c_all).middleRows(t * rows, rows);
        cb.array() = gf * cp.array() + gi * gg;
        auto tc = emap(cache.tanhc_all).middleRows(t * rows, rows);
        tc.array() = cb.array().tanh();
        emap(cache.h_all).middleRows(t * rows, rows).array() = go * tc.array();
    }

    emap(state.h) = emap(cache.h_all).bottomRows(rows);
    emap(state.c) = emap(cache.c_all).bottomRows(rows);
}

Matrix lstm_backward(LstmLayer& layer, const LstmLayerCache& cache, const Matrix& dh_all) {
    const int rows = cache.rows, steps = cache.steps, H = layer.hidden;
    if (rows < 1 || steps < 1) throw ShapeError("lstm_backward: no cached forward pass");
    if (dh_all.rows != rows * steps || dh_all.cols != H)
        throw ShapeError("lstm_backward: dh shape does not match rows*steps x hidden");

    Matrix dgates(rows * steps, 4 * H);
    Matrix dh_carry(rows, H), dc_carry(rows, H);
    auto DG = emap(dgates);

    for (int t = steps - 1; t >= 0; --t) {
        EMat dh = emap(dh_all).middleRows(t * rows, rows) + emap(dh_carry);
        auto gates = emap(cache.gates_all).middleRows(t * rows, rows);
        auto gi = gates.middleCols(0, H).array();
        auto gf = gates.middleCols(H, H).array();
        auto gg = gates.middleCols(2 * H, H).array();
        auto go = gates.middleCols(3 * H, H).array();
        auto tc = emap(cache.tanhc_all).middleRows(t * rows, rows).array();
        auto cp = emap(cache.c_prev_all).middleRows(t * rows, rows).array();

        EMat dc = (dh.array() * go * (real(1) - tc * tc)).matrix() + emap(dc_carry);
        auto dg = DG.middleRows(t * rows, rows);
        dg.middleCols(0, H).array() = dc.array() * gg * gi * (real(1) - gi);
        dg.middleCols(H, H).array() = dc.array() * cp * gf * (real(1) - gf);
        dg.middleCols(2 * H, H).array() = dc.array() * gi * (real(1) - gg * gg);
        dg.middleCols(3 * H, H).array() = dh.array() * tc * go * (real(1) - go);

        emap(dc_carry).array() = dc.array() * gf;
        emap(dh_carry).noalias() = dg * emap(layer.w_h).transpose();
        // t == 0 leaves dh_carry/dc_carry unused: the pre-window state takes
        // no gradient, truncating backpropagation at the batch boundary.
    }

    emap(layer.g_w_x).noalias() += emap(cache.x_all).transpose() * DG;
    emap(layer.g_w_h).noalias() += emap(cache.h_prev_all).transpose() * DG;
    // Fixed-order bias accumulation keeps results independent of buffer
    // alignment, so identical instances stay bitwise identical.
    for (int p = 0; p < rows * steps; ++p) {
        const real* row = dgates.row(p);
        for (int j = 0; j < 4 * H; ++j) layer.g_b.data[size_t(j)] += row[j];
    }

    Matrix dx(rows * steps, layer.in);
    emap(dx).noalias() = DG * emap(layer.w_x).transpose();
    return dx;
}

LstmStack::LstmStack(const LstmStackConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.vocab < 1 || cfg.embed < 1 || cfg.hidden < 1 || cfg.layers < 1)
        throw ConfigError("lstm stack: vocab, embed, hidden and layers must be positive");
    if (cfg.dropout < 0.0 || cfg.dropout >= 1.0)
        throw ConfigError("lstm stack: dropout must lie in [0, 1)");
    embedding_ = Matrix::uniform(cfg.vocab, cfg.embed, real(-0.1), real(0.1), rng);
    g_embedding_ = Matrix(cfg.vocab, cfg.embed);
    layers_.resize(size_t(cfg.layers));
    for (int l = 0; l < cfg.layers; ++l)
        layers_[size_t(l)].init(l == 0 ? cfg.embed : cfg.hidden, cfg.hidden, rng);
    state_.resize(size_t(cfg.layers));
    staged_.resize(size_t(cfg.layers));
    cache_.resize(size_t(cfg.layers));
    dropout_mask_.resize(cfg.layers > 1 ? size_t(cfg.layers - 1) : 0);
}

void LstmStack::reset_state(int rows) {
    for (auto& s : state_) s.reset(rows, cfg_.hidden);
    staged_ = state_;
}

const Matrix& LstmStack::forward(const TokenId* tokens, int rows, int steps, bool train,
                                 bool stage, Rng* dropout_rng) {
    if (state_.empty() || state_[0].h.rows != rows)
        throw ShapeError("lstm stack: call reset_state(rows) before forward");
    const bool use_dropout = train && cfg_.dropout > 0.0 && cfg_.layers > 1;
    if (use_dropout && dropout_rng == nullptr)
        throw ConfigError("lstm stack: dropout on a training pass needs an rng");

    last_tokens_.assign(tokens, tokens + size_t(rows) * size_t(steps));
    last_rows_ = rows;
    last_steps_ = steps;

    Matrix x0(rows * steps, cfg_.embed);
    for (int r = 0; r < rows; ++r) {
        for (int t = 0; t < steps; ++t) {
            const TokenId id = tokens[r * steps + t];
            if (id >= TokenId(cfg_.vocab)) throw ShapeError("lstm stack: token id out of range");
            auto src = embedding_.row_span(int(id));
            auto dst = x0.row_span(t * rows + r);
            std::copy(src.begin(), src.end(), dst.begin());
        }
    }

    Matrix dropped;
    const Matrix* input = &x0;
    for (int l = 0; l < cfg_.layers; ++l) {
        RecurrentState run = state_[size_t(l)];
        lstm_forward(layers_[size_t(l)], *input, rows, steps, run, cache_[size_t(l)]);
        if (stage) staged_[size_t(l)] = std::move(run);

        if (l + 1 < cfg_.layers) {
            Matrix& mask = dropout_mask_[size_t(l)];
            if (use_dropout) {
                const Matrix& h = cache_[size_t(l)].h_all;
                ensure_shape(mask, h.rows, h.cols);
                const real keep = real(1.0 - cfg_.dropout);
                for (size_t i = 0; i < mask.data.size(); ++i)
                    mask.data[i] = dropout_rng->uniform() < double(keep) ? real(1) / keep : real(0);
                dropped = h;
                emap(dropped).array() *= emap(mask).array();
                input = &dropped;
            } else {
                mask = Matrix();
                input = &cache_[size_t(l)].h_all;
            }
        }
    }
    return cache_.back().h_all;
}

void LstmStack::backward(const Matrix& dh_top) {
    if (last_rows_ == 0) throw ShapeError("lstm stack: backward without a cached forward pass");
    Matrix d = dh_top;
    for (int l = cfg_.layers - 1; l >= 0; --l) {
        Matrix dx = lstm_backward(layers_[size_t(l)], cache_[size_t(l)], d);
        if (l > 0) {
            const Matrix& mask = dropout_mask_[size_t(l - 1)];
            if (mask.rows != 0) emap(dx).array() *= emap(mask).array();
            d = std::move(dx);
        } else {
            for (int r = 0; r < last_rows_; ++r) {
                for (int t = 0; t < last_steps_; ++t) {
                    const TokenId id = last_tokens_[size_t(r) * size_t(last_steps_) + size_t(t)];
                    auto grad = g_embedding_.row_span(int(id));
                    auto src = dx.row_span(t * last_rows_ + r);
                    for (size_t i = 0; i < grad.size(); ++i) grad[i] += src[i];
                }
            }
        }
    }
}

void LstmStack::commit_staged() { state_ = staged_; }

void LstmStack::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".embedding", &embedding_, &g_embedding_});
    for (size_t l = 0; l < layers_.size(); ++l)
        layers_[l].collect_params(prefix + ".lstm" + std::to_string(l), out);
}

long LstmStack::param_count() const {
    long total = long(embedding_.size());
    for (const auto& l : layers_) total += l.param_count();
    return total;
}

} // namespace calm
