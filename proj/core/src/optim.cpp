#include "calm/optim.hpp"

#include <cmath>

namespace calm {

AdamState AdamState::init(const std::vector<ParamRef>& params, AdamHyper hyper) {
    AdamState s;
    s.hyper = hyper;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& p : params) {
        s.m.emplace_back(p.value->rows, p.value->cols);
        s.v.emplace_back(p.value->rows, p.value->cols);
    }
    return s;
}

void adam_step(AdamState& state, const std::vector<ParamRef>& params) {
    if (state.m.size() != params.size())
        throw ShapeError("adam_step: state holds " + std::to_string(state.m.size()) +
                         " buffers for " + std::to_string(params.size()) + " params");
    for (const auto& p : params)
        if (!p.grad->all_finite())
            throw NumericError("adam_step: non-finite gradient in " + p.name);

    state.t += 1;
    const auto& h = state.hyper;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& val = *params[i].value;
        const Matrix& g = *params[i].grad;
        Matrix& m = state.m[i];
        Matrix& v = state.v[i];
        if (!val.same_shape(m) || !val.same_shape(g))
            throw ShapeError("adam_step: shape mismatch in " + params[i].name);
        for (std::size_t k = 0; k < val.size(); ++k) {
            const double gk = static_cast<double>(g.data[k]);
            const double mk = h.beta1 * static_cast<double>(m.data[k]) + (1.0 - h.beta1) * gk;
            const double vk = h.beta2 * static_cast<double>(v.data[k]) + (1.0 - h.beta2) * gk * gk;
            m.data[k] = static_cast<real>(mk);
            v.data[k] = static_cast<real>(vk);
            const double mhat = mk / bc1;
            const double vhat = vk / bc2;
            val.data[k] -= static_cast<real>(h.lr * mhat / (std::sqrt(vhat) + h.eps));
        }
    }
}

void sgd_step(const std::vector<ParamRef>& params, double lr) {
    for (const auto& p : params)
        if (!p.grad->all_finite())
            throw NumericError("sgd_step: non-finite gradient in " + p.name);
    for (const auto& p : params) {
        if (!p.value->same_shape(*p.grad))
            throw ShapeError("sgd_step: shape mismatch in " + p.name);
        for (std::size_t k = 0; k < p.value->size(); ++k)
            p.value->data[k] -= static_cast<real>(lr * static_cast<double>(p.grad->data[k]));
    }
}

void zero_grads(const std::vector<ParamRef>& params) {
    for (const auto& p : params) p.grad->zero();
}

double grad_check(const std::function<double()>& loss, const std::vector<ParamRef>& params,
                  double eps) {
    double worst = 0.0;
    for (const auto& p : params) {
        for (std::size_t k = 0; k < p.value->size(); ++k) {
            const real saved = p.value->data[k];
            p.value->data[k] = saved + static_cast<real>(eps);
            const double up = loss();
            p.value->data[k] = saved - static_cast<real>(eps);
            const double down = loss();
            p.value->data[k] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double analytic = static_cast<double>(p.grad->data[k]);
            // Central differences resolve absolute errors down to roughly
            // machine_eps * |loss| / eps; the floor keeps that noise on
            // near-zero gradient entries from registering as relative error.
            const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-4});
            worst = std::max(worst, std::fabs(analytic - numeric) / denom);
        }
    }
    return worst;
}

} // namespace calm
