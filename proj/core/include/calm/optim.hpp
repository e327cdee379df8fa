#pragma once

#include <functional>
#include <string>
#include <vector>

#include "calm/matrix.hpp"

namespace calm {

// A named view onto one parameter tensor and its gradient buffer. Models hand
// these out; optimizers and the gradient checker operate through them.
struct ParamRef {
    std::string name;
    Matrix* value = nullptr;
    Matrix* grad = nullptr;
};

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// First/second moment buffers, one pair per parameter, plus the shared step
// counter used for bias correction.
struct AdamState {
    AdamHyper hyper;
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    long t = 0;

    static AdamState init(const std::vector<ParamRef>& params, AdamHyper hyper = {});
};

// One Adam step over all params. Throws NumericError if any gradient entry is
// non-finite; parameters are untouched in that case.
void adam_step(AdamState& state, const std::vector<ParamRef>& params);

// Plain SGD: p -= lr * g. Same non-finite-gradient policy as adam_step.
void sgd_step(const std::vector<ParamRef>& params, double lr);

void zero_grads(const std::vector<ParamRef>& params);

// Central-difference gradient check. `loss` must recompute the scalar loss
// from the current parameter values (and fill nothing); analytic gradients
// are read from the grad buffers as provided by the caller. Returns the
// largest relative error  |a - n| / max(|a|, |n|, 1e-4)  over all entries.
double grad_check(const std::function<double()>& loss, const std::vector<ParamRef>& params,
                  double eps = 1e-5);

} // namespace calm
