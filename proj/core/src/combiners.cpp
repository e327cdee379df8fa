#include "calm/combiners.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace calm {
namespace {

using EMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<EMat> emap(Matrix& m) { return {m.data.data(), m.rows, m.cols}; }
Eigen::Map<const EMat> emap(const Matrix& m) { return {m.data.data(), m.rows, m.cols}; }

void ensure_shape(Matrix& m, int rows, int cols) {
    if (m.rows != rows || m.cols != cols) m = Matrix(rows, cols);
}

void check_rows(const std::vector<std::vector<real>>& rows, size_t n_weights) {
    if (rows.empty()) throw ShapeError("combine: need at least one expert");
    for (const auto& r : rows)
        if (r.size() != rows[0].size() || r.empty())
            throw ShapeError("combine: expert rows must share a nonzero length");
    if (n_weights != rows.size()) throw ShapeError("combine: one weight per expert required");
}

std::vector<real> weighted_sum(const std::vector<std::vector<real>>& rows,
                               const std::vector<real>& a) {
    std::vector<real> out(rows[0].size(), real(0));
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = 0; j < out.size(); ++j) out[j] += a[i] * rows[i][j];
    return out;
}

void check_batch(const std::vector<const Matrix*>& logits, const Matrix& w) {
    if (logits.empty()) throw ShapeError("mixture: need at least one expert");
    for (const Matrix* m : logits) {
        if (m == nullptr) throw ShapeError("mixture: null expert logits");
        if (m->rows != logits[0]->rows || m->cols != logits[0]->cols)
            throw ShapeError("mixture: expert logits must share a shape");
    }
    if (logits[0]->rows < 1 || logits[0]->cols < 1)
        throw ShapeError("mixture: empty expert logits");
    if (w.cols != int(logits.size()) || (w.rows != 1 && w.rows != logits[0]->rows))
        throw ShapeError("mixture: w must be 1 x n or positions x n");
}

void moe_forward(const std::vector<const Matrix*>& logits, const Matrix& w, MixtureCache& cache) {
    const int n = int(logits.size());
    const int p = logits[0]->rows, v = logits[0]->cols;
    cache.expert_probs.resize(size_t(n));
    for (int i = 0; i < n; ++i) {
        cache.expert_probs[size_t(i)] = *logits[size_t(i)];
        softmax_rows_inplace(cache.expert_probs[size_t(i)]);
    }
    cache.gate_probs = w;
    softmax_rows_inplace(cache.gate_probs);

    ensure_shape(cache.probs, p, v);
    cache.probs.zero();
    auto out = emap(cache.probs);
    for (int i = 0; i < n; ++i) {
        auto pi = emap(cache.expert_probs[size_t(i)]);
        if (w.rows == 1) {
            out.noalias() += cache.gate_probs.at(0, i) * pi;
        } else {
            out.array() += pi.array().colwise() * emap(cache.gate_probs).col(i).array();
        }
    }
}

void poe_forward(const std::vector<const Matrix*>& logits, const Matrix& w, MixtureCache& cache) {
    const int n = int(logits.size());
    const int p = logits[0]->rows, v = logits[0]->cols;
    ensure_shape(cache.z, p, v);
    cache.z.zero();
    auto z = emap(cache.z);
    for (int i = 0; i < n; ++i) {
        auto yi = emap(*logits[size_t(i)]);
        if (w.rows == 1) {
            z.noalias() += w.at(0, i) * yi;
        } else {
            z.array() += yi.array().colwise() * emap(w).col(i).array();
        }
    }
    cache.probs = cache.z;
    softmax_rows_inplace(cache.probs);
}

} // namespace

const char* combiner_name(Combiner c) {
    switch (c) {
        case Combiner::Ensemble: return "ensemble";
        case Combiner::Moe: return "moe";
        case Combiner::Poe: return "poe";
    }
    throw ConfigError("combiner_name: unknown combiner");
}

Combiner combiner_from_name(const std::string& name) {
    if (name == "ensemble") return Combiner::Ensemble;
    if (name == "moe") return Combiner::Moe;
    if (name == "poe") return Combiner::Poe;
    throw ConfigError("unknown combiner '" + name + "'");
}

std::vector<real> combine_ensemble(const std::vector<std::vector<real>>& expert_probs) {
    if (expert_probs.empty()) throw ShapeError("combine: need at least one expert");
    check_rows(expert_probs, expert_probs.size());
    std::vector<real> a(expert_probs.size(), real(1) / real(expert_probs.size()));
    return weighted_sum(expert_probs, a);
}

std::vector<real> combine_moe(const std::vector<std::vector<real>>& expert_logits,
                              const std::vector<real>& w) {
    check_rows(expert_logits, w.size());
    std::vector<real> a(w);
    softmax_inplace(std::span<real>(a.data(), a.size()));
    std::vector<std::vector<real>> probs(expert_logits);
    for (auto& row : probs) softmax_inplace(std::span<real>(row.data(), row.size()));
    return weighted_sum(probs, a);
}

std::vector<real> combine_poe(const std::vector<std::vector<real>>& expert_logits,
                              const std::vector<real>& w) {
    check_rows(expert_logits, w.size());
    std::vector<real> z(expert_logits[0].size(), real(0));
    for (size_t i = 0; i < expert_logits.size(); ++i)
        for (size_t j = 0; j < z.size(); ++j) z[j] += w[i] * expert_logits[i][j];
    softmax_inplace(std::span<real>(z.data(), z.size()));
    return z;
}

void mixture_forward(Combiner kind, const std::vector<const Matrix*>& expert_logits,
                     const Matrix& w, MixtureCache& cache) {
    check_batch(expert_logits, w);
    cache.kind = kind;
    cache.n = int(expert_logits.size());
    cache.broadcast_w = (w.rows == 1);
    switch (kind) {
        case Combiner::Ensemble: {
            // Constant gates make this the exact mean of expert softmaxes.
            Matrix zero_w(1, cache.n);
            cache.broadcast_w = true;
            moe_forward(expert_logits, zero_w, cache);
            break;
        }
        case Combiner::Moe:
            moe_forward(expert_logits, w, cache);
            break;
        case Combiner::Poe:
            poe_forward(expert_logits, w, cache);
            break;
    }
}

real mean_cross_entropy(const Matrix& probs, const std::vector<int>& targets, bool* clamped) {
    if (int(targets.size()) != probs.rows)
        throw ShapeError("mean_cross_entropy: one target per position required");
    if (clamped != nullptr) *clamped = false;
    double sum = 0;
    for (int q = 0; q < probs.rows; ++q) {
        if (targets[size_t(q)] < 0 || targets[size_t(q)] >= probs.cols)
            throw ShapeError("mean_cross_entropy: target out of range");
        sum += cross_entropy(probs.row_span(q), TokenId(targets[size_t(q)]), clamped);
    }
    return real(sum / double(probs.rows));
}

void mixture_backward(const std::vector<const Matrix*>& expert_logits, const Matrix& w,
                      const MixtureCache& cache, const std::vector<int>& targets,
                      std::vector<Matrix>* dlogits, Matrix* dw) {
    check_batch(expert_logits, w);
    const int n = cache.n;
    const int p = expert_logits[0]->rows, v = expert_logits[0]->cols;
    if (cache.probs.rows != p || cache.probs.cols != v)
        throw ShapeError("mixture_backward: cache does not match the logits");
    if (int(targets.size()) != p)
        throw ShapeError("mixture_backward: one target per position required");
    if (dlogits != nullptr && int(dlogits->size()) != n)
        throw ShapeError("mixture_backward: dlogits must hold one matrix per expert");

    if (cache.kind == Combiner::Poe) {
        // dz = (probs - onehot) / p, dY_i = w_i * dz, dw_i = <Y_i, dz>.
        Matrix dz = cache.probs;
        auto dzm = emap(dz);
        dzm /= real(p);
        for (int q = 0; q < p; ++q) dz.at(q, targets[size_t(q)]) -= real(1) / real(p);
        for (int i = 0; i < n; ++i) {
            if (dlogits != nullptr) {
                auto di = emap((*dlogits)[size_t(i)]);
                if (cache.broadcast_w) {
                    di.noalias() += w.at(0, i) * dzm;
                } else {
                    di.array() += dzm.array().colwise() * emap(w).col(i).array();
                }
            }
            if (dw != nullptr) {
                // Fixed-order sums keep the result independent of buffer
                // alignment (bitwise reproducibility across instances).
                const Matrix& ym = *expert_logits[size_t(i)];
                if (cache.broadcast_w) {
                    real acc = 0;
                    for (size_t k = 0; k < ym.data.size(); ++k) acc += ym.data[k] * dz.data[k];
                    dw->at(0, i) += acc;
                } else {
                    for (int q = 0; q < p; ++q) {
                        real acc = 0;
                        for (int j = 0; j < v; ++j) acc += ym.at(q, j) * dz.at(q, j);
                        dw->at(q, i) += acc;
                    }
                }
            }
        }
        return;
    }

    // MoE path (Ensemble shares it with constant gates).
    const Matrix& gates = cache.gate_probs;
    Matrix da(gates.rows, gates.cols);
    for (int i = 0; i < n; ++i) {
        const Matrix& pi = cache.expert_probs[size_t(i)];
        for (int q = 0; q < p; ++q) {
            const int y = targets[size_t(q)];
            const double py = std::max(double(cache.probs.at(q, y)), kProbFloor);
            const double ai = double(gates.at(gates.rows == 1 ? 0 : q, i));
            const double piy = double(pi.at(q, y));
            if (dlogits != nullptr) {
                const real s = real(ai * piy / (py * double(p)));
                auto dst = (*dlogits)[size_t(i)].row_span(q);
                auto src = pi.row_span(q);
                for (int j = 0; j < v; ++j) dst[size_t(j)] += s * src[size_t(j)];
                dst[size_t(y)] -= s;
            }
            da.at(gates.rows == 1 ? 0 : q, i) -= real(piy / (py * double(p)));
        }
    }
    if (dw != nullptr) {
        if (cache.kind == Combiner::Ensemble) return; // forward ignores w
        for (int q = 0; q < gates.rows; ++q) {
            auto a = gates.row_span(q);
            auto d = da.row_span(q);
            double dot = 0;
            for (int i = 0; i < n; ++i) dot += double(a[size_t(i)]) * double(d[size_t(i)]);
            for (int i = 0; i < n; ++i)
                dw->at(q, i) += real(double(a[size_t(i)]) * (double(d[size_t(i)]) - dot));
        }
    }
}

} // namespace calm
