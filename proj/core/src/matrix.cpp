#include "calm/matrix.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace calm {

namespace {

using EigenMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<EigenMat>;
using MapConst = Eigen::Map<const EigenMat>;
using MapArr = Eigen::Map<Eigen::Array<real, Eigen::Dynamic, 1>>;

MapConst map(const Matrix& m) { return MapConst(m.data.data(), m.rows, m.cols); }
MapMat map(Matrix& m) { return MapMat(m.data.data(), m.rows, m.cols); }

void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

std::string shape_str(const Matrix& m) {
    return "(" + std::to_string(m.rows) + "x" + std::to_string(m.cols) + ")";
}

} // namespace

Matrix Matrix::filled(int r, int c, real v) {
    Matrix m(r, c);
    std::fill(m.data.begin(), m.data.end(), v);
    return m;
}

Matrix Matrix::uniform(int r, int c, real lo, real hi, Rng& rng) {
    Matrix m(r, c);
    for (auto& x : m.data) x = static_cast<real>(rng.uniform(lo, hi));
    return m;
}

void Matrix::zero() { std::fill(data.begin(), data.end(), real(0)); }

bool Matrix::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](real v) { return std::isfinite(v); });
}

void matmul_into(Matrix& out, const Matrix& a, const Matrix& b, bool accumulate) {
    require(a.cols == b.rows, "matmul: inner dims " + shape_str(a) + " * " + shape_str(b));
    require(out.rows == a.rows && out.cols == b.cols,
            "matmul: output " + shape_str(out) + " for " + shape_str(a) + " * " + shape_str(b));
    if (accumulate)
        map(out).noalias() += map(a) * map(b);
    else
        map(out).noalias() = map(a) * map(b);
}

void matmul_tn_into(Matrix& out, const Matrix& a, const Matrix& b, bool accumulate) {
    require(a.rows == b.rows, "matmul_tn: inner dims " + shape_str(a) + "^T * " + shape_str(b));
    require(out.rows == a.cols && out.cols == b.cols,
            "matmul_tn: output " + shape_str(out) + " for " + shape_str(a) + "^T * " + shape_str(b));
    if (accumulate)
        map(out).noalias() += map(a).transpose() * map(b);
    else
        map(out).noalias() = map(a).transpose() * map(b);
}

void matmul_nt_into(Matrix& out, const Matrix& a, const Matrix& b, bool accumulate) {
    require(a.cols == b.cols, "matmul_nt: inner dims " + shape_str(a) + " * " + shape_str(b) + "^T");
    require(out.rows == a.rows && out.cols == b.rows,
            "matmul_nt: output " + shape_str(out) + " for " + shape_str(a) + " * " + shape_str(b) + "^T");
    if (accumulate)
        map(out).noalias() += map(a) * map(b).transpose();
    else
        map(out).noalias() = map(a) * map(b).transpose();
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows, b.cols);
    matmul_into(out, a, b);
    return out;
}

Matrix affine(const Matrix& x, const Matrix& w, const Matrix& bias) {
    require(bias.rows == 1 && bias.cols == w.cols,
            "affine: bias " + shape_str(bias) + " for weight " + shape_str(w));
    Matrix y(x.rows, w.cols);
    matmul_into(y, x, w);
    map(y).rowwise() += MapConst(bias.data.data(), 1, bias.cols).row(0);
    return y;
}

AffineGrads affine_backward(const Matrix& x, const Matrix& w, const Matrix& dy) {
    require(dy.rows == x.rows && dy.cols == w.cols,
            "affine_backward: dy " + shape_str(dy) + " for x " + shape_str(x) + ", w " + shape_str(w));
    AffineGrads g;
    g.dx = Matrix(x.rows, x.cols);
    g.dw = Matrix(w.rows, w.cols);
    g.dbias = Matrix(1, w.cols);
    matmul_nt_into(g.dx, dy, w);
    matmul_tn_into(g.dw, x, dy);
    // Fixed-order accumulation: Eigen reductions round differently depending
    // on buffer alignment, which breaks bitwise reproducibility across
    // otherwise identical model instances.
    for (int r = 0; r < dy.rows; ++r) {
        const real* row = dy.row(r);
        for (int c = 0; c < dy.cols; ++c) g.dbias.data[size_t(c)] += row[c];
    }
    return g;
}

void sigmoid_inplace(std::span<real> v) {
    MapArr a(v.data(), static_cast<Eigen::Index>(v.size()));
    a = real(1) / (real(1) + (-a).exp());
}

void tanh_inplace(std::span<real> v) {
    MapArr a(v.data(), static_cast<Eigen::Index>(v.size()));
    a = a.tanh();
}

void exp_inplace(std::span<real> v) {
    MapArr a(v.data(), static_cast<Eigen::Index>(v.size()));
    a = a.exp();
}

void softmax_inplace(std::span<real> v) {
    MapArr a(v.data(), static_cast<Eigen::Index>(v.size()));
    if (!a.isFinite().all()) throw NumericError("softmax: non-finite input");
    a -= a.maxCoeff();
    a = a.exp();
    real total = 0; // fixed-order sum, see affine_backward
    for (real x : v) total += x;
    a /= total;
}

std::vector<real> softmax(std::span<const real> v) {
    std::vector<real> out(v.begin(), v.end());
    softmax_inplace(out);
    return out;
}

void softmax_rows_inplace(Matrix& m) {
    for (int r = 0; r < m.rows; ++r) softmax_inplace(m.row_span(r));
}

double cross_entropy(std::span<const real> probs, TokenId target, bool* clamped, double floor) {
    if (target >= probs.size())
        throw ShapeError("cross_entropy: target " + std::to_string(target) + " out of range " +
                         std::to_string(probs.size()));
    double p = static_cast<double>(probs[target]);
    if (!std::isfinite(p)) throw NumericError("cross_entropy: non-finite probability");
    if (p < floor) {
        p = floor;
        if (clamped) *clamped = true;
    }
    return -std::log(p);
}

} // namespace calm
