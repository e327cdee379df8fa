#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "calm/common.hpp"

namespace calm {

// Dense row-major 2-D array. Biases and other vectors are 1xN matrices so
// that parameters, gradients and optimizer buffers share one shape system.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<real> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, real(0)) {}

    static Matrix zeros(int r, int c) { return Matrix(r, c); }
    static Matrix filled(int r, int c, real v);
    static Matrix uniform(int r, int c, real lo, real hi, Rng& rng);

    real& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    real at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
    real* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
    const real* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }
    std::span<real> row_span(int r) { return {row(r), static_cast<std::size_t>(cols)}; }
    std::span<const real> row_span(int r) const { return {row(r), static_cast<std::size_t>(cols)}; }

    std::size_t size() const { return data.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
    void zero();
    bool all_finite() const;
};

// out = a * b, shapes (m x k)(k x n). `accumulate` adds instead of assigning.
void matmul_into(Matrix& out, const Matrix& a, const Matrix& b, bool accumulate = false);
// out = a^T * b, a is (k x m) interpreted transposed.
void matmul_tn_into(Matrix& out, const Matrix& a, const Matrix& b, bool accumulate = false);
// out = a * b^T, b is (n x k) interpreted transposed.
void matmul_nt_into(Matrix& out, const Matrix& a, const Matrix& b, bool accumulate = false);
Matrix matmul(const Matrix& a, const Matrix& b);

// y = x W + b with the 1xN bias broadcast over rows. Throws ShapeError on
// dimension mismatch.
Matrix affine(const Matrix& x, const Matrix& w, const Matrix& bias);

struct AffineGrads {
    Matrix dx;
    Matrix dw;
    Matrix dbias;
};
AffineGrads affine_backward(const Matrix& x, const Matrix& w, const Matrix& dy);

// Elementwise helpers over contiguous blocks (vectorized in the backend).
void sigmoid_inplace(std::span<real> v);
void tanh_inplace(std::span<real> v);
void exp_inplace(std::span<real> v);

// Max-subtracted softmax. Throws NumericError if the input is not finite.
void softmax_inplace(std::span<real> v);
std::vector<real> softmax(std::span<const real> v);
void softmax_rows_inplace(Matrix& m);

inline constexpr double kProbFloor = 1e-30;

// -ln(probs[target]) in nats; probabilities below `floor` are clamped and
// `clamped`, when given, is set.
double cross_entropy(std::span<const real> probs, TokenId target, bool* clamped = nullptr,
                     double floor = kProbFloor);

} // namespace calm
