#pragma once

// Dense real64 kernels and the operator algebra everything else is built on.
//
// Flat index convention (fixed repo-wide): an L x D matrix X is vectorized by
// stacking its columns, so entry X[l, d] lands at f(l, d) = d * L + l. Under
// this convention vec(A X B) = (B^T kron A) vec(X) holds verbatim, and an
// operator matrix entry M[f(i, d_out), f(j, d_in)] is the 4th-order tensor
// entry T[i, d_out, j, d_in].

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace tensorlens {

using Vector = std::vector<double>;

class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static DenseMatrix identity(std::size_t n);
    static DenseMatrix diagonal(std::span<const double> diag);
    static DenseMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    DenseMatrix transpose() const;
    bool all_finite() const;

    DenseMatrix& operator+=(const DenseMatrix& other);
    DenseMatrix& operator-=(const DenseMatrix& other);
    DenseMatrix& operator*=(double s);

    friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b);
DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b);
DenseMatrix operator*(double s, DenseMatrix a);

/// Plain product with a fixed (i, k, j) reduction order.
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
Vector matvec(const DenseMatrix& a, std::span<const double> x);
/// a^T x without forming the transpose.
Vector matvec_transposed(const DenseMatrix& a, std::span<const double> x);
DenseMatrix hadamard(const DenseMatrix& a, const DenseMatrix& b);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);
double frobenius_norm(const DenseMatrix& a);
double max_abs(std::span<const double> v);
double max_abs_diff(std::span<const double> a, std::span<const double> b);
double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b);

inline std::size_t flat_index(std::size_t l, std::size_t d, std::size_t seq_len) noexcept {
    return d * seq_len + l;
}

/// Column-stacking vectorization of an L x D matrix.
Vector vec_cols(const DenseMatrix& x);
DenseMatrix unvec_cols(std::span<const double> v, std::size_t rows, std::size_t cols);

/// out[r*i + k, s*j + l] = a[i, j] * b[k, l] for b of shape r x s.
DenseMatrix kron(const DenseMatrix& a, const DenseMatrix& b);

/// Affine map x -> matrix * x + bias on R^dim.
struct AffineOperator {
    DenseMatrix matrix;
    Vector bias;

    AffineOperator() = default;
    AffineOperator(DenseMatrix m, Vector b);
    explicit AffineOperator(DenseMatrix m);

    static AffineOperator identity(std::size_t dim);
    static AffineOperator zero(std::size_t dim);

    std::size_t dim() const noexcept { return matrix.rows(); }
    Vector apply(std::span<const double> x) const;
    /// Same map with the bias dropped.
    AffineOperator linear_part() const;
};

/// apply through the flat form: unvec(matrix * vec(X) + bias).
DenseMatrix apply_operator(const AffineOperator& op, const DenseMatrix& x);

/// outer after inner: matrix = M_o M_i, bias = M_o b_i + b_o.
AffineOperator compose(const AffineOperator& outer, const AffineOperator& inner);

/// Operator of X -> A X B (A: L x L, B: D x D); matrix = B^T kron A, zero bias.
AffineOperator bilinear_operator(const DenseMatrix& a, const DenseMatrix& b);
/// Operator of X -> X M, i.e. (M^T kron I_L).
AffineOperator right_multiply_operator(const DenseMatrix& m, std::size_t seq_len);
/// Operator of X -> H (.) X, i.e. diag(vec(H)).
AffineOperator hadamard_operator(const DenseMatrix& h);

/// L x D x L x D interpretation of an operator of dim L*D. Non-owning.
class Tensor4View {
public:
    Tensor4View(const AffineOperator& op, std::size_t seq_len, std::size_t width);

    std::size_t seq_len() const noexcept { return seq_len_; }
    std::size_t width() const noexcept { return width_; }
    const AffineOperator& op() const noexcept { return *op_; }

    double operator()(std::size_t i, std::size_t d_out, std::size_t j, std::size_t d_in) const {
        return op_->matrix(flat_index(i, d_out, seq_len_), flat_index(j, d_in, seq_len_));
    }
    /// T[i, :, j, :] as a D x D matrix (rows d_out, cols d_in).
    DenseMatrix slice(std::size_t i, std::size_t j) const;

private:
    const AffineOperator* op_;
    std::size_t seq_len_;
    std::size_t width_;
};

/// Slice-wise contraction: row i = sum_j T[i,:,j,:] X[j,:] plus row i of the bias.
DenseMatrix contract(const Tensor4View& t, const DenseMatrix& x);

struct SpectralNormResult {
    double value = 0.0;
    std::size_t iterations = 0;
    bool converged = false;
};

struct PowerIterationOptions {
    double rel_tol = 1e-8;
    std::size_t max_iterations = 10'000;
};

/// Largest singular value by power iteration on A^T A, started from the
/// normalized all-ones vector. A non-converged run still reports its last
/// estimate with converged = false.
SpectralNormResult spectral_norm(const DenseMatrix& a, PowerIterationOptions options = {});

} // namespace tensorlens
