#include "tensorlens/linalg.hpp"

#include "tensorlens/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace tensorlens {

namespace {

std::string shape(const DenseMatrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(std::string(what) + ": " + shape(a) + " vs " + shape(b));
    }
}

} // namespace

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                             " does not match " + std::to_string(rows) + "x" +
                             std::to_string(cols));
    }
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

DenseMatrix DenseMatrix::diagonal(std::span<const double> diag) {
    DenseMatrix m(diag.size(), diag.size());
    for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
    return m;
}

DenseMatrix DenseMatrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw DimensionError("ragged row list");
        data.insert(data.end(), row.begin(), row.end());
    }
    return DenseMatrix(r, c, std::move(data));
}

DenseMatrix DenseMatrix::transpose() const {
    DenseMatrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

bool DenseMatrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

DenseMatrix& DenseMatrix::operator+=(const DenseMatrix& other) {
    require_same_shape(*this, other, "matrix add");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

DenseMatrix& DenseMatrix::operator-=(const DenseMatrix& other) {
    require_same_shape(*this, other, "matrix subtract");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

DenseMatrix& DenseMatrix::operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
}

DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b) { return a += b; }
DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b) { return a -= b; }
DenseMatrix operator*(double s, DenseMatrix a) { return a *= s; }

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: " + shape(a) + " * " + shape(b));
    }
    DenseMatrix out(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* orow = out.row(i).data();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = b.row(k).data();
            for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

Vector matvec(const DenseMatrix& a, std::span<const double> x) {
    if (a.cols() != x.size()) {
        throw DimensionError("matvec: " + shape(a) + " * vector of " + std::to_string(x.size()));
    }
    Vector out(a.rows(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) out[i] = dot(a.row(i), x);
    return out;
}

Vector matvec_transposed(const DenseMatrix& a, std::span<const double> x) {
    if (a.rows() != x.size()) {
        throw DimensionError("matvec_transposed: " + shape(a) + "^T * vector of " +
                             std::to_string(x.size()));
    }
    Vector out(a.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const auto row = a.row(i);
        for (std::size_t j = 0; j < a.cols(); ++j) out[j] += row[j] * xi;
    }
    return out;
}

DenseMatrix hadamard(const DenseMatrix& a, const DenseMatrix& b) {
    require_same_shape(a, b, "hadamard");
    DenseMatrix out = a;
    auto o = out.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bd[i];
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double frobenius_norm(const DenseMatrix& a) { return norm2(a.data()); }

double max_abs(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("max_abs_diff: length mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = std::abs(a[i] - b[i]);
        // NaN must not read as agreement.
        if (!(d <= m)) m = std::isnan(d) ? d : std::max(m, d);
        if (std::isnan(m)) return m;
    }
    return m;
}

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    return max_abs_diff(a.data(), b.data());
}

Vector vec_cols(const DenseMatrix& x) {
    Vector v(x.size());
    for (std::size_t l = 0; l < x.rows(); ++l)
        for (std::size_t d = 0; d < x.cols(); ++d) v[flat_index(l, d, x.rows())] = x(l, d);
    return v;
}

DenseMatrix unvec_cols(std::span<const double> v, std::size_t rows, std::size_t cols) {
    if (v.size() != rows * cols) {
        throw DimensionError("unvec_cols: vector of " + std::to_string(v.size()) +
                             " cannot fill " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    DenseMatrix x(rows, cols);
    for (std::size_t l = 0; l < rows; ++l)
        for (std::size_t d = 0; d < cols; ++d) x(l, d) = v[flat_index(l, d, rows)];
    return x;
}

DenseMatrix kron(const DenseMatrix& a, const DenseMatrix& b) {
    const std::size_t r = b.rows();
    const std::size_t s = b.cols();
    DenseMatrix out(a.rows() * r, a.cols() * s);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) {
            const double aij = a(i, j);
            if (aij == 0.0) continue;
            for (std::size_t k = 0; k < r; ++k)
                for (std::size_t l = 0; l < s; ++l) out(r * i + k, s * j + l) = aij * b(k, l);
        }
    return out;
}

AffineOperator::AffineOperator(DenseMatrix m, Vector b) : matrix(std::move(m)), bias(std::move(b)) {
    if (matrix.rows() != matrix.cols()) {
        throw DimensionError("affine operator matrix must be square, got " + shape(matrix));
    }
    if (bias.size() != matrix.rows()) {
        throw DimensionError("affine operator bias length " + std::to_string(bias.size()) +
                             " does not match dim " + std::to_string(matrix.rows()));
    }
}

AffineOperator::AffineOperator(DenseMatrix m) {
    Vector zero_bias(m.rows(), 0.0);
    *this = AffineOperator(std::move(m), std::move(zero_bias));
}

AffineOperator AffineOperator::identity(std::size_t dim) {
    return {DenseMatrix::identity(dim), Vector(dim, 0.0)};
}

AffineOperator AffineOperator::zero(std::size_t dim) {
    return {DenseMatrix(dim, dim), Vector(dim, 0.0)};
}

Vector AffineOperator::apply(std::span<const double> x) const {
    Vector y = matvec(matrix, x);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bias[i];
    return y;
}

AffineOperator AffineOperator::linear_part() const { return {matrix, Vector(dim(), 0.0)}; }

DenseMatrix apply_operator(const AffineOperator& op, const DenseMatrix& x) {
    if (op.dim() != x.size()) {
        throw DimensionError("apply_operator: operator dim " + std::to_string(op.dim()) +
                             " vs input " + shape(x));
    }
    return unvec_cols(op.apply(vec_cols(x)), x.rows(), x.cols());
}

AffineOperator compose(const AffineOperator& outer, const AffineOperator& inner) {
    if (outer.dim() != inner.dim()) {
        throw DimensionError("compose: dims " + std::to_string(outer.dim()) + " and " +
                             std::to_string(inner.dim()));
    }
    Vector bias = matvec(outer.matrix, inner.bias);
    for (std::size_t i = 0; i < bias.size(); ++i) bias[i] += outer.bias[i];
    return {matmul(outer.matrix, inner.matrix), std::move(bias)};
}

AffineOperator bilinear_operator(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.rows() != a.cols() || b.rows() != b.cols()) {
        throw DimensionError("bilinear_operator expects square A and B, got " + shape(a) +
                             " and " + shape(b));
    }
    DenseMatrix m = kron(b.transpose(), a);
    const std::size_t dim = m.rows();
    return {std::move(m), Vector(dim, 0.0)};
}

AffineOperator right_multiply_operator(const DenseMatrix& m, std::size_t seq_len) {
    return bilinear_operator(DenseMatrix::identity(seq_len), m);
}

AffineOperator hadamard_operator(const DenseMatrix& h) {
    const Vector diag = vec_cols(h);
    return {DenseMatrix::diagonal(diag), Vector(diag.size(), 0.0)};
}

Tensor4View::Tensor4View(const AffineOperator& op, std::size_t seq_len, std::size_t width)
    : op_(&op), seq_len_(seq_len), width_(width) {
    if (op.dim() != seq_len * width) {
        throw DimensionError("Tensor4View: operator dim " + std::to_string(op.dim()) + " != " +
                             std::to_string(seq_len) + "*" + std::to_string(width));
    }
}

DenseMatrix Tensor4View::slice(std::size_t i, std::size_t j) const {
    if (i >= seq_len_ || j >= seq_len_) throw IndexError("Tensor4View::slice: position out of range");
    DenseMatrix s(width_, width_);
    for (std::size_t a = 0; a < width_; ++a)
        for (std::size_t b = 0; b < width_; ++b) s(a, b) = (*this)(i, a, j, b);
    return s;
}

DenseMatrix contract(const Tensor4View& t, const DenseMatrix& x) {
    const std::size_t L = t.seq_len();
    const std::size_t D = t.width();
    if (x.rows() != L || x.cols() != D) {
        throw DimensionError("contract: tensor is " + std::to_string(L) + "x" + std::to_string(D) +
                             " but input is " + shape(x));
    }
    DenseMatrix out(L, D);
    for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t a = 0; a < D; ++a) {
            double s = 0.0;
            for (std::size_t j = 0; j < L; ++j)
                for (std::size_t b = 0; b < D; ++b) s += t(i, a, j, b) * x(j, b);
            out(i, a) = s + t.op().bias[flat_index(i, a, L)];
        }
    }
    return out;
}

SpectralNormResult spectral_norm(const DenseMatrix& a, PowerIterationOptions options) {
    SpectralNormResult result;
    const std::size_t n = a.cols();
    if (n == 0 || a.rows() == 0) {
        result.converged = true;
        return result;
    }
    Vector v(n, 1.0 / std::sqrt(static_cast<double>(n)));
    bool restarted = false;
    double previous = -1.0;
    for (std::size_t it = 1; it <= options.max_iterations; ++it) {
        const Vector av = matvec(a, v);
        const double estimate = norm2(av);
        Vector w = matvec_transposed(a, av);
        const double wn = norm2(w);
        result.value = estimate;
        result.iterations = it;
        if (wn == 0.0) {
            // Start vector in the null space. Retry once from a fixed
            // non-symmetric vector before concluding A = 0 on this subspace.
            if (!restarted) {
                restarted = true;
                for (std::size_t k = 0; k < n; ++k) v[k] = static_cast<double>(k + 1);
                const double vn = norm2(v);
                for (auto& x : v) x /= vn;
                previous = -1.0;
                continue;
            }
            result.converged = true;
            return result;
        }
        for (std::size_t k = 0; k < n; ++k) v[k] = w[k] / wn;
        if (previous >= 0.0 && std::abs(estimate - previous) <= options.rel_tol * estimate) {
            result.converged = true;
            // One more product so the reported value reflects the final vector.
            result.value = std::max(estimate, norm2(matvec(a, v)));
            return result;
        }
        previous = estimate;
    }
    return result;
}

} // namespace tensorlens
