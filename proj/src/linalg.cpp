#include "nng/linalg.hpp"

#include <cmath>

namespace nng {

namespace {

void require_square(const Matrix& m, const char* what)
{
    if (m.rows() != m.cols()) {
        throw DimensionMismatch(std::string(what) + ": matrix is " + std::to_string(m.rows()) + "x" +
                                std::to_string(m.cols()) + ", expected square");
    }
}

Eigen::LLT<Matrix> factorize(const SpdMatrix& m)
{
    Eigen::LLT<Matrix> llt(m.matrix());
    if (llt.info() != Eigen::Success) {
        throw NotPositiveDefinite("cholesky: non-positive pivot in " + std::to_string(m.dim()) + "x" +
                                  std::to_string(m.dim()) + " matrix");
    }
    return llt;
}

Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng)
{
    Matrix z(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
            z(i, j) = rng.normal();
        }
    }
    return z;
}

}  // namespace

SpdMatrix::SpdMatrix(const Matrix& m)
{
    require_square(m, "SpdMatrix");
    entries_ = 0.5 * (m + m.transpose());
}

SpdMatrix SpdMatrix::identity(std::size_t dim)
{
    return SpdMatrix(Matrix::Identity(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim)));
}

SpdMatrix SpdMatrix::zero(std::size_t dim)
{
    return SpdMatrix(Matrix::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim)));
}

SpdMatrix SpdMatrix::shifted(double shift) const
{
    Matrix m = entries_;
    m.diagonal().array() += shift;
    return SpdMatrix(m);
}

Matrix cholesky(const SpdMatrix& m)
{
    return factorize(m).matrixL();
}

Matrix spd_solve(const SpdMatrix& m, const Matrix& b)
{
    if (static_cast<std::size_t>(b.rows()) != m.dim()) {
        throw DimensionMismatch("spd_solve: right-hand side has " + std::to_string(b.rows()) +
                                " rows, matrix dim " + std::to_string(m.dim()));
    }
    return factorize(m).solve(b);
}

Vector spd_solve(const SpdMatrix& m, const Vector& b)
{
    if (static_cast<std::size_t>(b.size()) != m.dim()) {
        throw DimensionMismatch("spd_solve: right-hand side has length " + std::to_string(b.size()) +
                                ", matrix dim " + std::to_string(m.dim()));
    }
    return factorize(m).solve(b);
}

Matrix spd_inverse(const SpdMatrix& m)
{
    const auto n = static_cast<Eigen::Index>(m.dim());
    Matrix inv = factorize(m).solve(Matrix::Identity(n, n));
    return 0.5 * (inv + inv.transpose());
}

double spd_logdet(const SpdMatrix& m)
{
    const Matrix l = cholesky(m);
    return 2.0 * l.diagonal().array().log().sum();
}

Matrix kron_solve(const KroneckerPair& k, const Matrix& v)
{
    if (static_cast<std::size_t>(v.rows()) != k.right.dim() ||
        static_cast<std::size_t>(v.cols()) != k.left.dim()) {
        throw DimensionMismatch("kron_solve: v is " + std::to_string(v.rows()) + "x" +
                                std::to_string(v.cols()) + ", factors are " +
                                std::to_string(k.right.dim()) + " (right) and " +
                                std::to_string(k.left.dim()) + " (left)");
    }
    if (!(k.scale > 0.0)) {
        throw std::invalid_argument("kron_solve: scale must be positive");
    }
    // right^{-1} v, then (.) left^{-1} = (left^{-1} (.)^T)^T with left symmetric.
    const Matrix rv = spd_solve(k.right, v);
    const Matrix out = spd_solve(k.left, Matrix(rv.transpose())).transpose();
    return out / k.scale;
}

double kron_quadratic_form(const KroneckerPair& k, const Matrix& v)
{
    if (static_cast<std::size_t>(v.rows()) != k.right.dim() ||
        static_cast<std::size_t>(v.cols()) != k.left.dim()) {
        throw DimensionMismatch("kron_quadratic_form: shape mismatch");
    }
    const Matrix rvl = k.right.matrix() * v * k.left.matrix();
    return k.scale * v.cwiseProduct(rvl).sum();
}

Matrix kron(const Matrix& a, const Matrix& b)
{
    Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
        }
    }
    return out;
}

Vector vec(const Matrix& m)
{
    Vector out(m.size());
    Eigen::Index idx = 0;
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            out(idx++) = m(i, j);
        }
    }
    return out;
}

Matrix unvec(const Vector& v, std::size_t rows, std::size_t cols)
{
    if (static_cast<std::size_t>(v.size()) != rows * cols) {
        throw DimensionMismatch("unvec: length " + std::to_string(v.size()) + " != " +
                                std::to_string(rows) + "*" + std::to_string(cols));
    }
    Matrix out(rows, cols);
    Eigen::Index idx = 0;
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
        for (Eigen::Index i = 0; i < out.rows(); ++i) {
            out(i, j) = v(idx++);
        }
    }
    return out;
}

Vector sample_gaussian_factored(const Vector& mean, const Matrix& covFactor, Rng& rng)
{
    Vector z(mean.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        z(i) = rng.normal();
    }
    return mean + covFactor.triangularView<Eigen::Lower>() * z;
}

Vector sample_gaussian(const Vector& mean, const SpdMatrix& cov, Rng& rng)
{
    if (static_cast<std::size_t>(mean.size()) != cov.dim()) {
        throw DimensionMismatch("sample_gaussian: mean/cov size mismatch");
    }
    return sample_gaussian_factored(mean, cholesky(cov), rng);
}

Vector sample_gaussian_precision(const Vector& mean, const SpdMatrix& precision, Rng& rng)
{
    if (static_cast<std::size_t>(mean.size()) != precision.dim()) {
        throw DimensionMismatch("sample_gaussian_precision: mean/precision size mismatch");
    }
    const Matrix l = cholesky(precision);
    Vector z(mean.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        z(i) = rng.normal();
    }
    l.triangularView<Eigen::Lower>().transpose().solveInPlace(z);
    return mean + z;
}

Matrix sample_mvg_factored(const Matrix& mean, const Matrix& rowFactor, const Matrix& colFactor,
                           Rng& rng)
{
    const Matrix z = standard_normal(mean.rows(), mean.cols(), rng);
    return mean + rowFactor.triangularView<Eigen::Lower>() *
                      (z * colFactor.triangularView<Eigen::Lower>().transpose());
}

Matrix sample_mvg(const Matrix& mean, const SpdMatrix& rowCov, const SpdMatrix& colCov, Rng& rng)
{
    if (static_cast<std::size_t>(mean.rows()) != rowCov.dim() ||
        static_cast<std::size_t>(mean.cols()) != colCov.dim()) {
        throw DimensionMismatch("sample_mvg: covariance dims do not match the mean shape");
    }
    return sample_mvg_factored(mean, cholesky(rowCov), cholesky(colCov), rng);
}

double min_eigenvalue(const Matrix& m)
{
    Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

bool all_finite(const Matrix& m) { return m.allFinite(); }
bool all_finite(const Vector& v) { return v.allFinite(); }

}  // namespace nng
