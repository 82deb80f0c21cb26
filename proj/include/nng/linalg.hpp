#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>

#include "nng/random.hpp"

namespace nng {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

class NotPositiveDefinite : public std::runtime_error {
public:
    explicit NotPositiveDefinite(const std::string& what) : std::runtime_error(what) {}
};

class DimensionMismatch : public std::invalid_argument {
public:
    explicit DimensionMismatch(const std::string& what) : std::invalid_argument(what) {}
};

/// Symmetric matrix expected to be positive (semi)definite. The constructor
/// stores (M + M^T) / 2 so round-off asymmetry from accumulation never
/// reaches a factorization.
class SpdMatrix {
public:
    SpdMatrix() = default;
    explicit SpdMatrix(const Matrix& m);

    static SpdMatrix identity(std::size_t dim);
    static SpdMatrix zero(std::size_t dim);

    std::size_t dim() const { return static_cast<std::size_t>(entries_.rows()); }
    const Matrix& matrix() const { return entries_; }

    /// m + shift * I
    SpdMatrix shifted(double shift) const;

private:
    Matrix entries_;
};

/// scale * (left ⊗ right). For a layer weight matrix of shape n1 x n2 the
/// right factor is n1 x n1 (activation side) and the left is n2 x n2.
struct KroneckerPair {
    SpdMatrix left;
    SpdMatrix right;
    double scale = 1.0;
};

/// Lower-triangular L with L L^T = m. No pivoting; throws NotPositiveDefinite
/// if any pivot is not strictly positive.
Matrix cholesky(const SpdMatrix& m);

Matrix spd_solve(const SpdMatrix& m, const Matrix& b);
Vector spd_solve(const SpdMatrix& m, const Vector& b);
Matrix spd_inverse(const SpdMatrix& m);
/// log det via the Cholesky factor.
double spd_logdet(const SpdMatrix& m);

/// (1/scale) right^{-1} v left^{-1}, i.e. the Kronecker-structured inverse
/// applied to vec(v) without forming the Kronecker product.
Matrix kron_solve(const KroneckerPair& k, const Matrix& v);

/// vec(v)^T (scale * left ⊗ right) vec(v) = scale * <v, right v left>.
double kron_quadratic_form(const KroneckerPair& k, const Matrix& v);

/// Dense Kronecker product a ⊗ b.
Matrix kron(const Matrix& a, const Matrix& b);

/// Column-stacking vectorization, the convention under which
/// vec(A X B) = (B^T ⊗ A) vec(X).
Vector vec(const Matrix& m);
Matrix unvec(const Vector& v, std::size_t rows, std::size_t cols);

Vector sample_gaussian(const Vector& mean, const SpdMatrix& cov, Rng& rng);
/// mean + L z with a precomputed lower Cholesky factor of the covariance.
Vector sample_gaussian_factored(const Vector& mean, const Matrix& covFactor, Rng& rng);
/// Draw with covariance precision^{-1}, using L^{-T} z where precision = L L^T.
Vector sample_gaussian_precision(const Vector& mean, const SpdMatrix& precision, Rng& rng);

/// W = M + L_U Z L_V^T with Z i.i.d. standard normal, so that
/// vec(W) ~ N(vec(M), colCov ⊗ rowCov).
Matrix sample_mvg(const Matrix& mean, const SpdMatrix& rowCov, const SpdMatrix& colCov, Rng& rng);
Matrix sample_mvg_factored(const Matrix& mean, const Matrix& rowFactor, const Matrix& colFactor,
                           Rng& rng);

/// Smallest eigenvalue of a symmetric matrix (self-adjoint solver).
double min_eigenvalue(const Matrix& m);

bool all_finite(const Matrix& m);
bool all_finite(const Vector& v);

}  // namespace nng
