#pragma once

#include <doctest.h>

#include <cmath>

#include "nng/linalg.hpp"
#include "nng/random.hpp"

namespace nng::test {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng)
{
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
    }
    return m;
}

inline Vector random_vector(Eigen::Index n, Rng& rng)
{
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.normal();
    return v;
}

/// B B^T + shift I with B square Gaussian.
inline SpdMatrix random_spd(Eigen::Index n, Rng& rng, double shift = 0.5)
{
    const Matrix b = random_matrix(n, n, rng);
    Matrix m = b * b.transpose();
    m.diagonal().array() += shift;
    return SpdMatrix(m);
}

inline double rel_diff(const Matrix& a, const Matrix& b)
{
    const double scale = std::max(b.norm(), 1e-300);
    return (a - b).norm() / scale;
}

inline double rel_diff(const Vector& a, const Vector& b)
{
    const double scale = std::max(b.norm(), 1e-300);
    return (a - b).norm() / scale;
}

/// Central differences, written separately from the library's own helper.
template <class F>
Vector finite_diff(F&& f, const Vector& x, double eps)
{
    Vector g(x.size());
    Vector p = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        p(i) = x(i) + eps;
        const double up = f(p);
        p(i) = x(i) - eps;
        const double down = f(p);
        p(i) = x(i);
        g(i) = (up - down) / (2.0 * eps);
    }
    return g;
}

/// Sample covariance with rows as observations.
inline Matrix sample_covariance(const Matrix& draws)
{
    const Vector mean = draws.colwise().mean().transpose();
    const Matrix centered = draws.rowwise() - mean.transpose();
    return centered.transpose() * centered / static_cast<double>(draws.rows() - 1);
}

}  // namespace nng::test
