#include "nng/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace nng {

BlrPosterior blr_posterior(const Matrix& X, const Vector& y, double eta, double tau)
{
    if (!(eta > 0.0) || !(tau > 0.0)) {
        throw std::invalid_argument("blr_posterior: eta and tau must be positive");
    }
    if (X.rows() != y.size()) {
        throw DimensionMismatch("blr_posterior: X and y row counts differ");
    }
    const auto d = X.cols();
    const double n = static_cast<double>(X.rows());
    Matrix lam = tau * X.transpose() * X;
    lam.diagonal().array() += 1.0 / eta;
    BlrPosterior post;
    post.precision = SpdMatrix(lam);
    post.covariance = SpdMatrix(spd_inverse(post.precision));
    post.mean = spd_solve(post.precision, Vector(tau * X.transpose() * y));
    const double quad = tau * y.squaredNorm() - post.mean.dot(post.precision.matrix() * post.mean);
    post.logEvidence = 0.5 * n * std::log(tau / (2.0 * std::numbers::pi)) -
                       0.5 * static_cast<double>(d) * std::log(eta) - 0.5 * spd_logdet(post.precision) - 0.5 * quad;
    return post;
}

double blr_log_joint(const Matrix& X, const Vector& y, double eta, double tau, const Vector& w, Vector* grad)
{
    const Vector r = y - X * w;
    if (grad) {
        *grad = tau * X.transpose() * r - w / eta;
    }
    return -0.5 * tau * r.squaredNorm() - 0.5 * w.squaredNorm() / eta;
}

void HmcConfig::validate() const
{
    if (!(stepSize > 0.0)) throw std::invalid_argument("HMC step size must be positive");
    if (leapfrogSteps < 1 || numSamples < 1 || numChains < 1) {
        throw std::invalid_argument("HMC leapfrog steps, samples and chains must be at least 1");
    }
    if (!(initJitter >= 0.0)) throw std::invalid_argument("HMC init jitter must be nonnegative");
    if (!(stepJitter >= 0.0 && stepJitter < 1.0)) throw std::invalid_argument("HMC step jitter must lie in [0, 1)");
}

std::vector<Vector> HmcResult::pooled() const
{
    std::vector<Vector> all;
    for (const auto& c : chains) all.insert(all.end(), c.samples.begin(), c.samples.end());
    return all;
}

double HmcResult::min_acceptance() const
{
    double m = 1.0;
    for (const auto& c : chains) m = std::min(m, c.acceptanceRate);
    return m;
}

namespace {

HmcChain run_chain(const LogDensity& logDensity, Vector x, const HmcConfig& cfg, Rng& rng)
{
    const auto dim = x.size();
    Vector grad(dim);
    double logp = logDensity(x, grad);
    if (!std::isfinite(logp) || !all_finite(grad)) {
        throw std::invalid_argument("hmc_sample: log density is not finite at the initial point");
    }
    HmcChain chain;
    chain.samples.reserve(cfg.numSamples);
    std::size_t accepted = 0;
    const std::size_t total = cfg.burnIn + cfg.numSamples;
    Vector p(dim), xn(dim), pn(dim), gn(dim);
    for (std::size_t it = 0; it < total; ++it) {
        for (Eigen::Index i = 0; i < dim; ++i) p(i) = rng.normal();
        const double eps = cfg.stepSize * (1.0 + cfg.stepJitter * (2.0 * rng.uniform() - 1.0));
        xn = x;
        gn = grad;
        pn = p + 0.5 * eps * gn;
        double logpNew = logp;
        for (std::size_t s = 0; s < cfg.leapfrogSteps; ++s) {
            xn += eps * pn;
            logpNew = logDensity(xn, gn);
            if (!std::isfinite(logpNew)) break;
            if (s + 1 < cfg.leapfrogSteps) pn += eps * gn;
        }
        pn += 0.5 * eps * gn;
        const double h0 = -logp + 0.5 * p.squaredNorm();
        const double h1 = -logpNew + 0.5 * pn.squaredNorm();
        const double u = rng.uniform();
        if (std::isfinite(h1) && all_finite(gn) && std::log(u) < h0 - h1) {
            x = xn;
            grad = gn;
            logp = logpNew;
            ++accepted;
        }
        if (it >= cfg.burnIn) chain.samples.push_back(x);
    }
    chain.acceptanceRate = static_cast<double>(accepted) / static_cast<double>(total);
    return chain;
}

}  // namespace

HmcResult hmc_sample(const LogDensity& logDensity, const Vector& init, const HmcConfig& cfg)
{
    cfg.validate();
    Rng base(cfg.seed);
    HmcResult result;
    for (std::size_t c = 0; c < cfg.numChains; ++c) {
        Rng rng = base.split();
        Vector x = init;
        if (cfg.initJitter > 0.0) {
            for (Eigen::Index i = 0; i < x.size(); ++i) x(i) += cfg.initJitter * rng.normal();
        }
        result.chains.push_back(run_chain(logDensity, x, cfg, rng));
    }
    return result;
}

Vector finite_diff_grad(const std::function<double(const Vector&)>& f, const Vector& x, double eps)
{
    Vector g(x.size());
    Vector probe = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        probe(i) = x(i) + eps;
        const double up = f(probe);
        probe(i) = x(i) - eps;
        const double down = f(probe);
        probe(i) = x(i);
        g(i) = (up - down) / (2.0 * eps);
    }
    return g;
}

namespace {

double quadratic_expectation(const QuadraticSpec& f, const Vector& mu, const Matrix& sigma)
{
    return 0.5 * (f.H * sigma).trace() + 0.5 * mu.dot(f.H * mu) + f.b.dot(mu);
}

double max_z(const Matrix& estimate, const Matrix& target, const Matrix& se)
{
    double worst = 0.0;
    for (Eigen::Index i = 0; i < estimate.rows(); ++i) {
        for (Eigen::Index j = 0; j < estimate.cols(); ++j) {
            const double diff = std::abs(estimate(i, j) - target(i, j));
            double z = 0.0;
            if (se(i, j) > 0.0) {
                z = diff / se(i, j);
            } else if (diff > 1e-12 * (1.0 + std::abs(target(i, j)))) {
                z = std::numeric_limits<double>::infinity();
            }
            worst = std::max(worst, z);
        }
    }
    return worst;
}

}  // namespace

EstimatorReport check_gaussian_estimators(const QuadraticSpec& f, const Vector& mu, const SpdMatrix& sigma,
                                          std::size_t numSamples, Rng& rng, double zThreshold)
{
    const auto d = mu.size();
    if (f.H.rows() != d || f.H.cols() != d || f.b.size() != d || static_cast<Eigen::Index>(sigma.dim()) != d) {
        throw DimensionMismatch("check_gaussian_estimators: shapes of H, b, mu and Sigma disagree");
    }
    if (numSamples < 2) {
        throw std::invalid_argument("check_gaussian_estimators: need at least 2 samples");
    }

    EstimatorReport r;
    r.muAnalytic = finite_diff_grad([&](const Vector& m) { return quadratic_expectation(f, m, sigma.matrix()); },
                                    mu, 1e-4);
    r.sigmaAnalytic.resize(d, d);
    Matrix probe = sigma.matrix();
    const double h = 1e-4;
    for (Eigen::Index i = 0; i < d; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) {
            const double keep = probe(i, j);
            probe(i, j) = keep + h;
            const double up = quadratic_expectation(f, mu, probe);
            probe(i, j) = keep - h;
            const double down = quadratic_expectation(f, mu, probe);
            probe(i, j) = keep;
            r.sigmaAnalytic(i, j) = (up - down) / (2.0 * h);
        }
    }

    const Matrix factor = cholesky(sigma);
    const Matrix sigmaInv = spd_inverse(sigma);
    Vector gSum = Vector::Zero(d), gSq = Vector::Zero(d);
    Matrix hSum = Matrix::Zero(d, d), hSq = Matrix::Zero(d, d);
    Vector z(d);
    for (std::size_t s = 0; s < numSamples; ++s) {
        for (Eigen::Index i = 0; i < d; ++i) z(i) = rng.normal();
        const Vector w = mu + factor * z;
        const Vector grad = f.H * w + f.b;
        gSum += grad;
        gSq += grad.cwiseProduct(grad);
        const Matrix stein = 0.5 * sigmaInv * (w - mu) * grad.transpose();
        const Matrix sym = 0.5 * (stein + stein.transpose());
        hSum += sym;
        hSq += sym.cwiseProduct(sym);
    }
    const double n = static_cast<double>(numSamples);
    r.muEstimate = gSum / n;
    r.muStdError =
        ((gSq / n - r.muEstimate.cwiseProduct(r.muEstimate)).cwiseMax(0.0) * (n / (n - 1.0)) / n).cwiseSqrt();
    r.halfHessianEstimate = hSum / n;
    r.halfHessianStdError =
        ((hSq / n - r.halfHessianEstimate.cwiseProduct(r.halfHessianEstimate)).cwiseMax(0.0) * (n / (n - 1.0)) / n)
            .cwiseSqrt();

    r.muMaxZ = max_z(r.muEstimate, r.muAnalytic, r.muStdError);
    r.halfMaxZ = max_z(r.halfHessianEstimate, r.sigmaAnalytic, r.halfHessianStdError);
    r.noHalfMaxZ = max_z(2.0 * r.halfHessianEstimate, r.sigmaAnalytic, 2.0 * r.halfHessianStdError);
    r.muPass = r.muMaxZ <= zThreshold;
    r.halfPass = r.halfMaxZ <= zThreshold;
    r.noHalfPass = r.noHalfMaxZ <= zThreshold;
    return r;
}

}  // namespace nng
