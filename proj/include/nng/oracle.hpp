#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "nng/linalg.hpp"
#include "nng/random.hpp"

namespace nng {

/// Exact posterior of y = X w + noise, noise ~ N(0, 1/tau), w ~ N(0, eta I).
struct BlrPosterior {
    Vector mean;
    SpdMatrix covariance;
    SpdMatrix precision;
    double logEvidence = 0.0;
};

BlrPosterior blr_posterior(const Matrix& X, const Vector& y, double eta, double tau);

/// Log posterior density of the BLR model up to a constant, with gradient.
double blr_log_joint(const Matrix& X, const Vector& y, double eta, double tau, const Vector& w, Vector* grad);

/// Returns log density at x and writes its gradient into grad.
using LogDensity = std::function<double(const Vector& x, Vector& grad)>;

struct HmcConfig {
    double stepSize = 0.05;
    std::size_t leapfrogSteps = 20;
    std::size_t numSamples = 1000;  // kept per chain
    std::size_t burnIn = 500;
    std::size_t numChains = 1;
    std::uint64_t seed = 0;
    /// Standard deviation of Gaussian jitter added to init for each chain.
    double initJitter = 0.0;
    /// Each trajectory scales the step size by a uniform draw from
    /// [1 - stepJitter, 1 + stepJitter].
    double stepJitter = 0.2;
    void validate() const;
};

struct HmcChain {
    std::vector<Vector> samples;
    double acceptanceRate = 0.0;
};

struct HmcResult {
    std::vector<HmcChain> chains;

    /// Samples of all chains concatenated in chain order.
    std::vector<Vector> pooled() const;
    double min_acceptance() const;
};

/// Leapfrog integration with a Metropolis correction, identity mass
/// matrix and a per-trajectory jittered step size. Chains use independent child streams of
/// the seed and are merged in chain order.
HmcResult hmc_sample(const LogDensity& logDensity, const Vector& init, const HmcConfig& cfg);

/// Central differences, one coordinate at a time.
Vector finite_diff_grad(const std::function<double(const Vector&)>& f, const Vector& x, double eps = 1e-5);

/// f(w) = 1/2 w^T H w + b^T w
struct QuadraticSpec {
    Matrix H;
    Vector b;
};

/// Monte Carlo check of the Gaussian gradient identities at N(mu, Sigma).
/// The mean identity compares the sample mean of grad f with the analytic
/// derivative of E[f]. The covariance identity compares a Stein-type
/// estimate of E[Hessian f] against the derivative of E[f] with respect to
/// Sigma obtained by finite differences of the closed-form expectation; it
/// is evaluated both with and without the factor 1/2.
struct EstimatorReport {
    Vector muAnalytic;
    Vector muEstimate;
    Vector muStdError;
    Matrix sigmaAnalytic;
    Matrix halfHessianEstimate;
    Matrix halfHessianStdError;
    /// Largest |estimate - analytic| / stdError over entries.
    double muMaxZ = 0.0;
    double halfMaxZ = 0.0;
    double noHalfMaxZ = 0.0;
    bool muPass = false;
    bool halfPass = false;
    bool noHalfPass = false;
};

EstimatorReport check_gaussian_estimators(const QuadraticSpec& f, const Vector& mu, const SpdMatrix& sigma,
                                          std::size_t numSamples, Rng& rng, double zThreshold = 3.0);

}  // namespace nng
