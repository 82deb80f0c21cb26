#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "nng/gamma.hpp"
#include "nng/linalg.hpp"
#include "nng/model.hpp"
#include "nng/posterior.hpp"
#include "nng/random.hpp"

namespace nng {

enum class Method { ffg, mvg, full };
enum class FisherMode { true_fisher, empirical };

/// "nng-ffg", "nng-mvg", "nng-full"
std::string to_string(Method m);
Method parse_method(const std::string& s);
std::string to_string(FisherMode f);
FisherMode parse_fisher_mode(const std::string& s);

/// Exponentially decaying KL budget c0 * zeta^epoch for trust-region step sizes.
struct TrustRegionSchedule {
    double c0 = 1e-3;
    double zeta = 0.95;
    double alphaMax = 0.01;
    std::size_t epoch = 0;

    double budget() const;
    void advance_epoch() { ++epoch; }
    void validate() const;
};

/// min(alphaMax, sqrt(c_k / vFv)); alphaMax when vFv <= 0 or not finite.
double trust_region_lr(double fisherNormSq, const TrustRegionSchedule& schedule);
/// Diagonal damped Fisher.
double trust_region_lr(const Vector& v, const Vector& dampedFisherDiag, const TrustRegionSchedule& schedule);
/// Per-layer Kronecker damped Fisher; v holds one update matrix per layer.
double trust_region_lr(const std::vector<Matrix>& v, const std::vector<KroneckerPair>& dampedFisher,
                       const TrustRegionSchedule& schedule);
/// Dense damped Fisher.
double trust_region_lr(const Vector& v, const SpdMatrix& dampedFisher, const TrustRegionSchedule& schedule);

/// What a single optimizer step did. Skipped steps leave the state
/// untouched apart from the skip counter and the consumed random draws.
struct StepReport {
    bool skipped = false;
    double stepSize = 0.0;
    double gradNorm = 0.0;
    /// Sum of squared residuals of the sampled network on the batch
    /// (Gaussian likelihood), for the noise-precision update.
    double residualSq = 0.0;
};

struct NoisyAdamState {
    FfgPosterior posterior;
    Vector m;
    std::size_t k = 0;
    double alpha = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    FisherMode fisher = FisherMode::true_fisher;
    std::optional<TrustRegionSchedule> trustRegion;
    /// Divide the startup bias out of the f average.
    bool debiasFisher = false;
    std::size_t skipped = 0;

    explicit NoisyAdamState(FfgPosterior p);
    void validate() const;
};

struct NoisyKfacState {
    MvgPosterior posterior;
    std::size_t k = 0;
    double alpha = 0.01;
    double betaTilde = 0.001;
    std::size_t tStats = 1;
    std::size_t tInv = 1;
    FisherMode fisher = FisherMode::true_fisher;
    std::optional<TrustRegionSchedule> trustRegion;
    /// Divide the startup bias out of the factor averages.
    bool debiasFisher = false;
    std::size_t statsUpdates = 0;
    std::size_t skipped = 0;

    explicit NoisyKfacState(MvgPosterior p);
    void validate() const;
};

struct NoisyFullState {
    FullPosterior posterior;
    std::size_t k = 0;
    double alphaTilde = 0.01;
    double betaTilde = 0.001;
    FisherMode fisher = FisherMode::true_fisher;
    std::optional<TrustRegionSchedule> trustRegion;
    bool debiasFisher = false;
    std::size_t skipped = 0;

    explicit NoisyFullState(FullPosterior p);
    void validate() const;
};

/// Largest weight count accepted by the dense-covariance method.
inline constexpr std::size_t kMaxFullWeights = 500;

/// Rate of the k-th update of a zero-initialized moving average with base
/// rate beta once its startup bias is divided out: beta / (1 - (1 - beta)^k).
double debiased_rate(double beta, std::size_t k);

StepReport noisy_adam_step(NoisyAdamState& state, const Matrix& inputs, const Matrix& targets,
                           const NoiseModel& noise, Rng& rng);
StepReport noisy_kfac_step(NoisyKfacState& state, const Matrix& inputs, const Matrix& targets,
                           const NoiseModel& noise, Rng& rng);
StepReport noisy_full_step(NoisyFullState& state, const Matrix& inputs, const Matrix& targets,
                           const NoiseModel& noise, Rng& rng);

/// Gradient of the per-datapoint Gamma objective
/// (1/B) sum_i E_q[log N(y_i | yhat_i, 1/tau)] - KL(q || prior) / N
/// with respect to (log alpha, log beta). residualSq is summed over the batch
/// and all output dimensions.
struct GammaLogGradient {
    double dLogAlpha = 0.0;
    double dLogBeta = 0.0;
};
GammaLogGradient gamma_tau_gradient(const GammaPosterior& q, const GammaPosterior& prior, double residualSq,
                                    std::size_t batchSize, std::size_t outputDims, std::size_t N);

/// Gradient-ascent step in log-parameter space from precomputed residuals.
GammaPosterior gamma_tau_update(const GammaPosterior& q, const GammaPosterior& prior, double residualSq,
                                std::size_t batchSize, std::size_t outputDims, std::size_t N, double lr);

/// Adam moment estimates for the (log alpha, log beta) ascent.
struct GammaAdamState {
    std::array<double, 2> m{0.0, 0.0};
    std::array<double, 2> v{0.0, 0.0};
    std::size_t k = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Same gradient as gamma_tau_update, applied with Adam scaling so each
/// step moves the log parameters by about lr at most.
GammaPosterior gamma_tau_adam_update(const GammaPosterior& q, const GammaPosterior& prior, double residualSq,
                                     std::size_t batchSize, std::size_t outputDims, std::size_t N, double lr,
                                     GammaAdamState& state);

/// Draws weights from the posterior, evaluates residuals on the batch and
/// applies gamma_tau_update.
GammaPosterior gamma_tau_step(const GammaPosterior& q, const GammaPosterior& prior, const Posterior& posterior,
                              const Matrix& inputs, const Matrix& targets, Rng& rng, double lr);

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batchSize = 10;
    double alphaTilde = 0.01;
    double betaTilde = 0.001;
    double beta1 = 0.9;
    std::size_t tStats = 1;
    std::size_t tInv = 1;
    FisherMode fisher = FisherMode::true_fisher;
    /// Multiply the mean step size by 0.1 from the halfway epoch on.
    bool decayHalfway = true;
    /// Learn a Gamma posterior over the noise precision (Gaussian likelihood).
    bool learnNoise = true;
    double noiseLr = 0.01;
    /// Adam scaling for the noise-precision ascent; plain gradient steps
    /// otherwise.
    bool noiseAdam = true;
    std::optional<TrustRegionSchedule> trustRegion;
    /// Divide the startup bias out of the Fisher moving averages.
    bool debiasFisher = true;
    /// Emit a step record every logEvery steps; 0 disables logging.
    std::size_t logEvery = 0;

    void validate() const;
};

struct StepRecord {
    std::size_t step = 0;
    double elbo = 0.0;
    double stepSize = 0.0;
    double gradNorm = 0.0;
    double wallSeconds = 0.0;
};

struct TrainResult {
    Posterior posterior;
    NoiseModel noise;
    std::size_t steps = 0;
    std::size_t skippedSteps = 0;
};

using StepLogger = std::function<void(const StepRecord&)>;

/// Creates a posterior of the requested family and trains it with minibatch
/// epochs over (inputs, targets). hyper.N is overwritten with the number of
/// training rows.
TrainResult train_posterior(Method method, const MlpArchitecture& arch, Hyper hyper, const TrainConfig& cfg,
                            const Matrix& inputs, const Matrix& targets, NoiseModel noise, Rng& rng,
                            const StepLogger& logger = {});

}  // namespace nng
