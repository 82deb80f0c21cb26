#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "nng/gamma.hpp"
#include "nng/linalg.hpp"
#include "nng/model.hpp"
#include "nng/random.hpp"

namespace nng {

/// KL weight, training-set size, prior variance and extrinsic damping.
/// Intrinsic damping lambda / (N eta) is always derived from these.
struct Hyper {
    double lambda = 1.0;
    std::size_t N = 1;
    double eta = 1.0;
    double gammaEx = 0.0;

    double gamma_in() const { return lambda / (static_cast<double>(N) * eta); }
    double gamma_total() const { return gamma_in() + gammaEx; }
    double lambda_over_n() const { return lambda / static_cast<double>(N); }
    void validate() const;
};

/// Observation noise for the Gaussian likelihood: either a fixed precision
/// or a variational Gamma posterior with its prior.
struct NoiseModel {
    double tau = 1.0;
    std::optional<GammaPosterior> q;
    GammaPosterior prior{6.0, 6.0};

    /// Point precision used for gradients and plug-in predictions.
    double precision() const { return q ? q->mean() : tau; }
};

/// tau to hand to the likelihood functions; empty for categorical models.
std::optional<double> likelihood_tau(const MlpArchitecture& arch, const NoiseModel& noise);

/// Fully factorized Gaussian: w ~ N(mu, (lambda/N) diag(fbar + gamma_in)^{-1}).
/// mu and fbar are indexed like flatten(WeightSet).
struct FfgPosterior {
    MlpArchitecture arch;
    Hyper hyper;
    Vector mu;
    Vector fbar;

    static FfgPosterior create(const MlpArchitecture& arch, const Hyper& hyper, Rng& rng);
    Vector variances() const;
};

/// Damped factor inverses for one layer at damping gamma, with Cholesky
/// factors of the sampling covariances (lambda/N) invA and invS.
struct DampedInverses {
    Matrix invA;
    Matrix invS;
    Matrix rowFactor;
    Matrix colFactor;
    double pi = 1.0;
    double gamma = 0.0;
    bool valid = false;
};

struct MvgLayer {
    Matrix mean;
    SpdMatrix abar;  // EMA of a a^T
    SpdMatrix sbar;  // EMA of g g^T
    DampedInverses sampling;  // damped by gamma_in
    DampedInverses step;      // damped by gamma_in + gamma_ex
};

/// Matrix-variate Gaussian per layer:
/// W_l ~ MN(M_l, (lambda/N) [A_l^gamma_in]^{-1}, [S_l^gamma_in]^{-1}).
struct MvgPosterior {
    MlpArchitecture arch;
    Hyper hyper;
    std::vector<MvgLayer> layers;

    static MvgPosterior create(const MlpArchitecture& arch, const Hyper& hyper, Rng& rng);
};

/// Full-covariance Gaussian with precision (N/lambda) Fbar + eta^{-1} I.
struct FullPosterior {
    MlpArchitecture arch;
    Hyper hyper;
    Vector mu;
    SpdMatrix fbar;

    static FullPosterior create(const MlpArchitecture& arch, const Hyper& hyper, Rng& rng);
};

using Posterior = std::variant<FfgPosterior, MvgPosterior, FullPosterior>;

std::string family_name(const Posterior& p);
const MlpArchitecture& architecture(const Posterior& p);
const Hyper& hyper_of(const Posterior& p);
WeightSet mean_weights(const Posterior& p);

class StaleCache : public std::logic_error {
public:
    explicit StaleCache(const std::string& what) : std::logic_error(what) {}
};

/// Trace-norm rule sqrt((tr A / dim A) / (tr S / dim S)), clamped to
/// [1e-3, 1e3]; 1 when either trace is below 1e-12.
double factored_damping_pi(const SpdMatrix& abar, const SpdMatrix& sbar);

/// Inverses of (abar + pi sqrt(gamma) I) and (sbar + sqrt(gamma)/pi I).
/// If pi is not given it is computed with factored_damping_pi.
DampedInverses damped_inverses(const SpdMatrix& abar, const SpdMatrix& sbar, double gamma, double lambdaOverN,
                               std::optional<double> pi = std::nullopt);

/// Recomputes the gamma_in (sampling) or gamma_in + gamma_ex (step) caches
/// for every layer.
void refresh_damped_inverses(MvgPosterior& p, bool useTotalDamping);

WeightSet sample_weights(const FfgPosterior& p, Rng& rng);
WeightSet sample_weights(const MvgPosterior& p, Rng& rng);
WeightSet sample_weights(const FullPosterior& p, Rng& rng);
WeightSet sample_weights(const Posterior& p, Rng& rng);

Vector precision(const FfgPosterior& p);
std::vector<KroneckerPair> precision(const MvgPosterior& p);
SpdMatrix precision(const FullPosterior& p);

/// Dense covariance of vec(W_l) for one MVG layer; only sensible for small layers.
Matrix dense_layer_covariance(const MvgPosterior& p, std::size_t layer);

/// KL(q || N(0, eta I)).
double kl_to_prior(const FfgPosterior& p);
double kl_to_prior(const MvgPosterior& p);
double kl_to_prior(const FullPosterior& p);
double kl_to_prior(const Posterior& p);

struct ElboEstimate {
    double value = 0.0;
    /// Monte Carlo standard error of the likelihood term.
    double stdError = 0.0;
};

/// Monte Carlo ELBO over numSamples weight draws. The likelihood term is the
/// per-example mean over (inputs, targets) times N; the weight KL is
/// weighted by lambda and the Gamma KL is subtracted when noise.q is set.
ElboEstimate elbo_estimate(const Posterior& p, const Matrix& inputs, const Matrix& targets, const NoiseModel& noise,
                           std::size_t numSamples, Rng& rng);

/// Gradients of the VIME-style objective for one MVG layer set.
struct IntrinsicRewardInputs {
    std::vector<Matrix> muGrads;
    std::vector<Matrix> sigma1Grads;  // row covariance, fan_in x fan_in
    std::vector<Matrix> sigma2Grads;  // column covariance, fan_out x fan_out
};

/// Gradients of E_q[log p(batch | w)] with respect to M_l, Sigma_1 and
/// Sigma_2 of each layer. The Sigma gradient uses the Fisher in place of the
/// Hessian with a per-batch Kronecker factorization.
IntrinsicRewardInputs intrinsic_reward_inputs(const MvgPosterior& p, const Matrix& inputs, const Matrix& targets,
                                              const NoiseModel& noise, std::size_t numSamples, Rng& rng);

/// 1/2 stepSize^2 * sum over layers of the block-diagonal Fisher norm of the
/// gradients (off-diagonal Sigma_1/Sigma_2 block dropped).
double intrinsic_reward(const MvgPosterior& p, const IntrinsicRewardInputs& grads, double stepSize);

}  // namespace nng
