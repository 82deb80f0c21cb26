#include "nng/posterior.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nng {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

double gaussian_kl_to_spherical(double logdetCov, double traceCov, double meanSq, std::size_t dim, double eta)
{
    const double d = static_cast<double>(dim);
    return 0.5 * (d * std::log(eta) - logdetCov - d + traceCov / eta + meanSq / eta);
}

}  // namespace

void Hyper::validate() const
{
    if (!(lambda > 0.0)) throw std::invalid_argument("lambda must be positive");
    if (N < 1) throw std::invalid_argument("N must be at least 1");
    if (!(eta > 0.0)) throw std::invalid_argument("prior variance eta must be positive");
    if (!(gammaEx >= 0.0)) throw std::invalid_argument("extrinsic damping must be nonnegative");
}

std::optional<double> likelihood_tau(const MlpArchitecture& arch, const NoiseModel& noise)
{
    if (arch.likelihood == Likelihood::categorical) {
        return std::nullopt;
    }
    return noise.precision();
}

FfgPosterior FfgPosterior::create(const MlpArchitecture& arch, const Hyper& hyper, Rng& rng)
{
    arch.validate();
    hyper.validate();
    FfgPosterior p{arch, hyper, flatten(random_weights(arch, rng)), Vector::Zero(arch.num_weights())};
    return p;
}

Vector FfgPosterior::variances() const
{
    return (hyper.lambda_over_n() / (fbar.array() + hyper.gamma_in())).matrix();
}

MvgPosterior MvgPosterior::create(const MlpArchitecture& arch, const Hyper& hyper, Rng& rng)
{
    arch.validate();
    hyper.validate();
    MvgPosterior p;
    p.arch = arch;
    p.hyper = hyper;
    const WeightSet init = random_weights(arch, rng);
    for (std::size_t l = 0; l < arch.num_layers(); ++l) {
        MvgLayer layer;
        layer.mean = init.layers[l];
        layer.abar = SpdMatrix::zero(arch.fan_in(l));
        layer.sbar = SpdMatrix::zero(arch.fan_out(l));
        p.layers.push_back(std::move(layer));
    }
    refresh_damped_inverses(p, false);
    refresh_damped_inverses(p, true);
    return p;
}

FullPosterior FullPosterior::create(const MlpArchitecture& arch, const Hyper& hyper, Rng& rng)
{
    arch.validate();
    hyper.validate();
    return FullPosterior{arch, hyper, flatten(random_weights(arch, rng)), SpdMatrix::zero(arch.num_weights())};
}

std::string family_name(const Posterior& p)
{
    return std::visit(overloaded{[](const FfgPosterior&) { return std::string("ffg"); },
                                 [](const MvgPosterior&) { return std::string("mvg"); },
                                 [](const FullPosterior&) { return std::string("full"); }},
                      p);
}

const MlpArchitecture& architecture(const Posterior& p)
{
    return std::visit([](const auto& q) -> const MlpArchitecture& { return q.arch; }, p);
}

const Hyper& hyper_of(const Posterior& p)
{
    return std::visit([](const auto& q) -> const Hyper& { return q.hyper; }, p);
}

WeightSet mean_weights(const Posterior& p)
{
    return std::visit(overloaded{[](const FfgPosterior& q) { return unflatten(q.arch, q.mu); },
                                 [](const FullPosterior& q) { return unflatten(q.arch, q.mu); },
                                 [](const MvgPosterior& q) {
                                     WeightSet w;
                                     for (const auto& layer : q.layers) w.layers.push_back(layer.mean);
                                     return w;
                                 }},
                      p);
}

double factored_damping_pi(const SpdMatrix& abar, const SpdMatrix& sbar)
{
    const double ta = abar.matrix().trace();
    const double ts = sbar.matrix().trace();
    if (ta < 1e-12 || ts < 1e-12) {
        return 1.0;
    }
    const double ratio = (ta / static_cast<double>(abar.dim())) / (ts / static_cast<double>(sbar.dim()));
    return std::clamp(std::sqrt(ratio), 1e-3, 1e3);
}

DampedInverses damped_inverses(const SpdMatrix& abar, const SpdMatrix& sbar, double gamma, double lambdaOverN,
                               std::optional<double> pi)
{
    if (!(gamma > 0.0)) {
        throw std::invalid_argument("damped_inverses: damping must be positive");
    }
    DampedInverses d;
    d.pi = pi ? *pi : factored_damping_pi(abar, sbar);
    d.gamma = gamma;
    const double root = std::sqrt(gamma);
    try {
        d.invA = spd_inverse(abar.shifted(d.pi * root));
        d.invS = spd_inverse(sbar.shifted(root / d.pi));
        d.rowFactor = cholesky(SpdMatrix(lambdaOverN * d.invA));
        d.colFactor = cholesky(SpdMatrix(d.invS));
    } catch (const NotPositiveDefinite& e) {
        throw NotPositiveDefinite(std::string("internal fault: damped Kronecker factor not SPD: ") + e.what());
    }
    d.valid = true;
    return d;
}

void refresh_damped_inverses(MvgPosterior& p, bool useTotalDamping)
{
    const double gamma = useTotalDamping ? p.hyper.gamma_total() : p.hyper.gamma_in();
    for (auto& layer : p.layers) {
        DampedInverses d = damped_inverses(layer.abar, layer.sbar, gamma, p.hyper.lambda_over_n());
        (useTotalDamping ? layer.step : layer.sampling) = std::move(d);
    }
}

WeightSet sample_weights(const FfgPosterior& p, Rng& rng)
{
    const Vector sd = p.variances().array().sqrt().matrix();
    Vector w(p.mu.size());
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        w(i) = p.mu(i) + sd(i) * rng.normal();
    }
    return unflatten(p.arch, w);
}

WeightSet sample_weights(const MvgPosterior& p, Rng& rng)
{
    WeightSet w;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& layer = p.layers[l];
        if (!layer.sampling.valid) {
            throw StaleCache("sample_weights: layer " + std::to_string(l) +
                             " has no damped inverses; call refresh_damped_inverses first");
        }
        w.layers.push_back(sample_mvg_factored(layer.mean, layer.sampling.rowFactor, layer.sampling.colFactor, rng));
    }
    return w;
}

WeightSet sample_weights(const FullPosterior& p, Rng& rng)
{
    return unflatten(p.arch, sample_gaussian_precision(p.mu, precision(p), rng));
}

WeightSet sample_weights(const Posterior& p, Rng& rng)
{
    return std::visit([&rng](const auto& q) { return sample_weights(q, rng); }, p);
}

Vector precision(const FfgPosterior& p)
{
    return ((p.fbar.array() + p.hyper.gamma_in()) / p.hyper.lambda_over_n()).matrix();
}

std::vector<KroneckerPair> precision(const MvgPosterior& p)
{
    std::vector<KroneckerPair> out;
    const double gamma = p.hyper.gamma_in();
    for (const auto& layer : p.layers) {
        const double pi = layer.sampling.valid ? layer.sampling.pi : factored_damping_pi(layer.abar, layer.sbar);
        const double root = std::sqrt(gamma);
        out.push_back(KroneckerPair{layer.sbar.shifted(root / pi), layer.abar.shifted(pi * root),
                                    1.0 / p.hyper.lambda_over_n()});
    }
    return out;
}

SpdMatrix precision(const FullPosterior& p)
{
    Matrix lam = p.fbar.matrix() / p.hyper.lambda_over_n();
    lam.diagonal().array() += 1.0 / p.hyper.eta;
    return SpdMatrix(lam);
}

Matrix dense_layer_covariance(const MvgPosterior& p, std::size_t layer)
{
    const auto& d = p.layers.at(layer).sampling;
    if (!d.valid) {
        throw StaleCache("dense_layer_covariance: sampling cache not initialized");
    }
    return p.hyper.lambda_over_n() * kron(d.invS, d.invA);
}

double kl_to_prior(const FfgPosterior& p)
{
    const Vector var = p.variances();
    return gaussian_kl_to_spherical(var.array().log().sum(), var.sum(), p.mu.squaredNorm(),
                                    static_cast<std::size_t>(p.mu.size()), p.hyper.eta);
}

double kl_to_prior(const MvgPosterior& p)
{
    double total = 0.0;
    const double c = p.hyper.lambda_over_n();
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& layer = p.layers[l];
        if (!layer.sampling.valid) {
            throw StaleCache("kl_to_prior: sampling cache not initialized");
        }
        const double m = static_cast<double>(layer.mean.rows());
        const double n = static_cast<double>(layer.mean.cols());
        // Sigma = c * invS ⊗ invA; the factor log-dets come from the damped
        // precisions' Cholesky pivots.
        const double root = std::sqrt(layer.sampling.gamma);
        const double logdetA = spd_logdet(layer.abar.shifted(layer.sampling.pi * root));
        const double logdetS = spd_logdet(layer.sbar.shifted(root / layer.sampling.pi));
        const double logdetCov = m * n * std::log(c) - m * logdetS - n * logdetA;
        const double traceCov = c * layer.sampling.invA.trace() * layer.sampling.invS.trace();
        total += gaussian_kl_to_spherical(logdetCov, traceCov, layer.mean.squaredNorm(),
                                          static_cast<std::size_t>(m * n), p.hyper.eta);
    }
    return total;
}

double kl_to_prior(const FullPosterior& p)
{
    const SpdMatrix lam = precision(p);
    const Matrix cov = spd_inverse(lam);
    return gaussian_kl_to_spherical(-spd_logdet(lam), cov.trace(), p.mu.squaredNorm(),
                                    static_cast<std::size_t>(p.mu.size()), p.hyper.eta);
}

double kl_to_prior(const Posterior& p)
{
    return std::visit([](const auto& q) { return kl_to_prior(q); }, p);
}

ElboEstimate elbo_estimate(const Posterior& p, const Matrix& inputs, const Matrix& targets, const NoiseModel& noise,
                           std::size_t numSamples, Rng& rng)
{
    if (inputs.rows() == 0) {
        throw std::invalid_argument("elbo_estimate: empty data");
    }
    if (numSamples < 1) {
        throw std::invalid_argument("elbo_estimate: numSamples must be >= 1");
    }
    const MlpArchitecture& arch = architecture(p);
    const Hyper& hyper = hyper_of(p);
    const double scale = static_cast<double>(hyper.N) / static_cast<double>(inputs.rows());
    const bool useExpected = arch.likelihood == Likelihood::gaussian && noise.q.has_value();

    double sum = 0.0, sumSq = 0.0;
    for (std::size_t s = 0; s < numSamples; ++s) {
        const WeightSet w = sample_weights(p, rng);
        const Matrix out = predict(arch, w, inputs);
        double ll = 0.0;
        if (useExpected) {
            for (Eigen::Index i = 0; i < out.rows(); ++i) {
                ll += expected_gaussian_ll(out.row(i).transpose(), targets.row(i).transpose(), *noise.q);
            }
        } else {
            ll = log_likelihood_batch(arch, out, targets, likelihood_tau(arch, noise));
        }
        ll *= scale;
        sum += ll;
        sumSq += ll * ll;
    }
    const double ns = static_cast<double>(numSamples);
    const double mean = sum / ns;
    ElboEstimate e;
    e.stdError = numSamples > 1 ? std::sqrt(std::max(0.0, (sumSq - ns * mean * mean) / (ns - 1.0)) / ns) : 0.0;
    e.value = mean - hyper.lambda * kl_to_prior(p);
    if (useExpected) {
        e.value -= gamma_kl(*noise.q, noise.prior);
    }
    return e;
}

IntrinsicRewardInputs intrinsic_reward_inputs(const MvgPosterior& p, const Matrix& inputs, const Matrix& targets,
                                              const NoiseModel& noise, std::size_t numSamples, Rng& rng)
{
    if (numSamples < 1 || inputs.rows() == 0) {
        throw std::invalid_argument("intrinsic_reward_inputs: need samples and data");
    }
    const std::size_t layers = p.layers.size();
    IntrinsicRewardInputs out;
    for (const auto& layer : p.layers) {
        out.muGrads.push_back(Matrix::Zero(layer.mean.rows(), layer.mean.cols()));
        out.sigma1Grads.push_back(Matrix::Zero(layer.mean.rows(), layer.mean.rows()));
        out.sigma2Grads.push_back(Matrix::Zero(layer.mean.cols(), layer.mean.cols()));
    }
    const auto tau = likelihood_tau(p.arch, noise);
    const double b = static_cast<double>(inputs.rows());
    const double inv = 1.0 / static_cast<double>(numSamples);
    for (std::size_t s = 0; s < numSamples; ++s) {
        const WeightSet w = sample_weights(p, rng);
        const BatchTrace trace = forward_batch(p.arch, w, inputs);
        const auto g = backward_batch(p.arch, w, trace, log_likelihood_grad(p.arch, trace.output, targets, tau));
        const Matrix sampled = sample_targets_batch(p.arch, trace.output, tau, rng);
        const auto gf = backward_batch(p.arch, w, trace, log_likelihood_grad(p.arch, trace.output, sampled, tau));
        for (std::size_t l = 0; l < layers; ++l) {
            const auto& cache = p.layers[l].sampling;
            const Matrix sigma1 = p.hyper.lambda_over_n() * cache.invA;
            const Matrix& sigma2 = cache.invS;
            const Matrix aStat = trace.inputs[l].transpose() * trace.inputs[l] / b;
            const Matrix sStat = gf[l].transpose() * gf[l] / b;
            out.muGrads[l] += inv * (trace.inputs[l].transpose() * g[l]);
            // -1/2 * B * (S ⊗ A) pushed through Sigma = Sigma_2 ⊗ Sigma_1.
            out.sigma1Grads[l] += inv * (-0.5 * b * sigma2.cwiseProduct(sStat).sum()) * aStat;
            out.sigma2Grads[l] += inv * (-0.5 * b * sigma1.cwiseProduct(aStat).sum()) * sStat;
        }
    }
    return out;
}

double intrinsic_reward(const MvgPosterior& p, const IntrinsicRewardInputs& grads, double stepSize)
{
    if (grads.muGrads.size() != p.layers.size() || grads.sigma1Grads.size() != p.layers.size() ||
        grads.sigma2Grads.size() != p.layers.size()) {
        throw DimensionMismatch("intrinsic_reward: gradient layer count mismatch");
    }
    double total = 0.0;
    const double c = p.hyper.lambda_over_n();
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& cache = p.layers[l].sampling;
        if (!cache.valid) {
            throw StaleCache("intrinsic_reward: sampling cache not initialized");
        }
        const Matrix& gm = grads.muGrads[l];
        const Matrix& g1 = grads.sigma1Grads[l];
        const Matrix& g2 = grads.sigma2Grads[l];
        const auto m = cache.invA.rows();
        const auto n = cache.invS.rows();
        if (gm.rows() != m || gm.cols() != n || g1.rows() != m || g1.cols() != m || g2.rows() != n ||
            g2.cols() != n) {
            throw DimensionMismatch("intrinsic_reward: gradient shape mismatch in layer " + std::to_string(l));
        }
        const Matrix sigma1 = c * cache.invA;
        const Matrix& sigma2 = cache.invS;
        // F_mu^{-1} = Sigma = Sigma_2 ⊗ Sigma_1.
        const double muTerm = kron_quadratic_form(KroneckerPair{SpdMatrix(sigma2), SpdMatrix(sigma1), 1.0}, gm);
        const double s1Term = 2.0 / static_cast<double>(n) * g1.cwiseProduct(sigma1 * g1 * sigma1).sum();
        const double s2Term = 2.0 / static_cast<double>(m) * g2.cwiseProduct(sigma2 * g2 * sigma2).sum();
        total += muTerm + s1Term + s2Term;
    }
    return 0.5 * stepSize * stepSize * total;
}

}  // namespace nng
