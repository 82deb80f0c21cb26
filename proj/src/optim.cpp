#include "nng/optim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace nng {

namespace {

struct SampledGradients {
    BatchTrace trace;
    std::vector<Matrix> meanGrads;
    std::vector<Matrix> fisherG;
    double residualSq = 0.0;
    bool finite = true;
};

SampledGradients sampled_gradients(const MlpArchitecture& arch, const WeightSet& w, const Matrix& x,
                                   const Matrix& y, std::optional<double> tau, FisherMode mode, Rng& rng)
{
    if (x.rows() == 0) {
        throw std::invalid_argument("optimizer step on an empty batch");
    }
    SampledGradients s;
    s.trace = forward_batch(arch, w, x);
    const std::vector<Matrix> g =
        backward_batch(arch, w, s.trace, log_likelihood_grad(arch, s.trace.output, y, tau));
    const double b = static_cast<double>(x.rows());
    for (std::size_t l = 0; l < g.size(); ++l) {
        s.meanGrads.push_back(s.trace.inputs[l].transpose() * g[l] / b);
        s.finite = s.finite && all_finite(s.meanGrads.back());
    }
    if (mode == FisherMode::true_fisher) {
        const Matrix sampled = sample_targets_batch(arch, s.trace.output, tau, rng);
        s.fisherG = backward_batch(arch, w, s.trace, log_likelihood_grad(arch, s.trace.output, sampled, tau));
    } else {
        s.fisherG = g;
    }
    for (const auto& gf : s.fisherG) {
        s.finite = s.finite && all_finite(gf);
    }
    if (arch.likelihood == Likelihood::gaussian) {
        s.residualSq = (y - s.trace.output).squaredNorm();
    }
    return s;
}

double grad_norm(const std::vector<Matrix>& grads)
{
    double sq = 0.0;
    for (const auto& g : grads) sq += g.squaredNorm();
    return std::sqrt(sq);
}

Vector flatten_layers(const std::vector<Matrix>& layers)
{
    WeightSet w;
    w.layers = layers;
    return flatten(w);
}

/// Row i holds the flattened per-example gradient vec(a_i g_i^T) over layers.
Matrix per_example_gradients(const BatchTrace& trace, const std::vector<Matrix>& g)
{
    const Eigen::Index b = trace.output.rows();
    Eigen::Index total = 0;
    for (std::size_t l = 0; l < g.size(); ++l) total += trace.inputs[l].cols() * g[l].cols();
    Matrix j(b, total);
    Eigen::Index offset = 0;
    for (std::size_t l = 0; l < g.size(); ++l) {
        const Matrix& a = trace.inputs[l];
        const Eigen::Index rows = a.cols();
        for (Eigen::Index c = 0; c < g[l].cols(); ++c) {
            for (Eigen::Index r = 0; r < rows; ++r) {
                j.col(offset + c * rows + r) = a.col(r).cwiseProduct(g[l].col(c));
            }
        }
        offset += rows * g[l].cols();
    }
    return j;
}

/// Keeps a log-space update inside the representable positive range.
double positive_finite(double x)
{
    return std::clamp(x, std::numeric_limits<double>::min(), std::numeric_limits<double>::max());
}

}  // namespace

double debiased_rate(double beta, std::size_t k)
{
    if (k == 0) return beta;
    return beta / (1.0 - std::pow(1.0 - beta, static_cast<double>(k)));
}

std::string to_string(Method m)
{
    switch (m) {
    case Method::ffg: return "nng-ffg";
    case Method::mvg: return "nng-mvg";
    case Method::full: return "nng-full";
    }
    return "?";
}

Method parse_method(const std::string& s)
{
    if (s == "nng-ffg") return Method::ffg;
    if (s == "nng-mvg") return Method::mvg;
    if (s == "nng-full") return Method::full;
    throw std::invalid_argument("unknown method '" + s + "' (expected nng-ffg, nng-mvg or nng-full)");
}

std::string to_string(FisherMode f) { return f == FisherMode::true_fisher ? "true" : "empirical"; }

FisherMode parse_fisher_mode(const std::string& s)
{
    if (s == "true") return FisherMode::true_fisher;
    if (s == "empirical") return FisherMode::empirical;
    throw std::invalid_argument("unknown fisher mode '" + s + "' (expected true or empirical)");
}

double TrustRegionSchedule::budget() const { return c0 * std::pow(zeta, static_cast<double>(epoch)); }

void TrustRegionSchedule::validate() const
{
    if (!(c0 > 0.0)) throw std::invalid_argument("trust region c0 must be positive");
    if (!(zeta > 0.0 && zeta <= 1.0)) throw std::invalid_argument("trust region zeta must lie in (0, 1]");
    if (!(alphaMax > 0.0)) throw std::invalid_argument("trust region alphaMax must be positive");
}

double trust_region_lr(double fisherNormSq, const TrustRegionSchedule& schedule)
{
    if (!(fisherNormSq > 0.0) || !std::isfinite(fisherNormSq)) {
        return schedule.alphaMax;
    }
    return std::min(schedule.alphaMax, std::sqrt(schedule.budget() / fisherNormSq));
}

double trust_region_lr(const Vector& v, const Vector& dampedFisherDiag, const TrustRegionSchedule& schedule)
{
    if (v.size() != dampedFisherDiag.size()) {
        throw DimensionMismatch("trust_region_lr: direction and Fisher diagonal differ in length");
    }
    return trust_region_lr(v.cwiseProduct(v).dot(dampedFisherDiag), schedule);
}

double trust_region_lr(const std::vector<Matrix>& v, const std::vector<KroneckerPair>& dampedFisher,
                       const TrustRegionSchedule& schedule)
{
    if (v.size() != dampedFisher.size()) {
        throw DimensionMismatch("trust_region_lr: layer count mismatch");
    }
    double sq = 0.0;
    for (std::size_t l = 0; l < v.size(); ++l) {
        sq += kron_quadratic_form(dampedFisher[l], v[l]);
    }
    return trust_region_lr(sq, schedule);
}

double trust_region_lr(const Vector& v, const SpdMatrix& dampedFisher, const TrustRegionSchedule& schedule)
{
    if (static_cast<std::size_t>(v.size()) != dampedFisher.dim()) {
        throw DimensionMismatch("trust_region_lr: direction and Fisher differ in dimension");
    }
    return trust_region_lr(v.dot(dampedFisher.matrix() * v), schedule);
}

NoisyAdamState::NoisyAdamState(FfgPosterior p) : posterior(std::move(p)), m(Vector::Zero(posterior.mu.size())) {}

void NoisyAdamState::validate() const
{
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw std::invalid_argument("noisy Adam decay rates must lie in [0, 1)");
    }
    if (!(alpha > 0.0)) throw std::invalid_argument("noisy Adam step size must be positive");
    if (trustRegion) trustRegion->validate();
}

NoisyKfacState::NoisyKfacState(MvgPosterior p) : posterior(std::move(p)) {}

void NoisyKfacState::validate() const
{
    if (tStats < 1 || tInv < 1) throw std::invalid_argument("Tstats and Tinv must be at least 1");
    if (!(alpha > 0.0)) throw std::invalid_argument("noisy K-FAC step size must be positive");
    if (!(betaTilde > 0.0 && betaTilde <= 1.0)) throw std::invalid_argument("betaTilde must lie in (0, 1]");
    if (trustRegion) trustRegion->validate();
}

NoisyFullState::NoisyFullState(FullPosterior p) : posterior(std::move(p))
{
    const std::size_t n = posterior.arch.num_weights();
    if (n > kMaxFullWeights) {
        throw std::invalid_argument("nng-full keeps a dense " + std::to_string(n) + " x " + std::to_string(n) +
                                    " covariance; networks above " + std::to_string(kMaxFullWeights) +
                                    " weights are not supported, use nng-mvg or nng-ffg");
    }
}

void NoisyFullState::validate() const
{
    if (!(alphaTilde > 0.0)) throw std::invalid_argument("alphaTilde must be positive");
    if (!(betaTilde > 0.0 && betaTilde <= 1.0)) throw std::invalid_argument("betaTilde must lie in (0, 1]");
    if (trustRegion) trustRegion->validate();
}

StepReport noisy_adam_step(NoisyAdamState& state, const Matrix& inputs, const Matrix& targets,
                           const NoiseModel& noise, Rng& rng)
{
    FfgPosterior& p = state.posterior;
    const double gammaIn = p.hyper.gamma_in();
    const double gamma = p.hyper.gamma_total();

    const WeightSet w = sample_weights(p, rng);
    const SampledGradients s =
        sampled_gradients(p.arch, w, inputs, targets, likelihood_tau(p.arch, noise), state.fisher, rng);
    StepReport report;
    report.residualSq = s.residualSq;
    report.gradNorm = grad_norm(s.meanGrads);
    if (!s.finite) {
        ++state.skipped;
        report.skipped = true;
        return report;
    }

    const double b = static_cast<double>(inputs.rows());
    std::vector<Matrix> sq;
    for (std::size_t l = 0; l < s.fisherG.size(); ++l) {
        const Matrix& a = s.trace.inputs[l];
        sq.push_back(a.cwiseProduct(a).transpose() * s.fisherG[l].cwiseProduct(s.fisherG[l]) / b);
    }

    const Vector v = flatten_layers(s.meanGrads) - gammaIn * flatten(w);
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * v;
    ++state.k;
    const double fRate = state.debiasFisher ? debiased_rate(1.0 - state.beta2, state.k) : 1.0 - state.beta2;
    p.fbar = (1.0 - fRate) * p.fbar + fRate * flatten_layers(sq);
    const Vector mTilde = state.m / (1.0 - std::pow(state.beta1, static_cast<double>(state.k)));
    const Vector damped = (p.fbar.array() + gamma).matrix();
    const Vector mHat = mTilde.cwiseQuotient(damped);

    report.stepSize = state.trustRegion ? trust_region_lr(mHat, damped, *state.trustRegion) : state.alpha;
    p.mu += report.stepSize * mHat;
    return report;
}

StepReport noisy_kfac_step(NoisyKfacState& state, const Matrix& inputs, const Matrix& targets,
                           const NoiseModel& noise, Rng& rng)
{
    MvgPosterior& p = state.posterior;
    const double gammaIn = p.hyper.gamma_in();

    const WeightSet w = sample_weights(p, rng);
    const SampledGradients s =
        sampled_gradients(p.arch, w, inputs, targets, likelihood_tau(p.arch, noise), state.fisher, rng);
    StepReport report;
    report.residualSq = s.residualSq;
    report.gradNorm = grad_norm(s.meanGrads);
    if (!s.finite) {
        ++state.skipped;
        report.skipped = true;
        return report;
    }

    ++state.k;
    const double b = static_cast<double>(inputs.rows());
    if (state.k % state.tStats == 0) {
        ++state.statsUpdates;
        const double bt =
            state.debiasFisher ? debiased_rate(state.betaTilde, state.statsUpdates) : state.betaTilde;
        for (std::size_t l = 0; l < p.layers.size(); ++l) {
            auto& layer = p.layers[l];
            const Matrix& a = s.trace.inputs[l];
            const Matrix& g = s.fisherG[l];
            layer.abar = SpdMatrix((1.0 - bt) * layer.abar.matrix() + bt * (a.transpose() * a) / b);
            layer.sbar = SpdMatrix((1.0 - bt) * layer.sbar.matrix() + bt * (g.transpose() * g) / b);
        }
    }
    if (state.k % state.tInv == 0) {
        refresh_damped_inverses(p, false);
        refresh_damped_inverses(p, true);
    }

    std::vector<Matrix> directions;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& cache = p.layers[l].step;
        if (!cache.valid) {
            throw StaleCache("noisy_kfac_step: step inverses missing for layer " + std::to_string(l));
        }
        const Matrix v = s.meanGrads[l] - gammaIn * w.layers[l];
        directions.push_back(cache.invA * v * cache.invS);
    }

    if (state.trustRegion) {
        std::vector<KroneckerPair> fisher;
        for (const auto& layer : p.layers) {
            const double root = std::sqrt(layer.step.gamma);
            fisher.push_back(KroneckerPair{layer.sbar.shifted(root / layer.step.pi),
                                           layer.abar.shifted(layer.step.pi * root), 1.0});
        }
        report.stepSize = trust_region_lr(directions, fisher, *state.trustRegion);
    } else {
        report.stepSize = state.alpha;
    }
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        p.layers[l].mean += report.stepSize * directions[l];
    }
    return report;
}

StepReport noisy_full_step(NoisyFullState& state, const Matrix& inputs, const Matrix& targets,
                           const NoiseModel& noise, Rng& rng)
{
    FullPosterior& p = state.posterior;
    const double gammaIn = p.hyper.gamma_in();
    const double gamma = p.hyper.gamma_total();

    const WeightSet w = sample_weights(p, rng);
    const SampledGradients s =
        sampled_gradients(p.arch, w, inputs, targets, likelihood_tau(p.arch, noise), state.fisher, rng);
    StepReport report;
    report.residualSq = s.residualSq;
    report.gradNorm = grad_norm(s.meanGrads);
    if (!s.finite) {
        ++state.skipped;
        report.skipped = true;
        return report;
    }

    ++state.k;
    const double b = static_cast<double>(inputs.rows());
    const Matrix j = per_example_gradients(s.trace, s.fisherG);
    const double bt = state.debiasFisher ? debiased_rate(state.betaTilde, state.k) : state.betaTilde;
    p.fbar = SpdMatrix((1.0 - bt) * p.fbar.matrix() + bt * (j.transpose() * j) / b);

    const SpdMatrix damped = p.fbar.shifted(gamma);
    const Vector direction = spd_solve(damped, Vector(flatten_layers(s.meanGrads) - gammaIn * flatten(w)));
    report.stepSize =
        state.trustRegion ? trust_region_lr(direction, damped, *state.trustRegion) : state.alphaTilde;
    p.mu += report.stepSize * direction;
    return report;
}

GammaLogGradient gamma_tau_gradient(const GammaPosterior& q, const GammaPosterior& prior, double residualSq,
                                    std::size_t batchSize, std::size_t outputDims, std::size_t N)
{
    q.validate();
    if (batchSize == 0 || N == 0) {
        throw std::invalid_argument("gamma_tau_gradient: empty batch or dataset");
    }
    const double b = static_cast<double>(batchSize);
    const double d = static_cast<double>(outputDims);
    const double n = static_cast<double>(N);
    const GammaKlGradient kl = gamma_kl_gradient(q, prior);
    const double dAlpha = 0.5 * d * trigamma(q.alpha) - 0.5 * residualSq / (b * q.beta) - kl.dAlpha / n;
    const double dBeta = -0.5 * d / q.beta + 0.5 * q.alpha * residualSq / (b * q.beta * q.beta) - kl.dBeta / n;
    return {q.alpha * dAlpha, q.beta * dBeta};
}

GammaPosterior gamma_tau_update(const GammaPosterior& q, const GammaPosterior& prior, double residualSq,
                                std::size_t batchSize, std::size_t outputDims, std::size_t N, double lr)
{
    const GammaLogGradient g = gamma_tau_gradient(q, prior, residualSq, batchSize, outputDims, N);
    if (!std::isfinite(g.dLogAlpha) || !std::isfinite(g.dLogBeta)) {
        throw std::runtime_error("gamma_tau_update: nonfinite gradient");
    }
    return GammaPosterior{positive_finite(q.alpha * std::exp(lr * g.dLogAlpha)),
                          positive_finite(q.beta * std::exp(lr * g.dLogBeta))};
}

GammaPosterior gamma_tau_adam_update(const GammaPosterior& q, const GammaPosterior& prior, double residualSq,
                                     std::size_t batchSize, std::size_t outputDims, std::size_t N, double lr,
                                     GammaAdamState& state)
{
    const GammaLogGradient g = gamma_tau_gradient(q, prior, residualSq, batchSize, outputDims, N);
    if (!std::isfinite(g.dLogAlpha) || !std::isfinite(g.dLogBeta)) {
        throw std::runtime_error("gamma_tau_adam_update: nonfinite gradient");
    }
    ++state.k;
    const std::array<double, 2> grad{g.dLogAlpha, g.dLogBeta};
    std::array<double, 2> delta{};
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.k));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.k));
    for (std::size_t i = 0; i < 2; ++i) {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        delta[i] = lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + state.epsilon);
    }
    return GammaPosterior{positive_finite(q.alpha * std::exp(delta[0])), positive_finite(q.beta * std::exp(delta[1]))};
}

GammaPosterior gamma_tau_step(const GammaPosterior& q, const GammaPosterior& prior, const Posterior& posterior,
                              const Matrix& inputs, const Matrix& targets, Rng& rng, double lr)
{
    const MlpArchitecture& arch = architecture(posterior);
    if (arch.likelihood != Likelihood::gaussian) {
        throw std::invalid_argument("gamma_tau_step: noise precision applies to the Gaussian likelihood only");
    }
    const WeightSet w = sample_weights(posterior, rng);
    const double residualSq = (targets - predict(arch, w, inputs)).squaredNorm();
    return gamma_tau_update(q, prior, residualSq, static_cast<std::size_t>(inputs.rows()), arch.output_size(),
                            hyper_of(posterior).N, lr);
}

void TrainConfig::validate() const
{
    if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
    if (batchSize < 1) throw std::invalid_argument("batch size must be at least 1");
    if (!(alphaTilde > 0.0)) throw std::invalid_argument("alphaTilde must be positive");
    if (!(betaTilde > 0.0 && betaTilde < 1.0)) throw std::invalid_argument("betaTilde must lie in (0, 1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw std::invalid_argument("beta1 must lie in [0, 1)");
    if (tStats < 1 || tInv < 1) throw std::invalid_argument("Tstats and Tinv must be at least 1");
    if (!(noiseLr > 0.0)) throw std::invalid_argument("noise learning rate must be positive");
    if (trustRegion) trustRegion->validate();
}

TrainResult train_posterior(Method method, const MlpArchitecture& arch, Hyper hyper, const TrainConfig& cfg,
                            const Matrix& inputs, const Matrix& targets, NoiseModel noise, Rng& rng,
                            const StepLogger& logger)
{
    cfg.validate();
    if (inputs.rows() == 0 || inputs.rows() != targets.rows()) {
        throw std::invalid_argument("train_posterior: inputs and targets must be nonempty with matching rows");
    }
    hyper.N = static_cast<std::size_t>(inputs.rows());
    const bool gaussian = arch.likelihood == Likelihood::gaussian;
    if (cfg.learnNoise && gaussian && !noise.q) {
        noise.q = noise.prior;
    }

    Rng logRng = rng.split();
    const auto start = std::chrono::steady_clock::now();

    std::optional<NoisyAdamState> adam;
    std::optional<NoisyKfacState> kfac;
    std::optional<NoisyFullState> full;
    switch (method) {
    case Method::ffg:
        adam.emplace(FfgPosterior::create(arch, hyper, rng));
        adam->beta1 = cfg.beta1;
        adam->beta2 = 1.0 - cfg.betaTilde;
        adam->fisher = cfg.fisher;
        adam->trustRegion = cfg.trustRegion;
        adam->debiasFisher = cfg.debiasFisher;
        adam->validate();
        break;
    case Method::mvg:
        kfac.emplace(MvgPosterior::create(arch, hyper, rng));
        kfac->betaTilde = cfg.betaTilde;
        kfac->tStats = cfg.tStats;
        kfac->tInv = cfg.tInv;
        kfac->fisher = cfg.fisher;
        kfac->trustRegion = cfg.trustRegion;
        kfac->debiasFisher = cfg.debiasFisher;
        kfac->validate();
        break;
    case Method::full:
        full.emplace(FullPosterior::create(arch, hyper, rng));
        full->betaTilde = cfg.betaTilde;
        full->fisher = cfg.fisher;
        full->trustRegion = cfg.trustRegion;
        full->debiasFisher = cfg.debiasFisher;
        full->validate();
        break;
    }

    const auto rows = static_cast<std::size_t>(inputs.rows());
    std::vector<std::size_t> order(rows);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Matrix bx, by;
    std::size_t steps = 0;
    GammaAdamState noiseAdam;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        const double lr = cfg.alphaTilde * (cfg.decayHalfway && 2 * epoch >= cfg.epochs ? 0.1 : 1.0);
        for (std::size_t begin = 0; begin < rows; begin += cfg.batchSize) {
            const std::size_t end = std::min(rows, begin + cfg.batchSize);
            const auto count = static_cast<Eigen::Index>(end - begin);
            bx.resize(count, inputs.cols());
            by.resize(count, targets.cols());
            for (Eigen::Index i = 0; i < count; ++i) {
                bx.row(i) = inputs.row(static_cast<Eigen::Index>(order[begin + static_cast<std::size_t>(i)]));
                by.row(i) = targets.row(static_cast<Eigen::Index>(order[begin + static_cast<std::size_t>(i)]));
            }
            StepReport report;
            if (adam) {
                if (adam->trustRegion) adam->trustRegion->alphaMax = lr;
                adam->alpha = lr;
                report = noisy_adam_step(*adam, bx, by, noise, rng);
            } else if (kfac) {
                if (kfac->trustRegion) kfac->trustRegion->alphaMax = lr;
                kfac->alpha = lr;
                report = noisy_kfac_step(*kfac, bx, by, noise, rng);
            } else {
                if (full->trustRegion) full->trustRegion->alphaMax = lr;
                full->alphaTilde = lr;
                report = noisy_full_step(*full, bx, by, noise, rng);
            }
            ++steps;
            if (!report.skipped && gaussian && noise.q) {
                noise.q = cfg.noiseAdam
                              ? gamma_tau_adam_update(*noise.q, noise.prior, report.residualSq, end - begin,
                                                      arch.output_size(), hyper.N, cfg.noiseLr, noiseAdam)
                              : gamma_tau_update(*noise.q, noise.prior, report.residualSq, end - begin,
                                                 arch.output_size(), hyper.N, cfg.noiseLr);
            }
            if (logger && cfg.logEvery > 0 && steps % cfg.logEvery == 0) {
                StepRecord rec;
                rec.step = steps;
                rec.stepSize = report.stepSize;
                rec.gradNorm = report.gradNorm;
                const Posterior current = adam ? Posterior(adam->posterior)
                                               : (kfac ? Posterior(kfac->posterior) : Posterior(full->posterior));
                rec.elbo = elbo_estimate(current, bx, by, noise, 1, logRng).value;
                rec.wallSeconds =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
                logger(rec);
            }
        }
        if (adam && adam->trustRegion) adam->trustRegion->advance_epoch();
        if (kfac && kfac->trustRegion) kfac->trustRegion->advance_epoch();
        if (full && full->trustRegion) full->trustRegion->advance_epoch();
    }

    TrainResult result{adam ? Posterior(std::move(adam->posterior))
                            : (kfac ? Posterior(std::move(kfac->posterior)) : Posterior(std::move(full->posterior))),
                       noise, steps, adam ? adam->skipped : (kfac ? kfac->skipped : full->skipped)};
    return result;
}

}  // namespace nng
