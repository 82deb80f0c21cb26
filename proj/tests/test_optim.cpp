#include "test_util.hpp"

#include "nng/optim.hpp"
#include "nng/oracle.hpp"

using namespace nng;
using namespace nng::test;

namespace {

MlpArchitecture linear_arch(std::size_t inputs, bool bias = true)
{
    MlpArchitecture a;
    a.layerSizes = {inputs, 1};
    a.bias = bias;
    return a;
}

Hyper make_hyper(double lambda, std::size_t n, double eta, double gammaEx = 0.0)
{
    Hyper h;
    h.lambda = lambda;
    h.N = n;
    h.eta = eta;
    h.gammaEx = gammaEx;
    return h;
}

struct Regression {
    Matrix x;
    Matrix y;
    Matrix design;  // x with a trailing column of ones
};

Regression make_regression(Eigen::Index rows, Eigen::Index dims, double tau, Rng& rng)
{
    Regression r;
    r.x = random_matrix(rows, dims, rng);
    r.design.resize(rows, dims + 1);
    r.design << r.x, Vector::Ones(rows);
    const Vector w = random_vector(dims + 1, rng);
    r.y = r.design * w;
    for (Eigen::Index i = 0; i < rows; ++i) r.y(i, 0) += rng.normal() / std::sqrt(tau);
    return r;
}

NoiseModel fixed_noise(double tau)
{
    NoiseModel n;
    n.tau = tau;
    return n;
}

}  // namespace

TEST_CASE("debiased moving-average rate")
{
    CHECK(debiased_rate(0.1, 1) == doctest::Approx(1.0));
    CHECK(debiased_rate(0.1, 2) == doctest::Approx(0.1 / (1.0 - 0.81)));
    CHECK(debiased_rate(0.001, 1000000) == doctest::Approx(0.001));
}

TEST_CASE("noisy Adam with zero gradients leaves the mean and decays f")
{
    Rng rng(1);
    const MlpArchitecture arch = linear_arch(2, false);
    NoisyAdamState s(FfgPosterior::create(arch, make_hyper(1.0, 10, 1e300), rng));
    s.posterior.fbar.setConstant(2.0);
    const Vector mu0 = s.posterior.mu;
    const Matrix x = Matrix::Zero(4, 2);
    const Matrix y = random_matrix(4, 1, rng);
    for (int k = 1; k <= 20; ++k) {
        noisy_adam_step(s, x, y, fixed_noise(1.0), rng);
        CHECK(s.posterior.fbar(0) == doctest::Approx(2.0 * std::pow(s.beta2, k)).epsilon(1e-12));
    }
    CHECK((s.posterior.mu - mu0).norm() < 1e-250);
}

TEST_CASE("noisy Adam's f ignores the prior term")
{
    Rng rng(2);
    const MlpArchitecture arch = linear_arch(2, false);
    NoisyAdamState s(FfgPosterior::create(arch, make_hyper(1.0, 10, 1e-6), rng));
    s.posterior.fbar.setConstant(3.0);
    s.posterior.mu.setConstant(5.0);
    noisy_adam_step(s, Matrix::Zero(3, 2), Matrix::Ones(3, 1), fixed_noise(1.0), rng);
    CHECK(s.posterior.fbar(0) == doctest::Approx(3.0 * s.beta2));
    CHECK(s.posterior.fbar(1) == doctest::Approx(3.0 * s.beta2));
    CHECK(s.posterior.mu(0) < 5.0);
}

TEST_CASE("noisy Adam converges on a one-dimensional conjugate problem")
{
    Rng rng(3);
    const MlpArchitecture arch = linear_arch(1, false);
    const std::size_t n = 10;
    const double target = 2.0, eta = 1.0;
    NoisyAdamState s(FfgPosterior::create(arch, make_hyper(1.0, n, eta), rng));
    s.beta1 = 0.0;
    const Matrix x = Matrix::Ones(n, 1);
    const Matrix y = Matrix::Constant(n, 1, target);
    for (int k = 0; k < 5000; ++k) {
        s.alpha = std::min(0.5, 2.0 / (k + 4.0));
        noisy_adam_step(s, x, y, fixed_noise(1.0), rng);
    }
    const double exact = n * target / (n + 1.0 / eta);
    CHECK(std::abs(s.posterior.mu(0) - exact) < 1e-2);
}

TEST_CASE("noisy Adam without noise or prior is a square-root-free Adam on the MAP objective")
{
    Rng rng(4);
    MlpArchitecture arch;
    arch.layerSizes = {2, 3, 1};
    arch.activation = Activation::tanh;
    const Matrix x = random_matrix(8, 2, rng);
    const Matrix y = random_matrix(8, 1, rng);
    const double gammaEx = 0.05;
    NoisyAdamState s(FfgPosterior::create(arch, make_hyper(1e-14, 8, 1.0, gammaEx), rng));
    s.fisher = FisherMode::empirical;
    s.alpha = 0.02;
    s.posterior.fbar.setConstant(1.0);

    // Reference: m, f moments of the plain likelihood gradient, m bias corrected.
    Vector mu = s.posterior.mu;
    Vector m = Vector::Zero(mu.size());
    Vector f = s.posterior.fbar;
    const double eps = s.posterior.hyper.gamma_total();
    for (int k = 1; k <= 200; ++k) {
        const WeightSet w = unflatten(arch, mu);
        Vector grad = Vector::Zero(mu.size());
        Vector sq = Vector::Zero(mu.size());
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const ForwardTrace t = forward(arch, w, x.row(i).transpose());
            const Vector og = Vector::Constant(1, y(i, 0) - t.output(0));
            const LayerGradients g = backward(arch, w, t, og);
            WeightSet gw;
            gw.layers = g.weightGrads;
            const Vector flat = flatten(gw);
            grad += flat / 8.0;
            sq += flat.cwiseProduct(flat) / 8.0;
        }
        m = s.beta1 * m + (1.0 - s.beta1) * grad;
        f = s.beta2 * f + (1.0 - s.beta2) * sq;
        const Vector mHat = m / (1.0 - std::pow(s.beta1, k));
        mu += s.alpha * mHat.cwiseQuotient((f.array() + eps).matrix());

        noisy_adam_step(s, x, y, fixed_noise(1.0), rng);
    }
    CHECK(rel_diff(s.posterior.mu, mu) < 1e-5);
    CHECK(rel_diff(s.posterior.fbar, f) < 1e-5);
}

TEST_CASE("noisy K-FAC with empty statistics takes a scaled gradient step")
{
    Rng rng(5);
    const MlpArchitecture arch = linear_arch(2);
    const Hyper h = make_hyper(1.0, 20, 0.5, 0.3);
    NoisyKfacState s(MvgPosterior::create(arch, h, rng));
    s.tStats = 2;
    s.tInv = 2;
    s.alpha = 0.1;
    const Regression data = make_regression(6, 2, 1.0, rng);
    const Matrix mean0 = s.posterior.layers[0].mean;

    Rng copy = rng;
    const WeightSet w = sample_weights(s.posterior, copy);
    const Vector wv = w.layers[0].col(0);
    const Vector residual = data.y.col(0) - data.design * wv;
    const Vector dw = data.design.transpose() * residual / 6.0;

    noisy_kfac_step(s, data.x, data.y, fixed_noise(1.0), rng);
    const Vector expected = mean0.col(0) + 0.1 * (dw - h.gamma_in() * wv) / h.gamma_total();
    CHECK(rel_diff(Vector(s.posterior.layers[0].mean.col(0)), expected) < 1e-12);
}

TEST_CASE("noisy K-FAC recovers the conjugate posterior mean of a linear layer")
{
    Rng rng(6);
    const double tau = 4.0;
    const Regression data = make_regression(60, 3, tau, rng);
    const BlrPosterior exact = blr_posterior(data.design, data.y.col(0), 1.0, tau);
    NoisyKfacState s(MvgPosterior::create(linear_arch(3), make_hyper(1.0, 60, 1.0), rng));
    for (std::size_t k = 0; k < 6000; ++k) {
        s.alpha = std::min(0.5, 2.0 / (static_cast<double>(k) + 4.0));
        s.betaTilde = 1.0 / static_cast<double>(k + 1);
        noisy_kfac_step(s, data.x, data.y, fixed_noise(tau), rng);
    }
    CHECK(rel_diff(Vector(vec(s.posterior.layers[0].mean)), exact.mean) < 1e-2);
}

TEST_CASE("noisy K-FAC on a 1x1 layer agrees with the dense step")
{
    Rng rng(7);
    const MlpArchitecture arch = linear_arch(1, false);
    const Hyper h = make_hyper(1.0, 10, 1e8);
    const double xv = 1.5;
    const Matrix x = Matrix::Constant(1, 1, xv);
    const Matrix y = Matrix::Constant(1, 1, 0.4);

    NoisyKfacState k(MvgPosterior::create(arch, h, rng));
    k.fisher = FisherMode::empirical;
    k.betaTilde = 0.1;
    k.posterior.layers[0].abar = SpdMatrix(Matrix::Constant(1, 1, xv * xv));
    k.posterior.layers[0].sbar = SpdMatrix(Matrix::Constant(1, 1, 2.0));
    k.posterior.layers[0].mean(0, 0) = -0.3;
    refresh_damped_inverses(k.posterior, false);
    refresh_damped_inverses(k.posterior, true);

    NoisyFullState f(FullPosterior::create(arch, h, rng));
    f.fisher = FisherMode::empirical;
    f.alphaTilde = k.alpha;
    f.betaTilde = 0.1;
    f.posterior.fbar = SpdMatrix(Matrix::Constant(1, 1, xv * xv * 2.0));
    f.posterior.mu(0) = -0.3;

    Rng ra(8), rb(8);
    for (int step = 0; step < 50; ++step) {
        noisy_kfac_step(k, x, y, fixed_noise(1.0), ra);
        noisy_full_step(f, x, y, fixed_noise(1.0), rb);
        const double kf = k.posterior.layers[0].abar.matrix()(0, 0) * k.posterior.layers[0].sbar.matrix()(0, 0);
        CHECK(kf == doctest::Approx(f.posterior.fbar.matrix()(0, 0)).epsilon(1e-3));
        CHECK(k.posterior.layers[0].mean(0, 0) == doctest::Approx(f.posterior.mu(0)).epsilon(1e-3));
    }
}

TEST_CASE("noisy full step: disentangled rates reproduce the raw update")
{
    Rng rng(9);
    const double tau = 2.0, eta = 0.5, lambda = 0.7;
    const Regression data = make_regression(30, 2, tau, rng);
    const std::size_t n = 30;
    const Hyper h = make_hyper(lambda, n, eta);
    NoisyFullState s(FullPosterior::create(linear_arch(2), h, rng));
    s.fisher = FisherMode::empirical;
    s.alphaTilde = 0.05;
    s.betaTilde = 0.02;

    const double alpha = s.alphaTilde * n / lambda;
    const double beta = s.betaTilde * n / lambda;
    const double gIn = lambda / (n * eta);
    Vector mu = s.posterior.mu;
    Matrix prec = Matrix::Identity(3, 3) / eta;

    Rng ra(10), rb(10);
    for (int step = 0; step < 100; ++step) {
        const Eigen::LLT<Eigen::MatrixXd> llt(prec);
        Vector z(3);
        for (Eigen::Index i = 0; i < 3; ++i) z(i) = rb.normal();
        const Vector w = mu + Eigen::MatrixXd(llt.matrixU()).triangularView<Eigen::Upper>().solve(z);
        Matrix grads(30, 3);
        for (Eigen::Index i = 0; i < 30; ++i) {
            grads.row(i) = tau * (data.y(i, 0) - data.design.row(i).dot(w)) * data.design.row(i);
        }
        const Vector dw = grads.colwise().mean().transpose();
        const Matrix fisher = grads.transpose() * grads / 30.0;
        prec = (1.0 - lambda * beta / n) * prec + beta * (fisher + gIn * Matrix::Identity(3, 3));
        mu += alpha * prec.llt().solve(Vector(dw - gIn * w));

        noisy_full_step(s, data.x, data.y, fixed_noise(tau), ra);
        CHECK((s.posterior.mu - mu).cwiseAbs().maxCoeff() < 1e-12 * std::max(1.0, mu.norm()));
        CHECK((precision(s.posterior).matrix() - prec).norm() < 1e-12 * prec.norm());
    }
}

TEST_CASE("noisy full step has zero expected mean update at the exact posterior")
{
    Rng rng(11);
    const double tau = 3.0;
    const Regression data = make_regression(40, 2, tau, rng);
    const BlrPosterior exact = blr_posterior(data.design, data.y.col(0), 1.0, tau);
    const Hyper h = make_hyper(1.0, 40, 1.0);
    FullPosterior at = FullPosterior::create(linear_arch(2), h, rng);
    at.mu = exact.mean;
    at.fbar = SpdMatrix(Matrix(h.lambda_over_n() * (exact.precision.matrix() - Matrix::Identity(3, 3))));

    const int reps = 4000;
    const double alpha = 1e-3;
    Matrix moves(reps, 3);
    for (int r = 0; r < reps; ++r) {
        NoisyFullState s(at);
        s.alphaTilde = alpha;
        s.betaTilde = 1e-9;
        noisy_full_step(s, data.x, data.y, fixed_noise(tau), rng);
        moves.row(r) = ((s.posterior.mu - at.mu) / alpha).transpose();
    }
    const Vector mean = moves.colwise().mean().transpose();
    const Vector se = (sample_covariance(moves).diagonal() / reps).cwiseSqrt();
    for (Eigen::Index i = 0; i < 3; ++i) CHECK(std::abs(mean(i)) < 3.5 * se(i));
}

TEST_CASE("posterior statistics stay PSD under random step sequences")
{
    Rng rng(12);
    MlpArchitecture arch;
    arch.layerSizes = {3, 4, 2};
    arch.activation = Activation::tanh;
    const Hyper h = make_hyper(1.0, 50, 1.0, 0.01);
    NoisyAdamState adam(FfgPosterior::create(arch, h, rng));
    NoisyKfacState kfac(MvgPosterior::create(arch, h, rng));
    kfac.tInv = 3;
    NoisyFullState full(FullPosterior::create(arch, h, rng));
    for (int step = 0; step < 1000; ++step) {
        const auto b = static_cast<Eigen::Index>(1 + rng.index(5));
        const Matrix x = random_matrix(b, 3, rng) * (0.1 + 3.0 * rng.uniform());
        const Matrix y = random_matrix(b, 2, rng);
        const NoiseModel noise = fixed_noise(0.1 + 5.0 * rng.uniform());
        const double a = 0.001 + 0.05 * rng.uniform();
        adam.alpha = a;
        kfac.alpha = a;
        full.alphaTilde = a;
        noisy_adam_step(adam, x, y, noise, rng);
        noisy_kfac_step(kfac, x, y, noise, rng);
        noisy_full_step(full, x, y, noise, rng);
    }
    CHECK(adam.posterior.fbar.minCoeff() >= 0.0);
    for (const auto& layer : kfac.posterior.layers) {
        CHECK(min_eigenvalue(layer.abar.matrix()) >= -1e-10);
        CHECK(min_eigenvalue(layer.sbar.matrix()) >= -1e-10);
    }
    CHECK(min_eigenvalue(full.posterior.fbar.matrix()) >= -1e-10);
}

TEST_CASE("nonfinite gradients skip the step")
{
    Rng rng(13);
    const MlpArchitecture arch = linear_arch(2);
    NoisyAdamState s(FfgPosterior::create(arch, make_hyper(1.0, 5, 1.0), rng));
    const Vector mu0 = s.posterior.mu;
    Matrix x = Matrix::Ones(2, 2);
    x(0, 0) = std::nan("");
    const StepReport r = noisy_adam_step(s, x, Matrix::Ones(2, 1), fixed_noise(1.0), rng);
    CHECK(r.skipped);
    CHECK(s.skipped == 1);
    CHECK(s.k == 0);
    CHECK(s.posterior.mu == mu0);

    NoisyKfacState k(MvgPosterior::create(arch, make_hyper(1.0, 5, 1.0), rng));
    CHECK(noisy_kfac_step(k, x, Matrix::Ones(2, 1), fixed_noise(1.0), rng).skipped);
    NoisyFullState f(FullPosterior::create(arch, make_hyper(1.0, 5, 1.0), rng));
    CHECK(noisy_full_step(f, x, Matrix::Ones(2, 1), fixed_noise(1.0), rng).skipped);
}

TEST_CASE("dense method refuses large networks")
{
    Rng rng(14);
    MlpArchitecture arch;
    arch.layerSizes = {20, 30, 1};
    CHECK_THROWS_AS(NoisyFullState(FullPosterior::create(arch, make_hyper(1.0, 5, 1.0), rng)),
                    std::invalid_argument);
}

TEST_CASE("trust-region step size")
{
    TrustRegionSchedule t;
    t.c0 = 0.001;
    t.zeta = 0.95;
    t.alphaMax = 0.01;
    CHECK(trust_region_lr(10.0, t) == doctest::Approx(0.01));
    CHECK(trust_region_lr(0.0, t) == 0.01);
    CHECK(trust_region_lr(Vector::Zero(3), Vector::Ones(3), t) == 0.01);
    t.alphaMax = 5.0;
    CHECK(trust_region_lr(t.budget(), t) == doctest::Approx(1.0));
    t.alphaMax = 0.5;
    CHECK(trust_region_lr(t.budget(), t) == 0.5);
    t.alphaMax = 1.0;
    t.advance_epoch();
    CHECK(t.budget() == doctest::Approx(0.001 * 0.95));
    CHECK(trust_region_lr(1.0, t) == doctest::Approx(std::sqrt(0.00095)));

    Rng rng(15);
    const Vector v = random_vector(3, rng);
    const SpdMatrix f = random_spd(3, rng);
    CHECK(trust_region_lr(v, f, t) == doctest::Approx(trust_region_lr(v.dot(f.matrix() * v), t)));
    t.c0 = 0.0;
    CHECK_THROWS(t.validate());
}

TEST_CASE("noise precision gradient vanishes at the conjugate optimum")
{
    const GammaPosterior prior{6.0, 6.0};
    const std::size_t n = 50, b = 10, d = 1;
    const double residualSq = 3.7;
    const GammaPosterior optimum{prior.alpha + 0.5 * n * d, prior.beta + 0.5 * n * residualSq / b};
    const GammaLogGradient g = gamma_tau_gradient(optimum, prior, residualSq, b, d, n);
    CHECK(std::abs(g.dLogAlpha) < 1e-10);
    CHECK(std::abs(g.dLogBeta) < 1e-10);

    const GammaLogGradient off = gamma_tau_gradient({optimum.alpha, optimum.beta * 2.0}, prior, residualSq, b, d, n);
    CHECK(off.dLogBeta < 0.0);
}

TEST_CASE("noise precision updates stay positive")
{
    const GammaPosterior prior{6.0, 6.0};
    GammaPosterior q{6.0, 6.0};
    for (double r : {0.0, 1e-8, 1.0, 1e6}) {
        const GammaPosterior next = gamma_tau_update(q, prior, r, 10, 1, 100, 0.5);
        CHECK(next.alpha > 0.0);
        CHECK(next.beta > 0.0);
    }
    GammaAdamState state;
    for (int i = 0; i < 200; ++i) {
        const GammaPosterior next = gamma_tau_adam_update(q, prior, i % 2 ? 1e9 : 0.0, 10, 1, 100, 0.01, state);
        CHECK(std::abs(std::log(next.beta / q.beta)) < 0.0105);
        q = next;
        CHECK(q.alpha > 0.0);
        CHECK(q.beta > 0.0);
    }
}

TEST_CASE("noise precision ascent approaches the conjugate answer")
{
    const GammaPosterior prior{6.0, 6.0};
    const std::size_t n = 40, b = 10;
    const double residualSq = 2.0;
    GammaPosterior q = prior;
    GammaAdamState state;
    for (int i = 0; i < 20000; ++i) q = gamma_tau_adam_update(q, prior, residualSq, b, 1, n, 0.01, state);
    const double expected = (prior.alpha + 0.5 * n) / (prior.beta + 0.5 * n * residualSq / b);
    CHECK(q.mean() == doctest::Approx(expected).epsilon(0.02));
}

TEST_CASE("training is reproducible and logs steps")
{
    Rng data(16);
    const Regression r = make_regression(40, 2, 4.0, data);
    MlpArchitecture arch;
    arch.layerSizes = {2, 5, 1};
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.logEvery = 4;
    for (Method m : {Method::ffg, Method::mvg, Method::full}) {
        std::vector<StepRecord> records;
        Rng a(17), b(17);
        const TrainResult ra = train_posterior(m, arch, make_hyper(1.0, 1, 1.0), cfg, r.x, r.y, NoiseModel{}, a,
                                               [&](const StepRecord& rec) { records.push_back(rec); });
        const TrainResult rb = train_posterior(m, arch, make_hyper(1.0, 1, 1.0), cfg, r.x, r.y, NoiseModel{}, b);
        CHECK(ra.steps == 20);
        CHECK(records.size() == 5);
        CHECK(records.front().step == 4);
        CHECK(hyper_of(ra.posterior).N == 40);
        CHECK(ra.noise.q.has_value());
        CHECK(flatten(mean_weights(ra.posterior)) == flatten(mean_weights(rb.posterior)));
        CHECK(ra.noise.q->alpha == rb.noise.q->alpha);
    }
    CHECK(parse_method("nng-mvg") == Method::mvg);
    CHECK(to_string(Method::full) == "nng-full");
    CHECK_THROWS(parse_method("bbb"));
}
