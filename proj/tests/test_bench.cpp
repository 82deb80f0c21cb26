#include "test_util.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

#include "nng/bench.hpp"
#include "nng/oracle.hpp"

using namespace nng;
using namespace nng::test;

namespace {

Dataset parse(const std::string& text)
{
    std::istringstream in(text);
    return parse_csv(in, "inline");
}

Dataset linear_dataset(std::size_t rows, double slope, double offset, double noiseSd, Rng& rng)
{
    Dataset d;
    d.features.resize(static_cast<Eigen::Index>(rows), 1);
    d.targets.resize(static_cast<Eigen::Index>(rows), 1);
    for (Eigen::Index i = 0; i < d.features.rows(); ++i) {
        const double x = rng.normal();
        d.features(i, 0) = x;
        d.targets(i, 0) = slope * x + offset + noiseSd * rng.normal();
    }
    return d;
}

MlpArchitecture linear_arch(std::size_t in)
{
    MlpArchitecture a;
    a.layerSizes = {in, 1};
    a.activation = Activation::relu;
    return a;
}

/// Posterior that predicts exactly zero: a linear model with zero mean and
/// vanishing variance.
FfgPosterior zero_predictor()
{
    Hyper h;
    h.N = 1;
    Rng rng(0);
    FfgPosterior p = FfgPosterior::create(linear_arch(1), h, rng);
    p.mu.setZero();
    p.fbar.setConstant(1e300);
    return p;
}

Normalizer identity_normalizer(Eigen::Index features)
{
    Normalizer n;
    n.featureMean = Vector::Zero(features);
    n.featureStd = Vector::Ones(features);
    n.targetMean = Vector::Zero(1);
    n.targetStd = Vector::Ones(1);
    return n;
}

ModelConfig small_model(Method m, std::size_t epochs)
{
    ModelConfig mc;
    mc.method = m;
    mc.hidden = {10};
    mc.hyper.lambda = 1.0;
    mc.hyper.eta = 1.0;
    mc.train.epochs = epochs;
    mc.train.batchSize = 10;
    return mc;
}

}  // namespace

TEST_CASE("CSV parsing")
{
    const Dataset a = parse("1,2\n3,4\n");
    REQUIRE(a.size() == 2);
    CHECK(a.features.cols() == 1);
    CHECK(a.features(0, 0) == 1.0);
    CHECK(a.features(1, 0) == 3.0);
    CHECK(a.targets(0, 0) == 2.0);
    CHECK(a.targets(1, 0) == 4.0);

    const Dataset b = parse("x,y\n1,2\n\n3,4\n");
    REQUIRE(b.size() == 2);
    CHECK(b.header == std::vector<std::string>{"x", "y"});
    CHECK(b.targets(1, 0) == 4.0);

    try {
        parse("1,2\n3,abc\n5,6\n");
        FAIL("malformed row accepted");
    } catch (const CsvError& e) {
        CHECK(std::string(e.what()).find("2") != std::string::npos);
    }
    CHECK_THROWS_AS(parse("1,2\n3\n"), CsvError);
    CHECK_THROWS_AS(load_csv("/nonexistent/data.csv"), std::exception);
}

TEST_CASE("normalizer round trip and identity on standardized data")
{
    Rng rng(1);
    Dataset d;
    d.features = random_matrix(50, 3, rng) * 4.0;
    d.features.col(1).array() += 10.0;
    d.targets = random_matrix(50, 1, rng) * 7.0;
    d.targets.array() -= 3.0;
    std::vector<std::size_t> rows(50);
    std::iota(rows.begin(), rows.end(), std::size_t{0});

    const Normalizer n = Normalizer::fit(d, rows);
    CHECK(rel_diff(n.denormalize_targets(n.targets(d.targets)), d.targets) < 1e-12);

    Dataset standardized;
    standardized.features = n.features(d.features);
    standardized.targets = n.targets(d.targets);
    const Normalizer again = Normalizer::fit(standardized, rows);
    CHECK(rel_diff(again.features(standardized.features), standardized.features) < 1e-12);
    CHECK(rel_diff(again.targets(standardized.targets), standardized.targets) < 1e-12);
    CHECK(again.variance_scale() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(n.variance_scale() == doctest::Approx(n.targetStd(0) * n.targetStd(0)));

    const Normalizer back = Normalizer::from_scaling(n.scaling());
    CHECK(back.featureMean == n.featureMean);
    CHECK(back.targetStd == n.targetStd);

    Dataset constant;
    constant.features = Matrix::Constant(5, 1, 2.0);
    constant.targets = Matrix::Constant(5, 1, 1.0);
    const Normalizer c = Normalizer::fit(constant, {0, 1, 2, 3, 4});
    CHECK(c.featureStd(0) == 1.0);
}

TEST_CASE("learned noise precision converts to raw units")
{
    Rng rng(2);
    const Dataset d = linear_dataset(4000, 20.0, 100.0, 5.0, rng);
    std::vector<std::size_t> rows(d.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    const Normalizer n = Normalizer::fit(d, rows);

    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.batchSize = 100;
    cfg.alphaTilde = 0.05;
    cfg.noiseLr = 0.05;
    Hyper h;
    NoiseModel noise;
    const TrainResult r = train_posterior(Method::ffg, linear_arch(1), h, cfg, n.features(d.features),
                                          n.targets(d.targets), noise, rng);
    const double rawVariance = n.variance_scale() / r.noise.precision();
    CHECK(rawVariance == doctest::Approx(25.0).epsilon(0.1));
}

TEST_CASE("regression metric examples")
{
    const Matrix y = (Matrix(3, 1) << 1.0, -2.0, 0.5).finished();
    CHECK(rmse(y, y) == 0.0);
    CHECK(rmse(Matrix::Zero(2, 1), (Matrix(2, 1) << 3.0, 4.0).finished()) == doctest::Approx(std::sqrt(12.5)));

    const Posterior p = zero_predictor();
    NoiseModel unit;
    unit.tau = 1.0;
    Rng rng(3);
    const double ll = test_log_likelihood(p, unit, identity_normalizer(1), Matrix::Ones(4, 1), Matrix::Zero(4, 1), 10,
                                          rng);
    CHECK(ll == doctest::Approx(-0.5 * std::log(2.0 * M_PI)).epsilon(1e-12));
}

TEST_CASE("mixture predictive density is at least the average log density")
{
    Rng rng(4);
    Hyper h;
    h.N = 10;
    const FfgPosterior ffg = FfgPosterior::create(linear_arch(2), h, rng);
    const Posterior p = ffg;
    NoiseModel noise;
    noise.tau = 3.0;
    const Matrix x = random_matrix(20, 2, rng);
    const Matrix y = random_matrix(20, 1, rng);
    const Normalizer norm = identity_normalizer(2);

    Rng a(5), b(5);
    const double mixture = test_log_likelihood(p, noise, norm, x, y, 200, a);
    const auto preds = sample_predictions(p, x, 200, b);
    double meanOfLogs = 0.0;
    for (const Matrix& yhat : preds) {
        const Matrix r = y - yhat;
        meanOfLogs += (0.5 * std::log(noise.tau / (2.0 * M_PI)) - 0.5 * noise.tau * r.array().square()).mean();
    }
    meanOfLogs /= static_cast<double>(preds.size());
    CHECK(mixture >= meanOfLogs);
}

TEST_CASE("predictive variance")
{
    Rng rng(6);
    const Posterior zero = zero_predictor();
    CHECK(predictive_variance(zero, random_matrix(5, 1, rng), 50, rng).cwiseAbs().maxCoeff() < 1e-100);

    // Linear model at the exact conjugate posterior: the variance of x^T w is x^T Sigma x.
    const Matrix x = random_matrix(40, 3, rng);
    const Vector y = x * Vector::Constant(3, 0.5) + random_vector(40, rng);
    const double eta = 1.0, tau = 2.0;
    const BlrPosterior exact = blr_posterior(x, y, eta, tau);
    Hyper h;
    h.lambda = 1.0;
    h.N = 40;
    h.eta = eta;
    MlpArchitecture arch = linear_arch(3);
    arch.bias = false;
    FullPosterior full = FullPosterior::create(arch, h, rng);
    full.mu = exact.mean;
    full.fbar = SpdMatrix(Matrix(tau * x.transpose() * x / 40.0));
    const Matrix probe = random_matrix(6, 3, rng);
    const std::size_t samples = 10000;
    Rng s(7);
    const Vector v = predictive_variance(Posterior(full), probe, samples, s);
    for (Eigen::Index i = 0; i < probe.rows(); ++i) {
        const double truth = probe.row(i) * exact.covariance.matrix() * probe.row(i).transpose();
        CHECK(std::abs(v(i) - truth) < 4.0 * truth * std::sqrt(2.0 / static_cast<double>(samples)));
    }
    Rng s2(7);
    CHECK(predictive_variance(Posterior(full), probe, samples, s2) == v);
    Rng s3(7);
    CHECK(rel_diff(predictive_variance(Posterior(full), probe, samples, s3, 4.0), Vector(4.0 * v)) < 1e-14);
}

TEST_CASE("pearson correlation")
{
    Rng rng(8);
    const Vector x = random_vector(30, rng);
    CHECK(pearson(x, Vector(2.0 * x.array() + 1.0)) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(pearson(x, Vector(-x)) == doctest::Approx(-1.0).epsilon(1e-12));

    const Vector y = random_vector(30, rng);
    const double n = 30.0;
    const double sxy = x.dot(y) - x.sum() * y.sum() / n;
    const double sxx = x.squaredNorm() - x.sum() * x.sum() / n;
    const double syy = y.squaredNorm() - y.sum() * y.sum() / n;
    CHECK(pearson(x, y) == doctest::Approx(sxy / std::sqrt(sxx * syy)).epsilon(1e-10));

    CHECK_THROWS(pearson(x, Vector::Constant(30, 2.0)));
    CHECK_THROWS(pearson(x, Vector::Zero(5)));
}

TEST_CASE("expected calibration error")
{
    CHECK(ece((Vector(2) << 1.0, 1.0).finished(), {true, true}) == 0.0);
    CHECK(ece((Vector(2) << 0.5, 0.5).finished(), {true, false}) == doctest::Approx(0.0));
    CHECK(ece((Vector(2) << 1.0, 1.0).finished(), {true, false}) == doctest::Approx(0.5));

    Rng rng(9);
    Vector conf(100);
    std::vector<bool> correct(100);
    for (Eigen::Index i = 0; i < 100; ++i) {
        conf(i) = rng.uniform();
        correct[static_cast<std::size_t>(i)] = rng.uniform() < 0.6;
    }
    const double e = ece(conf, correct);
    CHECK(e >= 0.0);
    CHECK(e <= 1.0);

    std::vector<std::size_t> perm(100);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    Vector conf2(100);
    std::vector<bool> correct2(100);
    for (std::size_t i = 0; i < 100; ++i) {
        conf2(static_cast<Eigen::Index>(i)) = conf(static_cast<Eigen::Index>(perm[i]));
        correct2[i] = correct[perm[i]];
    }
    CHECK(ece(conf2, correct2) == doctest::Approx(e).epsilon(1e-12));
    CHECK_THROWS(ece((Vector(1) << 1.5).finished(), {true}));
}

TEST_CASE("train/test splits")
{
    SplitSpec spec;
    spec.trainFraction = 0.8;
    spec.repeats = 5;
    spec.seed = 11;
    const auto splits = make_splits(53, spec);
    REQUIRE(splits.size() == 5);
    for (const Split& s : splits) {
        std::set<std::size_t> all(s.train.begin(), s.train.end());
        CHECK(all.size() == s.train.size());
        for (std::size_t t : s.test) CHECK(all.insert(t).second);
        CHECK(all.size() == 53);
        CHECK(*all.rbegin() == 52);
        CHECK_FALSE(s.test.empty());
    }
    CHECK(splits[0].train != splits[1].train);

    const auto again = make_splits(53, spec);
    for (std::size_t i = 0; i < 5; ++i) CHECK(again[i].train == splits[i].train);

    spec.repeats = 2;
    const auto fewer = make_splits(53, spec);
    CHECK(fewer[1].train == splits[1].train);
    CHECK(fewer[1].test == splits[1].test);

    spec.trainFraction = 1.0;
    CHECK_THROWS(spec.validate());
}

TEST_CASE("summaries and medians")
{
    const Summary one = summarize({3.0});
    CHECK(one.mean == 3.0);
    CHECK_FALSE(one.stdError.has_value());

    const Summary s = summarize({1.0, 2.0, 3.0, 4.0});
    CHECK(s.mean == 2.5);
    REQUIRE(s.stdError.has_value());
    CHECK(*s.stdError == doctest::Approx(std::sqrt(5.0 / 3.0 / 4.0)));

    CHECK(median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
    CHECK_THROWS(median({}));
}

TEST_CASE("benchmark metrics follow affine changes of the raw data")
{
    Rng rng(12);
    Dataset d;
    d.features = random_matrix(60, 2, rng);
    d.targets = (d.features.col(0).array().sin() + 0.3 * d.features.col(1).array()).matrix();
    d.targets += 0.1 * random_matrix(60, 1, rng);

    const double scale = 8.0;
    Dataset shifted = d;
    shifted.features.col(0) = 3.0 * d.features.col(0).array() + 2.0;
    shifted.features.col(1) = 0.5 * d.features.col(1).array() - 7.0;
    shifted.targets = (scale * d.targets.array() + 40.0).matrix();

    RegressionBenchmarkConfig cfg;
    cfg.model = small_model(Method::mvg, 3);
    cfg.split.repeats = 2;
    cfg.split.seed = 4;
    cfg.evalSamples = 50;
    cfg.seed = 13;
    const auto a = run_regression_benchmark(d, cfg);
    const auto b = run_regression_benchmark(shifted, cfg);
    REQUIRE(a.splits.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(b.splits[i].metrics.rmse == doctest::Approx(scale * a.splits[i].metrics.rmse).epsilon(1e-6));
        CHECK(b.splits[i].metrics.testLogLik ==
              doctest::Approx(a.splits[i].metrics.testLogLik - std::log(scale)).epsilon(1e-6));
    }
}

TEST_CASE("benchmark result does not depend on the worker count")
{
    Rng rng(14);
    Dataset d;
    d.features = random_matrix(40, 2, rng);
    d.targets = d.features.col(0) + 0.1 * random_matrix(40, 1, rng);
    RegressionBenchmarkConfig cfg;
    cfg.model = small_model(Method::ffg, 2);
    cfg.split.repeats = 3;
    cfg.evalSamples = 20;
    const auto one = run_regression_benchmark(d, cfg);
    cfg.workers = 3;
    const auto three = run_regression_benchmark(d, cfg);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(one.splits[i].metrics.rmse == three.splits[i].metrics.rmse);
        CHECK(one.splits[i].metrics.testLogLik == three.splits[i].metrics.testLogLik);
    }
}

TEST_CASE("active learning bookkeeping")
{
    Rng rng(15);
    Dataset d;
    d.features = random_matrix(60, 1, rng);
    d.targets = d.features.array().sin().matrix();

    ActiveLearningConfig cfg;
    cfg.model = small_model(Method::ffg, 5);
    cfg.acquisition = Acquisition::random;
    cfg.initialTrain = 5;
    cfg.testSize = 10;
    cfg.rounds = 6;
    cfg.evalSamples = 20;
    cfg.seed = 7;
    const ActiveLearningResult a = active_learning_run(d, cfg);
    const ActiveLearningResult b = active_learning_run(d, cfg);
    CHECK(a.rmsePerRound == b.rmsePerRound);
    CHECK(a.acquired == b.acquired);
    CHECK(a.rmsePerRound.size() == 7);

    std::set<std::size_t> labeled(a.initialTrain.begin(), a.initialTrain.end());
    const std::set<std::size_t> test(a.test.begin(), a.test.end());
    for (std::size_t r : a.acquired) {
        CHECK(labeled.insert(r).second);
        CHECK(test.count(r) == 0);
    }

    cfg.acquisition = Acquisition::variance;
    const ActiveLearningResult v = active_learning_run(d, cfg);
    std::set<std::size_t> seen(v.initialTrain.begin(), v.initialTrain.end());
    for (std::size_t r : v.acquired) CHECK(seen.insert(r).second);

    cfg.rounds = 0;
    const ActiveLearningResult none = active_learning_run(d, cfg);
    CHECK(none.rmsePerRound.size() == 1);
    CHECK(none.acquired.empty());

    cfg.rounds = 100;
    CHECK_THROWS(active_learning_run(d, cfg));
}

TEST_CASE("variance acquisition prefers the uncovered region")
{
    Dataset d;
    const Eigen::Index covered = 40, far = 5, tests = 10;
    d.features.resize(covered + far + tests, 1);
    Rng data(16);
    for (Eigen::Index i = 0; i < covered; ++i) d.features(i, 0) = -1.0 + 2.0 * data.uniform();
    for (Eigen::Index i = 0; i < far; ++i) d.features(covered + i, 0) = 3.0 + data.uniform();
    for (Eigen::Index i = 0; i < tests; ++i) d.features(covered + far + i, 0) = -1.0 + 2.0 * data.uniform();
    d.targets = d.features.array().sin().matrix();

    std::vector<std::size_t> train, pool, test;
    for (std::size_t i = 0; i < 20; ++i) train.push_back(i);
    for (std::size_t i = 20; i < static_cast<std::size_t>(covered + far); ++i) pool.push_back(i);
    for (std::size_t i = static_cast<std::size_t>(covered + far); i < static_cast<std::size_t>(d.features.rows()); ++i) {
        test.push_back(i);
    }

    ActiveLearningConfig cfg;
    cfg.model = small_model(Method::mvg, 100);
    cfg.rounds = 1;
    cfg.evalSamples = 100;
    int hits = 0;
    const int seeds = 20;
    for (int s = 0; s < seeds; ++s) {
        cfg.seed = static_cast<std::uint64_t>(s);
        const ActiveLearningResult r = active_learning_run(d, cfg, train, test, pool);
        REQUIRE(r.acquired.size() == 1);
        if (r.acquired[0] >= static_cast<std::size_t>(covered)) ++hits;
    }
    CHECK(static_cast<double>(hits) / seeds > 0.8);
}

TEST_CASE("network log posterior gradient")
{
    Rng rng(17);
    MlpArchitecture arch;
    arch.layerSizes = {2, 4, 1};
    arch.activation = Activation::tanh;
    const Matrix x = random_matrix(8, 2, rng);
    const Matrix y = random_matrix(8, 1, rng);
    const GammaPosterior prior{6.0, 6.0};
    Vector params(static_cast<Eigen::Index>(arch.num_weights()) + 1);
    params.head(params.size() - 1) = flatten(random_weights(arch, rng));
    params(params.size() - 1) = 0.3;
    Vector grad;
    bnn_log_posterior(arch, x, y, 1.5, prior, params, grad);
    Vector scratch;
    const Vector fd = finite_diff(
        [&](const Vector& p) { return bnn_log_posterior(arch, x, y, 1.5, prior, p, scratch); }, params, 1e-6);
    CHECK(rel_diff(grad, fd) < 1e-6);
}

TEST_CASE("independent HMC runs agree on predictive variance")
{
    Rng rng(18);
    Dataset d;
    d.features.resize(20, 1);
    for (Eigen::Index i = 0; i < 20; ++i) d.features(i, 0) = -4.0 + 8.0 * rng.uniform();
    d.targets = (d.features.array().sin() + 0.1 * d.features.array().square()).matrix();
    std::vector<std::size_t> rows(20);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    const Normalizer norm = Normalizer::fit(d, rows);
    const Matrix x = norm.features(d.features), y = norm.targets(d.targets);
    Matrix probe(60, 1);
    for (Eigen::Index i = 0; i < 60; ++i) probe(i, 0) = -3.0 + 0.1 * static_cast<double>(i);

    MlpArchitecture arch;
    arch.layerSizes = {1, 10, 1};
    arch.activation = Activation::tanh;
    const GammaPosterior prior{6.0, 6.0};
    Vector v[2];
    for (int run = 0; run < 2; ++run) {
        HmcConfig cfg;
        cfg.stepSize = 0.01;
        cfg.leapfrogSteps = 50;
        cfg.numSamples = 1500;
        cfg.burnIn = 500;
        cfg.numChains = 2;
        cfg.seed = static_cast<std::uint64_t>(100 + run);
        Vector init(static_cast<Eigen::Index>(arch.num_weights()) + 1);
        init.head(init.size() - 1) = flatten(random_weights(arch, rng));
        init(init.size() - 1) = 0.0;
        const HmcResult r = hmc_sample(
            [&](const Vector& p, Vector& g) { return bnn_log_posterior(arch, x, y, 1.0, prior, p, g); }, init, cfg);
        std::vector<WeightSet> ws;
        for (const Vector& s : r.pooled()) ws.push_back(unflatten(arch, s.head(s.size() - 1)));
        v[run] = predictive_variance(arch, ws, probe, norm.variance_scale());
    }
    CHECK(pearson(v[0], v[1]) > 0.9);
}

TEST_CASE("variance correlation run shape")
{
    Rng rng(19);
    Dataset d;
    d.features.resize(80, 1);
    for (Eigen::Index i = 0; i < 80; ++i) d.features(i, 0) = -4.0 + 8.0 * rng.uniform();
    d.targets = d.features.array().sin().matrix();
    VarianceCorrelationConfig cfg;
    cfg.model = small_model(Method::mvg, 20);
    cfg.trials = 2;
    cfg.trainSize = 10;
    cfg.testSize = 30;
    cfg.evalSamples = 50;
    cfg.hmc.numSamples = 100;
    cfg.hmc.burnIn = 50;
    cfg.hmc.numChains = 1;
    cfg.hmc.leapfrogSteps = 10;
    cfg.hmc.stepSize = 0.01;
    const VarianceCorrelationResult r = variance_correlation_run(d, cfg);
    REQUIRE(r.trials.size() == 2);
    REQUIRE(r.perMethod.size() == 2);
    REQUIRE(r.medians.size() == 2);
    for (const auto& t : r.trials) {
        REQUIRE(t.pearson.size() == 2);
        for (double c : t.pearson) {
            CHECK(c >= -1.0);
            CHECK(c <= 1.0);
        }
    }
    CHECK(r.perMethod[0].stdError.has_value());
}
