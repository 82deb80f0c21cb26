#include "nng/bench.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <future>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace nng {

namespace {

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_fields(const std::string& line)
{
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(trim(field));
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

bool parse_number(const std::string& s, double& value)
{
    if (s.empty()) return false;
    const char* first = s.data();
    if (*first == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), value);
    return ec == std::errc() && ptr == s.data() + s.size();
}

double log_sum_exp(const Vector& v)
{
    const double m = v.maxCoeff();
    return m + std::log((v.array() - m).exp().sum());
}

}  // namespace

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const
{
    Dataset d;
    d.header = header;
    d.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
    d.targets.resize(static_cast<Eigen::Index>(rows.size()), targets.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        d.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(rows[i]));
        d.targets.row(static_cast<Eigen::Index>(i)) = targets.row(static_cast<Eigen::Index>(rows[i]));
    }
    return d;
}

Dataset parse_csv(std::istream& in, const std::string& sourceName)
{
    Dataset d;
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t lineNo = 0;
    std::size_t width = 0;
    bool sawContent = false;
    while (std::getline(in, line)) {
        ++lineNo;
        if (trim(line).empty()) continue;
        const auto fields = split_fields(line);
        std::vector<double> values(fields.size());
        bool numeric = true;
        for (std::size_t i = 0; i < fields.size() && numeric; ++i) numeric = parse_number(fields[i], values[i]);
        if (!sawContent) {
            sawContent = true;
            width = fields.size();
            if (width < 2) {
                throw CsvError(sourceName + ":" + std::to_string(lineNo) +
                               ": need at least one feature column and one target column");
            }
            if (!numeric) {
                d.header = fields;
                continue;
            }
        }
        if (fields.size() != width) {
            throw CsvError(sourceName + ":" + std::to_string(lineNo) + ": expected " + std::to_string(width) +
                           " fields, found " + std::to_string(fields.size()));
        }
        if (!numeric) {
            throw CsvError(sourceName + ":" + std::to_string(lineNo) + ": non-numeric field in row");
        }
        for (double v : values) {
            if (!std::isfinite(v)) {
                throw CsvError(sourceName + ":" + std::to_string(lineNo) + ": nonfinite value");
            }
        }
        rows.push_back(std::move(values));
    }
    if (rows.empty()) {
        throw CsvError(sourceName + ": no data rows");
    }
    const auto n = static_cast<Eigen::Index>(rows.size());
    const auto p = static_cast<Eigen::Index>(width - 1);
    d.features.resize(n, p);
    d.targets.resize(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < p; ++j) d.features(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        d.targets(i, 0) = rows[static_cast<std::size_t>(i)].back();
    }
    return d;
}

Dataset load_csv(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw CsvError("cannot open dataset: " + path);
    }
    return parse_csv(in, path);
}

namespace {

void column_stats(const Matrix& m, const std::vector<std::size_t>& rows, Vector& mean, Vector& sd)
{
    const auto cols = m.cols();
    mean = Vector::Zero(cols);
    sd = Vector::Ones(cols);
    const double n = static_cast<double>(rows.size());
    for (std::size_t r : rows) mean += m.row(static_cast<Eigen::Index>(r)).transpose();
    mean /= n;
    Vector var = Vector::Zero(cols);
    for (std::size_t r : rows) {
        const Vector d = m.row(static_cast<Eigen::Index>(r)).transpose() - mean;
        var += d.cwiseProduct(d);
    }
    var /= n;
    for (Eigen::Index j = 0; j < cols; ++j) {
        sd(j) = var(j) > 1e-24 ? std::sqrt(var(j)) : 1.0;
    }
}

}  // namespace

Normalizer Normalizer::fit(const Dataset& data, const std::vector<std::size_t>& trainRows)
{
    if (trainRows.empty()) throw std::invalid_argument("Normalizer::fit: no training rows");
    Normalizer n;
    column_stats(data.features, trainRows, n.featureMean, n.featureStd);
    column_stats(data.targets, trainRows, n.targetMean, n.targetStd);
    return n;
}

Normalizer Normalizer::fit_features_only(const Dataset& data, const std::vector<std::size_t>& trainRows)
{
    if (trainRows.empty()) throw std::invalid_argument("Normalizer::fit: no training rows");
    Normalizer n;
    column_stats(data.features, trainRows, n.featureMean, n.featureStd);
    n.targetMean = Vector::Zero(data.targets.cols());
    n.targetStd = Vector::Ones(data.targets.cols());
    return n;
}

Matrix Normalizer::features(const Matrix& raw) const
{
    return ((raw.rowwise() - featureMean.transpose()).array().rowwise() / featureStd.transpose().array()).matrix();
}

Matrix Normalizer::targets(const Matrix& raw) const
{
    return ((raw.rowwise() - targetMean.transpose()).array().rowwise() / targetStd.transpose().array()).matrix();
}

Matrix Normalizer::denormalize_targets(const Matrix& normalized) const
{
    return ((normalized.array().rowwise() * targetStd.transpose().array()).matrix().rowwise() +
            targetMean.transpose());
}

Scaling Normalizer::scaling() const { return Scaling{featureMean, featureStd, targetMean, targetStd}; }

Normalizer Normalizer::from_scaling(const Scaling& s)
{
    Normalizer n;
    n.featureMean = s.featureMean;
    n.featureStd = s.featureStd;
    n.targetMean = s.targetMean;
    n.targetStd = s.targetStd;
    return n;
}

double Normalizer::variance_scale() const { return targetStd(0) * targetStd(0); }

void SplitSpec::validate() const
{
    if (!(trainFraction > 0.0 && trainFraction < 1.0)) {
        throw std::invalid_argument("train fraction must lie strictly between 0 and 1");
    }
    if (repeats < 1) throw std::invalid_argument("split repeats must be at least 1");
}

std::vector<Split> make_splits(std::size_t rows, const SplitSpec& spec)
{
    spec.validate();
    if (rows < 2) throw std::invalid_argument("make_splits: need at least 2 rows");
    const auto trainCount = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::round(spec.trainFraction * static_cast<double>(rows))), 1, rows - 1);
    Rng root(spec.seed);
    std::vector<Split> splits;
    for (std::size_t r = 0; r < spec.repeats; ++r) {
        Rng rng = root.split();
        std::vector<std::size_t> perm(rows);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), rng.engine());
        Split s;
        s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(trainCount));
        s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(trainCount), perm.end());
        std::sort(s.train.begin(), s.train.end());
        std::sort(s.test.begin(), s.test.end());
        splits.push_back(std::move(s));
    }
    return splits;
}

Summary summarize(const std::vector<double>& values)
{
    if (values.empty()) throw std::invalid_argument("summarize: no values");
    Summary s;
    const double n = static_cast<double>(values.size());
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    if (values.size() >= 2) {
        double ss = 0.0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.stdError = std::sqrt(ss / (n - 1.0) / n);
    }
    return s;
}

double median(std::vector<double> values)
{
    if (values.empty()) throw std::invalid_argument("median: no values");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double rmse(const Matrix& predictions, const Matrix& targets)
{
    if (predictions.rows() == 0) throw std::invalid_argument("rmse: empty input");
    if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols()) {
        throw DimensionMismatch("rmse: predictions and targets differ in shape");
    }
    return std::sqrt((predictions - targets).squaredNorm() / static_cast<double>(predictions.size()));
}

std::vector<Matrix> sample_predictions(const Posterior& p, const Matrix& inputs, std::size_t numSamples, Rng& rng)
{
    const MlpArchitecture& arch = architecture(p);
    std::vector<Matrix> out;
    out.reserve(numSamples);
    for (std::size_t s = 0; s < numSamples; ++s) {
        out.push_back(predict(arch, sample_weights(p, rng), inputs));
    }
    return out;
}

RegressionMetrics evaluate_regression(const Posterior& p, const NoiseModel& noise, const Normalizer& norm,
                                      const Matrix& inputs, const Matrix& rawTargets, std::size_t numSamples,
                                      Rng& rng)
{
    if (inputs.rows() == 0) throw std::invalid_argument("evaluate_regression: empty test set");
    if (numSamples < 1) throw std::invalid_argument("evaluate_regression: need at least one weight sample");
    if (architecture(p).likelihood != Likelihood::gaussian) {
        throw std::invalid_argument("evaluate_regression: Gaussian likelihood required");
    }
    const auto preds = sample_predictions(p, inputs, numSamples, rng);
    const auto n = inputs.rows();
    const auto dims = rawTargets.cols();
    Matrix meanPred = Matrix::Zero(n, dims);
    Matrix logDens(n, static_cast<Eigen::Index>(numSamples));
    const double tau = noise.precision();
    for (std::size_t s = 0; s < numSamples; ++s) {
        const Matrix raw = norm.denormalize_targets(preds[s]);
        meanPred += raw;
        for (Eigen::Index i = 0; i < n; ++i) {
            double ll = 0.0;
            for (Eigen::Index j = 0; j < dims; ++j) {
                const double sd = norm.targetStd(j);
                const double rawTau = tau / (sd * sd);
                const double r = rawTargets(i, j) - raw(i, j);
                ll += 0.5 * (std::log(rawTau) - rawTau * r * r - std::log(2.0 * std::numbers::pi));
            }
            logDens(i, static_cast<Eigen::Index>(s)) = ll;
        }
    }
    meanPred /= static_cast<double>(numSamples);
    RegressionMetrics m;
    m.rmse = rmse(meanPred, rawTargets);
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        total += log_sum_exp(logDens.row(i).transpose()) - std::log(static_cast<double>(numSamples));
    }
    m.testLogLik = total / static_cast<double>(n);
    return m;
}

double test_log_likelihood(const Posterior& p, const NoiseModel& noise, const Normalizer& norm,
                           const Matrix& inputs, const Matrix& rawTargets, std::size_t numSamples, Rng& rng)
{
    return evaluate_regression(p, noise, norm, inputs, rawTargets, numSamples, rng).testLogLik;
}

Vector predictive_variance(const MlpArchitecture& arch, const std::vector<WeightSet>& samples,
                           const Matrix& inputs, double varianceScale)
{
    if (samples.size() < 2) throw std::invalid_argument("predictive_variance: need at least 2 weight samples");
    const auto n = inputs.rows();
    Vector sum = Vector::Zero(n), sumSq = Vector::Zero(n);
    const Vector shift = predict(arch, samples.front(), inputs).col(0);
    for (const auto& w : samples) {
        const Vector y = predict(arch, w, inputs).col(0) - shift;
        sum += y;
        sumSq += y.cwiseProduct(y);
    }
    const double s = static_cast<double>(samples.size());
    const Vector mean = sum / s;
    return ((sumSq / s - mean.cwiseProduct(mean)) * (s / (s - 1.0)) * varianceScale).cwiseMax(0.0);
}

Vector predictive_variance(const Posterior& p, const Matrix& inputs, std::size_t numSamples, Rng& rng,
                           double varianceScale)
{
    if (numSamples < 2) throw std::invalid_argument("predictive_variance: need at least 2 weight samples");
    std::vector<WeightSet> samples;
    samples.reserve(numSamples);
    for (std::size_t s = 0; s < numSamples; ++s) samples.push_back(sample_weights(p, rng));
    return predictive_variance(architecture(p), samples, inputs, varianceScale);
}

double pearson(const Vector& x, const Vector& y)
{
    if (x.size() != y.size()) throw DimensionMismatch("pearson: inputs differ in length");
    if (x.size() < 2) throw std::invalid_argument("pearson: need at least 2 points");
    const Vector dx = x.array() - x.mean();
    const Vector dy = y.array() - y.mean();
    const double sx = dx.norm(), sy = dy.norm();
    if (!(sx > 0.0) || !(sy > 0.0)) throw std::invalid_argument("pearson: constant input");
    return std::clamp(dx.dot(dy) / (sx * sy), -1.0, 1.0);
}

double ece(const Vector& confidences, const std::vector<bool>& correct, std::size_t numBins)
{
    if (confidences.size() == 0) throw std::invalid_argument("ece: empty input");
    if (static_cast<std::size_t>(confidences.size()) != correct.size()) {
        throw DimensionMismatch("ece: confidences and outcomes differ in length");
    }
    if (numBins < 1) throw std::invalid_argument("ece: need at least one bin");
    std::vector<double> confSum(numBins, 0.0), accSum(numBins, 0.0);
    std::vector<std::size_t> count(numBins, 0);
    for (Eigen::Index i = 0; i < confidences.size(); ++i) {
        const double c = confidences(i);
        if (!(c >= 0.0 && c <= 1.0)) throw std::invalid_argument("ece: confidence outside [0, 1]");
        const auto bin = std::min(numBins - 1, static_cast<std::size_t>(c * static_cast<double>(numBins)));
        confSum[bin] += c;
        accSum[bin] += correct[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
        ++count[bin];
    }
    double total = 0.0;
    const double n = static_cast<double>(confidences.size());
    for (std::size_t b = 0; b < numBins; ++b) {
        if (count[b] == 0) continue;
        total += std::abs(accSum[b] - confSum[b]) / n;
    }
    return total;
}

MlpArchitecture ModelConfig::architecture(std::size_t inputs, std::size_t outputs) const
{
    MlpArchitecture arch;
    arch.layerSizes.push_back(inputs);
    arch.layerSizes.insert(arch.layerSizes.end(), hidden.begin(), hidden.end());
    arch.layerSizes.push_back(outputs);
    arch.activation = activation;
    arch.likelihood = Likelihood::gaussian;
    arch.validate();
    return arch;
}

namespace {

struct Trained {
    TrainResult result;
    Normalizer norm;
};

Trained train_on_rows(const Dataset& data, const std::vector<std::size_t>& rows, const ModelConfig& model, Rng& rng,
                      const StepLogger& logger = {})
{
    Trained t;
    t.norm = Normalizer::fit(data, rows);
    const Dataset train = data.subset(rows);
    const MlpArchitecture arch = model.architecture(static_cast<std::size_t>(data.features.cols()),
                                                    static_cast<std::size_t>(data.targets.cols()));
    NoiseModel noise;
    noise.prior = model.noisePrior;
    t.result = train_posterior(model.method, arch, model.hyper, model.train, t.norm.features(train.features),
                               t.norm.targets(train.targets), noise, rng, logger);
    return t;
}

template <class Fn>
auto run_indexed(std::size_t count, std::size_t workers, Fn fn) -> std::vector<decltype(fn(std::size_t{}))>
{
    using R = decltype(fn(std::size_t{}));
    std::vector<R> out(count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) out[i] = fn(i);
        return out;
    }
    std::size_t next = 0;
    while (next < count) {
        std::vector<std::future<R>> batch;
        const std::size_t end = std::min(count, next + workers);
        for (std::size_t i = next; i < end; ++i) batch.push_back(std::async(std::launch::async, fn, i));
        for (std::size_t i = next; i < end; ++i) out[i] = batch[i - next].get();
        next = end;
    }
    return out;
}

}  // namespace

RegressionBenchmarkResult run_regression_benchmark(const Dataset& data, const RegressionBenchmarkConfig& cfg)
{
    SplitSpec spec = cfg.split;
    const auto splits = make_splits(data.size(), spec);
    Rng root(cfg.seed);
    std::vector<Rng> seeds;
    for (std::size_t i = 0; i < splits.size(); ++i) seeds.push_back(root.split());

    RegressionBenchmarkResult result;
    result.splits = run_indexed(splits.size(), cfg.workers, [&](std::size_t i) {
        const auto start = std::chrono::steady_clock::now();
        Rng rng = seeds[i];
        Rng evalRng = rng.split();
        StepLogger logger;
        if (cfg.stepLogger) {
            logger = [&cfg, i](const StepRecord& r) { cfg.stepLogger(i, r); };
        }
        Trained t = train_on_rows(data, splits[i].train, cfg.model, rng, logger);
        const Dataset test = data.subset(splits[i].test);
        SplitRecord rec;
        rec.index = i;
        rec.seed = seeds[i].seed();
        rec.trainSize = splits[i].train.size();
        rec.testSize = splits[i].test.size();
        rec.metrics = evaluate_regression(t.result.posterior, t.result.noise, t.norm, t.norm.features(test.features),
                                          test.targets, cfg.evalSamples, evalRng);
        rec.noise = t.result.noise.q.value_or(GammaPosterior{t.result.noise.tau, 1.0});
        rec.skippedSteps = t.result.skippedSteps;
        rec.checkpoint = Checkpoint{t.result.posterior, t.result.noise, t.result.steps, seeds[i].seed(), t.norm.scaling()};
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        return rec;
    });

    std::vector<double> r, ll;
    for (const auto& s : result.splits) {
        r.push_back(s.metrics.rmse);
        ll.push_back(s.metrics.testLogLik);
    }
    result.rmse = summarize(r);
    result.testLogLik = summarize(ll);
    return result;
}

std::string to_string(Acquisition a) { return a == Acquisition::variance ? "variance" : "random"; }

Acquisition parse_acquisition(const std::string& s)
{
    if (s == "variance") return Acquisition::variance;
    if (s == "random") return Acquisition::random;
    throw std::invalid_argument("unknown acquisition '" + s + "' (expected variance or random)");
}

ActiveLearningResult active_learning_run(const Dataset& data, const ActiveLearningConfig& cfg)
{
    if (cfg.initialTrain < 2 || cfg.testSize < 1) {
        throw std::invalid_argument("active learning needs at least 2 initial training points and 1 test point");
    }
    if (data.size() < cfg.initialTrain + cfg.testSize + 1) {
        throw std::invalid_argument("active learning: dataset has " + std::to_string(data.size()) +
                                    " rows, fewer than train + test + 1");
    }
    Rng rng(cfg.seed);
    Rng splitRng = rng.split();
    std::vector<std::size_t> perm(data.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), splitRng.engine());
    const auto a = static_cast<std::ptrdiff_t>(cfg.initialTrain);
    const auto b = static_cast<std::ptrdiff_t>(cfg.initialTrain + cfg.testSize);
    return active_learning_run(data, cfg, {perm.begin(), perm.begin() + a}, {perm.begin() + a, perm.begin() + b},
                               {perm.begin() + b, perm.end()});
}

ActiveLearningResult active_learning_run(const Dataset& data, const ActiveLearningConfig& cfg,
                                         std::vector<std::size_t> train, std::vector<std::size_t> test,
                                         std::vector<std::size_t> pool)
{
    if (train.size() < 2 || test.empty()) {
        throw std::invalid_argument("active learning needs at least 2 training rows and 1 test row");
    }
    if (cfg.rounds > pool.size()) {
        throw std::invalid_argument("active learning: pool exhausted (" + std::to_string(pool.size()) +
                                    " rows for " + std::to_string(cfg.rounds) + " acquisitions)");
    }
    ActiveLearningResult res;
    res.initialTrain = train;
    res.test = test;
    Rng rng(splitmix64(cfg.seed ^ 0xa5a5a5a5ULL));
    const Dataset testSet = data.subset(test);
    for (std::size_t round = 0; round <= cfg.rounds; ++round) {
        Rng roundRng = rng.split();
        Rng evalRng = roundRng.split();
        Trained t = train_on_rows(data, train, cfg.model, roundRng);
        res.rmsePerRound.push_back(evaluate_regression(t.result.posterior, t.result.noise, t.norm,
                                                       t.norm.features(testSet.features), testSet.targets,
                                                       cfg.evalSamples, evalRng)
                                       .rmse);
        if (round == cfg.rounds) break;
        std::size_t pick = 0;
        if (cfg.acquisition == Acquisition::random) {
            pick = evalRng.index(pool.size());
        } else {
            const Dataset poolSet = data.subset(pool);
            const Vector var = predictive_variance(t.result.posterior, t.norm.features(poolSet.features),
                                                   std::max<std::size_t>(cfg.evalSamples, 2), evalRng,
                                                   t.norm.variance_scale());
            Eigen::Index best = 0;
            var.maxCoeff(&best);
            pick = static_cast<std::size_t>(best);
        }
        res.acquired.push_back(pool[pick]);
        train.push_back(pool[pick]);
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
    }
    return res;
}

double bnn_log_posterior(const MlpArchitecture& arch, const Matrix& inputs, const Matrix& targets, double eta,
                         const GammaPosterior& tauPrior, const Vector& params, Vector& grad)
{
    const auto nw = static_cast<Eigen::Index>(arch.num_weights());
    if (params.size() != nw + 1) throw DimensionMismatch("bnn_log_posterior: expected weights plus log tau");
    const WeightSet w = unflatten(arch, params.head(nw));
    const double logTau = params(nw);
    const double tau = std::exp(logTau);
    const BatchTrace trace = forward_batch(arch, w, inputs);
    const Matrix resid = targets - trace.output;
    const double n = static_cast<double>(resid.size());
    const double sq = resid.squaredNorm();
    const auto g = backward_batch(arch, w, trace, tau * resid);
    std::vector<Matrix> dw;
    for (std::size_t l = 0; l < g.size(); ++l) dw.push_back(trace.inputs[l].transpose() * g[l]);
    WeightSet gw;
    gw.layers = std::move(dw);
    const Vector flat = params.head(nw);
    grad.resize(nw + 1);
    grad.head(nw) = flatten(gw) - flat / eta;
    const double a0 = tauPrior.alpha, b0 = tauPrior.beta;
    grad(nw) = 0.5 * n - 0.5 * tau * sq + a0 - b0 * tau;
    return 0.5 * n * logTau - 0.5 * tau * sq - 0.5 * flat.squaredNorm() / eta + a0 * logTau - b0 * tau;
}

VarianceCorrelationResult variance_correlation_run(const Dataset& data, const VarianceCorrelationConfig& cfg)
{
    if (cfg.methods.empty()) throw std::invalid_argument("variance correlation: no methods requested");
    if (cfg.trials < 1) throw std::invalid_argument("variance correlation: trials must be at least 1");
    if (data.size() < cfg.trainSize + cfg.testSize) {
        throw std::invalid_argument("variance correlation: dataset smaller than train + test");
    }
    Rng root(cfg.seed);
    VarianceCorrelationResult res;
    std::vector<std::vector<double>> perMethod(cfg.methods.size());
    for (std::size_t t = 0; t < cfg.trials; ++t) {
        Rng trialRng = root.split();
        std::vector<std::size_t> perm(data.size());
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), trialRng.engine());
        const std::vector<std::size_t> trainRows(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(cfg.trainSize));
        const std::vector<std::size_t> testRows(perm.begin() + static_cast<std::ptrdiff_t>(cfg.trainSize),
                                                perm.begin() + static_cast<std::ptrdiff_t>(cfg.trainSize + cfg.testSize));
        const Normalizer norm = Normalizer::fit(data, trainRows);
        const Dataset train = data.subset(trainRows);
        const Dataset test = data.subset(testRows);
        const Matrix xTrain = norm.features(train.features);
        const Matrix yTrain = norm.targets(train.targets);
        const Matrix xTest = norm.features(test.features);
        const MlpArchitecture arch = cfg.model.architecture(static_cast<std::size_t>(data.features.cols()),
                                                            static_cast<std::size_t>(data.targets.cols()));

        HmcConfig hmc = cfg.hmc;
        hmc.seed = trialRng.split().seed();
        Rng initRng = trialRng.split();
        Vector init(static_cast<Eigen::Index>(arch.num_weights()) + 1);
        init.head(init.size() - 1) = flatten(random_weights(arch, initRng));
        init(init.size() - 1) = 0.0;
        const double eta = cfg.model.hyper.eta;
        const GammaPosterior prior = cfg.model.noisePrior;
        const HmcResult chains = hmc_sample(
            [&](const Vector& x, Vector& g) { return bnn_log_posterior(arch, xTrain, yTrain, eta, prior, x, g); },
            init, hmc);
        std::vector<WeightSet> hmcWeights;
        for (const auto& s : chains.pooled()) hmcWeights.push_back(unflatten(arch, s.head(s.size() - 1)));
        const Vector hmcVar = predictive_variance(arch, hmcWeights, xTest, norm.variance_scale());

        VarianceCorrelationTrial trial;
        trial.index = t;
        trial.hmcAcceptance = chains.min_acceptance();
        trial.hmcDiverged = trial.hmcAcceptance < cfg.minAcceptance;
        for (std::size_t m = 0; m < cfg.methods.size(); ++m) {
            Rng methodRng = trialRng.split();
            ModelConfig model = cfg.model;
            model.method = cfg.methods[m];
            NoiseModel noise;
            noise.prior = model.noisePrior;
            const TrainResult tr =
                train_posterior(model.method, arch, model.hyper, model.train, xTrain, yTrain, noise, methodRng);
            const Vector var = predictive_variance(tr.posterior, xTest, cfg.evalSamples, methodRng, norm.variance_scale());
            const double rho = pearson(var, hmcVar);
            trial.pearson.push_back(rho);
            perMethod[m].push_back(rho);
        }
        res.trials.push_back(std::move(trial));
    }
    for (const auto& values : perMethod) {
        res.perMethod.push_back(summarize(values));
        res.medians.push_back(median(values));
    }
    return res;
}

}  // namespace nng
