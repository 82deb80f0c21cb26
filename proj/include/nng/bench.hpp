#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <istream>
#include <optional>
#include <string>
#include <vector>

#include "nng/checkpoint.hpp"
#include "nng/linalg.hpp"
#include "nng/model.hpp"
#include "nng/optim.hpp"
#include "nng/oracle.hpp"
#include "nng/posterior.hpp"
#include "nng/random.hpp"

namespace nng {

/// Raw (unnormalized) data: one row per example, last CSV column as target.
struct Dataset {
    Matrix features;
    Matrix targets;
    std::vector<std::string> header;

    std::size_t size() const { return static_cast<std::size_t>(features.rows()); }
    /// Rows selected by index, in the given order.
    Dataset subset(const std::vector<std::size_t>& rows) const;
};

class CsvError : public std::runtime_error {
public:
    explicit CsvError(const std::string& what) : std::runtime_error(what) {}
};

/// Comma-separated numeric rows. A first row that does not parse as numbers
/// is taken as a header. Blank lines are ignored.
Dataset parse_csv(std::istream& in, const std::string& sourceName = "<stream>");
Dataset load_csv(const std::string& path);

/// Standardization statistics fitted on a set of training rows. Columns with
/// zero spread get std 1.
struct Normalizer {
    Vector featureMean;
    Vector featureStd;
    Vector targetMean;
    Vector targetStd;

    static Normalizer fit(const Dataset& data, const std::vector<std::size_t>& trainRows);
    /// Identity statistics for categorical targets (features still standardized).
    static Normalizer fit_features_only(const Dataset& data, const std::vector<std::size_t>& trainRows);

    Matrix features(const Matrix& raw) const;
    Matrix targets(const Matrix& raw) const;
    Matrix denormalize_targets(const Matrix& normalized) const;
    Scaling scaling() const;
    static Normalizer from_scaling(const Scaling& s);

    /// Multiplier taking a variance on the normalized scale to raw units
    /// (single-output: targetStd^2).
    double variance_scale() const;
};

struct SplitSpec {
    double trainFraction = 0.9;
    std::size_t repeats = 20;
    std::uint64_t seed = 0;
    void validate() const;
};

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

/// Random train/test partitions. Each repeat draws its own permutation from a
/// child stream of the seed, so split i does not depend on how many splits
/// are requested.
std::vector<Split> make_splits(std::size_t rows, const SplitSpec& spec);

/// Mean and standard error; the error is absent for fewer than two values.
struct Summary {
    double mean = 0.0;
    std::optional<double> stdError;
};
Summary summarize(const std::vector<double>& values);

double rmse(const Matrix& predictions, const Matrix& targets);

/// Network outputs for S weight draws, on the model's (normalized) scale.
std::vector<Matrix> sample_predictions(const Posterior& p, const Matrix& inputs, std::size_t numSamples, Rng& rng);

struct RegressionMetrics {
    double rmse = 0.0;
    double testLogLik = 0.0;
};

/// RMSE of the mean prediction and per-datapoint log predictive density
/// log (1/S) sum_s N(y | yhat_s, 1/tau), both on the raw target scale.
/// inputs are normalized features; rawTargets are in original units.
RegressionMetrics evaluate_regression(const Posterior& p, const NoiseModel& noise, const Normalizer& norm,
                                      const Matrix& inputs, const Matrix& rawTargets, std::size_t numSamples,
                                      Rng& rng);
double test_log_likelihood(const Posterior& p, const NoiseModel& noise, const Normalizer& norm,
                           const Matrix& inputs, const Matrix& rawTargets, std::size_t numSamples, Rng& rng);

/// Per-row variance of the sampled predictive means (first output), scaled
/// to raw units by varianceScale.
Vector predictive_variance(const Posterior& p, const Matrix& inputs, std::size_t numSamples, Rng& rng,
                           double varianceScale = 1.0);
/// Same quantity from an explicit weight sample set (e.g. HMC draws).
Vector predictive_variance(const MlpArchitecture& arch, const std::vector<WeightSet>& samples,
                           const Matrix& inputs, double varianceScale = 1.0);

double pearson(const Vector& x, const Vector& y);

/// Expected calibration error over equal-width confidence bins.
double ece(const Vector& confidences, const std::vector<bool>& correct, std::size_t numBins = 15);

struct ModelConfig {
    Method method = Method::mvg;
    std::vector<std::size_t> hidden{50};
    Activation activation = Activation::relu;
    Hyper hyper;
    TrainConfig train;
    GammaPosterior noisePrior{6.0, 6.0};

    MlpArchitecture architecture(std::size_t inputs, std::size_t outputs) const;
};

struct SplitRecord {
    std::size_t index = 0;
    std::uint64_t seed = 0;
    std::size_t trainSize = 0;
    std::size_t testSize = 0;
    RegressionMetrics metrics;
    GammaPosterior noise;
    std::size_t skippedSteps = 0;
    double seconds = 0.0;
    Checkpoint checkpoint;
};

struct RegressionBenchmarkConfig {
    ModelConfig model;
    SplitSpec split;
    std::size_t evalSamples = 1000;
    std::size_t workers = 1;
    std::uint64_t seed = 0;
    /// Receives step records tagged with the split index; may be called
    /// from several workers at once.
    std::function<void(std::size_t, const StepRecord&)> stepLogger;
};

struct RegressionBenchmarkResult {
    std::vector<SplitRecord> splits;
    Summary rmse;
    Summary testLogLik;
};

/// Train on each split's normalized training rows and evaluate on its test
/// rows. Per-split seeds are derived before any work starts, so the result
/// does not depend on the worker count.
RegressionBenchmarkResult run_regression_benchmark(const Dataset& data, const RegressionBenchmarkConfig& cfg);

enum class Acquisition { variance, random };
std::string to_string(Acquisition a);
Acquisition parse_acquisition(const std::string& s);

struct ActiveLearningConfig {
    ModelConfig model;
    Acquisition acquisition = Acquisition::variance;
    std::size_t initialTrain = 20;
    std::size_t testSize = 100;
    /// Number of acquisitions; the model is evaluated rounds + 1 times.
    std::size_t rounds = 9;
    std::size_t evalSamples = 100;
    std::uint64_t seed = 0;
};

struct ActiveLearningResult {
    std::vector<double> rmsePerRound;
    /// Dataset row indices acquired, in order.
    std::vector<std::size_t> acquired;
    std::vector<std::size_t> initialTrain;
    std::vector<std::size_t> test;
};

ActiveLearningResult active_learning_run(const Dataset& data, const ActiveLearningConfig& cfg);

/// Variant with caller-chosen initial train, test and pool rows.
ActiveLearningResult active_learning_run(const Dataset& data, const ActiveLearningConfig& cfg,
                                         std::vector<std::size_t> train, std::vector<std::size_t> test,
                                         std::vector<std::size_t> pool);

/// Log posterior over (flattened weights, log tau) of a Gaussian-likelihood
/// network with prior N(0, eta I) on weights and a Gamma prior on tau,
/// with gradient. Used as the HMC target.
double bnn_log_posterior(const MlpArchitecture& arch, const Matrix& inputs, const Matrix& targets, double eta,
                         const GammaPosterior& tauPrior, const Vector& params, Vector& grad);

struct VarianceCorrelationConfig {
    ModelConfig model;
    std::vector<Method> methods{Method::ffg, Method::mvg};
    std::size_t trials = 10;
    std::size_t trainSize = 20;
    std::size_t testSize = 100;
    std::size_t evalSamples = 1000;
    HmcConfig hmc;
    double minAcceptance = 0.1;
    std::uint64_t seed = 0;
};

struct VarianceCorrelationTrial {
    std::size_t index = 0;
    std::vector<double> pearson;  // parallel to cfg.methods
    double hmcAcceptance = 0.0;
    bool hmcDiverged = false;
};

struct VarianceCorrelationResult {
    std::vector<VarianceCorrelationTrial> trials;
    std::vector<Summary> perMethod;
    std::vector<double> medians;
};

VarianceCorrelationResult variance_correlation_run(const Dataset& data, const VarianceCorrelationConfig& cfg);

/// Median of a nonempty list.
double median(std::vector<double> values);

}  // namespace nng
