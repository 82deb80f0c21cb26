#include "nng/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "nng/checkpoint.hpp"
#include "nng/oracle.hpp"

namespace nng::cli {

namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start)
{
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s)
{
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected)
{
    throw ConfigError("invalid value '" + value + "' for " + key + ": expected " + expected);
}

std::size_t to_count(const std::string& key, const std::string& value)
{
    std::size_t out = 0;
    const std::string v = trim(value);
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, value, "a nonnegative integer");
    return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& value)
{
    std::uint64_t out = 0;
    const std::string v = trim(value);
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, value, "a nonnegative integer");
    return out;
}

double to_real(const std::string& key, const std::string& value)
{
    double out = 0.0;
    const std::string v = trim(value);
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) {
        bad_value(key, value, "a finite number");
    }
    return out;
}

bool to_bool(const std::string& key, const std::string& value)
{
    const std::string v = trim(value);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    bad_value(key, value, "true or false");
}

template <class Fn>
auto rethrow_as_config(const std::string& key, const std::string& value, Fn fn)
{
    try {
        return fn();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("invalid value '" + value + "' for " + key + ": " + e.what());
    }
}

std::string format_real(double v) { return json(v).dump(); }

std::string join_counts(const std::vector<std::size_t>& v)
{
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

std::string dashed(std::string key)
{
    std::replace(key.begin(), key.end(), '_', '-');
    return key;
}

const std::map<std::string, std::string>& option_help()
{
    static const std::map<std::string, std::string> h{
        {"dataset", "CSV file (last column is the target) or 'synthetic'"},
        {"output", "Write the JSON result here instead of stdout"},
        {"checkpoint", "Checkpoint file to evaluate"},
        {"checkpoint_dir", "Directory for per-split checkpoints"},
        {"csv", "Also write a summary table as CSV"},
        {"step_log", "JSON-lines file of per-step training records"},
        {"log_every", "Steps between step-log records"},
        {"method", "nng-ffg, nng-mvg or nng-full"},
        {"methods", "Comma-separated methods for varcorr"},
        {"hidden", "Comma-separated hidden layer sizes"},
        {"activation", "relu or tanh"},
        {"lambda", "KL weight"},
        {"eta", "Prior variance"},
        {"gamma_ex", "Extrinsic damping"},
        {"alpha", "Mean learning rate"},
        {"beta", "Curvature statistics rate"},
        {"beta1", "Momentum of the gradient average"},
        {"t_stats", "Steps between curvature statistic updates"},
        {"t_inv", "Steps between inverse refreshes"},
        {"epochs", "Training epochs"},
        {"batch", "Minibatch size (0 picks by dataset size)"},
        {"samples", "Weight samples for prediction"},
        {"fisher", "true or empirical"},
        {"learn_noise", "Learn the observation noise precision"},
        {"noise_lr", "Step size of the noise precision update"},
        {"decay", "Cut the mean step size tenfold from the halfway epoch"},
        {"tr_c0", "Trust-region initial budget (enables the trust region)"},
        {"tr_zeta", "Trust-region per-epoch budget decay"},
        {"tr_alpha_max", "Largest step the trust region allows"},
        {"seed", "Random seed"},
        {"workers", "Parallel workers"},
        {"repeats", "Number of random train/test splits"},
        {"train_fraction", "Fraction of rows used for training"},
        {"acquisition", "variance or random"},
        {"rounds", "Points acquired per active-learning trial"},
        {"initial_train", "Initial labeled points (varcorr: training points)"},
        {"test_size", "Held-out test points"},
        {"trials", "Independent trials"},
        {"hmc_step", "HMC leapfrog step size"},
        {"hmc_leapfrog", "HMC leapfrog steps per iteration"},
        {"hmc_samples", "HMC samples kept per chain"},
        {"hmc_burnin", "HMC burn-in iterations per chain"},
        {"hmc_chains", "HMC chains"}};
    return h;
}

bool is_sampling_command(const std::string& command) { return command == "active" || command == "varcorr"; }

std::vector<std::size_t> resolved_hidden(const RunConfig& cfg)
{
    if (cfg.hidden) return *cfg.hidden;
    return is_sampling_command(cfg.command) ? std::vector<std::size_t>{10} : std::vector<std::size_t>{50};
}

std::size_t resolved_epochs(const RunConfig& cfg)
{
    if (cfg.epochs) return *cfg.epochs;
    return is_sampling_command(cfg.command) ? 1000 : 40;
}

std::size_t resolved_batch(const RunConfig& cfg, std::size_t rows)
{
    if (cfg.batch > 0) return cfg.batch;
    return rows < 2000 ? 10 : 100;
}

}  // namespace

const std::vector<std::string>& RunConfig::keys()
{
    static const std::vector<std::string> k{
        "dataset",   "output",      "checkpoint", "checkpoint_dir", "csv",          "step_log",     "log_every",
        "method",    "methods",     "hidden",     "activation",     "lambda",       "eta",          "gamma_ex",
        "alpha",     "beta",        "beta1",      "t_stats",        "t_inv",        "epochs",       "batch",
        "samples",   "fisher",      "learn_noise", "noise_lr",      "decay",        "tr_c0",        "tr_zeta",
        "tr_alpha_max", "seed",     "workers",    "repeats",        "train_fraction", "acquisition", "rounds",
        "initial_train", "test_size", "trials",   "hmc_step",       "hmc_leapfrog", "hmc_samples",  "hmc_burnin",
        "hmc_chains", "fast"};
    return k;
}

void RunConfig::set(const std::string& rawKey, const std::string& value)
{
    const std::string key = [&] {
        std::string k = trim(rawKey);
        std::replace(k.begin(), k.end(), '-', '_');
        return k;
    }();
    const std::string v = trim(value);
    if (key == "dataset") dataset = v;
    else if (key == "output") output = v;
    else if (key == "checkpoint") checkpoint = v;
    else if (key == "checkpoint_dir") checkpointDir = v;
    else if (key == "csv") csv = v;
    else if (key == "step_log") stepLog = v;
    else if (key == "log_every") logEvery = to_count(key, v);
    else if (key == "method") method = rethrow_as_config(key, v, [&] { return parse_method(v); });
    else if (key == "methods") {
        std::vector<Method> ms;
        for (const auto& item : split_list(v)) ms.push_back(rethrow_as_config(key, v, [&] { return parse_method(item); }));
        if (ms.empty()) bad_value(key, value, "a comma-separated list of methods");
        methods = ms;
    } else if (key == "hidden") {
        std::vector<std::size_t> h;
        for (const auto& item : split_list(v)) h.push_back(to_count(key, item));
        hidden = h;
    } else if (key == "activation") activation = rethrow_as_config(key, v, [&] { return parse_activation(v); });
    else if (key == "lambda") lambda = to_real(key, v);
    else if (key == "eta") eta = to_real(key, v);
    else if (key == "gamma_ex") gammaEx = to_real(key, v);
    else if (key == "alpha") alpha = to_real(key, v);
    else if (key == "beta") beta = to_real(key, v);
    else if (key == "beta1") beta1 = to_real(key, v);
    else if (key == "t_stats") tStats = to_count(key, v);
    else if (key == "t_inv") tInv = to_count(key, v);
    else if (key == "epochs") epochs = to_count(key, v);
    else if (key == "batch") batch = to_count(key, v);
    else if (key == "samples") samples = to_count(key, v);
    else if (key == "fisher") fisher = rethrow_as_config(key, v, [&] { return parse_fisher_mode(v); });
    else if (key == "learn_noise") learnNoise = to_bool(key, v);
    else if (key == "noise_lr") noiseLr = to_real(key, v);
    else if (key == "decay") decay = to_bool(key, v);
    else if (key == "tr_c0") trC0 = to_real(key, v);
    else if (key == "tr_zeta") trZeta = to_real(key, v);
    else if (key == "tr_alpha_max") trAlphaMax = to_real(key, v);
    else if (key == "seed") seed = to_u64(key, v);
    else if (key == "workers") workers = to_count(key, v);
    else if (key == "repeats") repeats = to_count(key, v);
    else if (key == "train_fraction") trainFraction = to_real(key, v);
    else if (key == "acquisition") acquisition = rethrow_as_config(key, v, [&] { return parse_acquisition(v); });
    else if (key == "rounds") rounds = to_count(key, v);
    else if (key == "initial_train") initialTrain = to_count(key, v);
    else if (key == "test_size") testSize = to_count(key, v);
    else if (key == "trials") trials = to_count(key, v);
    else if (key == "hmc_step") hmcStep = to_real(key, v);
    else if (key == "hmc_leapfrog") hmcLeapfrog = to_count(key, v);
    else if (key == "hmc_samples") hmcSamples = to_count(key, v);
    else if (key == "hmc_burnin") hmcBurnin = to_count(key, v);
    else if (key == "hmc_chains") hmcChains = to_count(key, v);
    else if (key == "fast") fast = to_bool(key, v);
    else throw ConfigError("unknown config key '" + rawKey + "'");
}

void RunConfig::validate() const
{
    const std::vector<std::string> commands{"train", "eval", "active", "varcorr", "check"};
    if (std::find(commands.begin(), commands.end(), command) == commands.end()) {
        throw ConfigError("unknown command '" + command + "'");
    }
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) throw ConfigError(msg);
    };
    if (command != "check") require(!dataset.empty(), command + " needs a dataset (--dataset)");
    if (command == "eval") require(!checkpoint.empty(), "eval needs a checkpoint (--checkpoint)");
    for (std::size_t h : resolved_hidden(*this)) require(h >= 1, "hidden layer sizes must be at least 1");
    require(lambda > 0.0, "lambda must be positive");
    require(eta > 0.0, "eta must be positive");
    require(gammaEx >= 0.0, "gamma_ex must be nonnegative");
    require(alpha > 0.0, "alpha must be positive");
    require(beta > 0.0 && beta < 1.0, "beta must lie in (0, 1)");
    require(beta1 >= 0.0 && beta1 < 1.0, "beta1 must lie in [0, 1)");
    require(tStats >= 1 && tInv >= 1, "t_stats and t_inv must be at least 1");
    require(resolved_epochs(*this) >= 1, "epochs must be at least 1");
    require(samples >= 2, "samples must be at least 2");
    require(noiseLr > 0.0, "noise_lr must be positive");
    if (trC0) {
        require(*trC0 > 0.0, "tr_c0 must be positive");
        require(trZeta > 0.0 && trZeta <= 1.0, "tr_zeta must lie in (0, 1]");
        require(trAlphaMax > 0.0, "tr_alpha_max must be positive");
    }
    require(workers >= 1, "workers must be at least 1");
    require(repeats >= 1, "repeats must be at least 1");
    require(trainFraction > 0.0 && trainFraction < 1.0, "train_fraction must lie in (0, 1)");
    require(initialTrain >= 2, "initial_train must be at least 2");
    require(testSize >= 1, "test_size must be at least 1");
    require(trials >= 1, "trials must be at least 1");
    require(hmcStep > 0.0, "hmc_step must be positive");
    require(hmcLeapfrog >= 1 && hmcSamples >= 1 && hmcChains >= 1, "HMC counts must be at least 1");
}

std::map<std::string, std::string> RunConfig::entries() const
{
    std::map<std::string, std::string> e;
    e["command"] = command;
    e["dataset"] = dataset;
    e["output"] = output;
    e["checkpoint"] = checkpoint;
    e["checkpoint_dir"] = checkpointDir;
    e["csv"] = csv;
    e["step_log"] = stepLog;
    e["log_every"] = std::to_string(logEvery);
    e["method"] = to_string(method);
    std::string ms;
    for (std::size_t i = 0; i < methods.size(); ++i) ms += (i ? "," : "") + to_string(methods[i]);
    e["methods"] = ms;
    e["hidden"] = join_counts(resolved_hidden(*this));
    e["activation"] = to_string(activation);
    e["lambda"] = format_real(lambda);
    e["eta"] = format_real(eta);
    e["gamma_ex"] = format_real(gammaEx);
    e["alpha"] = format_real(alpha);
    e["beta"] = format_real(beta);
    e["beta1"] = format_real(beta1);
    e["t_stats"] = std::to_string(tStats);
    e["t_inv"] = std::to_string(tInv);
    e["epochs"] = std::to_string(resolved_epochs(*this));
    e["batch"] = batch == 0 ? "auto" : std::to_string(batch);
    e["samples"] = std::to_string(samples);
    e["fisher"] = to_string(fisher);
    e["learn_noise"] = learnNoise ? "true" : "false";
    e["noise_lr"] = format_real(noiseLr);
    e["decay"] = decay ? "true" : "false";
    e["tr_c0"] = trC0 ? format_real(*trC0) : "";
    e["tr_zeta"] = format_real(trZeta);
    e["tr_alpha_max"] = format_real(trAlphaMax);
    e["seed"] = std::to_string(seed);
    e["workers"] = std::to_string(workers);
    e["repeats"] = std::to_string(repeats);
    e["train_fraction"] = format_real(trainFraction);
    e["acquisition"] = to_string(acquisition);
    e["rounds"] = std::to_string(rounds);
    e["initial_train"] = std::to_string(initialTrain);
    e["test_size"] = std::to_string(testSize);
    e["trials"] = std::to_string(trials);
    e["hmc_step"] = format_real(hmcStep);
    e["hmc_leapfrog"] = std::to_string(hmcLeapfrog);
    e["hmc_samples"] = std::to_string(hmcSamples);
    e["hmc_burnin"] = std::to_string(hmcBurnin);
    e["hmc_chains"] = std::to_string(hmcChains);
    e["fast"] = fast ? "true" : "false";
    return e;
}

std::vector<std::pair<std::string, std::string>> parse_config_text(std::istream& in, const std::string& source)
{
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    std::size_t lineNo = 0;
    while (std::getline(in, line)) {
        ++lineNo;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(source + ":" + std::to_string(lineNo) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineNo) + ": empty key");
        out.emplace_back(key, trim(line.substr(eq + 1)));
    }
    return out;
}

std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    return parse_config_text(in, path);
}

Dataset synthetic_regression(std::size_t rows, std::uint64_t seed)
{
    Rng rng(seed);
    Dataset d;
    d.header = {"x", "y"};
    d.features.resize(static_cast<Eigen::Index>(rows), 1);
    d.targets.resize(static_cast<Eigen::Index>(rows), 1);
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(rows); ++i) {
        const double x = -4.0 + 8.0 * rng.uniform();
        d.features(i, 0) = x;
        d.targets(i, 0) = std::sin(x) + 0.1 * x * x + 0.2 * rng.normal();
    }
    return d;
}

namespace {

Dataset load_dataset(const RunConfig& cfg)
{
    if (cfg.dataset == "synthetic") {
        return synthetic_regression(1000, splitmix64(cfg.seed ^ 0x5eedULL));
    }
    if (!std::filesystem::exists(cfg.dataset)) {
        throw ConfigError("dataset not found: " + cfg.dataset);
    }
    try {
        return load_csv(cfg.dataset);
    } catch (const CsvError& e) {
        throw ConfigError(e.what());
    }
}

ModelConfig model_config(const RunConfig& cfg, std::size_t rows, std::size_t inputs)
{
    ModelConfig m;
    m.method = cfg.method;
    m.hidden = resolved_hidden(cfg);
    m.activation = cfg.activation;
    m.hyper.lambda = cfg.lambda;
    m.hyper.eta = cfg.eta;
    m.hyper.gammaEx = cfg.gammaEx;
    m.train.epochs = resolved_epochs(cfg);
    m.train.batchSize = resolved_batch(cfg, rows);
    m.train.alphaTilde = cfg.alpha;
    m.train.betaTilde = cfg.beta;
    m.train.beta1 = cfg.beta1;
    m.train.tStats = cfg.tStats;
    m.train.tInv = cfg.tInv;
    m.train.fisher = cfg.fisher;
    m.train.decayHalfway = cfg.decay;
    m.train.learnNoise = cfg.learnNoise;
    m.train.noiseLr = cfg.noiseLr;
    if (cfg.trC0) {
        m.train.trustRegion = TrustRegionSchedule{*cfg.trC0, cfg.trZeta, cfg.trAlphaMax, 0};
    }
    m.train.logEvery = cfg.stepLog.empty() ? 0 : cfg.logEvery;
    try {
        m.train.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    const MlpArchitecture arch = m.architecture(inputs, 1);
    const std::vector<Method> used = is_sampling_command(cfg.command) && cfg.command == "varcorr"
                                         ? cfg.methods
                                         : std::vector<Method>{cfg.method};
    for (Method method : used) {
        if (method == Method::full && arch.num_weights() > kMaxFullWeights) {
            throw ConfigError("nng-full keeps a dense covariance over all weights; this network has " +
                              std::to_string(arch.num_weights()) + " weights, above the limit of " +
                              std::to_string(kMaxFullWeights) + ". Use nng-mvg or nng-ffg, or a smaller network.");
        }
    }
    return m;
}

json summary_json(const Summary& s)
{
    json j{{"mean", s.mean}};
    if (s.stdError) j["std_error"] = *s.stdError;
    return j;
}

void write_text(const std::string& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
    if (!out) throw std::runtime_error("failed writing " + path);
}

json config_json(const RunConfig& cfg)
{
    json j = json::object();
    for (const auto& [k, v] : cfg.entries()) j[k] = v;
    return j;
}

CommandOutput finish(json doc, int exitCode = 0)
{
    return CommandOutput{exitCode, doc.dump(2) + "\n"};
}

CommandOutput cmd_train(const RunConfig& cfg)
{
    const auto start = Clock::now();
    const Dataset data = load_dataset(cfg);
    RegressionBenchmarkConfig bc;
    bc.model = model_config(cfg, data.size(), static_cast<std::size_t>(data.features.cols()));
    bc.split = SplitSpec{cfg.trainFraction, cfg.repeats, cfg.seed};
    bc.evalSamples = cfg.samples;
    bc.workers = cfg.workers;
    bc.seed = splitmix64(cfg.seed + 1);

    std::ofstream stepLog;
    std::mutex logMutex;
    if (!cfg.stepLog.empty()) {
        stepLog.open(cfg.stepLog, std::ios::binary);
        if (!stepLog) throw ConfigError("cannot write step log: " + cfg.stepLog);
        bc.stepLogger = [&](std::size_t split, const StepRecord& r) {
            const json rec{{"split", split},          {"step", r.step},         {"elbo", r.elbo},
                           {"step_size", r.stepSize}, {"grad_norm", r.gradNorm}, {"wall_seconds", r.wallSeconds}};
            std::lock_guard<std::mutex> lock(logMutex);
            stepLog << rec.dump() << '\n';
        };
    }

    const RegressionBenchmarkResult res = run_regression_benchmark(data, bc);

    json splits = json::array();
    json splitTimes = json::array();
    for (const auto& s : res.splits) {
        splits.push_back(json{{"index", s.index},
                              {"seed", s.seed},
                              {"train_size", s.trainSize},
                              {"test_size", s.testSize},
                              {"rmse", s.metrics.rmse},
                              {"loglik", s.metrics.testLogLik},
                              {"noise", {{"alpha", s.noise.alpha}, {"beta", s.noise.beta}}},
                              {"skipped_steps", s.skippedSteps}});
        splitTimes.push_back(s.seconds);
        if (!cfg.checkpointDir.empty()) {
            std::filesystem::create_directories(cfg.checkpointDir);
            save_checkpoint((std::filesystem::path(cfg.checkpointDir) / ("split_" + std::to_string(s.index) + ".json")).string(),
                            s.checkpoint);
        }
    }
    if (!cfg.csv.empty()) {
        std::ostringstream csv;
        csv << "dataset,method,rmse_mean,rmse_se,loglik_mean,loglik_se\n";
        auto se = [](const Summary& s) { return s.stdError ? format_real(*s.stdError) : std::string("NA"); };
        csv << std::filesystem::path(cfg.dataset).stem().string() << ',' << to_string(cfg.method) << ','
            << format_real(res.rmse.mean) << ',' << se(res.rmse) << ',' << format_real(res.testLogLik.mean) << ','
            << se(res.testLogLik) << '\n';
        write_text(cfg.csv, csv.str());
    }
    json doc;
    doc["command"] = "train";
    doc["config"] = config_json(cfg);
    doc["result"] = json{{"method", to_string(cfg.method)},
                         {"rows", data.size()},
                         {"rmse", summary_json(res.rmse)},
                         {"loglik", summary_json(res.testLogLik)},
                         {"splits", splits}};
    doc["timing"] = json{{"total_seconds", seconds_since(start)}, {"split_seconds", splitTimes}};
    return finish(doc);
}

CommandOutput cmd_eval(const RunConfig& cfg)
{
    const auto start = Clock::now();
    if (!std::filesystem::exists(cfg.checkpoint)) throw ConfigError("checkpoint not found: " + cfg.checkpoint);
    const Checkpoint ck = load_checkpoint(cfg.checkpoint);
    if (!ck.scaling) throw ConfigError("checkpoint " + cfg.checkpoint + " carries no input/target scaling");
    const Dataset data = load_dataset(cfg);
    const MlpArchitecture& arch = architecture(ck.posterior);
    if (static_cast<std::size_t>(data.features.cols()) != arch.input_size()) {
        throw ConfigError("dataset has " + std::to_string(data.features.cols()) + " features but the checkpoint expects " +
                          std::to_string(arch.input_size()));
    }
    const Normalizer norm = Normalizer::from_scaling(*ck.scaling);
    Rng rng(cfg.seed);
    const RegressionMetrics m =
        evaluate_regression(ck.posterior, ck.noise, norm, norm.features(data.features), data.targets, cfg.samples, rng);
    json doc;
    doc["command"] = "eval";
    doc["config"] = config_json(cfg);
    doc["result"] = json{{"family", family_name(ck.posterior)},
                         {"rows", data.size()},
                         {"rmse", m.rmse},
                         {"loglik", m.testLogLik}};
    doc["timing"] = json{{"total_seconds", seconds_since(start)}};
    return finish(doc);
}

CommandOutput cmd_active(const RunConfig& cfg)
{
    const auto start = Clock::now();
    const Dataset data = load_dataset(cfg);
    ActiveLearningConfig ac;
    ac.model = model_config(cfg, cfg.initialTrain, static_cast<std::size_t>(data.features.cols()));
    ac.acquisition = cfg.acquisition;
    ac.initialTrain = cfg.initialTrain;
    ac.testSize = cfg.testSize;
    ac.rounds = cfg.rounds;
    ac.evalSamples = cfg.samples;

    Rng root(cfg.seed);
    std::vector<std::uint64_t> seeds;
    for (std::size_t t = 0; t < cfg.trials; ++t) seeds.push_back(root.split().seed());

    std::vector<ActiveLearningResult> runs(cfg.trials);
    std::vector<double> runTimes(cfg.trials);
    auto work = [&](std::size_t t) {
        const auto s = Clock::now();
        ActiveLearningConfig c = ac;
        c.seed = seeds[t];
        runs[t] = active_learning_run(data, c);
        runTimes[t] = seconds_since(s);
    };
    if (cfg.workers <= 1) {
        for (std::size_t t = 0; t < cfg.trials; ++t) work(t);
    } else {
        for (std::size_t b = 0; b < cfg.trials; b += cfg.workers) {
            std::vector<std::thread> pool;
            for (std::size_t t = b; t < std::min(cfg.trials, b + cfg.workers); ++t) pool.emplace_back(work, t);
            for (auto& th : pool) th.join();
        }
    }

    json trials = json::array();
    const std::size_t evals = cfg.rounds + 1;
    json perRound = json::array();
    for (std::size_t r = 0; r < evals; ++r) {
        std::vector<double> v;
        for (const auto& run : runs) v.push_back(run.rmsePerRound[r]);
        perRound.push_back(summary_json(summarize(v)));
    }
    for (std::size_t t = 0; t < runs.size(); ++t) {
        trials.push_back(json{{"seed", seeds[t]}, {"rmse", runs[t].rmsePerRound}, {"acquired", runs[t].acquired}});
    }
    if (!cfg.csv.empty()) {
        std::ostringstream csv;
        csv << "round,rmse_mean,rmse_se\n";
        for (std::size_t r = 0; r < evals; ++r) {
            csv << r << ',' << perRound[r]["mean"].dump() << ','
                << (perRound[r].contains("std_error") ? perRound[r]["std_error"].dump() : "NA") << '\n';
        }
        write_text(cfg.csv, csv.str());
    }
    json doc;
    doc["command"] = "active";
    doc["config"] = config_json(cfg);
    doc["result"] = json{{"method", to_string(cfg.method)},
                         {"acquisition", to_string(cfg.acquisition)},
                         {"rmse_per_round", perRound},
                         {"trials", trials}};
    doc["timing"] = json{{"total_seconds", seconds_since(start)}, {"trial_seconds", runTimes}};
    return finish(doc);
}

CommandOutput cmd_varcorr(const RunConfig& cfg)
{
    const auto start = Clock::now();
    const Dataset data = load_dataset(cfg);
    VarianceCorrelationConfig vc;
    vc.model = model_config(cfg, cfg.initialTrain, static_cast<std::size_t>(data.features.cols()));
    vc.methods = cfg.methods;
    vc.trials = cfg.trials;
    vc.trainSize = cfg.initialTrain;
    vc.testSize = cfg.testSize;
    vc.evalSamples = cfg.samples;
    vc.hmc.stepSize = cfg.hmcStep;
    vc.hmc.leapfrogSteps = cfg.hmcLeapfrog;
    vc.hmc.numSamples = cfg.hmcSamples;
    vc.hmc.burnIn = cfg.hmcBurnin;
    vc.hmc.numChains = cfg.hmcChains;
    vc.seed = cfg.seed;
    const VarianceCorrelationResult res = variance_correlation_run(data, vc);

    json table = json::array();
    for (std::size_t m = 0; m < cfg.methods.size(); ++m) {
        json row = summary_json(res.perMethod[m]);
        row["method"] = to_string(cfg.methods[m]);
        row["median"] = res.medians[m];
        table.push_back(row);
    }
    json trials = json::array();
    bool anyDiverged = false;
    for (const auto& t : res.trials) {
        anyDiverged = anyDiverged || t.hmcDiverged;
        trials.push_back(json{{"index", t.index},
                              {"pearson", t.pearson},
                              {"hmc_acceptance", t.hmcAcceptance},
                              {"hmc_diverged", t.hmcDiverged}});
    }
    if (!cfg.csv.empty()) {
        std::ostringstream csv;
        csv << "method,pearson_mean,pearson_se,pearson_median\n";
        for (const auto& row : table) {
            csv << row["method"].get<std::string>() << ',' << row["mean"].dump() << ','
                << (row.contains("std_error") ? row["std_error"].dump() : "NA") << ',' << row["median"].dump() << '\n';
        }
        write_text(cfg.csv, csv.str());
    }
    json doc;
    doc["command"] = "varcorr";
    doc["config"] = config_json(cfg);
    doc["result"] = json{{"table", table}, {"trials", trials}, {"hmc_diverged", anyDiverged}};
    doc["timing"] = json{{"total_seconds", seconds_since(start)}};
    return finish(doc);
}

struct BlrProblem {
    Matrix features;  // without the constant column
    Matrix targets;
    Matrix design;    // features with a trailing column of ones
    double tau = 4.0;
    double eta = 1.0;
};

BlrProblem make_blr_problem(std::size_t rows, std::size_t dims, Rng& rng)
{
    BlrProblem p;
    p.features.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dims));
    for (Eigen::Index i = 0; i < p.features.size(); ++i) p.features.data()[i] = rng.normal();
    Vector w(static_cast<Eigen::Index>(dims) + 1);
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = rng.normal();
    p.design.resize(p.features.rows(), p.features.cols() + 1);
    p.design << p.features, Matrix::Ones(p.features.rows(), 1);
    p.targets = p.design * w;
    for (Eigen::Index i = 0; i < p.targets.rows(); ++i) p.targets(i, 0) += rng.normal() / std::sqrt(p.tau);
    return p;
}

json check_kron(std::size_t instances, Rng& rng)
{
    double worst = 0.0;
    auto random_spd = [&](Eigen::Index n) {
        Matrix m(n, n);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
        Matrix s = m * m.transpose();
        s.diagonal().array() += 0.5;
        return SpdMatrix(s);
    };
    for (std::size_t t = 0; t < instances; ++t) {
        const auto n1 = static_cast<Eigen::Index>(1 + rng.index(4));
        const auto n2 = static_cast<Eigen::Index>(1 + rng.index(4));
        const KroneckerPair k{random_spd(n2), random_spd(n1), 0.5 + 1.5 * rng.uniform()};
        Matrix v(n1, n2);
        for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = rng.normal();
        const Matrix dense = k.scale * kron(k.left.matrix(), k.right.matrix());
        const Vector expected = dense.fullPivLu().solve(vec(v));
        const Vector got = vec(kron_solve(k, v));
        worst = std::max(worst, (got - expected).norm() / expected.norm());
    }
    return json{{"name", "kronecker_solve"}, {"instances", instances}, {"max_relative_error", worst},
                {"tolerance", 1e-9}, {"passed", worst <= 1e-9}};
}

json check_estimators(std::size_t samples, Rng& rng)
{
    const Eigen::Index d = 3;
    Matrix h(d, d), m(d, d);
    for (Eigen::Index i = 0; i < h.size(); ++i) {
        h.data()[i] = rng.normal();
        m.data()[i] = rng.normal();
    }
    h = 0.5 * (h + h.transpose()).eval();
    Matrix sigma = m * m.transpose();
    sigma.diagonal().array() += 0.5;
    Vector b(d), mu(d);
    for (Eigen::Index i = 0; i < d; ++i) {
        b(i) = rng.normal();
        mu(i) = rng.normal();
    }
    const EstimatorReport r = check_gaussian_estimators(QuadraticSpec{h, b}, mu, SpdMatrix(sigma), samples, rng);
    return json{{"name", "gaussian_estimators"},
                {"samples", samples},
                {"mean_max_z", r.muMaxZ},
                {"covariance_half_max_z", r.halfMaxZ},
                {"covariance_no_half_max_z", r.noHalfMaxZ},
                {"no_half_convention_passes", r.noHalfPass},
                {"passed", r.muPass && r.halfPass && !r.noHalfPass}};
}

json check_blr(std::size_t steps, Rng& rng)
{
    const BlrProblem prob = make_blr_problem(100, 5, rng);
    const BlrPosterior exact = blr_posterior(prob.design, prob.targets.col(0), prob.eta, prob.tau);
    MlpArchitecture arch;
    arch.layerSizes = {5, 1};
    Hyper hyper;
    hyper.N = 100;
    hyper.eta = prob.eta;
    NoiseModel noise;
    noise.tau = prob.tau;

    auto rate = [](std::size_t k) { return std::min(0.5, 2.0 / (static_cast<double>(k) + 4.0)); };
    auto stat_rate = [](std::size_t k) { return 1.0 / static_cast<double>(k + 1); };
    const double meanNorm = exact.mean.norm();

    NoisyFullState full(FullPosterior::create(arch, hyper, rng));
    for (std::size_t k = 0; k < steps; ++k) {
        full.alphaTilde = rate(k);
        full.betaTilde = stat_rate(k);
        noisy_full_step(full, prob.features, prob.targets, noise, rng);
    }
    const double fullMean = (full.posterior.mu - exact.mean).norm() / meanNorm;
    const Matrix fullCov = spd_inverse(precision(full.posterior));
    const double fullCovErr = (fullCov - exact.covariance.matrix()).norm() / exact.covariance.matrix().norm();

    NoisyKfacState kfac(MvgPosterior::create(arch, hyper, rng));
    for (std::size_t k = 0; k < steps; ++k) {
        kfac.alpha = rate(k);
        kfac.betaTilde = stat_rate(k);
        noisy_kfac_step(kfac, prob.features, prob.targets, noise, rng);
    }
    const double kfacMean = (vec(kfac.posterior.layers[0].mean) - exact.mean).norm() / meanNorm;

    NoisyAdamState adam(FfgPosterior::create(arch, hyper, rng));
    adam.beta1 = 0.0;
    for (std::size_t k = 0; k < steps; ++k) {
        adam.alpha = rate(k);
        adam.beta2 = 1.0 - stat_rate(k);
        noisy_adam_step(adam, prob.features, prob.targets, noise, rng);
    }
    const double adamMean = (adam.posterior.mu - exact.mean).norm() / meanNorm;

    const bool passed = fullMean <= 1e-3 && fullCovErr <= 1e-2 && kfacMean <= 1e-3 && adamMean <= 1e-3;
    return json{{"name", "conjugate_linear_regression"},
                {"steps", steps},
                {"full_mean_relative_error", fullMean},
                {"full_covariance_relative_error", fullCovErr},
                {"kfac_mean_relative_error", kfacMean},
                {"adam_mean_relative_error", adamMean},
                {"mean_tolerance", 1e-3},
                {"covariance_tolerance", 1e-2},
                {"passed", passed}};
}

json check_hmc(std::size_t samplesPerChain, Rng& rng)
{
    const BlrProblem prob = make_blr_problem(100, 5, rng);
    const BlrPosterior exact = blr_posterior(prob.design, prob.targets.col(0), prob.eta, prob.tau);
    HmcConfig cfg;
    cfg.stepSize = 0.02;
    cfg.leapfrogSteps = 10;
    cfg.numSamples = samplesPerChain;
    cfg.burnIn = 200;
    cfg.numChains = 4;
    cfg.seed = rng.split().seed();
    const Vector y = prob.targets.col(0);
    const HmcResult res = hmc_sample(
        [&](const Vector& w, Vector& g) { return blr_log_joint(prob.design, y, prob.eta, prob.tau, w, &g); },
        Vector::Zero(prob.design.cols()), cfg);
    const auto samples = res.pooled();
    Vector mean = Vector::Zero(prob.design.cols());
    for (const auto& s : samples) mean += s;
    mean /= static_cast<double>(samples.size());
    Matrix cov = Matrix::Zero(mean.size(), mean.size());
    for (const auto& s : samples) cov += (s - mean) * (s - mean).transpose();
    cov /= static_cast<double>(samples.size() - 1);
    const double meanErr = (mean - exact.mean).norm() / exact.mean.norm();
    const double covErr = (cov - exact.covariance.matrix()).norm() / exact.covariance.matrix().norm();
    return json{{"name", "hmc_vs_conjugate"},
                {"samples", samples.size()},
                {"min_acceptance", res.min_acceptance()},
                {"mean_relative_error", meanErr},
                {"covariance_relative_error", covErr},
                {"tolerance", 0.05},
                {"passed", meanErr <= 0.05 && covErr <= 0.05}};
}

CommandOutput cmd_check(const RunConfig& cfg)
{
    const auto start = Clock::now();
    Rng rng(cfg.seed);
    json suites = json::array();
    json times = json::object();
    auto timed = [&](const std::string& name, auto fn) {
        const auto s = Clock::now();
        Rng child = rng.split();
        suites.push_back(fn(child));
        times[name] = seconds_since(s);
    };
    timed("kronecker_solve", [&](Rng& r) { return check_kron(cfg.fast ? 50 : 200, r); });
    timed("gaussian_estimators", [&](Rng& r) { return check_estimators(100000, r); });
    timed("conjugate_linear_regression", [&](Rng& r) { return check_blr(cfg.fast ? 20000 : 50000, r); });
    timed("hmc_vs_conjugate", [&](Rng& r) { return check_hmc(cfg.fast ? 2500 : 10000, r); });
    bool passed = true;
    for (const auto& s : suites) passed = passed && s["passed"].get<bool>();
    json doc;
    doc["command"] = "check";
    doc["config"] = config_json(cfg);
    doc["result"] = json{{"suites", suites}, {"passed", passed}};
    times["total_seconds"] = seconds_since(start);
    doc["timing"] = times;
    return finish(doc, passed ? 0 : 1);
}

}  // namespace

CommandOutput run_command(const RunConfig& cfg)
{
    cfg.validate();
    if (cfg.command == "train") return cmd_train(cfg);
    if (cfg.command == "eval") return cmd_eval(cfg);
    if (cfg.command == "active") return cmd_active(cfg);
    if (cfg.command == "varcorr") return cmd_varcorr(cfg);
    return cmd_check(cfg);
}

int main_entry(int argc, char** argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Noisy natural gradient variational inference for Bayesian neural networks"};
    app.require_subcommand(1);
    std::string configPath;
    struct Registered {
        CLI::App* sub;
        std::map<std::string, CLI::Option*> options;
        std::map<std::string, std::string> values;
    };
    const std::vector<std::pair<std::string, std::string>> commands{
        {"train", "Train on repeated random splits and report test RMSE and log-likelihood"},
        {"eval", "Evaluate a saved checkpoint on a dataset"},
        {"active", "Pool-based active learning with variance or random acquisition"},
        {"varcorr", "Correlate predictive variances of each method with HMC"},
        {"check", "Run the built-in oracle checks"}};
    std::vector<std::unique_ptr<Registered>> regs;
    for (const auto& [name, help] : commands) {
        auto reg = std::make_unique<Registered>();
        reg->sub = app.add_subcommand(name, help);
        reg->sub->add_option("--config", configPath, "Config file of key = value lines");
        for (const auto& key : RunConfig::keys()) {
            if (key == "fast") {
                reg->options[key] = reg->sub->add_flag("--fast", "Smaller check sizes");
            } else {
                reg->options[key] = reg->sub->add_option("--" + dashed(key), reg->values[key], option_help().at(key));
            }
        }
        regs.push_back(std::move(reg));
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    RunConfig cfg;
    try {
        const Registered* active = nullptr;
        for (const auto& r : regs) {
            if (r->sub->parsed()) active = r.get();
        }
        cfg.command = active->sub->get_name();

        const char* dir = std::getenv("NNG_CONFIG_DIR");
        if (dir && *dir) {
            const auto defaults = std::filesystem::path(dir) / "nng.conf";
            if (std::filesystem::exists(defaults)) {
                for (const auto& [k, v] : read_config_file(defaults.string())) cfg.set(k, v);
            }
        }
        if (!configPath.empty()) {
            std::string path = configPath;
            if (!std::filesystem::exists(path) && dir && *dir && std::filesystem::exists(std::filesystem::path(dir) / path)) {
                path = (std::filesystem::path(dir) / path).string();
            }
            for (const auto& [k, v] : read_config_file(path)) cfg.set(k, v);
        }
        for (const auto& key : RunConfig::keys()) {
            const CLI::Option* opt = active->options.at(key);
            if (opt->count() == 0) continue;
            cfg.set(key, key == "fast" ? "true" : active->values.at(key));
        }
        cfg.validate();
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }

    try {
        const CommandOutput result = run_command(cfg);
        if (cfg.output.empty()) {
            out << result.json;
        } else {
            write_text(cfg.output, result.json);
        }
        return result.exitCode;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << cfg.command << " failed: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace nng::cli
