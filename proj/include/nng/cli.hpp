#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nng/bench.hpp"
#include "nng/optim.hpp"

namespace nng::cli {

/// Error in configuration or input files; reported with exit status 2.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Every setting a command can take. Keys are the snake_case field names
/// used in config files; command-line flags use the same names with dashes.
struct RunConfig {
    std::string command;
    std::string dataset;
    std::string output;
    std::string checkpoint;      // eval: file to read
    std::string checkpointDir;   // train: directory for per-split files
    std::string csv;             // optional table output
    std::string stepLog;         // optional JSON-lines step log
    std::size_t logEvery = 100;

    Method method = Method::mvg;
    std::vector<Method> methods{Method::ffg, Method::mvg};
    /// Unset: 50 units for train/eval, 10 for active/varcorr.
    std::optional<std::vector<std::size_t>> hidden;
    Activation activation = Activation::relu;

    double lambda = 1.0;
    double eta = 1.0;
    double gammaEx = 0.0;
    double alpha = 0.01;
    double beta = 0.001;
    double beta1 = 0.9;
    std::size_t tStats = 1;
    std::size_t tInv = 1;
    /// Unset: 40 for train, 1000 for active/varcorr.
    std::optional<std::size_t> epochs;
    /// 0 selects 10 for datasets under 2000 rows and 100 otherwise.
    std::size_t batch = 0;
    std::size_t samples = 1000;
    FisherMode fisher = FisherMode::true_fisher;
    bool learnNoise = true;
    double noiseLr = 0.01;
    bool decay = true;
    std::optional<double> trC0;
    double trZeta = 0.95;
    double trAlphaMax = 0.01;

    std::uint64_t seed = 0;
    std::size_t workers = 1;
    std::size_t repeats = 20;
    double trainFraction = 0.9;

    Acquisition acquisition = Acquisition::variance;
    std::size_t rounds = 9;
    std::size_t initialTrain = 20;
    std::size_t testSize = 100;
    std::size_t trials = 10;

    double hmcStep = 0.01;
    std::size_t hmcLeapfrog = 50;
    std::size_t hmcSamples = 4000;
    std::size_t hmcBurnin = 1000;
    std::size_t hmcChains = 4;

    bool fast = false;

    /// Assigns one key from its textual value; throws ConfigError for
    /// unknown keys and unparsable values.
    void set(const std::string& key, const std::string& value);
    /// Cross-field checks run before any work starts.
    void validate() const;
    /// All keys with their current values, for echoing into results.
    std::map<std::string, std::string> entries() const;

    static const std::vector<std::string>& keys();
};

/// Reads "key = value" lines; '#' starts a comment.
std::vector<std::pair<std::string, std::string>> parse_config_text(std::istream& in, const std::string& source);
std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path);

/// Synthetic one-dimensional regression data used by the self checks and
/// when dataset is "synthetic".
Dataset synthetic_regression(std::size_t rows, std::uint64_t seed);

struct CommandOutput {
    int exitCode = 0;
    /// JSON document written to the output path or stdout.
    std::string json;
};

CommandOutput run_command(const RunConfig& cfg);

/// Full entry point: parses argv, resolves config precedence, runs the
/// command and writes results. Returns the process exit status.
int main_entry(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace nng::cli
