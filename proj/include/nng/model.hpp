#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "nng/gamma.hpp"
#include "nng/linalg.hpp"
#include "nng/random.hpp"

namespace nng {

enum class Activation { relu, tanh };
enum class Likelihood { gaussian, categorical };

std::string to_string(Activation a);
std::string to_string(Likelihood l);
Activation parse_activation(const std::string& s);
Likelihood parse_likelihood(const std::string& s);

/// Fully connected network. Layer l maps a_l (fan_in(l) entries, the last
/// being the constant 1 when bias is on) to s_l = W_l^T a_l. Hidden layers
/// apply the activation; the output layer is linear.
struct MlpArchitecture {
    std::vector<std::size_t> layerSizes;
    Activation activation = Activation::relu;
    Likelihood likelihood = Likelihood::gaussian;
    bool bias = true;

    void validate() const;

    std::size_t num_layers() const { return layerSizes.size() - 1; }
    std::size_t input_size() const { return layerSizes.front(); }
    std::size_t output_size() const { return layerSizes.back(); }
    /// Rows of W_l, including the homogeneous bias row.
    std::size_t fan_in(std::size_t layer) const { return layerSizes[layer] + (bias ? 1 : 0); }
    std::size_t fan_out(std::size_t layer) const { return layerSizes[layer + 1]; }
    std::size_t num_weights() const;
};

struct WeightSet {
    std::vector<Matrix> layers;
};

WeightSet zero_weights(const MlpArchitecture& arch);
/// Entries ~ N(0, 1 / fan_in).
WeightSet random_weights(const MlpArchitecture& arch, Rng& rng);
void check_shapes(const MlpArchitecture& arch, const WeightSet& w);

/// Concatenation of vec(W_l) (column-stacked) over layers.
Vector flatten(const WeightSet& w);
WeightSet unflatten(const MlpArchitecture& arch, const Vector& flat);

struct ForwardTrace {
    std::vector<Vector> inputs;   // a_l, bias entry last
    std::vector<Vector> preacts;  // s_l
    Vector output;
};

struct LayerGradients {
    std::vector<Matrix> weightGrads;  // DW_l = a_l g_l^T
    std::vector<Vector> preactGrads;  // g_l
};

ForwardTrace forward(const MlpArchitecture& arch, const WeightSet& weights, const Vector& x);
/// Reverse-mode gradients of the scalar whose derivative with respect to the
/// network output is outputGrad.
LayerGradients backward(const MlpArchitecture& arch, const WeightSet& weights, const ForwardTrace& trace,
                        const Vector& outputGrad);

/// Row-per-example variants used by the optimizers.
struct BatchTrace {
    std::vector<Matrix> inputs;   // B x fan_in(l)
    std::vector<Matrix> preacts;  // B x fan_out(l)
    Matrix output;                // B x output_size
};

BatchTrace forward_batch(const MlpArchitecture& arch, const WeightSet& weights, const Matrix& x);
/// Returns G_l (B x fan_out(l)), row i holding g_l for example i.
std::vector<Matrix> backward_batch(const MlpArchitecture& arch, const WeightSet& weights,
                                   const BatchTrace& trace, const Matrix& outputGrad);
/// Network outputs only; no intermediates kept.
Matrix predict(const MlpArchitecture& arch, const WeightSet& weights, const Matrix& x);

/// Targets are a row per example: output_size columns for the Gaussian
/// likelihood, one column holding the class index for categorical.
double log_likelihood(const MlpArchitecture& arch, const Vector& output, const Vector& target,
                      std::optional<double> tau);
/// Sum over rows of log_likelihood.
double log_likelihood_batch(const MlpArchitecture& arch, const Matrix& outputs, const Matrix& targets,
                            std::optional<double> tau);
/// d log p(y | output) / d output, one row per example.
Matrix log_likelihood_grad(const MlpArchitecture& arch, const Matrix& outputs, const Matrix& targets,
                           std::optional<double> tau);

/// E_{tau ~ q}[log N(y | yhat, 1/tau)], summed over output dimensions.
double expected_gaussian_ll(const Vector& output, const Vector& target, const GammaPosterior& q);

/// Draws targets from the model's predictive distribution (true Fisher).
Vector sample_targets(const MlpArchitecture& arch, const Vector& output, std::optional<double> tau, Rng& rng);
Matrix sample_targets_batch(const MlpArchitecture& arch, const Matrix& outputs, std::optional<double> tau,
                            Rng& rng);

Vector softmax(const Vector& logits);

}  // namespace nng
