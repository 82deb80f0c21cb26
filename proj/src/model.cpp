#include "nng/model.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace nng {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

Matrix with_bias_column(const Matrix& h, bool bias)
{
    if (!bias) {
        return h;
    }
    Matrix a(h.rows(), h.cols() + 1);
    a.leftCols(h.cols()) = h;
    a.col(h.cols()).setOnes();
    return a;
}

void activate_inplace(Matrix& s, Activation act)
{
    if (act == Activation::relu) {
        s = s.cwiseMax(0.0);
    } else {
        s = s.array().tanh().matrix();
    }
}

Matrix activation_derivative(const Matrix& s, Activation act)
{
    if (act == Activation::relu) {
        return (s.array() > 0.0).cast<double>().matrix();
    }
    return (1.0 - s.array().tanh().square()).matrix();
}

void require_tau(std::optional<double> tau)
{
    if (!tau) {
        throw std::invalid_argument("Gaussian likelihood requires a noise precision tau");
    }
    if (!(*tau > 0.0)) {
        throw std::invalid_argument("noise precision tau must be positive, got " + std::to_string(*tau));
    }
}

std::size_t class_index(double value, std::size_t numClasses)
{
    const auto idx = static_cast<long long>(std::llround(value));
    if (idx < 0 || static_cast<std::size_t>(idx) >= numClasses || std::abs(value - double(idx)) > 1e-9) {
        throw std::invalid_argument("categorical target " + std::to_string(value) + " is not a class index in [0, " +
                                    std::to_string(numClasses) + ")");
    }
    return static_cast<std::size_t>(idx);
}

}  // namespace

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

std::string to_string(Likelihood l) { return l == Likelihood::gaussian ? "gaussian" : "categorical"; }

Activation parse_activation(const std::string& s)
{
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    throw std::invalid_argument("unknown activation '" + s + "' (expected relu or tanh)");
}

Likelihood parse_likelihood(const std::string& s)
{
    if (s == "gaussian") return Likelihood::gaussian;
    if (s == "categorical") return Likelihood::categorical;
    throw std::invalid_argument("unknown likelihood '" + s + "' (expected gaussian or categorical)");
}

void MlpArchitecture::validate() const
{
    if (layerSizes.size() < 2) {
        throw std::invalid_argument("architecture needs at least an input and an output size");
    }
    for (auto s : layerSizes) {
        if (s < 1) {
            throw std::invalid_argument("architecture layer sizes must be >= 1");
        }
    }
    if (likelihood == Likelihood::categorical && output_size() < 2) {
        throw std::invalid_argument("categorical likelihood needs at least two outputs");
    }
}

std::size_t MlpArchitecture::num_weights() const
{
    std::size_t n = 0;
    for (std::size_t l = 0; l < num_layers(); ++l) {
        n += fan_in(l) * fan_out(l);
    }
    return n;
}

WeightSet zero_weights(const MlpArchitecture& arch)
{
    WeightSet w;
    for (std::size_t l = 0; l < arch.num_layers(); ++l) {
        w.layers.push_back(Matrix::Zero(arch.fan_in(l), arch.fan_out(l)));
    }
    return w;
}

WeightSet random_weights(const MlpArchitecture& arch, Rng& rng)
{
    WeightSet w = zero_weights(arch);
    for (std::size_t l = 0; l < arch.num_layers(); ++l) {
        const double sd = 1.0 / std::sqrt(static_cast<double>(arch.fan_in(l)));
        for (Eigen::Index i = 0; i < w.layers[l].rows(); ++i) {
            for (Eigen::Index j = 0; j < w.layers[l].cols(); ++j) {
                w.layers[l](i, j) = sd * rng.normal();
            }
        }
    }
    return w;
}

void check_shapes(const MlpArchitecture& arch, const WeightSet& w)
{
    if (w.layers.size() != arch.num_layers()) {
        throw DimensionMismatch("weight set has " + std::to_string(w.layers.size()) + " layers, architecture has " +
                                std::to_string(arch.num_layers()));
    }
    for (std::size_t l = 0; l < arch.num_layers(); ++l) {
        if (static_cast<std::size_t>(w.layers[l].rows()) != arch.fan_in(l) ||
            static_cast<std::size_t>(w.layers[l].cols()) != arch.fan_out(l)) {
            throw DimensionMismatch("layer " + std::to_string(l) + " weight is " + std::to_string(w.layers[l].rows()) +
                                    "x" + std::to_string(w.layers[l].cols()) + ", expected " +
                                    std::to_string(arch.fan_in(l)) + "x" + std::to_string(arch.fan_out(l)));
        }
    }
}

Vector flatten(const WeightSet& w)
{
    Eigen::Index total = 0;
    for (const auto& m : w.layers) total += m.size();
    Vector out(total);
    Eigen::Index offset = 0;
    for (const auto& m : w.layers) {
        out.segment(offset, m.size()) = vec(m);
        offset += m.size();
    }
    return out;
}

WeightSet unflatten(const MlpArchitecture& arch, const Vector& flat)
{
    if (static_cast<std::size_t>(flat.size()) != arch.num_weights()) {
        throw DimensionMismatch("unflatten: got " + std::to_string(flat.size()) + " weights, architecture has " +
                                std::to_string(arch.num_weights()));
    }
    WeightSet w;
    Eigen::Index offset = 0;
    for (std::size_t l = 0; l < arch.num_layers(); ++l) {
        const auto n = static_cast<Eigen::Index>(arch.fan_in(l) * arch.fan_out(l));
        w.layers.push_back(unvec(flat.segment(offset, n), arch.fan_in(l), arch.fan_out(l)));
        offset += n;
    }
    return w;
}

BatchTrace forward_batch(const MlpArchitecture& arch, const WeightSet& weights, const Matrix& x)
{
    check_shapes(arch, weights);
    if (static_cast<std::size_t>(x.cols()) != arch.input_size()) {
        throw DimensionMismatch("forward: input has " + std::to_string(x.cols()) + " features, expected " +
                                std::to_string(arch.input_size()));
    }
    BatchTrace t;
    Matrix h = x;
    for (std::size_t l = 0; l < arch.num_layers(); ++l) {
        t.inputs.push_back(with_bias_column(h, arch.bias));
        t.preacts.push_back(t.inputs.back() * weights.layers[l]);
        h = t.preacts.back();
        if (l + 1 < arch.num_layers()) {
            activate_inplace(h, arch.activation);
        }
    }
    t.output = std::move(h);
    return t;
}

Matrix predict(const MlpArchitecture& arch, const WeightSet& weights, const Matrix& x)
{
    check_shapes(arch, weights);
    if (static_cast<std::size_t>(x.cols()) != arch.input_size()) {
        throw DimensionMismatch("predict: input width mismatch");
    }
    Matrix h = x;
    for (std::size_t l = 0; l < arch.num_layers(); ++l) {
        const Matrix& w = weights.layers[l];
        Matrix s = h * w.topRows(static_cast<Eigen::Index>(arch.layerSizes[l]));
        if (arch.bias) {
            s.rowwise() += w.row(w.rows() - 1);
        }
        if (l + 1 < arch.num_layers()) {
            activate_inplace(s, arch.activation);
        }
        h = std::move(s);
    }
    return h;
}

std::vector<Matrix> backward_batch(const MlpArchitecture& arch, const WeightSet& weights, const BatchTrace& trace,
                                   const Matrix& outputGrad)
{
    const std::size_t layers = arch.num_layers();
    if (outputGrad.rows() != trace.output.rows() || outputGrad.cols() != trace.output.cols()) {
        throw DimensionMismatch("backward: output gradient shape does not match the trace output");
    }
    std::vector<Matrix> g(layers);
    g[layers - 1] = outputGrad;
    for (std::size_t l = layers - 1; l > 0; --l) {
        const auto width = static_cast<Eigen::Index>(arch.layerSizes[l]);
        const Matrix back = g[l] * weights.layers[l].topRows(width).transpose();
        g[l - 1] = back.cwiseProduct(activation_derivative(trace.preacts[l - 1], arch.activation));
    }
    return g;
}

ForwardTrace forward(const MlpArchitecture& arch, const WeightSet& weights, const Vector& x)
{
    const BatchTrace bt = forward_batch(arch, weights, Matrix(x.transpose()));
    ForwardTrace t;
    for (std::size_t l = 0; l < bt.inputs.size(); ++l) {
        t.inputs.push_back(bt.inputs[l].row(0).transpose());
        t.preacts.push_back(bt.preacts[l].row(0).transpose());
    }
    t.output = bt.output.row(0).transpose();
    return t;
}

LayerGradients backward(const MlpArchitecture& arch, const WeightSet& weights, const ForwardTrace& trace,
                        const Vector& outputGrad)
{
    if (static_cast<std::size_t>(outputGrad.size()) != arch.output_size()) {
        throw DimensionMismatch("backward: output gradient has length " + std::to_string(outputGrad.size()) +
                                ", expected " + std::to_string(arch.output_size()));
    }
    BatchTrace bt;
    for (std::size_t l = 0; l < trace.inputs.size(); ++l) {
        bt.inputs.push_back(trace.inputs[l].transpose());
        bt.preacts.push_back(trace.preacts[l].transpose());
    }
    bt.output = trace.output.transpose();
    const std::vector<Matrix> g = backward_batch(arch, weights, bt, Matrix(outputGrad.transpose()));
    LayerGradients out;
    for (std::size_t l = 0; l < g.size(); ++l) {
        out.preactGrads.push_back(g[l].row(0).transpose());
        out.weightGrads.push_back(trace.inputs[l] * out.preactGrads.back().transpose());
    }
    return out;
}

Vector softmax(const Vector& logits)
{
    const double mx = logits.maxCoeff();
    Vector e = (logits.array() - mx).exp().matrix();
    return e / e.sum();
}

double log_likelihood(const MlpArchitecture& arch, const Vector& output, const Vector& target,
                      std::optional<double> tau)
{
    if (arch.likelihood == Likelihood::gaussian) {
        require_tau(tau);
        if (target.size() != output.size()) {
            throw DimensionMismatch("gaussian target/output length mismatch");
        }
        const double sq = (target - output).squaredNorm();
        return 0.5 * (static_cast<double>(output.size()) * (std::log(*tau) - kLog2Pi) - *tau * sq);
    }
    const std::size_t c = class_index(target(0), static_cast<std::size_t>(output.size()));
    const double mx = output.maxCoeff();
    const double lse = mx + std::log((output.array() - mx).exp().sum());
    return output(static_cast<Eigen::Index>(c)) - lse;
}

double log_likelihood_batch(const MlpArchitecture& arch, const Matrix& outputs, const Matrix& targets,
                            std::optional<double> tau)
{
    double total = 0.0;
    for (Eigen::Index i = 0; i < outputs.rows(); ++i) {
        total += log_likelihood(arch, outputs.row(i).transpose(), targets.row(i).transpose(), tau);
    }
    return total;
}

Matrix log_likelihood_grad(const MlpArchitecture& arch, const Matrix& outputs, const Matrix& targets,
                           std::optional<double> tau)
{
    if (targets.rows() != outputs.rows()) {
        throw DimensionMismatch("log_likelihood_grad: row count mismatch");
    }
    if (arch.likelihood == Likelihood::gaussian) {
        require_tau(tau);
        if (targets.cols() != outputs.cols()) {
            throw DimensionMismatch("gaussian target/output width mismatch");
        }
        return *tau * (targets - outputs);
    }
    Matrix g(outputs.rows(), outputs.cols());
    for (Eigen::Index i = 0; i < outputs.rows(); ++i) {
        const Vector p = softmax(outputs.row(i).transpose());
        g.row(i) = -p.transpose();
        g(i, static_cast<Eigen::Index>(class_index(targets(i, 0), static_cast<std::size_t>(outputs.cols())))) += 1.0;
    }
    return g;
}

double expected_gaussian_ll(const Vector& output, const Vector& target, const GammaPosterior& q)
{
    q.validate();
    if (target.size() != output.size()) {
        throw DimensionMismatch("expected_gaussian_ll: target/output length mismatch");
    }
    const double sq = (target - output).squaredNorm();
    const double k = static_cast<double>(output.size());
    return 0.5 * (k * (digamma(q.alpha) - std::log(q.beta) - kLog2Pi) - q.mean() * sq);
}

Vector sample_targets(const MlpArchitecture& arch, const Vector& output, std::optional<double> tau, Rng& rng)
{
    return sample_targets_batch(arch, Matrix(output.transpose()), tau, rng).row(0).transpose();
}

Matrix sample_targets_batch(const MlpArchitecture& arch, const Matrix& outputs, std::optional<double> tau, Rng& rng)
{
    if (arch.likelihood == Likelihood::gaussian) {
        require_tau(tau);
        const double sd = 1.0 / std::sqrt(*tau);
        Matrix y(outputs.rows(), outputs.cols());
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
            for (Eigen::Index j = 0; j < y.cols(); ++j) {
                y(i, j) = outputs(i, j) + sd * rng.normal();
            }
        }
        return y;
    }
    Matrix y(outputs.rows(), 1);
    for (Eigen::Index i = 0; i < outputs.rows(); ++i) {
        const Vector p = softmax(outputs.row(i).transpose());
        const double u = rng.uniform();
        double acc = 0.0;
        Eigen::Index c = p.size() - 1;
        for (Eigen::Index k = 0; k < p.size(); ++k) {
            acc += p(k);
            if (u < acc) {
                c = k;
                break;
            }
        }
        y(i, 0) = static_cast<double>(c);
    }
    return y;
}

}  // namespace nng
