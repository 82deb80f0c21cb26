#pragma once

namespace nng {

/// Gamma distribution over the observation-noise precision, parameterized
/// by shape alpha and rate beta (mean alpha / beta).
struct GammaPosterior {
    double alpha = 6.0;
    double beta = 6.0;

    double mean() const { return alpha / beta; }
    /// Throws std::invalid_argument unless both parameters are positive and finite.
    void validate() const;
};

/// KL(q || prior) between two Gamma distributions.
double gamma_kl(const GammaPosterior& q, const GammaPosterior& prior);

/// Partial derivatives of gamma_kl with respect to q.alpha and q.beta.
struct GammaKlGradient {
    double dAlpha = 0.0;
    double dBeta = 0.0;
};
GammaKlGradient gamma_kl_gradient(const GammaPosterior& q, const GammaPosterior& prior);

double digamma(double x);
double trigamma(double x);

}  // namespace nng
