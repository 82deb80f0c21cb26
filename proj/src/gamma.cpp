#include "nng/gamma.hpp"

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include <cmath>
#include <stdexcept>
#include <string>

namespace nng {

void GammaPosterior::validate() const
{
    if (!(alpha > 0.0) || !(beta > 0.0) || !std::isfinite(alpha) || !std::isfinite(beta)) {
        throw std::invalid_argument("Gamma parameters must be positive, got alpha=" +
                                    std::to_string(alpha) + " beta=" + std::to_string(beta));
    }
}

double digamma(double x) { return boost::math::digamma(x); }

double trigamma(double x) { return boost::math::trigamma(x); }

double gamma_kl(const GammaPosterior& q, const GammaPosterior& prior)
{
    q.validate();
    prior.validate();
    const double a = q.alpha, b = q.beta, a0 = prior.alpha, b0 = prior.beta;
    return (a - a0) * digamma(a) - std::lgamma(a) + std::lgamma(a0) + a0 * (std::log(b) - std::log(b0)) +
           a * (b0 - b) / b;
}

GammaKlGradient gamma_kl_gradient(const GammaPosterior& q, const GammaPosterior& prior)
{
    q.validate();
    prior.validate();
    const double a = q.alpha, b = q.beta, a0 = prior.alpha, b0 = prior.beta;
    return {(a - a0) * trigamma(a) + b0 / b - 1.0, a0 / b - a * b0 / (b * b)};
}

}  // namespace nng
