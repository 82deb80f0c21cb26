#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "nng/posterior.hpp"

namespace nng {

/// Standardization applied to inputs and targets before training.
struct Scaling {
    Vector featureMean;
    Vector featureStd;
    Vector targetMean;
    Vector targetStd;
};

/// Everything needed to resume or evaluate a trained posterior.
struct Checkpoint {
    Posterior posterior;
    NoiseModel noise;
    std::size_t step = 0;
    std::uint64_t seed = 0;
    std::optional<Scaling> scaling;
};

/// JSON text archive. Doubles are written in shortest round-trip form, so
/// load(save(c)) reproduces every value bit for bit.
std::string checkpoint_to_string(const Checkpoint& c);
Checkpoint checkpoint_from_string(const std::string& text);

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace nng
