// Shared fixtures: a default task and a model trained on it, built once per
// test binary under a fixed seed.
#pragma once

#include "gradfisher/config.hpp"
#include "gradfisher/fedsim.hpp"
#include "gradfisher/model.hpp"
#include "gradfisher/presets.hpp"

namespace testsupport {

using namespace gradfisher;

inline const ExperimentConfig& default_config() {
    static const ExperimentConfig cfg{};
    return cfg;
}

inline const ExperimentSetup& trained_setup() {
    static const ExperimentSetup setup = make_setup(default_config());
    return setup;
}

// Small random model/example pairs for gradient checks; dims deliberately
// modest so finite differencing stays fast.
inline ModelParams random_model(RandomSource& rng, const Architecture& arch) {
    RandomSource local = rng.stream(rng.next_u64());
    return make_model(arch, local);
}

inline Example random_example(RandomSource& rng, std::size_t input_dim,
                              std::size_t n_classes) {
    Example ex;
    ex.x = gaussian_sample(rng, 0.0, 1.0, input_dim);
    ex.y = static_cast<std::size_t>(rng.next_below(n_classes));
    return ex;
}

} // namespace testsupport
