#pragma once

#include <cstdint>

#include "phoenix/tensor.hpp"

namespace phoenix {

struct AdamState {
    TensorMap first_moment;
    TensorMap second_moment;
    std::uint64_t step_count = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double learning_rate = 1e-4;
};

// One bias-corrected Adam update of every parameter in `params`. Moments are
// created lazily (zero) on the first step. Throws ArgumentError for a missing
// gradient, ShapeError for incongruent shapes and NumericError for non-finite
// gradients; on error nothing is modified.
void adam_step(TensorMap& params, const TensorMap& grads, AdamState& state);

// Plain gradient descent, p -= lr * g. Used for exact-equivalence tests.
void sgd_step(TensorMap& params, const TensorMap& grads, double learning_rate);

}  // namespace phoenix
