#include <cmath>

#include "doctest.h"
#include "phoenix/optim.hpp"

using namespace phoenix;

TEST_CASE("adam: zero gradient leaves parameters and moments at rest") {
    TensorMap params{{"w", Tensor({3}, std::vector<float>{1.0f, -2.0f, 0.5f})}};
    const TensorMap before = params;
    AdamState state;
    adam_step(params, {{"w", Tensor({3}, 0.0f)}}, state);
    CHECK(bitwise_equal(params, before));
    for (float v : state.first_moment.at("w").data()) CHECK(v == 0.0f);
    for (float v : state.second_moment.at("w").data()) CHECK(v == 0.0f);
    CHECK(state.step_count == 1);
}

TEST_CASE("adam: first step on a unit gradient moves by the learning rate") {
    TensorMap params{{"w", Tensor::scalar(1.0f)}};
    AdamState state;
    state.learning_rate = 0.1;
    adam_step(params, {{"w", Tensor::scalar(1.0f)}}, state);
    // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
    CHECK(params.at("w")[0] == doctest::Approx(0.9).epsilon(1e-7));
}

TEST_CASE("adam: moments follow the exponential-average recurrence") {
    TensorMap params{{"w", Tensor::scalar(0.25f)}};
    AdamState state;
    state.learning_rate = 0.01;
    const double g = 0.6;
    double m = 0.0, v = 0.0, p = 0.25;
    for (int step = 1; step <= 2; ++step) {
        adam_step(params, {{"w", Tensor::scalar(static_cast<float>(g))}}, state);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mhat = m / (1.0 - std::pow(0.9, step));
        const double vhat = v / (1.0 - std::pow(0.999, step));
        p -= 0.01 * mhat / (std::sqrt(vhat) + 1e-8);
        CHECK(state.step_count == static_cast<std::uint64_t>(step));
        CHECK(state.first_moment.at("w")[0] == doctest::Approx(m).epsilon(1e-6));
        CHECK(state.second_moment.at("w")[0] == doctest::Approx(v).epsilon(1e-6));
        CHECK(params.at("w")[0] == doctest::Approx(p).epsilon(1e-6));
    }
}

TEST_CASE("adam: errors leave state untouched") {
    TensorMap params{{"a", Tensor::scalar(1.0f)}, {"b", Tensor({2}, 1.0f)}};
    AdamState state;
    CHECK_THROWS_AS(adam_step(params, {{"a", Tensor::scalar(1.0f)}}, state), ArgumentError);
    CHECK_THROWS_AS(adam_step(params, {{"a", Tensor::scalar(1.0f)}, {"b", Tensor({3})}}, state), ShapeError);
    CHECK_THROWS_AS(adam_step(params, {{"a", Tensor::scalar(NAN)}, {"b", Tensor({2})}}, state), NumericError);
    CHECK(state.step_count == 0);
    CHECK(state.first_moment.empty());
    CHECK(params.at("a")[0] == 1.0f);
}

TEST_CASE("sgd: plain descent") {
    TensorMap params{{"w", Tensor({2}, std::vector<float>{1.0f, 2.0f})}};
    sgd_step(params, {{"w", Tensor({2}, std::vector<float>{0.5f, -1.0f})}}, 0.1);
    CHECK(params.at("w")[0] == doctest::Approx(0.95));
    CHECK(params.at("w")[1] == doctest::Approx(2.1));
}
