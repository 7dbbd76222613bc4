#include "phoenix/optim.hpp"

#include <cmath>

namespace phoenix {

namespace {

void check_grads(const TensorMap& params, const TensorMap& grads) {
    for (const auto& [name, p] : params) {
        auto it = grads.find(name);
        if (it == grads.end()) throw ArgumentError("missing gradient for parameter '" + name + "'");
        if (it->second.shape() != p.shape()) {
            throw ShapeError("gradient for '" + name + "' has shape " + shape_string(it->second.shape()) +
                             ", parameter has " + shape_string(p.shape()));
        }
        if (!it->second.all_finite()) throw NumericError("non-finite gradient for parameter '" + name + "'");
    }
}

}  // namespace

void adam_step(TensorMap& params, const TensorMap& grads, AdamState& state) {
    check_grads(params, grads);
    const std::uint64_t step = state.step_count + 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(step));
    for (auto& [name, p] : params) {
        const Tensor& g = grads.at(name);
        auto [m_it, m_new] = state.first_moment.try_emplace(name, p.shape(), 0.0f);
        auto [v_it, v_new] = state.second_moment.try_emplace(name, p.shape(), 0.0f);
        Tensor& m = m_it->second;
        Tensor& v = v_it->second;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g[i];
            const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            p[i] = static_cast<float>(p[i] - state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon));
        }
    }
    state.step_count = step;
}

void sgd_step(TensorMap& params, const TensorMap& grads, double learning_rate) {
    check_grads(params, grads);
    for (auto& [name, p] : params) {
        const Tensor& g = grads.at(name);
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] = static_cast<float>(p[i] - learning_rate * static_cast<double>(g[i]));
        }
    }
}

}  // namespace phoenix
