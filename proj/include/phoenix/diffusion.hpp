#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "phoenix/denoiser.hpp"
#include "phoenix/graph.hpp"
#include "phoenix/rng.hpp"
#include "phoenix/tensor.hpp"

namespace phoenix {

// Per-step variances and derived quantities. Vectors are indexed by t-1 for
// steps t = 1..T; use the accessors to index by t directly.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> posterior_variance;

    double beta_at(int t) const { return beta.at(index(t)); }
    double alpha_at(int t) const { return alpha.at(index(t)); }
    // alpha_bar_at(0) == 1 by convention.
    double alpha_bar_at(int t) const { return t == 0 ? 1.0 : alpha_bar.at(index(t)); }
    double posterior_variance_at(int t) const { return posterior_variance.at(index(t)); }

    // Recomputes alpha, alpha_bar and posterior_variance from beta.
    static NoiseSchedule from_betas(std::vector<double> betas);

   private:
    std::size_t index(int t) const;
};

// beta_t = lerp(beta_start, beta_end, (t-1)/(T-1)); endpoints are exact.
NoiseSchedule make_linear_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02);

// alpha_bar_t = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2),
// beta_t = min(1 - alpha_bar_t/alpha_bar_{t-1}, 0.999).
NoiseSchedule make_cosine_schedule(int T, double s = 0.008);

// sqrt(1-beta_t) * x_prev + sqrt(beta_t) * noise
Tensor q_sample_step(const Tensor& x_prev, int t, const NoiseSchedule& schedule, const Tensor& noise);

// sqrt(alpha_bar_t) * x0 + sqrt(1-alpha_bar_t) * noise; t = 0 returns x0.
Tensor q_sample_closed(const Tensor& x0, int t, const NoiseSchedule& schedule, const Tensor& noise);

// Batch variant: per-sample step indices t[n] for the leading axis.
Tensor q_sample_closed(const Tensor& x0, std::span<const int> t, const NoiseSchedule& schedule, const Tensor& noise);

// Graph computing mse(eps_theta(x_t, t), noise) with x_t formed in closed
// form. Parameter leaves are the model's parameter names; evaluate it with
// graph.forward(model.params()).
template <typename T>
BasicGraph<T> training_loss_graph(const DenoiserConfig& config, const BasicTensor<T>& x0, std::span<const int> t,
                                  const BasicTensor<T>& noise, const NoiseSchedule& schedule);

Graph training_loss(const DenoiserModel& model, const Tensor& x0, std::span<const int> t, const Tensor& noise,
                    const NoiseSchedule& schedule);

// Uniform steps in [1, T] followed by standard-normal noise shaped like x0,
// drawn in that order from `rng`.
struct TrainingDraw {
    std::vector<int> t;
    Tensor noise;
};
TrainingDraw draw_training_noise(Rng& rng, const Shape& batch_shape, int T);

// Posterior-mean step given a noise prediction:
// (x_t - beta_t / sqrt(1-alpha_bar_t) * eps) / sqrt(alpha_t) + sqrt(posterior_var_t) * noise.
// At t = 1 the noise tensor must be all zeros.
Tensor p_sample_from_eps(const Tensor& x_t, const Tensor& eps, int t, const NoiseSchedule& schedule,
                         const Tensor& noise);

Tensor p_sample_step(const DenoiserModel& model, const Tensor& x_t, int t, const NoiseSchedule& schedule,
                     const Tensor& noise);

// Ancestral sampling from x_T ~ N(0, I). Sample i draws all of its noise from
// its own substream derive_seed(seed, {kSampleStream, i}), so a sample does
// not depend on `count`, batching, or `workers`. Output is clamped to [-1, 1].
Tensor generate(const DenoiserModel& model, const NoiseSchedule& schedule, std::size_t count, std::uint64_t seed,
                std::size_t workers = 1);

}  // namespace phoenix
