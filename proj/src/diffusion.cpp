#include "phoenix/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "phoenix/parallel.hpp"

namespace phoenix {

std::size_t NoiseSchedule::index(int t) const {
    if (t < 1 || t > T) {
        throw ArgumentError("step index " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    }
    return static_cast<std::size_t>(t - 1);
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
    NoiseSchedule s;
    s.T = static_cast<int>(betas.size());
    s.beta = std::move(betas);
    s.alpha.resize(s.beta.size());
    s.alpha_bar.resize(s.beta.size());
    s.posterior_variance.resize(s.beta.size());
    double prev = 1.0;
    for (std::size_t i = 0; i < s.beta.size(); ++i) {
        s.alpha[i] = 1.0 - s.beta[i];
        s.alpha_bar[i] = prev * s.alpha[i];
        s.posterior_variance[i] = i == 0 ? s.beta[0] : s.beta[i] * (1.0 - prev) / (1.0 - s.alpha_bar[i]);
        prev = s.alpha_bar[i];
    }
    return s;
}

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 2) throw ArgumentError("linear schedule needs T >= 2");
    if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0)) {
        throw ArgumentError("linear schedule needs 0 < beta_start < beta_end < 1");
    }
    std::vector<double> betas(static_cast<std::size_t>(T));
    for (int t = 1; t <= T; ++t) {
        const double f = static_cast<double>(t - 1) / static_cast<double>(T - 1);
        betas[static_cast<std::size_t>(t - 1)] = std::lerp(beta_start, beta_end, f);
    }
    return NoiseSchedule::from_betas(std::move(betas));
}

NoiseSchedule make_cosine_schedule(int T, double s) {
    if (T < 2) throw ArgumentError("cosine schedule needs T >= 2");
    if (!(s > 0.0)) throw ArgumentError("cosine schedule offset must be positive");
    auto f = [&](int t) {
        const double c = std::cos((static_cast<double>(t) / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
        return c * c;
    };
    const double f0 = f(0);
    std::vector<double> betas(static_cast<std::size_t>(T));
    double prev = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double ab = f(t) / f0;
        betas[static_cast<std::size_t>(t - 1)] = std::min(1.0 - ab / prev, 0.999);
        prev = ab;
    }
    return NoiseSchedule::from_betas(std::move(betas));
}

namespace {

void require_congruent(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                         " differ");
    }
}

// out = a * x + b * y elementwise, coefficients in double.
Tensor axpby(double a, const Tensor& x, double b, const Tensor& y) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<float>(a * x[i] + b * y[i]);
    }
    return out;
}

}  // namespace

Tensor q_sample_step(const Tensor& x_prev, int t, const NoiseSchedule& schedule, const Tensor& noise) {
    require_congruent(x_prev, noise, "q_sample_step");
    const double beta = schedule.beta_at(t);
    return axpby(std::sqrt(1.0 - beta), x_prev, std::sqrt(beta), noise);
}

Tensor q_sample_closed(const Tensor& x0, int t, const NoiseSchedule& schedule, const Tensor& noise) {
    require_congruent(x0, noise, "q_sample_closed");
    if (t < 0 || t > schedule.T) throw ArgumentError("step index " + std::to_string(t) + " out of range");
    const double ab = schedule.alpha_bar_at(t);
    return axpby(std::sqrt(ab), x0, std::sqrt(1.0 - ab), noise);
}

Tensor q_sample_closed(const Tensor& x0, std::span<const int> t, const NoiseSchedule& schedule, const Tensor& noise) {
    require_congruent(x0, noise, "q_sample_closed");
    const std::size_t N = x0.dim(0);
    if (t.size() != N) throw ShapeError("q_sample_closed needs one step index per sample");
    const std::size_t per = x0.size() / N;
    Tensor out(x0.shape());
    for (std::size_t n = 0; n < N; ++n) {
        if (t[n] < 0 || t[n] > schedule.T) throw ArgumentError("step index " + std::to_string(t[n]) + " out of range");
        const double ab = schedule.alpha_bar_at(t[n]);
        const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
        for (std::size_t i = n * per; i < (n + 1) * per; ++i) out[i] = static_cast<float>(a * x0[i] + b * noise[i]);
    }
    return out;
}

template <typename T>
BasicGraph<T> training_loss_graph(const DenoiserConfig& config, const BasicTensor<T>& x0, std::span<const int> t,
                                  const BasicTensor<T>& noise, const NoiseSchedule& schedule) {
    if (x0.shape() != noise.shape()) throw ShapeError("training_loss: noise shape differs from x0");
    const std::size_t N = x0.dim(0);
    if (t.size() != N) throw ShapeError("training_loss: need one step index per sample");
    const std::size_t per = x0.size() / N;
    BasicTensor<T> x_t(x0.shape());
    std::vector<T> tv(N);
    for (std::size_t n = 0; n < N; ++n) {
        if (t[n] < 1 || t[n] > schedule.T) throw ArgumentError("training step index out of range");
        const double ab = schedule.alpha_bar_at(t[n]);
        const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
        for (std::size_t i = n * per; i < (n + 1) * per; ++i) x_t[i] = static_cast<T>(a * x0[i] + b * noise[i]);
        tv[n] = static_cast<T>(t[n]);
    }
    BasicGraph<T> g;
    NodeId x = g.constant(std::move(x_t), "x_t");
    NodeId tn = g.constant(BasicTensor<T>({N}, std::move(tv)), "t");
    NodeId eps = build_unet_graph(g, config, x, tn);
    g.set_output(g.mse(eps, g.constant(noise, "noise")));
    return g;
}

template BasicGraph<float> training_loss_graph<float>(const DenoiserConfig&, const Tensor&, std::span<const int>,
                                                      const Tensor&, const NoiseSchedule&);
template BasicGraph<double> training_loss_graph<double>(const DenoiserConfig&, const TensorD&, std::span<const int>,
                                                        const TensorD&, const NoiseSchedule&);

Graph training_loss(const DenoiserModel& model, const Tensor& x0, std::span<const int> t, const Tensor& noise,
                    const NoiseSchedule& schedule) {
    return training_loss_graph<float>(model.config(), x0, t, noise, schedule);
}

TrainingDraw draw_training_noise(Rng& rng, const Shape& batch_shape, int T) {
    TrainingDraw d;
    d.t.resize(batch_shape.at(0));
    for (int& t : d.t) t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(T)));
    d.noise = Tensor(batch_shape);
    for (float& v : d.noise.data()) v = static_cast<float>(rng.normal());
    return d;
}

Tensor p_sample_from_eps(const Tensor& x_t, const Tensor& eps, int t, const NoiseSchedule& schedule,
                         const Tensor& noise) {
    require_congruent(x_t, eps, "p_sample_step");
    require_congruent(x_t, noise, "p_sample_step");
    const double beta = schedule.beta_at(t);
    if (t == 1 && std::any_of(noise.data().begin(), noise.data().end(), [](float v) { return v != 0.0f; })) {
        throw ArgumentError("p_sample_step at t = 1 must receive zero noise");
    }
    const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha_at(t));
    const double eps_coef = beta / std::sqrt(1.0 - schedule.alpha_bar_at(t));
    const double sigma = std::sqrt(schedule.posterior_variance_at(t));
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<float>(inv_sqrt_alpha * (x_t[i] - eps_coef * eps[i]) + sigma * noise[i]);
    }
    return out;
}

Tensor p_sample_step(const DenoiserModel& model, const Tensor& x_t, int t, const NoiseSchedule& schedule,
                     const Tensor& noise) {
    schedule.beta_at(t);
    std::vector<int> steps(x_t.dim(0), t);
    return p_sample_from_eps(x_t, predict_noise(model, x_t, steps), t, schedule, noise);
}

Tensor generate(const DenoiserModel& model, const NoiseSchedule& schedule, std::size_t count, std::uint64_t seed,
                std::size_t workers) {
    if (count < 1) throw ArgumentError("generate needs count >= 1");
    const auto& c = model.config();
    const std::size_t per = c.image_channels * c.image_side * c.image_side;
    constexpr std::size_t kChunk = 64;
    const std::size_t chunks = (count + kChunk - 1) / kChunk;
    Tensor out({count, c.image_channels, c.image_side, c.image_side});
    const TensorMap params = model.params();

    parallel_for(chunks, workers, [&](std::size_t chunk) {
        const std::size_t first = chunk * kChunk;
        const std::size_t n = std::min(kChunk, count - first);
        const Shape shape{n, c.image_channels, c.image_side, c.image_side};
        std::vector<Rng> rngs;
        rngs.reserve(n);
        for (std::size_t i = 0; i < n; ++i) rngs.emplace_back(derive_seed(seed, {kSampleStream, first + i}));

        Tensor x(shape);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < per; ++j) x[i * per + j] = static_cast<float>(rngs[i].normal());
        }
        Graph g;
        NodeId xn = g.input("__x_t");
        NodeId tn = g.input("__t");
        g.set_output(build_unet_graph(g, c, xn, tn));
        TensorMap bindings = params;
        for (int t = schedule.T; t >= 1; --t) {
            bindings.insert_or_assign("__x_t", x);
            bindings.insert_or_assign("__t", Tensor({n}, static_cast<float>(t)));
            const Tensor& eps = g.forward(bindings);
            Tensor noise(shape);
            if (t > 1) {
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < per; ++j) noise[i * per + j] = static_cast<float>(rngs[i].normal());
                }
            }
            x = p_sample_from_eps(x, eps, t, schedule, noise);
        }
        for (std::size_t i = 0; i < n * per; ++i) out[first * per + i] = std::clamp(x[i], -1.0f, 1.0f);
    });
    return out;
}

}  // namespace phoenix
