#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "garmentgen/errors.hpp"
#include "garmentgen/tensor.hpp"

namespace ggen {

// Variance schedule over T discrete steps. Index convention: step t runs
// 1..T and maps to vector slot t-1; alpha_bar_at(0) == 1 so a final sampler
// step to t_prev = 0 returns the clean estimate.
template <typename T>
struct NoiseScheduleT {
    int steps = 0;
    std::vector<T> beta;
    std::vector<T> alpha;
    std::vector<T> alpha_bar;

    T alpha_bar_at(int t) const {
        if (t < 0 || t > steps)
            throw StepError("step " + std::to_string(t) + " outside schedule [0," +
                            std::to_string(steps) + "]");
        return t == 0 ? T(1) : alpha_bar[static_cast<size_t>(t - 1)];
    }
};

using NoiseSchedule = NoiseScheduleT<float>;

template <typename T>
NoiseScheduleT<T> linear_schedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw ConfigError("schedule needs at least 1 step");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
        throw ConfigError("schedule betas must satisfy 0 < beta_start <= beta_end < 1, got " +
                          std::to_string(beta_start) + ".." + std::to_string(beta_end));
    NoiseScheduleT<T> s;
    s.steps = steps;
    s.beta.resize(static_cast<size_t>(steps));
    s.alpha.resize(static_cast<size_t>(steps));
    s.alpha_bar.resize(static_cast<size_t>(steps));
    double run = 1.0;
    double prev = 2.0;
    for (int i = 0; i < steps; ++i) {
        const double frac = steps == 1 ? 0.0 : double(i) / double(steps - 1);
        const double b = beta_start + (beta_end - beta_start) * frac;
        run *= 1.0 - b;
        s.beta[static_cast<size_t>(i)] = static_cast<T>(b);
        s.alpha[static_cast<size_t>(i)] = static_cast<T>(1.0 - b);
        s.alpha_bar[static_cast<size_t>(i)] = static_cast<T>(run);
        if (run >= prev) throw ConfigError("alpha_bar is not strictly decreasing");
        prev = run;
    }
    return s;
}

// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps. Pure data prep;
// never recorded on a tape.
template <typename T>
TensorT<T> add_noise(const TensorT<T>& z0, const TensorT<T>& eps, int t,
                     const NoiseScheduleT<T>& sched) {
    detail::check_same_shape(z0, eps, "add_noise");
    if (t < 1 || t > sched.steps)
        throw StepError("add_noise: step " + std::to_string(t) + " outside [1," +
                        std::to_string(sched.steps) + "]");
    const T ab = sched.alpha_bar_at(t);
    const T a = std::sqrt(ab);
    const T b = std::sqrt(T(1) - ab);
    TensorT<T> out = TensorT<T>::zeros(z0.shape);
    out.no_grad = true;
    for (size_t i = 0; i < out.data->size(); ++i)
        (*out.data)[i] = a * (*z0.data)[i] + b * (*eps.data)[i];
    return out;
}

// Mean squared error over all elements; differentiable w.r.t. the prediction.
template <typename T>
TensorT<T> denoising_loss(const TensorT<T>& eps_pred, const TensorT<T>& eps) {
    detail::check_same_shape(eps_pred, eps, "denoising_loss");
    TensorT<T> diff = sub(eps_pred, eps);
    return mean_all(mul(diff, diff));
}

// Deterministic DDIM-style update: invert to the clean estimate, optionally
// clip it to the image range, then re-noise to t_prev. t_prev = 0 returns the
// clean estimate itself.
template <typename T>
TensorT<T> sampler_step(const TensorT<T>& z_t, const TensorT<T>& eps_hat, int t, int t_prev,
                        const NoiseScheduleT<T>& sched, bool clip_z0 = true) {
    detail::check_same_shape(z_t, eps_hat, "sampler_step");
    if (t_prev >= t)
        throw StepError("sampler_step: t_prev " + std::to_string(t_prev) +
                        " must be below t " + std::to_string(t));
    if (t < 1 || t > sched.steps)
        throw StepError("sampler_step: step " + std::to_string(t) + " outside [1," +
                        std::to_string(sched.steps) + "]");
    if (t_prev < 0) throw StepError("sampler_step: negative t_prev");

    const T ab_t = sched.alpha_bar_at(t);
    const T ab_p = sched.alpha_bar_at(t_prev);
    const T inv_sqrt_ab = T(1) / std::sqrt(ab_t);
    const T sig_t = std::sqrt(T(1) - ab_t);
    const T a = std::sqrt(ab_p);
    const T b = std::sqrt(T(1) - ab_p);

    TensorT<T> out = TensorT<T>::zeros(z_t.shape);
    out.no_grad = true;
    for (size_t i = 0; i < out.data->size(); ++i) {
        T z0 = ((*z_t.data)[i] - sig_t * (*eps_hat.data)[i]) * inv_sqrt_ab;
        if (clip_z0) z0 = std::min(T(1), std::max(T(-1), z0));
        (*out.data)[i] = a * z0 + b * (*eps_hat.data)[i];
    }
    return out;
}

// Uniformly spaced descending step grid for few-step sampling:
// round(T*k/steps) for k = steps..0, deduplicated. Always ends at 0.
inline std::vector<int> sampling_step_grid(int total_steps, int steps) {
    if (steps < 1) throw ConfigError("sampling needs at least 1 step");
    std::vector<int> grid;
    for (int k = steps; k >= 0; --k) {
        const int t = static_cast<int>(std::llround(double(total_steps) * k / steps));
        if (grid.empty() || t < grid.back()) grid.push_back(t);
    }
    if (grid.front() != total_steps) grid.insert(grid.begin(), total_steps);
    return grid;
}

}  // namespace ggen
