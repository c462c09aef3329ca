#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "agrigen/tensor.hpp"

namespace agrigen {

// ----------------------------------------------------------------------------
// Forward-corruption schedule. Timesteps are 1-based: t in [1, T]. All arrays
// are kept in 64-bit so the cumulative alpha products stay accurate.
// ----------------------------------------------------------------------------

struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;       // beta_t
    std::vector<double> alphas;      // 1 - beta_t
    std::vector<double> alpha_bars;  // running product of alphas

    // Descriptor used for serialization; arrays are regenerated on load.
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::string family = "linear";

    double beta(int t) const { return betas[static_cast<size_t>(t - 1)]; }
    double alpha(int t) const { return alphas[static_cast<size_t>(t - 1)]; }
    double alpha_bar(int t) const { return alpha_bars[static_cast<size_t>(t - 1)]; }

    void check_t(int t) const {
        if (t < 1 || t > T) throw RuntimeError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    }
};

/// Linear beta schedule, endpoints inclusive. With T == 1 the single beta is
/// beta_start.
inline NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw RuntimeError("schedule needs T >= 1");
    if (!(beta_start > 0.0 && beta_start < 1.0) || !(beta_end > 0.0 && beta_end < 1.0))
        throw RuntimeError("betas must lie in the open interval (0, 1)");
    if (beta_start > beta_end) throw RuntimeError("beta_start must not exceed beta_end");

    NoiseSchedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.betas.resize(static_cast<size_t>(T));
    s.alphas.resize(static_cast<size_t>(T));
    s.alpha_bars.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        const double frac = T > 1 ? static_cast<double>(t) / static_cast<double>(T - 1) : 0.0;
        const double b = beta_start + (beta_end - beta_start) * frac;
        s.betas[static_cast<size_t>(t)] = b;
        s.alphas[static_cast<size_t>(t)] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bars[static_cast<size_t>(t)] = prod;
    }
    return s;
}

/// Desk-scale default: linear betas rescaled so total corruption at T steps
/// matches the usual 1000-step schedule. Endpoints clamped into (0, 1) for
/// very short schedules.
inline NoiseSchedule default_schedule(int T = 50) {
    const double r = 1000.0 / static_cast<double>(T);
    const double hi = 0.999;
    return make_linear_schedule(T, std::min(1e-4 * r, hi), std::min(0.02 * r, hi));
}

/// Closed-form marginal of the forward process:
/// x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
inline Tensor forward_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
    s.check_t(t);
    check_same_shape(x0, eps, "forward_sample");
    const double ab = s.alpha_bar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Tensor out = x0;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

/// Single forward step: x_t = sqrt(1 - beta_t) * x_{t-1} + sqrt(beta_t) * eps_t.
inline Tensor forward_step(const Tensor& x_prev, int t, const Tensor& eps_t, const NoiseSchedule& s) {
    s.check_t(t);
    check_same_shape(x_prev, eps_t, "forward_step");
    const double b = s.beta(t);
    const double ca = std::sqrt(1.0 - b), cb = std::sqrt(b);
    Tensor out = x_prev;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = ca * x_prev[i] + cb * eps_t[i];
    return out;
}

/// One ancestral reverse step with fixed variance sigma_t^2 = beta_t.
/// The final step (t == 1) must receive all-zero noise.
inline Tensor reverse_step(const Tensor& x_t, int t, const Tensor& eps_hat, const NoiseSchedule& s,
                           const Tensor& noise) {
    s.check_t(t);
    check_same_shape(x_t, eps_hat, "reverse_step eps_hat");
    check_same_shape(x_t, noise, "reverse_step noise");
    if (t == 1) {
        for (double v : noise.data)
            if (v != 0.0) throw RuntimeError("reverse_step: noise must be zero at t=1");
    }
    const double beta = s.beta(t);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(t));
    const double coef = beta / std::sqrt(1.0 - s.alpha_bar(t));
    const double sigma = std::sqrt(beta);
    Tensor out = x_t;
    for (int64_t i = 0; i < out.size(); ++i)
        out[i] = inv_sqrt_alpha * (x_t[i] - coef * eps_hat[i]) + sigma * noise[i];
    return out;
}

} // namespace agrigen
