#include <catch2/catch_amalgamated.hpp>

#include "agrigen/rng.hpp"
#include "agrigen/schedule.hpp"

using namespace agrigen;

TEST_CASE("linear schedule construction", "[schedule]") {
    SECTION("single step") {
        NoiseSchedule s = make_linear_schedule(1, 0.5, 0.5);
        REQUIRE(s.betas == std::vector<double>{0.5});
        REQUIRE(s.alpha_bars == std::vector<double>{0.5});
    }
    SECTION("three steps against a product-loop oracle") {
        NoiseSchedule s = make_linear_schedule(3, 0.1, 0.3);
        REQUIRE(s.betas[0] == Catch::Approx(0.1));
        REQUIRE(s.betas[1] == Catch::Approx(0.2));
        REQUIRE(s.betas[2] == Catch::Approx(0.3));
        // oracle: running product of (1 - beta_t)
        double prod = 1.0;
        for (int t = 0; t < 3; ++t) {
            prod *= 1.0 - s.betas[static_cast<size_t>(t)];
            REQUIRE(s.alpha_bars[static_cast<size_t>(t)] == Catch::Approx(prod).epsilon(1e-14));
        }
        REQUIRE(s.alpha_bars[0] == Catch::Approx(0.9));
        REQUIRE(s.alpha_bars[1] == Catch::Approx(0.72));
        REQUIRE(s.alpha_bars[2] == Catch::Approx(0.504));
    }
    SECTION("rejects invalid arguments") {
        REQUIRE_THROWS_AS(make_linear_schedule(0, 0.1, 0.2), RuntimeError);
        REQUIRE_THROWS_AS(make_linear_schedule(2, 0.0, 0.1), RuntimeError);
        REQUIRE_THROWS_AS(make_linear_schedule(2, 0.1, 1.0), RuntimeError);
        REQUIRE_THROWS_AS(make_linear_schedule(2, 0.3, 0.1), RuntimeError);
    }
}

TEST_CASE("schedule invariants", "[schedule]") {
    NoiseSchedule s = default_schedule(50);
    for (int t = 1; t <= s.T; ++t) {
        REQUIRE(s.beta(t) > 0.0);
        REQUIRE(s.beta(t) < 1.0);
        REQUIRE(s.alpha(t) == 1.0 - s.beta(t));
        REQUIRE(s.alpha_bar(t) > 0.0);
        REQUIRE(s.alpha_bar(t) < 1.0);
        if (t > 1) {
            REQUIRE(s.alpha_bar(t) < s.alpha_bar(t - 1));
            // signal-to-noise ratio strictly decreasing
            const double snr_prev = s.alpha_bar(t - 1) / (1.0 - s.alpha_bar(t - 1));
            const double snr = s.alpha_bar(t) / (1.0 - s.alpha_bar(t));
            REQUIRE(snr < snr_prev);
        }
    }
    REQUIRE(s.alpha_bar(s.T) < s.alpha_bar(1));
}

TEST_CASE("forward_sample examples", "[schedule]") {
    // schedule with abar_1 = 0.5
    NoiseSchedule s = make_linear_schedule(1, 0.5, 0.5);
    Tensor x0 = Tensor::full({1, 1, 1}, 1.0);
    Tensor eps = Tensor::zeros({1, 1, 1});
    Tensor xt = forward_sample(x0, 1, eps, s);
    REQUIRE(xt[0] == Catch::Approx(0.70710678).epsilon(1e-8));

    // zero-signal case: output is sqrt(1-abar_t) * eps
    NoiseSchedule s3 = make_linear_schedule(3, 0.1, 0.3);
    Tensor z = Tensor::zeros({2, 2, 2});
    Tensor e = Tensor::full({2, 2, 2}, 1.7);
    for (int t = 1; t <= 3; ++t) {
        Tensor out = forward_sample(z, t, e, s3);
        for (int64_t i = 0; i < out.size(); ++i)
            REQUIRE(out[i] == Catch::Approx(std::sqrt(1.0 - s3.alpha_bar(t)) * 1.7).epsilon(1e-12));
    }

    REQUIRE_THROWS_AS(forward_sample(x0, 2, eps, s), RuntimeError);
    REQUIRE_THROWS_AS(forward_sample(x0, 1, Tensor::zeros({2, 1, 1}), s), ShapeError);
}

TEST_CASE("forward_step examples", "[schedule]") {
    NoiseSchedule s = make_linear_schedule(1, 0.5, 0.5);
    Tensor one = Tensor::full({1}, 1.0);
    Tensor zero = Tensor::zeros({1});
    REQUIRE(forward_step(one, 1, zero, s)[0] == Catch::Approx(0.70710678).epsilon(1e-8));

    NoiseSchedule s25 = make_linear_schedule(1, 0.25, 0.25);
    REQUIRE(forward_step(zero, 1, one, s25)[0] == Catch::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("closed-form marginal matches iterated chain moments", "[schedule][slow]") {
    // Monte-Carlo oracle: iterate the per-step kernel and compare pooled
    // mean/variance against the closed form at 3 sigma.
    NoiseSchedule s = make_linear_schedule(3, 0.1, 0.3);
    Rng data_rng(101);
    Tensor x0 = data_rng.normal_tensor({4, 8, 8});
    const int t_target = 3;
    const int trials = 10000;
    const int64_t n = x0.size();

    Rng rng(202);
    double sum = 0.0, sum_sq = 0.0, sum_centered_sq = 0.0;
    for (int k = 0; k < trials; ++k) {
        Tensor x = x0;
        for (int t = 1; t <= t_target; ++t) {
            Tensor e = rng.normal_tensor(x0.shape);
            x = forward_step(x, t, e, s);
        }
        const double ab = s.alpha_bar(t_target);
        for (int64_t i = 0; i < n; ++i) {
            const double centered = x[i] - std::sqrt(ab) * x0[i];
            sum += centered;
            sum_sq += x[i];
            sum_centered_sq += centered * centered;
        }
    }
    (void)sum_sq;
    const double ab = s.alpha_bar(t_target);
    const double var_theory = 1.0 - ab;
    const int64_t N = static_cast<int64_t>(trials) * n;

    // pooled mean of (x_t - sqrt(ab) x0) should be 0 within 3 sigma
    const double mean_c = sum / static_cast<double>(N);
    const double se_mean = std::sqrt(var_theory / static_cast<double>(N));
    REQUIRE(std::abs(mean_c) < 3.0 * se_mean);

    // pooled variance should match 1 - abar within 3 sigma
    const double var_hat = sum_centered_sq / static_cast<double>(N);
    const double se_var = var_theory * std::sqrt(2.0 / static_cast<double>(N - 1));
    REQUIRE(std::abs(var_hat - var_theory) < 3.0 * se_var);
}

TEST_CASE("reverse_step exact-noise reconstruction at t=1", "[schedule]") {
    NoiseSchedule s = default_schedule(50);
    Rng rng(303);
    Tensor x0 = rng.normal_tensor({4, 4, 4});
    Tensor eps = rng.normal_tensor({4, 4, 4});
    Tensor x1 = forward_sample(x0, 1, eps, s);
    Tensor rec = reverse_step(x1, 1, eps, s, Tensor::zeros({4, 4, 4}));
    REQUIRE(max_abs_diff(rec, x0) < 1e-6);
}

TEST_CASE("reverse_step edge cases", "[schedule]") {
    NoiseSchedule s = default_schedule(10);
    Tensor zero = Tensor::zeros({2, 2, 2});
    SECTION("zero fixed point") {
        Tensor out = reverse_step(zero, 3, zero, s, zero);
        REQUIRE(out.norm() == 0.0);
    }
    SECTION("nonzero noise at t=1 rejected") {
        Tensor noise = Tensor::full({2, 2, 2}, 0.1);
        REQUIRE_THROWS_AS(reverse_step(zero, 1, zero, s, noise), RuntimeError);
    }
    SECTION("t out of range") {
        REQUIRE_THROWS_AS(reverse_step(zero, 0, zero, s, zero), RuntimeError);
        REQUIRE_THROWS_AS(reverse_step(zero, 11, zero, s, zero), RuntimeError);
    }
}

TEST_CASE("ancestral inversion with oracle denoiser recovers x0", "[schedule][slow]") {
    // One-pixel latent, oracle denoiser that reports the exact marginal noise
    // at every step. The terminal mean over trials must sit within 3 sigma of
    // x0.
    NoiseSchedule s = make_linear_schedule(8, 0.02, 0.25);
    const double x0 = 0.8;
    const int trials = 10000;
    Rng rng(404);
    double sum = 0.0, sum_sq = 0.0;
    for (int k = 0; k < trials; ++k) {
        Tensor x({1}, std::vector<double>{0.0});
        {
            Tensor e({1}, std::vector<double>{rng.normal()});
            Tensor x0t = Tensor::full({1}, x0);
            x = forward_sample(x0t, s.T, e, s);
        }
        for (int t = s.T; t >= 1; --t) {
            const double ab = s.alpha_bar(t);
            // oracle: the marginal noise implied by the current state
            Tensor eps_hat({1}, std::vector<double>{(x[0] - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab)});
            Tensor noise({1}, std::vector<double>{t > 1 ? rng.normal() : 0.0});
            x = reverse_step(x, t, eps_hat, s, noise);
        }
        sum += x[0];
        sum_sq += x[0] * x[0];
    }
    const double mean = sum / trials;
    const double var = std::max(0.0, sum_sq / trials - mean * mean);
    const double se = std::sqrt(var / trials);
    // the exact-noise oracle collapses the terminal spread, so allow a small
    // absolute floor on top of the 3-sigma band
    REQUIRE(std::abs(mean - x0) < 3.0 * se + 1e-9);
}
