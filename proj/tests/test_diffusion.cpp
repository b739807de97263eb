#include "garmentgen/diffusion.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ggen;

TEST(Schedule, SingleStep) {
    NoiseSchedule s = linear_schedule<float>(1, 0.5, 0.5);
    ASSERT_EQ(s.steps, 1);
    EXPECT_FLOAT_EQ(s.beta[0], 0.5f);
    EXPECT_FLOAT_EQ(s.alpha_bar[0], 0.5f);
    EXPECT_FLOAT_EQ(s.alpha_bar_at(0), 1.0f);
}

TEST(Schedule, ConventionalThousandStep) {
    NoiseSchedule s = linear_schedule<float>(1000, 1e-4, 0.02);
    // independent double-precision product
    double run = 1.0;
    for (int i = 0; i < 1000; ++i) {
        const double b = 1e-4 + (0.02 - 1e-4) * (double(i) / 999.0);
        run *= 1.0 - b;
        EXPECT_NEAR(s.alpha_bar[static_cast<size_t>(i)], run, 1e-6);
        if (i > 0) EXPECT_LT(s.alpha_bar[static_cast<size_t>(i)], s.alpha_bar[static_cast<size_t>(i - 1)]);
    }
    EXPECT_NEAR(s.alpha_bar[0], 1.0, 1e-3);
    EXPECT_LT(s.alpha_bar[999], 0.01f);
}

TEST(Schedule, InvalidRangesRejected) {
    EXPECT_THROW(linear_schedule<float>(10, 0.5, 0.1), ConfigError);  // start > end
    EXPECT_THROW(linear_schedule<float>(10, 0.0, 0.1), ConfigError);
    EXPECT_THROW(linear_schedule<float>(10, 0.1, 1.0), ConfigError);
    EXPECT_THROW(linear_schedule<float>(0, 0.1, 0.2), ConfigError);
}

namespace {

// Hand-built schedule so boundary alpha_bar values can be forced exactly.
NoiseSchedule synthetic_schedule(std::vector<float> alpha_bar) {
    NoiseSchedule s;
    s.steps = static_cast<int>(alpha_bar.size());
    s.alpha_bar = std::move(alpha_bar);
    s.beta.assign(s.alpha_bar.size(), 0.01f);
    s.alpha.assign(s.alpha_bar.size(), 0.99f);
    return s;
}

}  // namespace

TEST(AddNoise, BoundaryCases) {
    Tensor z0 = Tensor::full({1, 2, 2}, 1.0f);
    Tensor eps = Tensor::full({1, 2, 2}, -0.3f);

    NoiseSchedule pure_signal = synthetic_schedule({1.0f});
    Tensor a = add_noise(z0, eps, 1, pure_signal);
    for (int i = 0; i < a.numel(); ++i) EXPECT_FLOAT_EQ(a.at(i), 1.0f);

    NoiseSchedule pure_noise = synthetic_schedule({0.0f});
    Tensor b = add_noise(z0, eps, 1, pure_noise);
    for (int i = 0; i < b.numel(); ++i) EXPECT_FLOAT_EQ(b.at(i), -0.3f);

    NoiseSchedule quarter = synthetic_schedule({0.25f});
    Tensor zeros = Tensor::zeros({1, 2, 2});
    Tensor c = add_noise(z0, zeros, 1, quarter);
    for (int i = 0; i < c.numel(); ++i) EXPECT_FLOAT_EQ(c.at(i), 0.5f);
}

TEST(AddNoise, StepOutOfRange) {
    NoiseSchedule s = linear_schedule<float>(10, 1e-4, 0.02);
    Tensor z = Tensor::zeros({1, 2, 2});
    EXPECT_THROW(add_noise(z, z, 0, s), StepError);
    EXPECT_THROW(add_noise(z, z, 11, s), StepError);
}

TEST(Loss, ExactAndShifted) {
    SeededRng rng(4);
    Tensor a = randn<float>({3, 4, 4}, rng);
    EXPECT_FLOAT_EQ(denoising_loss(a, a).at(0), 0.0f);
    Tensor b = add_scalar(a, 1.0f);
    EXPECT_NEAR(denoising_loss(b, a).at(0), 1.0, 1e-6);
}

TEST(Loss, MatchesTwoPassFloat64Oracle) {
    SeededRng rng(5);
    Tensor a = randn<float>({3, 8, 8}, rng);
    Tensor b = randn<float>({3, 8, 8}, rng);
    double acc = 0.0;
    for (int i = 0; i < a.numel(); ++i) {
        const double d = double(a.at(i)) - double(b.at(i));
        acc += d * d;
    }
    EXPECT_NEAR(denoising_loss(a, b).at(0), acc / a.numel(), 1e-6);
}

TEST(Loss, ShapeMismatchRejected) {
    Tensor a = Tensor::zeros({3, 4, 4});
    Tensor b = Tensor::zeros({3, 4, 5});
    EXPECT_THROW(denoising_loss(a, b), DimensionError);
}

TEST(SamplerStep, ExactInversionRecoversCleanImage) {
    NoiseSchedule s = linear_schedule<float>(200, 1e-4, 0.05);
    SeededRng rng(6);
    Tensor z0 = rand_uniform<float>({3, 4, 4}, rng, -0.9, 0.9);
    Tensor eps = randn<float>({3, 4, 4}, rng);
    for (int t : {1, 7, 50, 128, 200}) {
        Tensor z_t = add_noise(z0, eps, t, s);
        Tensor rec = sampler_step(z_t, eps, t, 0, s);
        for (int i = 0; i < z0.numel(); ++i) EXPECT_NEAR(rec.at(i), z0.at(i), 1e-5);
    }
}

TEST(SamplerStep, OrderingEnforced) {
    NoiseSchedule s = linear_schedule<float>(10, 1e-4, 0.02);
    Tensor z = Tensor::zeros({1, 2, 2});
    EXPECT_THROW(sampler_step(z, z, 5, 5, s), StepError);
    EXPECT_THROW(sampler_step(z, z, 5, 7, s), StepError);
}

TEST(SamplerStep, TrajectoryMatchesFloat64Rollout) {
    // 20 deterministic steps with a fixed linear "denoiser" eps_hat = 0.9 z,
    // compared against an independent double-precision re-implementation.
    const int T = 200, steps = 20;
    NoiseSchedule s32 = linear_schedule<float>(T, 1e-4, 0.05);
    SeededRng rng(7);
    Tensor z = randn<float>({1, 4, 4}, rng);
    std::vector<double> zd(static_cast<size_t>(z.numel()));
    for (int i = 0; i < z.numel(); ++i) zd[static_cast<size_t>(i)] = z.at(i);

    std::vector<int> grid = sampling_step_grid(T, steps);
    for (size_t k = 0; k + 1 < grid.size(); ++k) {
        Tensor eps_hat = scale(z, 0.9f);
        z = sampler_step(z, eps_hat, grid[k], grid[k + 1], s32);
    }

    // independent rollout in double
    auto alpha_bar = [&](int t) -> double {
        if (t == 0) return 1.0;
        double run = 1.0;
        for (int i = 0; i < t; ++i) run *= 1.0 - (1e-4 + (0.05 - 1e-4) * (double(i) / double(T - 1)));
        return run;
    };
    for (size_t k = 0; k + 1 < grid.size(); ++k) {
        const int t = grid[k], tp = grid[k + 1];
        const double abt = alpha_bar(t), abp = alpha_bar(tp);
        for (auto& v : zd) {
            const double eh = 0.9 * v;
            double z0 = (v - std::sqrt(1.0 - abt) * eh) / std::sqrt(abt);
            z0 = std::min(1.0, std::max(-1.0, z0));
            v = std::sqrt(abp) * z0 + std::sqrt(1.0 - abp) * eh;
        }
    }
    for (int i = 0; i < z.numel(); ++i) EXPECT_NEAR(z.at(i), zd[static_cast<size_t>(i)], 1e-4);
}

TEST(SamplerGrid, UniformDescendingAndEndsAtZero) {
    auto g = sampling_step_grid(200, 20);
    ASSERT_EQ(g.size(), 21u);
    EXPECT_EQ(g.front(), 200);
    EXPECT_EQ(g.back(), 0);
    for (size_t i = 0; i + 1 < g.size(); ++i) {
        EXPECT_GT(g[i], g[i + 1]);
        EXPECT_EQ(g[i] - g[i + 1], 10);
    }
    // more requested steps than schedule steps still yields a valid grid
    auto tiny = sampling_step_grid(3, 8);
    EXPECT_EQ(tiny.front(), 3);
    EXPECT_EQ(tiny.back(), 0);
    for (size_t i = 0; i + 1 < tiny.size(); ++i) EXPECT_GT(tiny[i], tiny[i + 1]);
}
