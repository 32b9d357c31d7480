// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "freeinsert/ddim.hpp"
#include "freeinsert/errors.hpp"
#include "freeinsert/toy_backend.hpp"
#include "test_util.hpp"

namespace freeinsert {
namespace {

using testing::random_latent;

TEST(NoiseSchedule, RejectsBrokenSchedules) {
    EXPECT_THROW(NoiseSchedule({1.0}), ConfigError);                 // T = 0
    EXPECT_THROW(NoiseSchedule({0.9, 0.5}), ConfigError);            // alpha_bar[0] != 1
    EXPECT_THROW(NoiseSchedule({1.0, 0.5, 0.6}), ConfigError);       // not decreasing
    EXPECT_THROW(NoiseSchedule({1.0, 0.5, 0.5}), ConfigError);       // not strictly decreasing
    EXPECT_THROW(NoiseSchedule({1.0, 0.5, 0.0}), ConfigError);       // zero
    EXPECT_NO_THROW(NoiseSchedule({1.0 - 5e-7, 0.5}));
    EXPECT_EQ(NoiseSchedule({1.0 - 5e-7, 0.5}).alpha_bar(0), 1.0);
}

TEST(NoiseSchedule, ScaledLinearMatchesReferenceValues) {
    // Reference values computed with numpy: cumprod(1 - linspace(sqrt(.00085), sqrt(.012), 1000)**2).
    const auto s = NoiseSchedule::scaled_linear(50);
    EXPECT_EQ(s.num_steps(), 50);
    EXPECT_DOUBLE_EQ(s.alpha_bar(0), 1.0);
    EXPECT_NEAR(s.alpha_bar(1), 0.9822439910955454, 1e-12);
    EXPECT_NEAR(s.alpha_bar(25), 0.27766965045646763, 1e-12);
    EXPECT_NEAR(s.alpha_bar(50), 0.004660098513077238, 1e-12);
    EXPECT_EQ(s.model_timestep(50), 999);
    EXPECT_EQ(s.model_timestep(1), 19);
    EXPECT_THROW(s.alpha_bar(51), RangeError);
}

TEST(NoiseSchedule, JsonRoundTripAndValidation) {
    const auto s = NoiseSchedule::scaled_linear(10);
    const auto loaded = NoiseSchedule::from_json(s.to_json());
    EXPECT_EQ(loaded.alpha_bars(), s.alpha_bars());

    nlohmann::json bad = {{"num_steps", 2}, {"alpha_bar", {1.0, 0.4, 0.7}}};
    EXPECT_THROW(NoiseSchedule::from_json(bad), ConfigError);
    nlohmann::json short_list = {{"num_steps", 3}, {"alpha_bar", {1.0, 0.4}}};
    EXPECT_THROW(NoiseSchedule::from_json(short_list), ConfigError);
}

TEST(AddNoise, TimestepZeroReturnsInputExactly) {
    const auto s = NoiseSchedule::scaled_linear(50);
    const auto z0 = random_latent({4, 3, 5}, 1);
    const auto eps = random_latent({4, 3, 5}, 2);
    EXPECT_EQ(add_noise(z0, 0, eps, s), z0);
}

TEST(AddNoise, ZeroNoiseScalesBySqrtAlphaBar) {
    const auto s = NoiseSchedule::scaled_linear(50);
    const auto z0 = random_latent({4, 3, 5}, 3);
    const LatentGrid zero(z0.shape());
    const auto out = add_noise(z0, 30, zero, s);
    const double k = std::sqrt(s.alpha_bar(30));
    for (std::size_t i = 0; i < out.size(); ++i) {
        EXPECT_FLOAT_EQ(out.values()[i], static_cast<float>(k * z0.values()[i]));
    }
}

TEST(AddNoise, HandEvaluatedQuarterSchedule) {
    // 0.5 * 1 + sqrt(0.75) * 1, evaluated by hand.
    const NoiseSchedule s({1.0, 0.25});
    const LatentGrid ones({1, 2, 2}, SpaceTag::latent, 1.0f);
    const auto out = add_noise(ones, 1, ones, s);
    for (float v : out.values()) {
        EXPECT_NEAR(v, 1.3660254037844386, 1e-6);
    }
}

TEST(AddNoise, LinearUnderPowerOfTwoScaling) {
    const auto s = NoiseSchedule::scaled_linear(50);
    std::mt19937 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const auto z0 = random_latent({2, 4, 4}, 100 + trial);
        const auto eps = random_latent({2, 4, 4}, 200 + trial);
        const int t = static_cast<int>(rng() % 51);
        for (float a : {2.0f, 0.5f, -4.0f}) {
            LatentGrid az = z0, ae = eps;
            for (auto& v : az.values()) v *= a;
            for (auto& v : ae.values()) v *= a;
            auto lhs = add_noise(az, t, ae, s);
            auto rhs = add_noise(z0, t, eps, s);
            for (auto& v : rhs.values()) v *= a;
            EXPECT_EQ(lhs, rhs) << "t=" << t << " a=" << a;
        }
    }
}

TEST(AddNoise, Errors) {
    const auto s = NoiseSchedule::scaled_linear(10);
    const LatentGrid a({1, 2, 2}), b({1, 2, 3});
    EXPECT_THROW(add_noise(a, 1, b, s), ContractError);
    EXPECT_THROW(add_noise(a, 11, a, s), RangeError);
    EXPECT_THROW(add_noise(a, -1, a, s), RangeError);
    const LatentGrid pixel({1, 2, 2}, SpaceTag::pixel);
    EXPECT_THROW(add_noise(a, 1, pixel, s), ContractError);
}

TEST(DdimStep, ZeroNoiseRescales) {
    const auto s = NoiseSchedule::scaled_linear(50);
    const auto z = random_latent({4, 4, 4}, 5);
    const LatentGrid zero(z.shape());
    const auto out = ddim_step(z, zero, 40, 39, s);
    const double k = std::sqrt(s.alpha_bar(39) / s.alpha_bar(40));
    for (std::size_t i = 0; i < out.size(); ++i) {
        EXPECT_NEAR(out.values()[i], k * z.values()[i], 1e-6 * std::abs(k * z.values()[i]) + 1e-7);
    }
}

TEST(DdimStep, TrueNoiseDenoisesToInput) {
    const auto s = NoiseSchedule::scaled_linear(50);
    const auto z0 = random_latent({4, 4, 4}, 8);
    const auto eps = random_latent({4, 4, 4}, 9);
    for (int t : {1, 10, 50}) {
        const auto zt = add_noise(z0, t, eps, s);
        EXPECT_LT(max_abs_diff(ddim_step(zt, eps, t, 0, s), z0), 2e-5f) << "t=" << t;
    }
}

TEST(DdimStep, DeterministicAndValidated) {
    const auto s = NoiseSchedule::scaled_linear(50);
    const auto z = random_latent({4, 4, 4}, 10);
    const auto e = random_latent({4, 4, 4}, 11);
    EXPECT_EQ(ddim_step(z, e, 20, 19, s), ddim_step(z, e, 20, 19, s));
    EXPECT_THROW(ddim_step(z, e, 20, 20, s), RangeError);
    EXPECT_THROW(ddim_step(z, LatentGrid({4, 4, 3}), 20, 19, s), ContractError);
}

TEST(DdimStep, InvertThenSampleWithStoredNoiseRoundTrips) {
    // Oracle: replay the exact eps sequence used during inversion.
    const auto s = NoiseSchedule::scaled_linear(50);
    const auto z0 = random_latent({4, 8, 8}, 12);
    std::vector<LatentGrid> eps;
    LatentGrid z = z0;
    for (int t = 0; t < 50; ++t) {
        eps.push_back(random_latent(z0.shape(), 1000 + t));
        z = ddim_inverse_step(z, eps.back(), t, t + 1, s);
    }
    for (int t = 50; t > 0; --t) {
        z = ddim_step(z, eps[static_cast<std::size_t>(t - 1)], t, t - 1, s);
    }
    EXPECT_LT(max_abs_diff(z, z0), 1e-4f);
}

TEST(DdimInvert, ZeroNoiseInversionIsPureRescaling) {
    const auto s = NoiseSchedule::scaled_linear(20);
    testing::ZeroDenoiser zero;
    const auto z0 = random_latent({4, 3, 3}, 13);
    const auto traj = ddim_invert(z0, zero, {}, s);
    ASSERT_EQ(traj.num_steps(), 20);
    EXPECT_EQ(traj.at(0), z0);
    for (int t = 1; t <= 20; ++t) {
        const double k = std::sqrt(s.alpha_bar(t));
        for (std::size_t i = 0; i < z0.size(); ++i) {
            EXPECT_NEAR(traj.at(t).values()[i], k * z0.values()[i], 1e-5) << "t=" << t;
        }
    }
}

TEST(DdimInvert, ToyBackendRoundTripOverFiftySteps) {
    const auto s = NoiseSchedule::scaled_linear(50);
    const Shape3 shape{4, 8, 8};
    auto backend = make_toy_denoiser(42, shape);
    ConditioningSet cond;
    cond.prompt_text = "a photo of a dog";
    cond.depth = DepthMap(64, 64, 0.3f);

    const auto start = std::chrono::steady_clock::now();
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto z0 = random_latent(shape, seed);
        const auto traj = ddim_invert(z0, *backend, cond, s);
        const auto recon = ddim_sample(traj.terminal(), *backend, cond, s, 50, 0);
        EXPECT_LT(max_abs_diff(recon, z0), 1e-4f) << "seed " << seed;
    }
    const auto elapsed = std::chrono::steady_clock::now() - start;
    EXPECT_LT(std::chrono::duration<double>(elapsed).count(), 30.0);
}

TEST(DdimInvert, PlainInversionWithoutRefinementDrifts) {
    // Documents why fixed-point refinement is on by default.
    const auto s = NoiseSchedule::scaled_linear(50);
    const Shape3 shape{4, 8, 8};
    auto backend = make_toy_denoiser(42, shape);
    ConditioningSet cond;
    cond.prompt_text = "a photo of a dog";
    const auto z0 = random_latent(shape, 1);
    const auto traj = ddim_invert(z0, *backend, cond, s, {.fixed_point_iters = 0});
    const auto recon = ddim_sample(traj.terminal(), *backend, cond, s, 50, 0);
    EXPECT_GT(max_abs_diff(recon, z0), 1e-4f);
}

TEST(DdimInvert, FingerprintTracksConditioning) {
    const auto s = NoiseSchedule::scaled_linear(5);
    auto backend = make_toy_denoiser(1, {4, 2, 2});
    const auto z0 = random_latent({4, 2, 2}, 3);
    ConditioningSet a;
    a.prompt_text = "a red mug";
    ConditioningSet b = a;
    b.prompt_text = "a blue mug";
    EXPECT_NE(ddim_invert(z0, *backend, a, s).conditioning_fingerprint(),
              ddim_invert(z0, *backend, b, s).conditioning_fingerprint());
    EXPECT_EQ(ddim_invert(z0, *backend, a, s).conditioning_fingerprint(), a.fingerprint());
}

class FailingDenoiser final : public DenoiserBackend {
public:
    std::string id() const override { return "failing"; }
    const LayerCatalog& catalog() const override { return m_catalog; }
    Prediction predict(const LatentGrid& z, const StepInfo& step, const ConditioningSet&,
                       const FeatureBundle*) override {
        if (step.index == 3) {
            throw std::runtime_error("device lost");
        }
        return {LatentGrid(z.shape()), {}};
    }

private:
    LayerCatalog m_catalog;
};

TEST(DdimInvert, BackendFailureCarriesTimestep) {
    const auto s = NoiseSchedule::scaled_linear(10);
    FailingDenoiser failing;
    try {
        ddim_invert(LatentGrid({1, 1, 1}), failing, {}, s, {.fixed_point_iters = 0});
        FAIL() << "expected BackendError";
    } catch (const BackendError& e) {
        EXPECT_NE(std::string(e.what()).find("t=3"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("device lost"), std::string::npos);
    }
}

}  // namespace
}  // namespace freeinsert
