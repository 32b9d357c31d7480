// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "freeinsert/ddim.hpp"
#include "freeinsert/injection.hpp"
#include "freeinsert/toy_backend.hpp"
#include "test_util.hpp"

namespace freeinsert {
namespace {

using testing::blocky_image;
using testing::random_latent;
using testing::solid_rgba;

FeatureTensor tensor(float v) {
    return {{2, 2}, {v, v, v, v}};
}

FeatureBundle full_bundle() {
    FeatureBundle b;
    b.spatial["s0"] = tensor(1);
    b.spatial["s1"] = tensor(2);
    b.queries["a0"] = tensor(3);
    b.keys["a0"] = tensor(4);
    return b;
}

InjectionConfig small_config(double tau_f, double tau_q, double tau_k) {
    InjectionConfig inj;
    inj.tau_f = tau_f;
    inj.tau_q = tau_q;
    inj.tau_k = tau_k;
    inj.spatial_layers = {"s0", "s1"};
    inj.attention_layers = {"a0"};
    return inj;
}

TEST(ApplyInjection, FirstStepInjectsEverything) {
    const auto out = apply_injection(full_bundle(), 50, small_config(0.2, 0.5, 0.9), 50);
    EXPECT_EQ(out.spatial.size(), 2u);
    EXPECT_EQ(out.queries.at("a0"), tensor(3));
    EXPECT_EQ(out.keys.at("a0"), tensor(4));
    EXPECT_EQ(out.timestep, 50);
}

TEST(ApplyInjection, LastStepInjectsNothing) {
    EXPECT_TRUE(apply_injection(full_bundle(), 1, small_config(0.1, 0.1, 0.1), 50).empty());
}

TEST(ApplyInjection, StrictThresholdBoundary) {
    const auto inj = small_config(0.2, 0.5, 0.5);
    EXPECT_EQ(apply_injection(full_bundle(), 26, inj, 50).queries.size(), 1u);
    EXPECT_TRUE(apply_injection(full_bundle(), 25, inj, 50).queries.empty());
    EXPECT_TRUE(apply_injection(full_bundle(), 25, inj, 50).keys.empty());
    EXPECT_EQ(apply_injection(full_bundle(), 11, inj, 50).spatial.size(), 2u);
    EXPECT_TRUE(apply_injection(full_bundle(), 10, inj, 50).spatial.empty());
}

TEST(ApplyInjection, TauOneNeverInjectsTauZeroAlwaysDoes) {
    for (int t = 1; t <= 50; ++t) {
        EXPECT_TRUE(apply_injection(full_bundle(), t, small_config(1, 1, 1), 50).empty());
        const auto all = apply_injection(full_bundle(), t, small_config(0, 0, 0), 50);
        EXPECT_EQ(all.spatial.size() + all.queries.size() + all.keys.size(), 4u);
    }
}

TEST(ApplyInjection, MissingLayerNamesIt) {
    FeatureBundle b = full_bundle();
    b.keys.clear();
    try {
        apply_injection(b, 50, small_config(0.2, 0.5, 0.5), 50);
        FAIL();
    } catch (const ContractError& e) {
        EXPECT_NE(std::string(e.what()).find("\"a0\""), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("keys"), std::string::npos);
    }
}

TEST(InjectionConfig, ValidationAndCatalogChecks) {
    auto inj = small_config(1.5, 0.5, 0.5);
    try {
        inj.validate();
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_EQ(e.field(), "tau_f");
    }
    auto den = make_toy_denoiser(1, {4, 0, 0});
    InjectionConfig bad = InjectionConfig::all_layers(den->catalog());
    EXPECT_NO_THROW(bad.check_catalog(den->catalog()));
    bad.attention_layers.push_back("mid.attn.9");
    try {
        bad.check_catalog(den->catalog());
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("mid.attn.9"), std::string::npos);
    }
    const auto round = injection_config_from_json(to_json(small_config(0.25, 0.5, 0.75)));
    EXPECT_EQ(round.tau_f, 0.25);
    EXPECT_EQ(round.tau_k, 0.75);
    EXPECT_EQ(round.spatial_layers, (std::vector<std::string>{"s0", "s1"}));
}

TEST(NoiseBlend, FullMaskKeepsGenerationBitExact) {
    const auto schedule = NoiseSchedule::scaled_linear();
    const Shape3 s{4, 6, 5};
    const auto z_g = random_latent(s, 1);
    const auto z_bg = random_latent(s, 2);
    std::mt19937_64 rng(3);
    EXPECT_EQ(noise_blend(z_g, z_bg, 17, LatentGrid(s, SpaceTag::latent, 1.0f), schedule, rng), z_g);
}

TEST(NoiseBlend, EmptyMaskAtZeroGivesBackgroundExactly) {
    const auto schedule = NoiseSchedule::scaled_linear();
    const Shape3 s{4, 6, 5};
    std::mt19937_64 rng(3);
    const auto z_bg = random_latent(s, 2);
    EXPECT_EQ(noise_blend(random_latent(s, 1), z_bg, 0, LatentGrid(s), schedule, rng), z_bg);
}

TEST(NoiseBlend, SingleMaskedCellIsTheOnlyDifference) {
    const auto schedule = NoiseSchedule::scaled_linear();
    const Shape3 s{4, 8, 8};
    const auto z_g = random_latent(s, 1);
    const auto z_bg = random_latent(s, 2);
    BinaryMask pixel(64, 64);
    pixel.at(30, 41) = 1;
    const LatentGrid mask = derive_latent_mask(pixel, 8, 4);
    std::mt19937_64 rng(9);
    const auto out = noise_blend(z_g, z_bg, 0, mask, schedule, rng);
    for (int c = 0; c < 4; ++c) {
        for (int y = 0; y < 8; ++y) {
            for (int x = 0; x < 8; ++x) {
                if (x == 3 && y == 5) {
                    EXPECT_EQ(out.at(c, y, x), z_g.at(c, y, x));
                    EXPECT_NE(out.at(c, y, x), z_bg.at(c, y, x));
                } else {
                    EXPECT_EQ(out.at(c, y, x), z_bg.at(c, y, x));
                }
            }
        }
    }
}

TEST(NoiseBlend, UnmaskedCellsFollowBackgroundNoising) {
    const auto schedule = NoiseSchedule::scaled_linear();
    const Shape3 s{4, 4, 4};
    const auto z_bg = random_latent(s, 2);
    std::mt19937_64 rng(5);
    LatentGrid eps;
    const auto out = noise_blend(random_latent(s, 1), z_bg, 30, LatentGrid(s), schedule, rng, &eps);
    EXPECT_EQ(out, add_noise(z_bg, 30, eps, schedule));
    EXPECT_THROW(noise_blend(random_latent(s, 1), z_bg, 30, LatentGrid(s, SpaceTag::latent, 0.5f), schedule, rng),
                 ContractError);
    EXPECT_THROW(noise_blend(random_latent({4, 4, 5}, 1), z_bg, 30, LatentGrid(s), schedule, rng), ContractError);
}

// Engine fixture: 64x64 background, toy models at latent 4x8x8.
class EngineTest : public ::testing::Test {
protected:
    void SetUp() override {
        denoiser = make_toy_denoiser(7, {4, 0, 0});
        vae = make_toy_vae(8);
        estimator = make_toy_depth_estimator();
        options.injection = InjectionConfig::all_layers(denoiser->catalog());
    }

    GenerationInputs inputs(const Image& render_rgba, Placement place, std::uint64_t seed = 11) const {
        GenerationInputs in;
        in.background = blocky_image(64, 64, 8, 21);
        in.render = {render_rgba, DepthMap(render_rgba.width(), render_rgba.height(), 0.9f), "front"};
        in.placement = place;
        in.prompt = "a photo of a mug";
        in.seed = seed;
        return in;
    }

    GenerationInputs square_inputs(std::uint64_t seed = 11) const {
        return inputs(with_alpha(blocky_image(24, 24, 8, 5)), {16, 24}, seed);
    }

    static Image with_alpha(const Image& rgb) {
        Image out(rgb.width(), rgb.height(), 4);
        for (int y = 0; y < rgb.height(); ++y) {
            for (int x = 0; x < rgb.width(); ++x) {
                for (int c = 0; c < 3; ++c) {
                    out.at(x, y, c) = rgb.at(x, y, c);
                }
                out.at(x, y, 3) = 1.0f;
            }
        }
        return out;
    }

    GenerationResult run(const GenerationInputs& in) {
        return run_controllable_generation(in, {*denoiser, *vae, refiner.get(), estimator.get()}, schedule, options);
    }

    NoiseSchedule schedule = NoiseSchedule::scaled_linear();
    std::unique_ptr<DenoiserBackend> denoiser;
    std::unique_ptr<VaeBackend> vae;
    std::unique_ptr<DepthEstimator> estimator;
    std::unique_ptr<Refiner> refiner;
    EngineOptions options;
};

TEST_F(EngineTest, InjectionLogFollowsThresholds) {
    options.injection.tau_f = 0.2;
    options.injection.tau_q = 0.5;
    options.injection.tau_k = 0.5;
    const auto result = run(square_inputs());
    ASSERT_EQ(result.injection_log.size(), 50u);
    const auto& catalog = denoiser->catalog();
    const auto all = InjectionConfig::all_layers(catalog);
    for (std::size_t i = 0; i < result.injection_log.size(); ++i) {
        const auto& e = result.injection_log[i];
        const int t = 50 - static_cast<int>(i);
        EXPECT_EQ(e.t, t);
        EXPECT_EQ(e.spatial, t >= 11 ? all.spatial_layers : std::vector<std::string>{}) << t;
        EXPECT_EQ(e.queries, t >= 26 ? all.attention_layers : std::vector<std::string>{}) << t;
        EXPECT_EQ(e.keys, t >= 26 ? all.attention_layers : std::vector<std::string>{}) << t;
        EXPECT_TRUE(e.blended);
    }
}

TEST_F(EngineTest, UnmaskedLatentEqualsBackgroundAtLoopEnd) {
    options.record_latent_trace = true;
    const auto result = run(square_inputs());
    const auto mask = result.mask.latent.values();
    const auto z = result.final_latent.values();
    const auto bg = result.background_latent.values();
    std::size_t unmasked = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (mask[i] == 0.0f) {
            ASSERT_EQ(z[i], bg[i]);
            ++unmasked;
        }
    }
    EXPECT_GT(unmasked, 0u);
    ASSERT_EQ(result.latent_trace.size(), 50u);
    for (int i = 0; i < 50; ++i) {
        const auto expected = add_noise(result.background_latent, 49 - i, result.blend_noise[i], schedule);
        const auto trace = result.latent_trace[i].values();
        for (std::size_t k = 0; k < trace.size(); ++k) {
            if (mask[k] == 0.0f) {
                ASSERT_EQ(trace[k], expected.values()[k]) << "step " << i;
            }
        }
    }
}

TEST_F(EngineTest, PixelsOutsideFootprintMatchBackgroundRoundTrip) {
    // Large enough that the doubly eroded complement is non-empty.
    auto in = square_inputs();
    in.background = blocky_image(128, 128, 8, 21);
    in.placement = {40, 48};
    const auto result = run(in);
    const Image reference = vae->decode(vae->encode(in.background));
    const BinaryMask footprint = latent_mask_footprint(result.mask.latent, 8);
    BinaryMask outside(128, 128);
    for (int y = 0; y < 128; ++y) {
        for (int x = 0; x < 128; ++x) {
            outside.at(x, y) = footprint.at(x, y) ? 0 : 1;
        }
    }
    const BinaryMask keep = erode(outside, 2 * options.dilation_radius);
    ASSERT_GT(keep.count(), 1000u);
    double sum = 0.0;
    for (int y = 0; y < 128; ++y) {
        for (int x = 0; x < 128; ++x) {
            if (keep.at(x, y)) {
                for (int c = 0; c < 3; ++c) {
                    sum += std::abs(result.image.at(x, y, c) - reference.at(x, y, c));
                }
            }
        }
    }
    EXPECT_LE(sum / (3.0 * keep.count()), 1e-3);
}

TEST_F(EngineTest, EmptyMaskReproducesBackground) {
    options.record_latent_trace = true;
    const auto in = inputs(solid_rgba(16, 16, 1, 0, 0, 0), {10, 10});
    const auto result = run(in);
    EXPECT_EQ(result.mask.pixel.count(), 0u);
    EXPECT_EQ(result.final_latent, result.background_latent);
    EXPECT_EQ(result.image, vae->decode(vae->encode(in.background)));
    for (int i = 0; i < 50; ++i) {
        EXPECT_EQ(result.latent_trace[i], add_noise(result.background_latent, 49 - i, result.blend_noise[i], schedule));
    }
}

TEST_F(EngineTest, NoInjectionFullMaskRegeneratesCoarse) {
    options.injection.tau_f = options.injection.tau_q = options.injection.tau_k = 1.0;
    options.guidance_weight = 1.0;
    const auto in = inputs(with_alpha(blocky_image(64, 64, 8, 33)), {0, 0});
    const auto result = run(in);
    for (float v : result.mask.latent.values()) {
        ASSERT_EQ(v, 1.0f);
    }
    for (const auto& e : result.injection_log) {
        EXPECT_TRUE(e.spatial.empty() && e.queries.empty() && e.keys.empty());
    }
    // Oracle: plain invert-then-sample with the same conditioning.
    const LatentGrid z0 = vae->encode(result.coarse);
    ConditioningSet cond;
    cond.prompt_text = in.prompt;
    cond.depth = result.depth;
    const auto traj = ddim_invert(z0, *denoiser, cond, schedule);
    const auto sampled = ddim_sample(traj.terminal(), *denoiser, cond, schedule, 50);
    EXPECT_LT(max_abs_diff(result.final_latent, sampled), 1e-5f);
    EXPECT_LT(max_abs_diff(result.final_latent, z0), 1e-4f);
    EXPECT_LE(mean_abs_diff(result.image, result.coarse), vae->round_trip_bound());
}

TEST_F(EngineTest, SeedReproducibility) {
    const auto a = run(square_inputs(5));
    const auto b = run(square_inputs(5));
    EXPECT_EQ(a.image, b.image);
    EXPECT_EQ(a.final_latent, b.final_latent);
    EXPECT_EQ(a.injection_log, b.injection_log);
    const auto c = run(square_inputs(6));
    EXPECT_NE(a.final_latent, c.final_latent);
}

TEST_F(EngineTest, WithoutInjectionContentEmbeddingCannotReachBranch2) {
    options.injection.tau_f = options.injection.tau_q = options.injection.tau_k = 1.0;
    auto in = square_inputs();
    in.content_embedding = ImageEmbedding{std::vector<float>(16, 0.5f), EmbeddingRole::content, "toy-ip"};
    const auto a = run(in);
    in.content_embedding->vector.assign(16, -0.25f);
    const auto b = run(in);
    EXPECT_EQ(a.final_latent, b.final_latent);

    options.injection.tau_f = 0.2;
    options.injection.tau_q = options.injection.tau_k = 0.5;
    const auto c = run(in);
    in.content_embedding->vector.assign(16, 0.5f);
    const auto d = run(in);
    EXPECT_NE(c.final_latent, d.final_latent);
}

TEST_F(EngineTest, StyleScheduleAndRouting) {
    auto in = square_inputs();
    in.style_embedding = ImageEmbedding{std::vector<float>(16, 0.3f), EmbeddingRole::style, "toy-ip"};
    options.style_tau = 0.5;
    const auto result = run(in);
    for (const auto& e : result.injection_log) {
        EXPECT_EQ(e.style, e.t <= 25) << e.t;
    }
    in.style_embedding->role = EmbeddingRole::content;
    EXPECT_THROW(run(in), ContractError);
    in.style_embedding.reset();
    in.content_embedding = ImageEmbedding{std::vector<float>(16, 0.3f), EmbeddingRole::style, "toy-ip"};
    EXPECT_THROW(run(in), ContractError);
}

TEST_F(EngineTest, CatalogMismatchFailsBeforeDenoising) {
    options.injection.spatial_layers.push_back("up.9.res.0");
    try {
        run(square_inputs());
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("up.9.res.0"), std::string::npos);
    }
}

TEST_F(EngineTest, RefinerFinishesLastTenthAndKeepsBackground) {
    refiner = make_toy_refiner(3);
    options.refiner_enabled = true;
    const auto result = run(square_inputs());
    ASSERT_EQ(result.injection_log.size(), 45u);
    EXPECT_EQ(result.injection_log.back().t, 6);
    const auto mask = result.mask.latent.values();
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] == 0.0f) {
            ASSERT_EQ(result.final_latent.values()[i], result.background_latent.values()[i]);
        }
    }
    refiner.reset();
    EXPECT_THROW(run(square_inputs()), ConfigError);
}

TEST_F(EngineTest, FreeBranch1StaysCloseToReplay) {
    const auto replay = run(square_inputs());
    options.branch1_mode = Branch1Mode::free;
    const auto free = run(square_inputs());
    EXPECT_EQ(free.injection_log, replay.injection_log);
    EXPECT_LT(max_abs_diff(free.final_latent, replay.final_latent), 1e-2f);
}

TEST_F(EngineTest, IndivisibleBackgroundIsPaddedAndCropped) {
    auto in = square_inputs();
    in.background = blocky_image(70, 66, 8, 4);
    const auto result = run(in);
    EXPECT_EQ(result.image.width(), 70);
    EXPECT_EQ(result.image.height(), 66);
    EXPECT_EQ(result.final_latent.shape(), (Shape3{4, 9, 9}));
}

TEST_F(EngineTest, ConstantFarWorksWithoutEstimator) {
    options.depth_source = BackgroundDepthSource::constant_far;
    estimator.reset();
    EXPECT_NO_THROW(run(square_inputs()));
    options.depth_source = BackgroundDepthSource::estimator;
    EXPECT_THROW(run(square_inputs()), BackendError);
}

// Delegates to the toy model but fails or misbehaves on request.
class FaultyDenoiser final : public DenoiserBackend {
public:
    explicit FaultyDenoiser(std::unique_ptr<DenoiserBackend> inner) : m_inner(std::move(inner)) {}
    std::string id() const override { return "faulty"; }
    const LayerCatalog& catalog() const override { return m_inner->catalog(); }
    Prediction predict(const LatentGrid& z, const StepInfo& step, const ConditioningSet& cond,
                       const FeatureBundle* overrides) override {
        const bool branch2 = cond.guidance_weight == 5.0;
        if (branch2 && step.index == fail_at) {
            throw std::runtime_error("device lost");
        }
        Prediction p = m_inner->predict(z, step, cond, overrides);
        if (branch2 && drop_echo && overrides != nullptr) {
            p.captured.queries.clear();
        }
        return p;
    }
    int fail_at = -1;
    bool drop_echo = false;

private:
    std::unique_ptr<DenoiserBackend> m_inner;
};

TEST_F(EngineTest, BackendFailureCarriesBranchAndTimestep) {
    FaultyDenoiser faulty(make_toy_denoiser(7, {4, 0, 0}));
    faulty.fail_at = 7;
    try {
        run_controllable_generation(square_inputs(), {faulty, *vae, nullptr, estimator.get()}, schedule, options);
        FAIL();
    } catch (const BackendError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("Branch2"), std::string::npos);
        EXPECT_NE(msg.find("t=7"), std::string::npos);
        EXPECT_NE(msg.find("device lost"), std::string::npos);
    }
}

TEST_F(EngineTest, MissingOverrideEchoIsContractError) {
    FaultyDenoiser faulty(make_toy_denoiser(7, {4, 0, 0}));
    faulty.drop_echo = true;
    EXPECT_THROW(
        run_controllable_generation(square_inputs(), {faulty, *vae, nullptr, estimator.get()}, schedule, options),
        ContractError);
}

TEST(EngineOptions, JsonRoundTripAndValidation) {
    EngineOptions o;
    o.guidance_weight = 3.5;
    o.branch1_mode = Branch1Mode::free;
    o.depth_source = BackgroundDepthSource::constant_far;
    o.injection.tau_f = 0.3;
    const auto back = engine_options_from_json(to_json(o));
    EXPECT_EQ(back.guidance_weight, 3.5);
    EXPECT_EQ(back.branch1_mode, Branch1Mode::free);
    EXPECT_EQ(back.depth_source, BackgroundDepthSource::constant_far);
    EXPECT_EQ(back.injection.tau_f, 0.3);
    try {
        engine_options_from_json(nlohmann::json{{"guidance_weight", "high"}});
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_EQ(e.field(), "guidance_weight");
    }
    try {
        engine_options_from_json(nlohmann::json{{"style_tau", 2.0}});
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_EQ(e.field(), "style_tau");
    }
}

}  // namespace
}  // namespace freeinsert
