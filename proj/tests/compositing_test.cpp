// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "freeinsert/compositing.hpp"
#include "freeinsert/toy_backend.hpp"
#include "test_util.hpp"

namespace freeinsert {
namespace {

using testing::blocky_image;
using testing::solid_rgba;

RenderedObject make_render(const Image& rgba, float depth = 0.8f) {
    return {rgba, DepthMap(rgba.width(), rgba.height(), depth), "front"};
}

Image checkerboard_rgba(int w, int h, int cell) {
    Image img(w, h, 4);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const bool on = ((x / cell) + (y / cell)) % 2 == 0;
            img.at(x, y, 0) = 0.9f;
            img.at(x, y, 1) = 0.1f;
            img.at(x, y, 2) = 0.3f;
            img.at(x, y, 3) = on ? 1.0f : 0.0f;
        }
    }
    return img;
}

TEST(Paste, TransparentRenderLeavesBackgroundUntouched) {
    const Image bg = blocky_image(96, 80, 8, 3);
    const auto result = paste(make_render(solid_rgba(16, 16, 1, 0, 0, 0)), bg, {30, 20});
    EXPECT_EQ(result.coarse, bg);
    EXPECT_EQ(result.mask.pixel.count(), 0u);
    EXPECT_EQ(result.footprint.count(), 0u);
    for (float v : result.mask.latent.values()) {
        EXPECT_EQ(v, 0.0f);
    }
}

TEST(Paste, OpaqueRenderOnlyChangesItsFootprint) {
    const Image bg = blocky_image(64, 64, 4, 9);
    const auto result = paste(make_render(solid_rgba(10, 10, 0.25f, 0.5f, 0.75f, 1)), bg, {20, 30}, {0, 8, 4});
    const Rect box{20, 30, 10, 10};
    for (int y = 0; y < 64; ++y) {
        for (int x = 0; x < 64; ++x) {
            for (int c = 0; c < 3; ++c) {
                if (box.contains(x, y)) {
                    EXPECT_FLOAT_EQ(result.coarse.at(x, y, c), 0.25f * (c + 1));
                } else {
                    ASSERT_EQ(result.coarse.at(x, y, c), bg.at(x, y, c)) << x << "," << y;
                }
            }
        }
    }
    EXPECT_EQ(result.footprint.bbox(), box);
    EXPECT_EQ(result.mask.pixel, result.footprint);
}

TEST(Paste, ScaledRenderCoversScaledBox) {
    const Image bg(128, 128, 3, 0.5f);
    const auto result = paste(make_render(solid_rgba(16, 16, 1, 1, 1, 1)), bg, {40, 40, 2.0}, {0, 8, 4});
    // Independent oracle: which pixels differ from the background.
    Rect changed{128, 128, 0, 0};
    int x1 = -1, y1 = -1;
    for (int y = 0; y < 128; ++y) {
        for (int x = 0; x < 128; ++x) {
            if (result.coarse.at(x, y, 0) != bg.at(x, y, 0)) {
                changed.x = std::min(changed.x, x);
                changed.y = std::min(changed.y, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
        }
    }
    changed.width = x1 - changed.x + 1;
    changed.height = y1 - changed.y + 1;
    EXPECT_EQ(changed, (Rect{40, 40, 32, 32}));
    EXPECT_EQ(result.footprint.bbox(), (Rect{40, 40, 32, 32}));
}

TEST(Paste, DilationGrowsMaskByRadius) {
    const Image bg(64, 64, 3, 0.1f);
    const auto result = paste(make_render(solid_rgba(8, 8, 1, 1, 1, 1)), bg, {20, 20}, {3, 8, 4});
    EXPECT_EQ(result.mask.pixel.bbox(), (Rect{17, 17, 14, 14}));
    EXPECT_EQ(result.mask.pixel.count(), 14u * 14u);
}

TEST(Paste, HalfTransparentPixelsBlendButStayOutOfMask) {
    const Image bg(64, 64, 3, 0.0f);
    const auto result = paste(make_render(solid_rgba(8, 8, 1, 1, 1, 0.4f)), bg, {0, 0}, {0, 8, 4});
    EXPECT_NEAR(result.coarse.at(3, 3, 0), 0.4f, 1e-6f);
    EXPECT_EQ(result.footprint.count(), 0u);
}

TEST(Paste, RotationByNinetyDegreesSwapsExtent) {
    const Image bg(64, 64, 3, 0.0f);
    const auto result = paste(make_render(solid_rgba(20, 6, 1, 1, 1, 1)), bg, {20, 29, 1.0, 90.0}, {0, 8, 4});
    const Rect bbox = result.footprint.bbox();
    EXPECT_EQ(bbox.width, 6);
    EXPECT_EQ(bbox.height, 20);
    EXPECT_EQ(bbox.x + bbox.width / 2, 30);
    EXPECT_EQ(bbox.y + bbox.height / 2, 32);
}

TEST(Paste, RejectsSmallBackground) {
    const Image bg(63, 64, 3);
    try {
        paste(make_render(solid_rgba(4, 4, 1, 1, 1, 1)), bg, {0, 0});
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_EQ(e.field(), "background");
    }
}

TEST(Paste, OffCanvasPlacementSuggestsClampedPosition) {
    const Image bg(64, 64, 3);
    try {
        paste(make_render(solid_rgba(10, 10, 1, 1, 1, 1)), bg, {200, -50});
        FAIL();
    } catch (const PlacementError& e) {
        EXPECT_EQ(e.suggestion().x, 54);
        EXPECT_EQ(e.suggestion().y, 0);
        EXPECT_EQ(e.field(), "placement");
    }
}

TEST(Paste, PartiallyOffCanvasIsClipped) {
    const Image bg(64, 64, 3);
    const auto result = paste(make_render(solid_rgba(10, 10, 1, 1, 1, 1)), bg, {58, -4}, {0, 8, 4});
    EXPECT_EQ(result.footprint.bbox(), (Rect{58, 0, 6, 6}));
}

TEST(LatentMask, CheckerboardSetsEveryCell) {
    const Image bg(64, 64, 3);
    const auto result = paste(make_render(checkerboard_rgba(64, 64, 2)), bg, {0, 0}, {0, 8, 4});
    EXPECT_EQ(result.mask.latent.shape(), (Shape3{4, 8, 8}));
    for (float v : result.mask.latent.values()) {
        EXPECT_EQ(v, 1.0f);
    }
}

TEST(LatentMask, SinglePixelSetsExactlyOneCell) {
    BinaryMask m(64, 64);
    m.at(21, 42) = 1;
    const LatentGrid latent = derive_latent_mask(m, 8, 4);
    int set = 0;
    for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) {
            if (latent.at(0, y, x) != 0.0f) {
                ++set;
                EXPECT_EQ(x, 2);
                EXPECT_EQ(y, 5);
            }
            for (int c = 1; c < 4; ++c) {
                EXPECT_EQ(latent.at(c, y, x), latent.at(0, y, x));
            }
        }
    }
    EXPECT_EQ(set, 1);
}

TEST(LatentMask, ConservativeAndIdempotentOnRandomMasks) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        BinaryMask m(72, 64);
        std::bernoulli_distribution coin(0.02);
        for (int y = 0; y < m.height(); ++y) {
            for (int x = 0; x < m.width(); ++x) {
                m.at(x, y) = coin(rng) ? 1 : 0;
            }
        }
        const LatentGrid latent = derive_latent_mask(m, 8, 4);
        const BinaryMask up = latent_mask_footprint(latent, 8);
        for (int y = 0; y < m.height(); ++y) {
            for (int x = 0; x < m.width(); ++x) {
                if (m.at(x, y)) {
                    ASSERT_TRUE(up.at(x, y));
                }
            }
        }
        EXPECT_EQ(derive_latent_mask(up, 8, 4), latent);
    }
}

TEST(LatentMask, ReflectPadsIndivisibleSizes) {
    BinaryMask m(66, 64);
    m.at(65, 0) = 1;
    const LatentGrid latent = derive_latent_mask(m, 8, 1);
    EXPECT_EQ(latent.shape(), (Shape3{1, 8, 9}));
    EXPECT_EQ(latent.at(0, 0, 8), 1.0f);
}

TEST(Morphology, ErodeUndoesDilateOnSquares) {
    BinaryMask m(40, 40);
    for (int y = 10; y < 20; ++y) {
        for (int x = 12; x < 25; ++x) {
            m.at(x, y) = 1;
        }
    }
    EXPECT_EQ(erode(dilate(m, 3), 3), m);
}

TEST(ComposeDepth, ConstantFarNormalizesObjectToOne) {
    const Image bg(64, 64, 3, 0.3f);
    const auto composed = compose_depth(make_render(solid_rgba(10, 10, 1, 1, 1, 1), 0.8f), bg, {5, 5},
                                        BackgroundDepthSource::constant_far, nullptr);
    EXPECT_TRUE(composed.depth.in_unit_range());
    EXPECT_EQ(composed.depth.at(7, 7), 1.0f);
    EXPECT_EQ(composed.depth.at(40, 40), 0.0f);
    EXPECT_DOUBLE_EQ(composed.offset, 0.0);
    EXPECT_NEAR(composed.gain, 1.0 / 0.8, 1e-6);
}

TEST(ComposeDepth, EstimatorModeMatchesDirectComposition) {
    const Image bg = blocky_image(64, 64, 8, 11);
    auto estimator = make_toy_depth_estimator();
    const RenderedObject render = make_render(solid_rgba(12, 12, 1, 1, 1, 1), 0.95f);
    const auto composed = compose_depth(render, bg, {10, 40}, BackgroundDepthSource::estimator, estimator.get());

    DepthMap expected = estimator->estimate(bg);
    for (int y = 40; y < 52; ++y) {
        for (int x = 10; x < 22; ++x) {
            expected.at(x, y) = 0.95f;
        }
    }
    const auto [lo, hi] = std::minmax_element(expected.values().begin(), expected.values().end());
    const float min_v = *lo, range = *hi - *lo;
    for (int y = 0; y < 64; ++y) {
        for (int x = 0; x < 64; ++x) {
            ASSERT_NEAR(composed.depth.at(x, y), (expected.at(x, y) - min_v) / range, 1e-6f);
        }
    }
}

TEST(ComposeDepth, EstimatorModeWithoutEstimatorIsBackendError) {
    const Image bg(64, 64, 3);
    EXPECT_THROW(compose_depth(make_render(solid_rgba(4, 4, 1, 1, 1, 1)), bg, {0, 0},
                               BackgroundDepthSource::estimator, nullptr),
                 BackendError);
}

TEST(PlacementJson, RoundTripAndErrors) {
    const Placement p{3, -4, 1.5, 30.0};
    EXPECT_EQ(placement_from_json(to_json(p)), p);
    try {
        placement_from_json(nlohmann::json{{"x", 1}, {"y", 2}, {"scale", -1.0}});
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_EQ(e.field(), "scale");
    }
    EXPECT_THROW(placement_from_json(nlohmann::json{{"x", 1}}), ValidationError);
    EXPECT_EQ(depth_source_from_string("constant_far"), BackgroundDepthSource::constant_far);
    EXPECT_THROW(depth_source_from_string("far"), ValidationError);
}

}  // namespace
}  // namespace freeinsert
