// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "freeinsert/backend.hpp"
#include "freeinsert/errors.hpp"
#include "freeinsert/image.hpp"
#include "freeinsert/latent.hpp"

namespace freeinsert {

/// Where the render lands on the background. (x, y) is the top-left corner of
/// the scaled, unrotated render; rotation is about its center, positive
/// values turning clockwise on screen.
struct Placement {
    int x = 0;
    int y = 0;
    double scale = 1.0;
    double rotation_deg = 0.0;

    bool operator==(const Placement&) const = default;
};

nlohmann::json to_json(const Placement& p);
/// Throws ValidationError naming the offending field.
Placement placement_from_json(const nlohmann::json& j);

class PlacementError : public ValidationError {
public:
    PlacementError(const std::string& message, Placement suggestion)
        : ValidationError("placement", message), m_suggestion(suggestion) {}

    /// Nearest placement that keeps the render on the canvas.
    const Placement& suggestion() const noexcept { return m_suggestion; }

private:
    Placement m_suggestion;
};

struct RenderedObject {
    Image rgba;  // 4 channels, straight alpha
    DepthMap depth;
    std::string view_tag;

    /// alpha in [0, 1], depth aligned with rgba and finite where alpha > 0.
    void validate() const;
};

class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(int width, int height, std::uint8_t fill = 0);

    int width() const noexcept { return m_width; }
    int height() const noexcept { return m_height; }
    std::uint8_t& at(int x, int y) { return m_bits[static_cast<std::size_t>(y) * m_width + x]; }
    std::uint8_t at(int x, int y) const { return m_bits[static_cast<std::size_t>(y) * m_width + x]; }
    const std::vector<std::uint8_t>& bits() const noexcept { return m_bits; }

    std::size_t count() const noexcept;
    /// Tight bounding box of set pixels; empty Rect when nothing is set.
    Rect bbox() const;

    bool operator==(const BinaryMask&) const = default;

private:
    int m_width = 0;
    int m_height = 0;
    std::vector<std::uint8_t> m_bits;
};

/// Square (Chebyshev) structuring element of the given radius.
BinaryMask dilate(const BinaryMask& mask, int radius);
BinaryMask erode(const BinaryMask& mask, int radius);

/// Editing mask M at pixel and latent resolution.
struct MaskGrid {
    BinaryMask pixel;
    LatentGrid latent;  // values exactly 0 or 1, broadcast across channels
};

/// Max-pools the pixel mask by `scale_factor` (any covered pixel -> 1) and
/// broadcasts across `channels`. Sides that are not multiples of the scale are
/// reflect-padded first.
LatentGrid derive_latent_mask(const BinaryMask& pixel_mask, int scale_factor, int channels = 4);

/// Nearest-neighbour upsampling of a latent mask back to pixel resolution.
BinaryMask latent_mask_footprint(const LatentGrid& latent_mask, int scale_factor);

/// The render resampled onto background coordinates.
struct WarpedRender {
    Image premultiplied;  // 3 channels, color * alpha
    std::vector<float> alpha;
    DepthMap depth;
    Rect bounds;  // canvas pixels the transformed render can touch
};

/// Bilinear resampling under `place`; pixels whose centers fall outside the
/// transformed render footprint get alpha 0. Throws PlacementError when the
/// footprint misses the canvas entirely.
WarpedRender warp_render(const RenderedObject& render, int canvas_width, int canvas_height, const Placement& place);

struct PasteOptions {
    int dilation_radius = 8;
    int scale_factor = 8;
    int latent_channels = 4;
};

struct PasteResult {
    Image coarse;          // I_coarse, RGB
    MaskGrid mask;         // dilated editing mask
    BinaryMask footprint;  // resampled alpha > 0.5, undilated
};

/// Alpha-composites the render onto `bg`. Pixels with resampled alpha 0 are
/// copied from `bg` untouched. Background must be at least 64x64.
PasteResult paste(const RenderedObject& render, const Image& bg, const Placement& place,
                  const PasteOptions& options = {});

enum class BackgroundDepthSource { estimator, constant_far };

BackgroundDepthSource depth_source_from_string(const std::string& s);
std::string to_string(BackgroundDepthSource source);

struct ComposedDepth {
    DepthMap depth;         // normalized to [0, 1]
    double offset = 0.0;    // depth = (raw - offset) * gain
    double gain = 1.0;
};

/// Rendered depth inside the object footprint, estimator output (or 0) on the
/// rest of the canvas, then min-max normalized over the whole map.
ComposedDepth compose_depth(const RenderedObject& render, const Image& bg, const Placement& place,
                            BackgroundDepthSource source, DepthEstimator* estimator);

}  // namespace freeinsert
