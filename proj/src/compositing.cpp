// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/compositing.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

namespace freeinsert {

namespace {

using json = nlohmann::json;

constexpr int kMinBackgroundSide = 64;

float sample_clamped(const Image& img, int c, float sx, float sy) {
    sx = std::clamp(sx, 0.0f, static_cast<float>(img.width() - 1));
    sy = std::clamp(sy, 0.0f, static_cast<float>(img.height() - 1));
    const int x0 = static_cast<int>(std::floor(sx));
    const int y0 = static_cast<int>(std::floor(sy));
    const int x1 = std::min(x0 + 1, img.width() - 1);
    const int y1 = std::min(y0 + 1, img.height() - 1);
    const float fx = sx - static_cast<float>(x0);
    const float fy = sy - static_cast<float>(y0);
    const float top = img.at(x0, y0, c) + (img.at(x1, y0, c) - img.at(x0, y0, c)) * fx;
    const float bottom = img.at(x0, y1, c) + (img.at(x1, y1, c) - img.at(x0, y1, c)) * fx;
    return top + (bottom - top) * fy;
}

float sample_clamped(const DepthMap& d, float sx, float sy) {
    sx = std::clamp(sx, 0.0f, static_cast<float>(d.width() - 1));
    sy = std::clamp(sy, 0.0f, static_cast<float>(d.height() - 1));
    const int x0 = static_cast<int>(std::floor(sx));
    const int y0 = static_cast<int>(std::floor(sy));
    const int x1 = std::min(x0 + 1, d.width() - 1);
    const int y1 = std::min(y0 + 1, d.height() - 1);
    const float fx = sx - static_cast<float>(x0);
    const float fy = sy - static_cast<float>(y0);
    const float top = d.at(x0, y0) + (d.at(x1, y0) - d.at(x0, y0)) * fx;
    const float bottom = d.at(x0, y1) + (d.at(x1, y1) - d.at(x0, y1)) * fx;
    return top + (bottom - top) * fy;
}

struct Transform {
    double box_w = 0.0;
    double box_h = 0.0;
    double center_x = 0.0;
    double center_y = 0.0;
    double cos_t = 1.0;
    double sin_t = 0.0;
    double scale_x = 1.0;
    double scale_y = 1.0;

    Transform(const RenderedObject& render, const Placement& place) {
        box_w = std::max(1.0, std::round(render.rgba.width() * place.scale));
        box_h = std::max(1.0, std::round(render.rgba.height() * place.scale));
        center_x = place.x + box_w / 2.0;
        center_y = place.y + box_h / 2.0;
        const double theta = place.rotation_deg * std::numbers::pi / 180.0;
        cos_t = std::cos(theta);
        sin_t = std::sin(theta);
        scale_x = box_w / render.rgba.width();
        scale_y = box_h / render.rgba.height();
    }

    // Canvas pixel center -> position inside the scaled box, or nullopt.
    bool to_box(int px, int py, double& bx, double& by) const {
        const double dx = px + 0.5 - center_x;
        const double dy = py + 0.5 - center_y;
        bx = cos_t * dx + sin_t * dy + box_w / 2.0;
        by = -sin_t * dx + cos_t * dy + box_h / 2.0;
        return bx >= 0.0 && by >= 0.0 && bx < box_w && by < box_h;
    }

    Rect canvas_bounds() const {
        double min_x = 1e300, min_y = 1e300, max_x = -1e300, max_y = -1e300;
        for (int i = 0; i < 4; ++i) {
            const double ux = (i & 1 ? 0.5 : -0.5) * box_w;
            const double uy = (i & 2 ? 0.5 : -0.5) * box_h;
            const double x = center_x + cos_t * ux - sin_t * uy;
            const double y = center_y + sin_t * ux + cos_t * uy;
            min_x = std::min(min_x, x);
            max_x = std::max(max_x, x);
            min_y = std::min(min_y, y);
            max_y = std::max(max_y, y);
        }
        const int x0 = static_cast<int>(std::floor(min_x));
        const int y0 = static_cast<int>(std::floor(min_y));
        return {x0, y0, static_cast<int>(std::ceil(max_x)) - x0, static_cast<int>(std::ceil(max_y)) - y0};
    }
};

Placement clamp_suggestion(const Placement& place, int box_w, int box_h, int canvas_w, int canvas_h) {
    Placement s = place;
    s.x = std::clamp(place.x, 0, std::max(0, canvas_w - box_w));
    s.y = std::clamp(place.y, 0, std::max(0, canvas_h - box_h));
    return s;
}

}  // namespace

json to_json(const Placement& p) {
    return {{"x", p.x}, {"y", p.y}, {"scale", p.scale}, {"rotation_deg", p.rotation_deg}};
}

Placement placement_from_json(const json& j) {
    if (!j.is_object()) {
        throw ValidationError("placement", "placement must be an object with x, y, scale, rotation_deg");
    }
    Placement p;
    try {
        if (!j.contains("x") || !j.contains("y")) {
            throw ValidationError("placement", "placement requires \"x\" and \"y\"");
        }
        p.x = j.at("x").get<int>();
        p.y = j.at("y").get<int>();
        p.scale = j.value("scale", 1.0);
        p.rotation_deg = j.value("rotation_deg", 0.0);
    } catch (const json::exception& e) {
        throw ValidationError("placement", std::string("malformed placement: ") + e.what());
    }
    if (!(p.scale > 0.0) || !std::isfinite(p.scale)) {
        throw ValidationError("scale", "placement scale must be a positive number");
    }
    if (!std::isfinite(p.rotation_deg)) {
        throw ValidationError("rotation_deg", "placement rotation must be finite");
    }
    return p;
}

void RenderedObject::validate() const {
    if (rgba.channels() != 4 || rgba.empty()) {
        throw ValidationError("render", "render must be a non-empty RGBA image");
    }
    if (depth.width() != rgba.width() || depth.height() != rgba.height()) {
        throw ValidationError("render_depth", "render depth must match the render's size");
    }
    for (int y = 0; y < rgba.height(); ++y) {
        for (int x = 0; x < rgba.width(); ++x) {
            const float a = rgba.at(x, y, 3);
            if (!(a >= 0.0f && a <= 1.0f)) {
                throw ValidationError("render", "render alpha outside [0, 1]");
            }
            if (a > 0.0f && !std::isfinite(depth.at(x, y))) {
                throw ValidationError("render_depth", "render depth is not finite under the object");
            }
        }
    }
}

BinaryMask::BinaryMask(int width, int height, std::uint8_t fill)
    : m_width(width), m_height(height), m_bits(static_cast<std::size_t>(width) * height, fill) {}

std::size_t BinaryMask::count() const noexcept {
    return static_cast<std::size_t>(std::count(m_bits.begin(), m_bits.end(), std::uint8_t{1}));
}

Rect BinaryMask::bbox() const {
    int x0 = m_width, y0 = m_height, x1 = -1, y1 = -1;
    for (int y = 0; y < m_height; ++y) {
        for (int x = 0; x < m_width; ++x) {
            if (at(x, y)) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
        }
    }
    if (x1 < 0) {
        return {};
    }
    return {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

BinaryMask dilate(const BinaryMask& mask, int radius) {
    if (radius <= 0) {
        return mask;
    }
    // Separable square max filter.
    BinaryMask horizontal(mask.width(), mask.height());
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            std::uint8_t v = 0;
            for (int dx = std::max(0, x - radius); dx <= std::min(mask.width() - 1, x + radius) && !v; ++dx) {
                v = mask.at(dx, y);
            }
            horizontal.at(x, y) = v;
        }
    }
    BinaryMask out(mask.width(), mask.height());
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            std::uint8_t v = 0;
            for (int dy = std::max(0, y - radius); dy <= std::min(mask.height() - 1, y + radius) && !v; ++dy) {
                v = horizontal.at(x, dy);
            }
            out.at(x, y) = v;
        }
    }
    return out;
}

BinaryMask erode(const BinaryMask& mask, int radius) {
    BinaryMask inverted(mask.width(), mask.height());
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            inverted.at(x, y) = mask.at(x, y) ? 0 : 1;
        }
    }
    BinaryMask grown = dilate(inverted, radius);
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            grown.at(x, y) = grown.at(x, y) ? 0 : 1;
        }
    }
    return grown;
}

LatentGrid derive_latent_mask(const BinaryMask& pixel_mask, int scale_factor, int channels) {
    if (scale_factor < 1 || channels < 1) {
        throw ContractError("derive_latent_mask: scale factor and channels must be positive");
    }
    if (pixel_mask.width() == 0 || pixel_mask.height() == 0) {
        throw ContractError("derive_latent_mask: empty mask");
    }
    const int lw = (pixel_mask.width() + scale_factor - 1) / scale_factor;
    const int lh = (pixel_mask.height() + scale_factor - 1) / scale_factor;
    auto reflect = [](int i, int n) {
        if (n == 1) {
            return 0;
        }
        const int period = 2 * n - 2;
        i %= period;
        return i < n ? i : period - i;
    };
    LatentGrid latent({channels, lh, lw});
    for (int y = 0; y < lh; ++y) {
        for (int x = 0; x < lw; ++x) {
            bool any = false;
            for (int py = y * scale_factor; py < (y + 1) * scale_factor && !any; ++py) {
                for (int px = x * scale_factor; px < (x + 1) * scale_factor && !any; ++px) {
                    any = pixel_mask.at(reflect(px, pixel_mask.width()), reflect(py, pixel_mask.height())) != 0;
                }
            }
            for (int c = 0; c < channels; ++c) {
                latent.at(c, y, x) = any ? 1.0f : 0.0f;
            }
        }
    }
    return latent;
}

BinaryMask latent_mask_footprint(const LatentGrid& latent_mask, int scale_factor) {
    const Shape3& s = latent_mask.shape();
    BinaryMask out(s.width * scale_factor, s.height * scale_factor);
    for (int y = 0; y < out.height(); ++y) {
        for (int x = 0; x < out.width(); ++x) {
            out.at(x, y) = latent_mask.at(0, y / scale_factor, x / scale_factor) != 0.0f ? 1 : 0;
        }
    }
    return out;
}

WarpedRender warp_render(const RenderedObject& render, int canvas_width, int canvas_height, const Placement& place) {
    render.validate();
    if (!(place.scale > 0.0) || !std::isfinite(place.scale)) {
        throw ValidationError("scale", "placement scale must be a positive number");
    }
    const Transform tf(render, place);
    const Rect canvas{0, 0, canvas_width, canvas_height};
    const Rect bounds = intersect(tf.canvas_bounds(), canvas);
    if (bounds.empty()) {
        throw PlacementError("render placed at (" + std::to_string(place.x) + ", " + std::to_string(place.y) +
                                 ") lies entirely outside the " + std::to_string(canvas_width) + "x" +
                                 std::to_string(canvas_height) + " background",
                             clamp_suggestion(place, static_cast<int>(tf.box_w), static_cast<int>(tf.box_h),
                                              canvas_width, canvas_height));
    }

    WarpedRender out{Image(canvas_width, canvas_height, 3),
                     std::vector<float>(static_cast<std::size_t>(canvas_width) * canvas_height, 0.0f),
                     DepthMap(canvas_width, canvas_height), bounds};
    for (int py = bounds.y; py < bounds.y + bounds.height; ++py) {
        for (int px = bounds.x; px < bounds.x + bounds.width; ++px) {
            double bx = 0.0, by = 0.0;
            if (!tf.to_box(px, py, bx, by)) {
                continue;
            }
            const auto sx = static_cast<float>(bx / tf.scale_x - 0.5);
            const auto sy = static_cast<float>(by / tf.scale_y - 0.5);
            const float a = std::clamp(sample_clamped(render.rgba, 3, sx, sy), 0.0f, 1.0f);
            out.alpha[static_cast<std::size_t>(py) * canvas_width + px] = a;
            // Premultiplied sampling avoids dark fringes at the silhouette.
            float rgb[3] = {0, 0, 0};
            {
                const float cx = std::clamp(sx, 0.0f, static_cast<float>(render.rgba.width() - 1));
                const float cy = std::clamp(sy, 0.0f, static_cast<float>(render.rgba.height() - 1));
                const int x0 = static_cast<int>(std::floor(cx));
                const int y0 = static_cast<int>(std::floor(cy));
                const int x1 = std::min(x0 + 1, render.rgba.width() - 1);
                const int y1 = std::min(y0 + 1, render.rgba.height() - 1);
                const float fx = cx - static_cast<float>(x0);
                const float fy = cy - static_cast<float>(y0);
                const float w[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
                const int xs[4] = {x0, x1, x0, x1};
                const int ys[4] = {y0, y0, y1, y1};
                for (int k = 0; k < 4; ++k) {
                    const float pa = render.rgba.at(xs[k], ys[k], 3);
                    for (int c = 0; c < 3; ++c) {
                        rgb[c] += w[k] * pa * render.rgba.at(xs[k], ys[k], c);
                    }
                }
            }
            for (int c = 0; c < 3; ++c) {
                out.premultiplied.at(px, py, c) = std::min(rgb[c], a);
            }
            out.depth.at(px, py) = sample_clamped(render.depth, sx, sy);
        }
    }
    return out;
}

PasteResult paste(const RenderedObject& render, const Image& bg, const Placement& place, const PasteOptions& options) {
    if (bg.width() < kMinBackgroundSide || bg.height() < kMinBackgroundSide) {
        throw ValidationError("background", "background must be at least 64x64, got " + std::to_string(bg.width()) +
                                                "x" + std::to_string(bg.height()));
    }
    if (options.dilation_radius < 0) {
        throw ValidationError("mask_dilation", "mask dilation radius must be >= 0");
    }
    const WarpedRender warped = warp_render(render, bg.width(), bg.height(), place);
    const Image base = to_rgb(bg);

    PasteResult result{base, {}, BinaryMask(bg.width(), bg.height())};
    for (int y = warped.bounds.y; y < warped.bounds.y + warped.bounds.height; ++y) {
        for (int x = warped.bounds.x; x < warped.bounds.x + warped.bounds.width; ++x) {
            const float a = warped.alpha[static_cast<std::size_t>(y) * bg.width() + x];
            if (a == 0.0f) {
                continue;
            }
            for (int c = 0; c < 3; ++c) {
                result.coarse.at(x, y, c) = warped.premultiplied.at(x, y, c) + (1.0f - a) * base.at(x, y, c);
            }
            if (a > 0.5f) {
                result.footprint.at(x, y) = 1;
            }
        }
    }
    result.mask.pixel = dilate(result.footprint, options.dilation_radius);
    result.mask.latent = derive_latent_mask(result.mask.pixel, options.scale_factor, options.latent_channels);
    return result;
}

BackgroundDepthSource depth_source_from_string(const std::string& s) {
    if (s == "estimator") {
        return BackgroundDepthSource::estimator;
    }
    if (s == "constant_far") {
        return BackgroundDepthSource::constant_far;
    }
    throw ValidationError("bg_depth_source", "bg_depth_source must be \"estimator\" or \"constant_far\"");
}

std::string to_string(BackgroundDepthSource source) {
    return source == BackgroundDepthSource::estimator ? "estimator" : "constant_far";
}

ComposedDepth compose_depth(const RenderedObject& render, const Image& bg, const Placement& place,
                            BackgroundDepthSource source, DepthEstimator* estimator) {
    if (source == BackgroundDepthSource::estimator && estimator == nullptr) {
        throw BackendError("depth estimator unavailable; use bg_depth_source=constant_far");
    }
    const WarpedRender warped = warp_render(render, bg.width(), bg.height(), place);
    DepthMap raw(bg.width(), bg.height(), 0.0f);
    if (source == BackgroundDepthSource::estimator) {
        raw = estimator->estimate(to_rgb(bg));
        if (raw.width() != bg.width() || raw.height() != bg.height()) {
            raw = resize_bilinear(raw, bg.width(), bg.height());
        }
    }
    for (int y = 0; y < bg.height(); ++y) {
        for (int x = 0; x < bg.width(); ++x) {
            if (warped.alpha[static_cast<std::size_t>(y) * bg.width() + x] > 0.5f) {
                raw.at(x, y) = warped.depth.at(x, y);
            }
        }
    }

    ComposedDepth out;
    auto values = raw.values();
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const double min_v = *lo;
    const double range = static_cast<double>(*hi) - min_v;
    if (range > 0.0) {
        out.offset = min_v;
        out.gain = 1.0 / range;
        for (auto& v : values) {
            v = std::clamp(static_cast<float>((v - out.offset) * out.gain), 0.0f, 1.0f);
        }
    } else {
        for (auto& v : values) {
            v = std::clamp(v, 0.0f, 1.0f);
        }
    }
    out.depth = std::move(raw);
    return out;
}

}  // namespace freeinsert
