// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace freeinsert {

/// Interleaved (H x W x C) float image with values in [0, 1].
/// C is 1 (gray), 3 (RGB) or 4 (RGBA, straight alpha).
class Image {
public:
    Image() = default;
    Image(int width, int height, int channels, float fill = 0.0f);
    Image(int width, int height, int channels, std::vector<float> data);

    int width() const noexcept { return m_width; }
    int height() const noexcept { return m_height; }
    int channels() const noexcept { return m_channels; }
    bool empty() const noexcept { return m_data.empty(); }

    float& at(int x, int y, int c) { return m_data[index(x, y, c)]; }
    float at(int x, int y, int c) const { return m_data[index(x, y, c)]; }

    std::span<float> data() noexcept { return m_data; }
    std::span<const float> data() const noexcept { return m_data; }

    bool operator==(const Image&) const = default;

private:
    std::size_t index(int x, int y, int c) const noexcept {
        return (static_cast<std::size_t>(y) * m_width + x) * m_channels + c;
    }

    int m_width = 0;
    int m_height = 0;
    int m_channels = 0;
    std::vector<float> m_data;
};

/// Single-channel depth, normalized to [0, 1] with 1 = nearest.
class DepthMap {
public:
    DepthMap() = default;
    DepthMap(int width, int height, float fill = 0.0f);
    DepthMap(int width, int height, std::vector<float> values);

    int width() const noexcept { return m_width; }
    int height() const noexcept { return m_height; }
    bool empty() const noexcept { return m_values.empty(); }

    float& at(int x, int y) { return m_values[static_cast<std::size_t>(y) * m_width + x]; }
    float at(int x, int y) const { return m_values[static_cast<std::size_t>(y) * m_width + x]; }

    std::span<float> values() noexcept { return m_values; }
    std::span<const float> values() const noexcept { return m_values; }

    bool in_unit_range() const noexcept;

    bool operator==(const DepthMap&) const = default;

private:
    int m_width = 0;
    int m_height = 0;
    std::vector<float> m_values;
};

struct Rect {
    int x = 0;
    int y = 0;
    int width = 0;
    int height = 0;

    bool empty() const noexcept { return width <= 0 || height <= 0; }
    bool contains(int px, int py) const noexcept {
        return px >= x && py >= y && px < x + width && py < y + height;
    }
    bool operator==(const Rect&) const = default;
};

Rect intersect(const Rect& a, const Rect& b);

// --- I/O ---------------------------------------------------------------------

/// PNG/JPEG/... via OpenCV. Result has 3 channels, or 4 when the file has alpha
/// and `keep_alpha` is set.
Image load_image(const std::filesystem::path& path, bool keep_alpha = false);
/// 8-bit PNG; deterministic bytes for identical pixels.
void save_png(const Image& image, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_png(const Image& image);
Image decode_image(std::span<const std::uint8_t> bytes, bool keep_alpha = false);

/// 8/16-bit grayscale PNG (scaled to [0, 1]) or PFM float map.
DepthMap load_depth(const std::filesystem::path& path);
DepthMap decode_depth(std::span<const std::uint8_t> bytes);
void save_depth_png16(const DepthMap& depth, const std::filesystem::path& path);

// --- pixel helpers -------------------------------------------------------------

Image crop(const Image& image, const Rect& rect);
DepthMap crop(const DepthMap& depth, const Rect& rect);
Image resize_bilinear(const Image& image, int width, int height);
DepthMap resize_bilinear(const DepthMap& depth, int width, int height);
Image to_rgb(const Image& image);
/// Rec. 601 luma; 1-channel result.
Image to_luma(const Image& image);
/// Reflect-pads right/bottom edges so both dimensions are multiples of `multiple`.
Image pad_reflect_to_multiple(const Image& image, int multiple);
DepthMap pad_reflect_to_multiple(const DepthMap& depth, int multiple);

double mean_abs_diff(const Image& a, const Image& b);

}  // namespace freeinsert
