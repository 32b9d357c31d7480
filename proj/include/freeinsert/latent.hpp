// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace freeinsert {

struct Shape3 {
    int channels = 0;
    int height = 0;
    int width = 0;

    std::size_t numel() const noexcept {
        return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
               static_cast<std::size_t>(width);
    }
    bool operator==(const Shape3&) const = default;
    std::string to_string() const;
};

enum class SpaceTag { latent, pixel };

/// Channel-major (C x H x W) float array; the unit of all denoising math.
class LatentGrid {
public:
    LatentGrid() = default;
    LatentGrid(Shape3 shape, SpaceTag tag = SpaceTag::latent, float fill = 0.0f);
    LatentGrid(Shape3 shape, std::vector<float> values, SpaceTag tag = SpaceTag::latent);

    const Shape3& shape() const noexcept { return m_shape; }
    SpaceTag space() const noexcept { return m_space; }
    std::size_t size() const noexcept { return m_values.size(); }
    bool empty() const noexcept { return m_values.empty(); }

    std::span<float> values() noexcept { return m_values; }
    std::span<const float> values() const noexcept { return m_values; }

    float& at(int c, int y, int x) { return m_values[index(c, y, x)]; }
    float at(int c, int y, int x) const { return m_values[index(c, y, x)]; }

    bool all_finite() const noexcept;

    /// Throws ContractError unless `other` has the same shape and space tag.
    void require_compatible(const LatentGrid& other, const char* what) const;

    bool operator==(const LatentGrid& other) const = default;

private:
    std::size_t index(int c, int y, int x) const noexcept {
        return (static_cast<std::size_t>(c) * m_shape.height + y) * m_shape.width + x;
    }

    Shape3 m_shape;
    SpaceTag m_space = SpaceTag::latent;
    std::vector<float> m_values;
};

float max_abs_diff(const LatentGrid& a, const LatentGrid& b);

}  // namespace freeinsert
