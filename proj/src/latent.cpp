// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/latent.hpp"

#include <algorithm>
#include <cmath>

#include "freeinsert/errors.hpp"

namespace freeinsert {

std::string Shape3::to_string() const {
    return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
}

LatentGrid::LatentGrid(Shape3 shape, SpaceTag tag, float fill)
    : m_shape(shape), m_space(tag), m_values(shape.numel(), fill) {}

LatentGrid::LatentGrid(Shape3 shape, std::vector<float> values, SpaceTag tag)
    : m_shape(shape), m_space(tag), m_values(std::move(values)) {
    if (m_values.size() != m_shape.numel()) {
        throw ContractError("latent grid: " + std::to_string(m_values.size()) +
                            " values do not fill shape " + m_shape.to_string());
    }
}

bool LatentGrid::all_finite() const noexcept {
    return std::all_of(m_values.begin(), m_values.end(), [](float v) { return std::isfinite(v); });
}

void LatentGrid::require_compatible(const LatentGrid& other, const char* what) const {
    if (m_shape != other.m_shape) {
        throw ContractError(std::string(what) + ": shape mismatch " + m_shape.to_string() + " vs " +
                            other.m_shape.to_string());
    }
    if (m_space != other.m_space) {
        throw ContractError(std::string(what) + ": space tag mismatch");
    }
}

float max_abs_diff(const LatentGrid& a, const LatentGrid& b) {
    a.require_compatible(b, "max_abs_diff");
    float worst = 0.0f;
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) {
        worst = std::max(worst, std::abs(av[i] - bv[i]));
    }
    return worst;
}

}  // namespace freeinsert
