// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "freeinsert/backend.hpp"
#include "freeinsert/image.hpp"
#include "freeinsert/latent.hpp"

namespace freeinsert::testing {

inline LatentGrid random_latent(Shape3 shape, std::uint64_t seed, float stddev = 1.0f) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, stddev);
    LatentGrid z(shape);
    for (auto& v : z.values()) {
        v = normal(rng);
    }
    return z;
}

// Predicts zero noise everywhere and taps nothing.
class ZeroDenoiser final : public DenoiserBackend {
public:
    std::string id() const override { return "zero"; }
    const LayerCatalog& catalog() const override { return m_catalog; }
    Prediction predict(const LatentGrid& z, const StepInfo&, const ConditioningSet&, const FeatureBundle*) override {
        ++calls;
        return {LatentGrid(z.shape(), z.space(), 0.0f), {}};
    }
    int calls = 0;

private:
    LayerCatalog m_catalog;
};

// Smooth RGB gradient; exact under block-average VAEs only along flat blocks.
inline Image gradient_image(int w, int h, float r0 = 0.2f, float g0 = 0.5f, float b0 = 0.7f) {
    Image img(w, h, 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            img.at(x, y, 0) = r0 + 0.3f * static_cast<float>(x) / w;
            img.at(x, y, 1) = g0 + 0.2f * static_cast<float>(y) / h;
            img.at(x, y, 2) = b0 - 0.4f * static_cast<float>(x + y) / (w + h);
        }
    }
    return img;
}

// Piecewise constant on `block` x `block` tiles: exact under a block-average VAE.
inline Image blocky_image(int w, int h, int block, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> level(0, 255);
    Image img(w, h, 3);
    for (int by = 0; by < h; by += block) {
        for (int bx = 0; bx < w; bx += block) {
            float c[3];
            for (auto& v : c) {
                v = static_cast<float>(level(rng)) / 255.0f;
            }
            for (int y = by; y < std::min(h, by + block); ++y) {
                for (int x = bx; x < std::min(w, bx + block); ++x) {
                    for (int k = 0; k < 3; ++k) {
                        img.at(x, y, k) = c[k];
                    }
                }
            }
        }
    }
    return img;
}

inline Image solid_rgba(int w, int h, float r, float g, float b, float a) {
    Image img(w, h, 4);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            img.at(x, y, 0) = r;
            img.at(x, y, 1) = g;
            img.at(x, y, 2) = b;
            img.at(x, y, 3) = a;
        }
    }
    return img;
}

// RGB image with an opaque alpha channel appended.
inline Image opaque(const Image& rgb) {
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

class TempDir {
public:
    TempDir() {
        std::random_device rd;
        m_path = std::filesystem::temp_directory_path() /
                 ("freeinsert-test-" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(m_path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(m_path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return m_path; }
    std::filesystem::path operator/(const std::string& name) const { return m_path / name; }

private:
    std::filesystem::path m_path;
};

}  // namespace freeinsert::testing
