// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/toy_backend.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "freeinsert/ddim.hpp"
#include "freeinsert/errors.hpp"
#include "freeinsert/hashing.hpp"

namespace freeinsert {

namespace {

constexpr const char* kRes0 = "up.0.res.0";
constexpr const char* kAttn0 = "up.0.attn.0";
constexpr const char* kRes1 = "up.0.res.1";
constexpr const char* kAttn1 = "up.1.attn.0";

struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> w;

    static Matrix random(std::mt19937_64& rng, int rows, int cols, float scale) {
        std::normal_distribution<float> normal(0.0f, 1.0f);
        Matrix m{rows, cols, std::vector<float>(static_cast<std::size_t>(rows) * cols)};
        const float s = scale / std::sqrt(static_cast<float>(cols));
        for (auto& v : m.w) {
            v = normal(rng) * s;
        }
        return m;
    }

    // out[r] = sum_c w[r, c] * in[c]
    void apply(const float* in, float* out) const {
        for (int r = 0; r < rows; ++r) {
            float acc = 0.0f;
            const float* row = &w[static_cast<std::size_t>(r) * cols];
            for (int c = 0; c < cols; ++c) {
                acc += row[c] * in[c];
            }
            out[r] = acc;
        }
    }
};

std::vector<float> random_vector(std::uint64_t seed, int n, float scale) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, scale);
    std::vector<float> v(static_cast<std::size_t>(n));
    for (auto& x : v) {
        x = normal(rng);
    }
    return v;
}

// Token-major activations: tokens x dim.
using Tokens = std::vector<float>;

FeatureTensor spatial_from_tokens(const Tokens& tokens, int dim, int h, int w) {
    FeatureTensor t{{dim, h, w}, std::vector<float>(tokens.size())};
    const int n = h * w;
    for (int p = 0; p < n; ++p) {
        for (int d = 0; d < dim; ++d) {
            t.data[static_cast<std::size_t>(d) * n + p] = tokens[static_cast<std::size_t>(p) * dim + d];
        }
    }
    return t;
}

Tokens tokens_from_spatial(const FeatureTensor& t, int dim, int h, int w) {
    const int n = h * w;
    Tokens tokens(static_cast<std::size_t>(n) * dim);
    for (int p = 0; p < n; ++p) {
        for (int d = 0; d < dim; ++d) {
            tokens[static_cast<std::size_t>(p) * dim + d] = t.data[static_cast<std::size_t>(d) * n + p];
        }
    }
    return tokens;
}

class ToyDenoiser final : public DenoiserBackend {
public:
    ToyDenoiser(std::uint64_t seed, Shape3 shape, ToyDenoiserOptions options)
        : m_seed(seed), m_shape(shape), m_dim(options.hidden) {
        if (shape.channels <= 0 || m_dim <= 0) {
            throw ConfigError("toy denoiser needs positive channel and hidden sizes");
        }
        std::mt19937_64 rng(seed);
        const int c = shape.channels;
        m_in = Matrix::random(rng, m_dim, c, 1.0f);
        m_time = Matrix::random(rng, m_dim, 4, 0.5f);
        m_res0 = Matrix::random(rng, m_dim, m_dim, 1.0f);
        for (auto& layer : m_attn) {
            layer.q = Matrix::random(rng, m_dim, m_dim, 1.0f);
            layer.k = Matrix::random(rng, m_dim, m_dim, 1.0f);
            layer.v = Matrix::random(rng, m_dim, m_dim, 1.0f);
            layer.out = Matrix::random(rng, m_dim, m_dim, 0.5f);
        }
        m_out = Matrix::random(rng, c, m_dim, 0.5f * options.gain);
        m_depth_dir = random_vector(seed ^ 0x9e3779b97f4a7c15ULL, m_dim, 0.5f);

        const bool dynamic = shape.height <= 0 || shape.width <= 0;
        const int h = dynamic ? -1 : shape.height;
        const int w = dynamic ? -1 : shape.width;
        const int n = dynamic ? -1 : shape.height * shape.width;
        m_catalog = LayerCatalog({{kRes0, LayerKind::spatial, {m_dim, h, w}},
                                  {kAttn0, LayerKind::attention, {n, m_dim}},
                                  {kRes1, LayerKind::spatial, {m_dim, h, w}},
                                  {kAttn1, LayerKind::attention, {n, m_dim}}});
    }

    std::string id() const override { return "toy-denoiser/" + std::to_string(m_seed); }
    const LayerCatalog& catalog() const override { return m_catalog; }

    Prediction predict(const LatentGrid& z, const StepInfo& step, const ConditioningSet& cond,
                       const FeatureBundle* overrides) override {
        cond.validate();
        const Shape3& s = z.shape();
        if (s.channels != m_shape.channels) {
            throw ContractError("toy denoiser expects " + std::to_string(m_shape.channels) + " latent channels");
        }
        if (m_shape.height > 0 && (s.height != m_shape.height || s.width != m_shape.width)) {
            throw ContractError("toy denoiser built for latent " + m_shape.to_string() + ", got " + s.to_string());
        }
        if (overrides != nullptr) {
            check_overrides(*overrides, s);
        }

        const auto depth_tokens = pool_depth(cond, s);
        Prediction cond_pass;
        cond_pass.captured.timestep = step.index;
        cond_pass.eps = forward(z, step, condition_vector(cond, true), depth_tokens, overrides, &cond_pass.captured);

        if (cond.guidance_weight != 1.0) {
            const LatentGrid uncond = forward(z, step, condition_vector(cond, false), depth_tokens, overrides, nullptr);
            const auto w = static_cast<float>(cond.guidance_weight);
            auto ev = cond_pass.eps.values();
            auto uv = uncond.values();
            for (std::size_t i = 0; i < ev.size(); ++i) {
                ev[i] = uv[i] + w * (ev[i] - uv[i]);
            }
        }
        return cond_pass;
    }

private:
    struct Attention {
        Matrix q, k, v, out;
    };

    void check_overrides(const FeatureBundle& o, const Shape3& s) const {
        m_catalog.check_bundle(o);
        for (const auto& [id, t] : o.spatial) {
            if (t.shape != std::vector<int>{m_dim, s.height, s.width}) {
                throw ContractError("override for \"" + id + "\" does not match the input resolution");
            }
        }
        auto check_attn = [&](const FeatureMap& map) {
            for (const auto& [id, t] : map) {
                if (t.shape != std::vector<int>{s.height * s.width, m_dim}) {
                    throw ContractError("override for \"" + id + "\" does not match the input resolution");
                }
            }
        };
        check_attn(o.queries);
        check_attn(o.keys);
    }

    std::vector<float> condition_vector(const ConditioningSet& cond, bool conditional) const {
        std::vector<float> c(static_cast<std::size_t>(m_dim), 0.0f);
        if (!conditional) {
            return c;
        }
        Sha256 h;
        h.update_pod(m_seed);
        h.update(cond.prompt_text);
        c = random_vector(h.digest64(), m_dim, 0.5f);
        auto project = [&](const std::vector<float>& emb, float weight, std::uint64_t salt) {
            if (emb.empty()) {
                return;
            }
            std::mt19937_64 rng(m_seed ^ salt ^ (emb.size() * 0x100000001b3ULL));
            const Matrix p = Matrix::random(rng, m_dim, static_cast<int>(emb.size()), 1.0f);
            std::vector<float> projected(static_cast<std::size_t>(m_dim));
            p.apply(emb.data(), projected.data());
            for (int d = 0; d < m_dim; ++d) {
                c[static_cast<std::size_t>(d)] += weight * projected[static_cast<std::size_t>(d)];
            }
        };
        if (cond.content_embedding) {
            project(*cond.content_embedding, cond.content_weight, 0xc0ffee);
        }
        if (cond.style_embedding) {
            project(*cond.style_embedding, cond.style_weight, 0x57173);
        }
        return c;
    }

    // Mean depth over the pixels each latent cell covers.
    std::vector<float> pool_depth(const ConditioningSet& cond, const Shape3& s) const {
        std::vector<float> out(static_cast<std::size_t>(s.height) * s.width, 0.0f);
        if (!cond.depth || cond.depth->empty()) {
            return out;
        }
        const DepthMap& d = *cond.depth;
        for (int y = 0; y < s.height; ++y) {
            const int y0 = y * d.height() / s.height;
            const int y1 = std::max(y0 + 1, (y + 1) * d.height() / s.height);
            for (int x = 0; x < s.width; ++x) {
                const int x0 = x * d.width() / s.width;
                const int x1 = std::max(x0 + 1, (x + 1) * d.width() / s.width);
                double sum = 0.0;
                for (int py = y0; py < y1; ++py) {
                    for (int px = x0; px < x1; ++px) {
                        sum += d.at(px, py);
                    }
                }
                out[static_cast<std::size_t>(y) * s.width + x] =
                    static_cast<float>(sum / ((y1 - y0) * (x1 - x0)));
            }
        }
        return out;
    }

    Tokens attend(const Attention& layer, const Tokens& x, int n, const std::string& id,
                  const FeatureBundle* overrides, FeatureBundle* capture) const {
        const int d = m_dim;
        Tokens q(x.size()), k(x.size()), v(x.size());
        for (int p = 0; p < n; ++p) {
            const float* xp = &x[static_cast<std::size_t>(p) * d];
            layer.q.apply(xp, &q[static_cast<std::size_t>(p) * d]);
            layer.k.apply(xp, &k[static_cast<std::size_t>(p) * d]);
            layer.v.apply(xp, &v[static_cast<std::size_t>(p) * d]);
        }
        if (overrides != nullptr) {
            if (auto it = overrides->queries.find(id); it != overrides->queries.end()) {
                q = it->second.data;
            }
            if (auto it = overrides->keys.find(id); it != overrides->keys.end()) {
                k = it->second.data;
            }
        }
        if (capture != nullptr) {
            capture->queries[id] = FeatureTensor{{n, d}, q};
            capture->keys[id] = FeatureTensor{{n, d}, k};
        }

        const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(d));
        Tokens out(x.size(), 0.0f);
        std::vector<float> logits(static_cast<std::size_t>(n));
        std::vector<float> mixed(static_cast<std::size_t>(d));
        for (int i = 0; i < n; ++i) {
            float max_logit = -std::numeric_limits<float>::infinity();
            for (int j = 0; j < n; ++j) {
                float dot = 0.0f;
                for (int c = 0; c < d; ++c) {
                    dot += q[static_cast<std::size_t>(i) * d + c] * k[static_cast<std::size_t>(j) * d + c];
                }
                logits[static_cast<std::size_t>(j)] = dot * inv_sqrt_d;
                max_logit = std::max(max_logit, logits[static_cast<std::size_t>(j)]);
            }
            float total = 0.0f;
            for (auto& l : logits) {
                l = std::exp(l - max_logit);
                total += l;
            }
            std::fill(mixed.begin(), mixed.end(), 0.0f);
            for (int j = 0; j < n; ++j) {
                const float a = logits[static_cast<std::size_t>(j)] / total;
                for (int c = 0; c < d; ++c) {
                    mixed[static_cast<std::size_t>(c)] += a * v[static_cast<std::size_t>(j) * d + c];
                }
            }
            layer.out.apply(mixed.data(), &out[static_cast<std::size_t>(i) * d]);
        }
        return out;
    }

    Tokens spatial_tap(Tokens x, const char* id, int h, int w, const FeatureBundle* overrides,
                       FeatureBundle* capture) const {
        if (overrides != nullptr) {
            if (auto it = overrides->spatial.find(id); it != overrides->spatial.end()) {
                x = tokens_from_spatial(it->second, m_dim, h, w);
            }
        }
        if (capture != nullptr) {
            capture->spatial[id] = spatial_from_tokens(x, m_dim, h, w);
        }
        return x;
    }

    LatentGrid forward(const LatentGrid& z, const StepInfo& step, const std::vector<float>& cvec,
                       const std::vector<float>& depth, const FeatureBundle* overrides,
                       FeatureBundle* capture) const {
        const Shape3& s = z.shape();
        const int n = s.height * s.width;
        const int d = m_dim;

        const double frac = step.num_steps > 0 ? static_cast<double>(step.index) / step.num_steps : 0.0;
        const float tf[4] = {static_cast<float>(std::sin(std::numbers::pi * frac)),
                             static_cast<float>(std::cos(std::numbers::pi * frac)),
                             static_cast<float>(std::sin(2.0 * std::numbers::pi * frac)),
                             static_cast<float>(std::cos(2.0 * std::numbers::pi * frac))};
        std::vector<float> temb(static_cast<std::size_t>(d));
        m_time.apply(tf, temb.data());

        Tokens h(static_cast<std::size_t>(n) * d);
        std::vector<float> zp(static_cast<std::size_t>(s.channels));
        std::vector<float> tmp(static_cast<std::size_t>(d));
        for (int y = 0; y < s.height; ++y) {
            for (int x = 0; x < s.width; ++x) {
                const int p = y * s.width + x;
                for (int c = 0; c < s.channels; ++c) {
                    zp[static_cast<std::size_t>(c)] = z.at(c, y, x);
                }
                m_in.apply(zp.data(), tmp.data());
                for (int k = 0; k < d; ++k) {
                    const auto kk = static_cast<std::size_t>(k);
                    tmp[kk] += temb[kk] + cvec[kk] + m_depth_dir[kk] * depth[static_cast<std::size_t>(p)];
                }
                m_res0.apply(tmp.data(), &h[static_cast<std::size_t>(p) * d]);
            }
        }

        Tokens f0 = spatial_tap(std::move(h), kRes0, s.height, s.width, overrides, capture);
        Tokens a0 = attend(m_attn[0], f0, n, kAttn0, overrides, capture);
        for (std::size_t i = 0; i < f0.size(); ++i) {
            a0[i] += f0[i];
        }
        Tokens f1 = spatial_tap(std::move(a0), kRes1, s.height, s.width, overrides, capture);
        Tokens a1 = attend(m_attn[1], f1, n, kAttn1, overrides, capture);

        LatentGrid eps(s, z.space());
        std::vector<float> g(static_cast<std::size_t>(d));
        std::vector<float> e(static_cast<std::size_t>(s.channels));
        for (int p = 0; p < n; ++p) {
            for (int k = 0; k < d; ++k) {
                const auto idx = static_cast<std::size_t>(p) * d + k;
                g[static_cast<std::size_t>(k)] = f1[idx] + a1[idx];
            }
            m_out.apply(g.data(), e.data());
            for (int c = 0; c < s.channels; ++c) {
                eps.at(c, p / s.width, p % s.width) = e[static_cast<std::size_t>(c)];
            }
        }
        return eps;
    }

    std::uint64_t m_seed;
    Shape3 m_shape;
    int m_dim;
    Matrix m_in, m_time, m_res0, m_out;
    Attention m_attn[2];
    std::vector<float> m_depth_dir;
    LayerCatalog m_catalog;
};

class ToyVae final : public VaeBackend {
public:
    ToyVae(int scale, double bound) : m_scale(scale), m_bound(bound) {
        if (scale < 1) {
            throw ConfigError("toy VAE scale factor must be >= 1");
        }
        if (m_bound < 0.0) {
            m_bound = scale == 1 ? 1e-6 : 0.1;
        }
    }

    std::string id() const override { return "toy-vae/x" + std::to_string(m_scale); }
    int scale_factor() const override { return m_scale; }
    int latent_channels() const override { return 4; }
    double round_trip_bound() const override { return m_bound; }

    LatentGrid encode(const Image& image) override {
        if (image.width() % m_scale != 0 || image.height() % m_scale != 0) {
            throw ContractError("toy VAE: image sides must be multiples of " + std::to_string(m_scale));
        }
        const Image rgb = to_rgb(image.channels() == 4 ? strip_alpha(image) : image);
        const int h = image.height() / m_scale;
        const int w = image.width() / m_scale;
        LatentGrid z({4, h, w}, SpaceTag::latent);
        const double inv_area = 1.0 / (m_scale * m_scale);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double sum[3] = {0, 0, 0};
                for (int py = 0; py < m_scale; ++py) {
                    for (int px = 0; px < m_scale; ++px) {
                        for (int c = 0; c < 3; ++c) {
                            sum[c] += 2.0 * rgb.at(x * m_scale + px, y * m_scale + py, c) - 1.0;
                        }
                    }
                }
                for (int c = 0; c < 3; ++c) {
                    z.at(c, y, x) = static_cast<float>(sum[c] * inv_area);
                }
                z.at(3, y, x) = static_cast<float>((0.299 * sum[0] + 0.587 * sum[1] + 0.114 * sum[2]) * inv_area);
            }
        }
        return z;
    }

    Image decode(const LatentGrid& latent) override {
        const Shape3& s = latent.shape();
        if (s.channels < 3) {
            throw ContractError("toy VAE decode needs at least 3 latent channels");
        }
        Image out(s.width * m_scale, s.height * m_scale, 3);
        for (int y = 0; y < out.height(); ++y) {
            for (int x = 0; x < out.width(); ++x) {
                for (int c = 0; c < 3; ++c) {
                    const float v = (latent.at(c, y / m_scale, x / m_scale) + 1.0f) * 0.5f;
                    out.at(x, y, c) = std::clamp(v, 0.0f, 1.0f);
                }
            }
        }
        return out;
    }

private:
    static Image strip_alpha(const Image& rgba) {
        Image out(rgba.width(), rgba.height(), 3);
        for (int y = 0; y < rgba.height(); ++y) {
            for (int x = 0; x < rgba.width(); ++x) {
                for (int c = 0; c < 3; ++c) {
                    out.at(x, y, c) = rgba.at(x, y, c);
                }
            }
        }
        return out;
    }

    int m_scale;
    double m_bound;
};

class ToyRefiner final : public Refiner {
public:
    ToyRefiner(std::uint64_t seed, int channels)
        : m_seed(seed), m_denoiser(make_toy_denoiser(seed, {channels, 0, 0})) {}

    std::string id() const override { return "toy-refiner/" + std::to_string(m_seed); }

    LatentGrid refine(const LatentGrid& z, int start_t, double remaining_fraction, const NoiseSchedule& schedule,
                      const ConditioningSet& cond) override {
        if (remaining_fraction < 0.0 || remaining_fraction > 1.0) {
            throw RangeError("refiner: remaining fraction must lie in [0, 1]");
        }
        return ddim_sample(z, *m_denoiser, cond, schedule, start_t, 0);
    }

private:
    std::uint64_t m_seed;
    std::unique_ptr<DenoiserBackend> m_denoiser;
};

Image box_blur_luma(const Image& image, int radius) {
    Image luma = to_luma(image);
    Image out(luma.width(), luma.height(), 1);
    for (int y = 0; y < luma.height(); ++y) {
        for (int x = 0; x < luma.width(); ++x) {
            double sum = 0.0;
            int count = 0;
            for (int dy = -radius; dy <= radius; ++dy) {
                for (int dx = -radius; dx <= radius; ++dx) {
                    const int px = x + dx;
                    const int py = y + dy;
                    if (px >= 0 && py >= 0 && px < luma.width() && py < luma.height()) {
                        sum += luma.at(px, py, 0);
                        ++count;
                    }
                }
            }
            out.at(x, y, 0) = static_cast<float>(sum / count);
        }
    }
    return out;
}

class ToyDepthEstimator final : public DepthEstimator {
public:
    std::string id() const override { return "toy-depth"; }

    // Lower and brighter reads as nearer; min-max normalized.
    DepthMap estimate(const Image& image) override {
        const int w = image.width();
        const int h = image.height();
        const Image blurred = box_blur_luma(image, 2);
        DepthMap raw(w, h);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const float vertical = h > 1 ? static_cast<float>(y) / (h - 1) : 0.0f;
                raw.at(x, y) = 0.6f * vertical + 0.4f * blurred.at(x, y, 0);
            }
        }
        auto values = raw.values();
        const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
        const float min_v = *lo;
        const float range = *hi - *lo;
        for (auto& v : values) {
            v = range > 0.0f ? (v - min_v) / range : 0.0f;
        }
        return raw;
    }
};

// Soft 4x4x4 color histogram: each pixel spreads its weight trilinearly over
// the neighbouring bin centers, so small color changes move mass smoothly.
std::vector<float> color_features(const Image& image) {
    const Image small = resize_bilinear(to_rgb(image), 32, 32);
    std::vector<float> hist(64, 0.0f);
    for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) {
            int lo[3];
            float frac[3];
            for (int c = 0; c < 3; ++c) {
                const float pos = std::clamp(small.at(x, y, c) * 4.0f - 0.5f, 0.0f, 3.0f);
                lo[c] = std::min(2, static_cast<int>(pos));
                frac[c] = pos - static_cast<float>(lo[c]);
            }
            for (int corner = 0; corner < 8; ++corner) {
                int bin = 0;
                float weight = 1.0f / 1024.0f;
                for (int c = 0; c < 3; ++c) {
                    const int up = (corner >> c) & 1;
                    bin = bin * 4 + lo[c] + up;
                    weight *= up ? frac[c] : 1.0f - frac[c];
                }
                hist[static_cast<std::size_t>(bin)] += weight;
            }
        }
    }
    // 2x2 layout of mean colors
    for (int gy = 0; gy < 2; ++gy) {
        for (int gx = 0; gx < 2; ++gx) {
            for (int c = 0; c < 3; ++c) {
                double sum = 0.0;
                for (int y = gy * 16; y < gy * 16 + 16; ++y) {
                    for (int x = gx * 16; x < gx * 16 + 16; ++x) {
                        sum += small.at(x, y, c);
                    }
                }
                hist.push_back(static_cast<float>(0.25 * sum / 256.0));
            }
        }
    }
    return hist;
}

std::vector<float> gradient_features(const Image& image) {
    const Image gray = to_luma(resize_bilinear(to_rgb(image), 64, 64));
    constexpr int kCells = 4;
    constexpr int kBins = 8;
    constexpr int kCell = 64 / kCells;
    // Floor of the per-cell normalizer, in summed gradient magnitude; keeps
    // near-flat cells from blowing noise up to unit length.
    constexpr double kNormFloor = 8.0;
    std::vector<float> out(kCells * kCells * kBins + 1, 0.0f);
    double total_energy = 0.0;
    for (int y = 1; y < 63; ++y) {
        for (int x = 1; x < 63; ++x) {
            const float gx = gray.at(x + 1, y, 0) - gray.at(x - 1, y, 0);
            const float gy = gray.at(x, y + 1, 0) - gray.at(x, y - 1, 0);
            const float mag = std::sqrt(gx * gx + gy * gy);
            total_energy += mag;
            float angle = std::atan2(gy, gx);
            if (angle < 0) {
                angle += static_cast<float>(std::numbers::pi);
            }
            // Orientation is cyclic; split the magnitude between the two
            // nearest bin centers.
            const float pos = angle / static_cast<float>(std::numbers::pi) * kBins - 0.5f;
            const float base = std::floor(pos);
            const float frac = pos - base;
            const int b0 = (static_cast<int>(base) + kBins) % kBins;
            const int b1 = (b0 + 1) % kBins;
            const int cell = (y / kCell) * kCells + (x / kCell);
            out[static_cast<std::size_t>(cell * kBins + b0)] += mag * (1.0f - frac);
            out[static_cast<std::size_t>(cell * kBins + b1)] += mag * frac;
        }
    }
    for (int cell = 0; cell < kCells * kCells; ++cell) {
        double norm = 0.0;
        for (int b = 0; b < kBins; ++b) {
            norm += out[static_cast<std::size_t>(cell * kBins + b)] * out[static_cast<std::size_t>(cell * kBins + b)];
        }
        norm = std::sqrt(norm + kNormFloor * kNormFloor);
        for (int b = 0; b < kBins; ++b) {
            out[static_cast<std::size_t>(cell * kBins + b)] /= static_cast<float>(norm);
        }
    }
    // A constant bias term keeps flat images from producing a zero vector.
    out.back() = 0.5f + static_cast<float>(std::min(1.0, total_energy / (62.0 * 62.0)));
    return out;
}

class ToyEmbedder final : public ImageEmbedder {
public:
    explicit ToyEmbedder(std::string id) : m_id(std::move(id)) {
        if (m_id != "toy-clip" && m_id != "toy-dino" && m_id != "toy-ip") {
            throw ConfigError("unknown toy embedder \"" + m_id + "\"");
        }
    }

    std::string id() const override { return m_id; }

    std::vector<float> embed(const Image& image) override {
        if (image.empty()) {
            throw ContractError("cannot embed an empty image");
        }
        if (m_id == "toy-clip") {
            return color_features(image);
        }
        if (m_id == "toy-dino") {
            return gradient_features(image);
        }
        auto v = color_features(image);
        const auto g = gradient_features(image);
        v.insert(v.end(), g.begin(), g.end());
        return v;
    }

private:
    std::string m_id;
};

class ToyPerceptual final : public PerceptualDistance {
public:
    std::string id() const override { return "toy-lpips"; }

    double distance(const Image& a, const Image& b) override {
        double total = 0.0;
        constexpr int kScales[3] = {64, 32, 16};
        for (int size : kScales) {
            const auto fa = features(resize_bilinear(to_rgb(a), size, size));
            const auto fb = features(resize_bilinear(to_rgb(b), size, size));
            double sum = 0.0;
            for (std::size_t i = 0; i < fa.size(); ++i) {
                const double d = static_cast<double>(fa[i]) - fb[i];
                sum += d * d;
            }
            total += sum / (size * size);
        }
        return total / 3.0;
    }

private:
    // Five channels per pixel (centered RGB, luma gradients), unit-normalized.
    static std::vector<float> features(const Image& img) {
        const int w = img.width();
        const int h = img.height();
        std::vector<float> out(static_cast<std::size_t>(w) * h * 5);
        auto luma = [&](int x, int y) {
            x = std::clamp(x, 0, w - 1);
            y = std::clamp(y, 0, h - 1);
            return 0.299f * img.at(x, y, 0) + 0.587f * img.at(x, y, 1) + 0.114f * img.at(x, y, 2);
        };
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                float f[5] = {img.at(x, y, 0) - 0.5f, img.at(x, y, 1) - 0.5f, img.at(x, y, 2) - 0.5f,
                              2.0f * (luma(x + 1, y) - luma(x - 1, y)), 2.0f * (luma(x, y + 1) - luma(x, y - 1))};
                float norm = 1e-6f;
                for (float v : f) {
                    norm += v * v;
                }
                norm = std::sqrt(norm);
                for (int c = 0; c < 5; ++c) {
                    out[(static_cast<std::size_t>(y) * w + x) * 5 + c] = f[c] / norm;
                }
            }
        }
        return out;
    }
};

}  // namespace

std::unique_ptr<DenoiserBackend> make_toy_denoiser(std::uint64_t seed, Shape3 latent_shape,
                                                   ToyDenoiserOptions options) {
    return std::make_unique<ToyDenoiser>(seed, latent_shape, options);
}

std::unique_ptr<VaeBackend> make_toy_vae(int scale_factor, double round_trip_bound) {
    return std::make_unique<ToyVae>(scale_factor, round_trip_bound);
}

std::unique_ptr<Refiner> make_toy_refiner(std::uint64_t seed, int latent_channels) {
    return std::make_unique<ToyRefiner>(seed, latent_channels);
}

std::unique_ptr<DepthEstimator> make_toy_depth_estimator() {
    return std::make_unique<ToyDepthEstimator>();
}

std::unique_ptr<ImageEmbedder> make_toy_embedder(const std::string& id) {
    return std::make_unique<ToyEmbedder>(id);
}

std::unique_ptr<PerceptualDistance> make_toy_perceptual() {
    return std::make_unique<ToyPerceptual>();
}

}  // namespace freeinsert
