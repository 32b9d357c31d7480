// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <nlohmann/json.hpp>

namespace freeinsert {

namespace {

using json = nlohmann::json;

std::vector<double> standardize(const DepthMap& d) {
    const auto v = d.values();
    double mean = 0.0;
    for (float x : v) {
        mean += x;
    }
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (float x : v) {
        var += (x - mean) * (x - mean);
    }
    var /= static_cast<double>(v.size());
    std::vector<double> out(v.size(), 0.0);
    if (var > 1e-18) {
        const double inv = 1.0 / std::sqrt(var);
        for (std::size_t i = 0; i < v.size(); ++i) {
            out[i] = (v[i] - mean) * inv;
        }
    }
    return out;
}

bool wants(std::span<const Metric> set, Metric m) {
    return std::find(set.begin(), set.end(), m) != set.end();
}

}  // namespace

void RegionSpec::validate(int width, int height) const {
    if (bbox.empty() || bbox.x < 0 || bbox.y < 0 || bbox.x + bbox.width > width || bbox.y + bbox.height > height) {
        throw RangeError("region (" + std::to_string(bbox.x) + ", " + std::to_string(bbox.y) + ", " +
                         std::to_string(bbox.width) + "x" + std::to_string(bbox.height) + ") is empty or outside " +
                         std::to_string(width) + "x" + std::to_string(height));
    }
}

RegionSpec RegionSpec::from_mask(const BinaryMask& mask, std::string geometry) {
    const Rect box = mask.bbox();
    if (box.empty()) {
        throw RangeError("cannot derive a region from an empty mask");
    }
    return {box, std::move(geometry)};
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) {
        throw ContractError("cosine_similarity: length mismatch " + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()));
    }
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    // na * nb == nb * na in IEEE arithmetic, so the result is symmetric.
    const double denom = std::sqrt(na * nb);
    if (denom == 0.0) {
        return 0.0;
    }
    return std::clamp(dot / denom, -1.0, 1.0);
}

double similarity(const Image& a, const Image& b, ImageEmbedder& embedder) {
    const auto ea = embedder.embed(to_rgb(a));
    const auto eb = embedder.embed(to_rgb(b));
    return cosine_similarity(ea, eb);
}

double lpips_distance(const Image& a, const Image& b, PerceptualDistance& perceptual) {
    const Image ra = to_rgb(a);
    const Image rb = to_rgb(b);
    if (ra == rb) {
        return 0.0;
    }
    const double d = perceptual.distance(ra, rb);
    if (!std::isfinite(d)) {
        throw BackendError(perceptual.id() + " returned a non-finite distance");
    }
    return std::max(0.0, d);
}

double d_rmse_maps(const DepthMap& a, const DepthMap& b) {
    if (a.width() != b.width() || a.height() != b.height() || a.empty()) {
        throw ContractError("d_rmse: depth maps must be non-empty and equally sized");
    }
    const auto sa = standardize(a);
    const auto sb = standardize(b);
    double sum = 0.0;
    for (std::size_t i = 0; i < sa.size(); ++i) {
        sum += (sa[i] - sb[i]) * (sa[i] - sb[i]);
    }
    return std::sqrt(sum / static_cast<double>(sa.size()));
}

double d_rmse(const DepthMap& reference_depth, const Image& generated, const RegionSpec& region,
              DepthEstimator& estimator) {
    region.validate(generated.width(), generated.height());
    region.validate(reference_depth.width(), reference_depth.height());
    const Image crop_gen = crop(to_rgb(generated), region.bbox);
    DepthMap estimated = estimator.estimate(crop_gen);
    if (estimated.width() != crop_gen.width() || estimated.height() != crop_gen.height()) {
        estimated = resize_bilinear(estimated, crop_gen.width(), crop_gen.height());
    }
    return d_rmse_maps(crop(reference_depth, region.bbox), estimated);
}

std::string to_string(Metric m) {
    switch (m) {
    case Metric::clip_obj:
        return "clip_obj";
    case Metric::dino_obj:
        return "dino_obj";
    case Metric::clip_style:
        return "clip_style";
    case Metric::dino_style:
        return "dino_style";
    case Metric::lpips_obj:
        return "lpips_obj";
    case Metric::lpips_style:
        return "lpips_style";
    case Metric::d_rmse:
        return "d_rmse";
    }
    return "unknown";
}

Metric metric_from_string(const std::string& s) {
    for (Metric m : kAllMetrics) {
        if (to_string(m) == s) {
            return m;
        }
    }
    throw ValidationError("metrics", "unknown metric \"" + s + "\"");
}

MetricValues evaluate_metrics(const EvaluationInputs& in, const MetricModels& models,
                              std::span<const Metric> requested) {
    in.region.validate(in.generated.width(), in.generated.height());
    const Image region = crop(to_rgb(in.generated), in.region.bbox);
    MetricValues out;
    auto pair_metric = [&](Metric m, const Image& other, auto* model, auto&& fn) {
        if (wants(requested, m) && model != nullptr && !other.empty()) {
            out[m] = fn(region, other, *model);
        }
    };
    pair_metric(Metric::clip_obj, in.object_image, models.clip, similarity);
    pair_metric(Metric::dino_obj, in.object_image, models.dino, similarity);
    pair_metric(Metric::clip_style, in.background, models.clip, similarity);
    pair_metric(Metric::dino_style, in.background, models.dino, similarity);
    pair_metric(Metric::lpips_obj, in.object_image, models.lpips, lpips_distance);
    pair_metric(Metric::lpips_style, in.background, models.lpips, lpips_distance);
    if (wants(requested, Metric::d_rmse) && models.depth != nullptr && !in.reference_depth.empty()) {
        out[Metric::d_rmse] = d_rmse(in.reference_depth, in.generated, in.region, *models.depth);
    }
    return out;
}

MetricValues MetricsReport::aggregate() const {
    MetricValues mean;
    for (Metric m : requested) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& row : per_image) {
            if (row.values[m]) {
                sum += *row.values[m];
                ++n;
            }
        }
        if (n > 0) {
            mean[m] = sum / static_cast<double>(n);
        }
    }
    return mean;
}

json MetricsReport::to_json() const {
    auto values_json = [&](const MetricValues& v) {
        json j = json::object();
        for (Metric m : requested) {
            j[to_string(m)] = v[m] ? json(*v[m]) : json(nullptr);
        }
        return j;
    };
    json rows = json::array();
    for (const auto& row : per_image) {
        rows.push_back({{"id", row.id}, {"metrics", values_json(row.values)}});
    }
    json names = json::array();
    for (Metric m : requested) {
        names.push_back(to_string(m));
    }
    return {{"metrics", names},
            {"region_geometry", region_geometry},
            {"count", per_image.size()},
            {"per_image", rows},
            {"aggregate", values_json(aggregate())}};
}

MetricsReport MetricsReport::from_json(const json& j) {
    MetricsReport r;
    try {
        r.requested.clear();
        for (const auto& name : j.at("metrics")) {
            r.requested.push_back(metric_from_string(name.get<std::string>()));
        }
        r.region_geometry = j.value("region_geometry", r.region_geometry);
        for (const auto& row : j.at("per_image")) {
            PerImageMetrics p;
            p.id = row.at("id").get<std::string>();
            for (Metric m : r.requested) {
                const auto& v = row.at("metrics").at(to_string(m));
                if (!v.is_null()) {
                    p.values[m] = v.get<double>();
                }
            }
            r.per_image.push_back(std::move(p));
        }
    } catch (const json::exception& e) {
        throw ValidationError("report", std::string("malformed metrics report: ") + e.what());
    }
    return r;
}

std::string MetricsReport::text_table(std::span<const Metric> columns) const {
    std::size_t id_width = 4;
    for (const auto& row : per_image) {
        id_width = std::max(id_width, row.id.size());
    }
    std::ostringstream os;
    auto cell = [](const std::optional<double>& v) {
        if (!v) {
            return std::string("n/a");
        }
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.3f", *v);
        return std::string(buf);
    };
    auto line = [&](const std::string& id, const MetricValues& v) {
        os << id << std::string(id_width - id.size() + 2, ' ');
        for (Metric m : columns) {
            const std::string c = cell(v[m]);
            os << std::string(std::max<std::size_t>(2, 13 - c.size()), ' ') << c;
        }
        os << '\n';
    };
    os << "pair" << std::string(id_width - 4 + 2, ' ');
    for (Metric m : columns) {
        const std::string name = to_string(m);
        os << std::string(std::max<std::size_t>(2, 13 - name.size()), ' ') << name;
    }
    os << '\n';
    for (const auto& row : per_image) {
        line(row.id, row.values);
    }
    line("mean", aggregate());
    return os.str();
}

}  // namespace freeinsert
