// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "freeinsert/backend.hpp"
#include "freeinsert/compositing.hpp"
#include "freeinsert/image.hpp"

namespace freeinsert {

/// Target region in generated-image coordinates.
struct RegionSpec {
    Rect bbox;
    /// Recorded in reports: "dilated_mask_bbox" or "tight_bbox".
    std::string geometry = "dilated_mask_bbox";

    /// RangeError unless the box has area and lies inside width x height.
    void validate(int width, int height) const;
    /// Bounding box of the set pixels; RangeError for an empty mask.
    static RegionSpec from_mask(const BinaryMask& mask, std::string geometry = "dilated_mask_bbox");

    bool operator==(const RegionSpec&) const = default;
};

/// Cosine of two equal-length vectors, clamped to [-1, 1]. Symmetric
/// bit-for-bit; zero vectors give 0.
double cosine_similarity(std::span<const float> a, std::span<const float> b);

double similarity(const Image& a, const Image& b, ImageEmbedder& embedder);
/// Clamped at 0; identical inputs give exactly 0.
double lpips_distance(const Image& a, const Image& b, PerceptualDistance& perceptual);
/// Both maps normalized to zero mean and unit variance (a constant map becomes
/// all zeros), then the root mean square difference.
double d_rmse_maps(const DepthMap& a, const DepthMap& b);
/// Estimates the depth of the region crop of `generated` and compares it with
/// the same crop of `reference_depth` (canvas-sized).
double d_rmse(const DepthMap& reference_depth, const Image& generated, const RegionSpec& region,
              DepthEstimator& estimator);

enum class Metric { clip_obj, dino_obj, clip_style, dino_style, lpips_obj, lpips_style, d_rmse };
inline constexpr std::size_t kMetricCount = 7;
inline constexpr std::array<Metric, kMetricCount> kAllMetrics = {
    Metric::clip_obj,  Metric::dino_obj,    Metric::clip_style, Metric::dino_style,
    Metric::lpips_obj, Metric::lpips_style, Metric::d_rmse};
/// Column orders of the comparison and ablation tables.
inline constexpr std::array<Metric, 6> kComparisonColumns = {Metric::clip_obj,   Metric::dino_obj,
                                                             Metric::clip_style, Metric::dino_style,
                                                             Metric::lpips_obj,  Metric::lpips_style};
inline constexpr std::array<Metric, 3> kAblationColumns = {Metric::clip_obj, Metric::clip_style, Metric::d_rmse};

std::string to_string(Metric m);
Metric metric_from_string(const std::string& s);

/// One value per metric; nullopt means absent (not computed or unavailable).
struct MetricValues {
    std::array<std::optional<double>, kMetricCount> values{};

    std::optional<double>& operator[](Metric m) { return values[static_cast<std::size_t>(m)]; }
    const std::optional<double>& operator[](Metric m) const { return values[static_cast<std::size_t>(m)]; }
    bool operator==(const MetricValues&) const = default;
};

/// Models behind the metrics; a null member makes its metrics absent.
struct MetricModels {
    ImageEmbedder* clip = nullptr;
    ImageEmbedder* dino = nullptr;
    PerceptualDistance* lpips = nullptr;
    DepthEstimator* depth = nullptr;
};

struct EvaluationInputs {
    Image generated;
    Image object_image;
    Image background;
    DepthMap reference_depth;  // canvas-sized rendered depth
    RegionSpec region;
};

/// Computes `requested` metrics. Only pixels of `generated` inside the region
/// are read: obj metrics compare the crop with the object image, style metrics
/// the crop with the whole background.
MetricValues evaluate_metrics(const EvaluationInputs& inputs, const MetricModels& models,
                              std::span<const Metric> requested = kAllMetrics);

struct PerImageMetrics {
    std::string id;
    MetricValues values;
};

struct MetricsReport {
    std::vector<Metric> requested{kAllMetrics.begin(), kAllMetrics.end()};
    std::string region_geometry = "dilated_mask_bbox";
    std::vector<PerImageMetrics> per_image;

    /// Mean over the images where the metric is present; absent when none.
    MetricValues aggregate() const;

    /// Requested metrics are always emitted, absent ones as null.
    nlohmann::json to_json() const;
    static MetricsReport from_json(const nlohmann::json& j);
    /// Fixed-width table in the given column order with per-image rows and a
    /// final mean row; absent cells read "n/a".
    std::string text_table(std::span<const Metric> columns = kComparisonColumns) const;
};

}  // namespace freeinsert
