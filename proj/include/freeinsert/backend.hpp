// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "freeinsert/image.hpp"
#include "freeinsert/latent.hpp"
#include "freeinsert/schedule.hpp"

namespace freeinsert {

/// Dense float array with an explicit shape; payload of a feature tap.
struct FeatureTensor {
    std::vector<int> shape;
    std::vector<float> data;

    std::size_t numel() const noexcept;
    bool operator==(const FeatureTensor&) const = default;
};

using FeatureMap = std::map<std::string, FeatureTensor>;

/// Spatial features (f) and self-attention queries/keys (q, k) at one timestep,
/// keyed by layer id. Values are never part of a bundle.
struct FeatureBundle {
    FeatureMap spatial;
    FeatureMap queries;
    FeatureMap keys;
    int timestep = -1;

    bool empty() const noexcept { return spatial.empty() && queries.empty() && keys.empty(); }
    bool operator==(const FeatureBundle&) const = default;
};

enum class LayerKind { spatial, attention };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& s);

/// One tap point. `shape` uses -1 for dimensions that follow the input size.
/// For attention layers the shape describes q and k (tokens x dim).
struct LayerSpec {
    std::string id;
    LayerKind kind = LayerKind::spatial;
    std::vector<int> shape;

    bool operator==(const LayerSpec&) const = default;
};

class LayerCatalog {
public:
    LayerCatalog() = default;
    explicit LayerCatalog(std::vector<LayerSpec> layers);

    const std::vector<LayerSpec>& layers() const noexcept { return m_layers; }
    const LayerSpec* find(const std::string& id) const;
    bool contains(const std::string& id, LayerKind kind) const;

    /// ContractError unless `id` is a `kind` layer and `tensor` matches its
    /// shape descriptor (rank and every fixed dimension).
    void check_tensor(const std::string& id, LayerKind kind, const FeatureTensor& tensor) const;
    void check_bundle(const FeatureBundle& bundle) const;

    /// Replaces entries with matching ids and appends new ones.
    LayerCatalog with_overrides(const std::vector<LayerSpec>& overrides) const;

    nlohmann::json to_json() const;
    static LayerCatalog from_json(const nlohmann::json& j);

private:
    std::vector<LayerSpec> m_layers;
};

enum class EmbeddingRole { content, style };

std::string to_string(EmbeddingRole role);

/// An image embedding tagged with the branch it may be routed to.
struct ImageEmbedding {
    std::vector<float> vector;
    EmbeddingRole role = EmbeddingRole::content;
    std::string extractor_id;

    bool operator==(const ImageEmbedding&) const = default;
};

/// Everything a denoiser call is conditioned on.
///
/// A Branch1 call carries the content embedding, a Branch2 call the style
/// embedding; never both.
struct ConditioningSet {
    std::string prompt_text;
    std::optional<std::vector<float>> content_embedding;
    std::optional<std::vector<float>> style_embedding;
    float content_weight = 0.8f;
    float style_weight = 0.6f;
    std::optional<DepthMap> depth;
    double guidance_weight = 1.0;

    /// ContractError on both embeddings set, negative guidance, non-finite values.
    void validate() const;
    /// Stable hex digest of every field; changes with any conditioning change.
    std::string fingerprint() const;
};

/// Where in the sampling grid a denoiser call happens.
struct StepInfo {
    int index = 0;
    int num_steps = 0;
    double alpha_bar = 1.0;
    int model_timestep = 0;

    static StepInfo at(const NoiseSchedule& schedule, int t);
};

struct Prediction {
    LatentGrid eps;
    FeatureBundle captured;
};

/// Noise predictor with depth conditioning and feature taps.
///
/// Implementations must be deterministic for fixed inputs, and whenever an
/// override is supplied for a layer the captured bundle must contain exactly
/// that override for the layer.
class DenoiserBackend {
public:
    virtual ~DenoiserBackend() = default;

    virtual std::string id() const = 0;
    virtual const LayerCatalog& catalog() const = 0;
    virtual Prediction predict(const LatentGrid& z, const StepInfo& step, const ConditioningSet& cond,
                               const FeatureBundle* overrides) = 0;
};

class VaeBackend {
public:
    virtual ~VaeBackend() = default;

    virtual std::string id() const = 0;
    /// RGB image whose sides are multiples of scale_factor().
    virtual LatentGrid encode(const Image& image) = 0;
    virtual Image decode(const LatentGrid& latent) = 0;
    virtual int scale_factor() const = 0;
    virtual int latent_channels() const = 0;
    /// Published per-pixel mean-abs bound on decode(encode(I)) - I.
    virtual double round_trip_bound() const = 0;
};

/// Post-loop hook that finishes the last `remaining_fraction` of denoising.
class Refiner {
public:
    virtual ~Refiner() = default;

    virtual std::string id() const = 0;
    /// `z` sits at grid index `start_t`; returns the clean latent (index 0).
    virtual LatentGrid refine(const LatentGrid& z, int start_t, double remaining_fraction,
                              const NoiseSchedule& schedule, const ConditioningSet& cond) = 0;
};

class DepthEstimator {
public:
    virtual ~DepthEstimator() = default;

    virtual std::string id() const = 0;
    /// Depth in [0, 1] (1 = nearest) at the input resolution.
    virtual DepthMap estimate(const Image& image) = 0;
};

class ImageEmbedder {
public:
    virtual ~ImageEmbedder() = default;

    virtual std::string id() const = 0;
    virtual std::vector<float> embed(const Image& image) = 0;
};

class PerceptualDistance {
public:
    virtual ~PerceptualDistance() = default;

    virtual std::string id() const = 0;
    virtual double distance(const Image& a, const Image& b) = 0;
};

/// Float vectors travel as binary little-endian float32; arrays are accepted too.
nlohmann::json floats_to_json(std::span<const float> values);
std::vector<float> floats_from_json(const nlohmann::json& j);

nlohmann::json to_json(const FeatureTensor& tensor);
FeatureTensor feature_tensor_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FeatureBundle& bundle);
FeatureBundle feature_bundle_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ConditioningSet& cond);
ConditioningSet conditioning_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LatentGrid& grid);
LatentGrid latent_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Image& image);
Image image_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DepthMap& depth);
DepthMap depth_from_json(const nlohmann::json& j);

}  // namespace freeinsert
