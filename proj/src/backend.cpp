// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/backend.hpp"

#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "freeinsert/errors.hpp"
#include "freeinsert/hashing.hpp"

namespace freeinsert {

namespace {

using json = nlohmann::json;

// Float payloads travel as raw little-endian float32 bytes so CBOR bodies stay
// compact; plain JSON arrays are accepted on input as well.
json floats_to_binary(std::span<const float> values) {
    std::vector<std::uint8_t> bytes(values.size_bytes());
    if (!bytes.empty()) {
        std::memcpy(bytes.data(), values.data(), bytes.size());
    }
    return json::binary(std::move(bytes));
}

std::vector<float> floats_from(const json& j) {
    if (j.is_binary()) {
        const auto& bytes = j.get_binary();
        if (bytes.size() % sizeof(float) != 0) {
            throw ContractError("binary float payload has a ragged length");
        }
        std::vector<float> out(bytes.size() / sizeof(float));
        if (!out.empty()) {
            std::memcpy(out.data(), bytes.data(), bytes.size());
        }
        return out;
    }
    return j.get<std::vector<float>>();
}

json feature_map_to_json(const FeatureMap& map) {
    json out = json::object();
    for (const auto& [id, tensor] : map) {
        out[id] = to_json(tensor);
    }
    return out;
}

FeatureMap feature_map_from_json(const json& j) {
    FeatureMap out;
    for (const auto& [id, value] : j.items()) {
        out.emplace(id, feature_tensor_from_json(value));
    }
    return out;
}

}  // namespace

json floats_to_json(std::span<const float> values) {
    return floats_to_binary(values);
}

std::vector<float> floats_from_json(const json& j) {
    return floats_from(j);
}

std::size_t FeatureTensor::numel() const noexcept {
    std::size_t n = 1;
    for (int d : shape) {
        n *= static_cast<std::size_t>(d);
    }
    return shape.empty() ? 0 : n;
}

std::string to_string(LayerKind kind) {
    return kind == LayerKind::spatial ? "spatial" : "attention";
}

LayerKind layer_kind_from_string(const std::string& s) {
    if (s == "spatial") {
        return LayerKind::spatial;
    }
    if (s == "attention") {
        return LayerKind::attention;
    }
    throw ConfigError("unknown layer kind \"" + s + "\"");
}

LayerCatalog::LayerCatalog(std::vector<LayerSpec> layers) : m_layers(std::move(layers)) {
    for (std::size_t i = 0; i < m_layers.size(); ++i) {
        for (std::size_t j = i + 1; j < m_layers.size(); ++j) {
            if (m_layers[i].id == m_layers[j].id) {
                throw ConfigError("layer catalog lists \"" + m_layers[i].id + "\" twice");
            }
        }
    }
}

const LayerSpec* LayerCatalog::find(const std::string& id) const {
    for (const auto& layer : m_layers) {
        if (layer.id == id) {
            return &layer;
        }
    }
    return nullptr;
}

bool LayerCatalog::contains(const std::string& id, LayerKind kind) const {
    const auto* layer = find(id);
    return layer != nullptr && layer->kind == kind;
}

void LayerCatalog::check_tensor(const std::string& id, LayerKind kind, const FeatureTensor& tensor) const {
    const auto* layer = find(id);
    if (layer == nullptr) {
        throw ContractError("layer \"" + id + "\" is not in the backend catalog");
    }
    if (layer->kind != kind) {
        throw ContractError("layer \"" + id + "\" is a " + to_string(layer->kind) + " layer, not " +
                            to_string(kind));
    }
    if (tensor.shape.size() != layer->shape.size()) {
        throw ContractError("layer \"" + id + "\": tensor rank does not match catalog");
    }
    for (std::size_t i = 0; i < tensor.shape.size(); ++i) {
        if (layer->shape[i] >= 0 && layer->shape[i] != tensor.shape[i]) {
            throw ContractError("layer \"" + id + "\": dimension " + std::to_string(i) + " is " +
                                std::to_string(tensor.shape[i]) + ", catalog says " +
                                std::to_string(layer->shape[i]));
        }
    }
    if (tensor.data.size() != tensor.numel()) {
        throw ContractError("layer \"" + id + "\": data size does not match shape");
    }
}

void LayerCatalog::check_bundle(const FeatureBundle& bundle) const {
    for (const auto& [id, t] : bundle.spatial) {
        check_tensor(id, LayerKind::spatial, t);
    }
    for (const auto& [id, t] : bundle.queries) {
        check_tensor(id, LayerKind::attention, t);
    }
    for (const auto& [id, t] : bundle.keys) {
        check_tensor(id, LayerKind::attention, t);
    }
}

LayerCatalog LayerCatalog::with_overrides(const std::vector<LayerSpec>& overrides) const {
    std::vector<LayerSpec> layers = m_layers;
    for (const auto& o : overrides) {
        bool replaced = false;
        for (auto& layer : layers) {
            if (layer.id == o.id) {
                layer = o;
                replaced = true;
            }
        }
        if (!replaced) {
            layers.push_back(o);
        }
    }
    return LayerCatalog(std::move(layers));
}

json LayerCatalog::to_json() const {
    json out = json::array();
    for (const auto& layer : m_layers) {
        out.push_back({{"id", layer.id}, {"kind", to_string(layer.kind)}, {"shape", layer.shape}});
    }
    return out;
}

LayerCatalog LayerCatalog::from_json(const json& j) {
    std::vector<LayerSpec> layers;
    for (const auto& item : j) {
        LayerSpec spec;
        spec.id = item.at("id").get<std::string>();
        spec.kind = layer_kind_from_string(item.at("kind").get<std::string>());
        spec.shape = item.value("shape", std::vector<int>{});
        layers.push_back(std::move(spec));
    }
    return LayerCatalog(std::move(layers));
}

void ConditioningSet::validate() const {
    if (content_embedding && style_embedding) {
        throw ContractError("conditioning set carries both a content and a style embedding");
    }
    if (!(guidance_weight >= 0.0) || !std::isfinite(guidance_weight)) {
        throw ContractError("guidance weight must be a finite value >= 0");
    }
    auto finite = [](const std::vector<float>& v) {
        for (float x : v) {
            if (!std::isfinite(x)) {
                return false;
            }
        }
        return true;
    };
    if ((content_embedding && !finite(*content_embedding)) || (style_embedding && !finite(*style_embedding))) {
        throw ContractError("conditioning embedding contains non-finite values");
    }
}

std::string ConditioningSet::fingerprint() const {
    Sha256 h;
    h.update(prompt_text);
    h.update(content_embedding ? "content" : "-");
    if (content_embedding) {
        h.update_floats(*content_embedding);
        h.update_pod(content_weight);
    }
    h.update(style_embedding ? "style" : "-");
    if (style_embedding) {
        h.update_floats(*style_embedding);
        h.update_pod(style_weight);
    }
    h.update(depth ? "depth" : "-");
    if (depth) {
        h.update_pod(depth->width());
        h.update_pod(depth->height());
        h.update_floats(depth->values());
    }
    h.update_pod(guidance_weight);
    return h.hex_digest();
}

StepInfo StepInfo::at(const NoiseSchedule& schedule, int t) {
    return {t, schedule.num_steps(), schedule.alpha_bar(t), schedule.model_timestep(t)};
}

json to_json(const FeatureTensor& tensor) {
    return {{"shape", tensor.shape}, {"data", floats_to_binary(tensor.data)}};
}

FeatureTensor feature_tensor_from_json(const json& j) {
    FeatureTensor t;
    t.shape = j.at("shape").get<std::vector<int>>();
    t.data = floats_from(j.at("data"));
    if (t.data.size() != t.numel()) {
        throw ContractError("feature tensor: data size does not match shape");
    }
    return t;
}

json to_json(const FeatureBundle& bundle) {
    return {{"timestep", bundle.timestep},
            {"spatial", feature_map_to_json(bundle.spatial)},
            {"queries", feature_map_to_json(bundle.queries)},
            {"keys", feature_map_to_json(bundle.keys)}};
}

FeatureBundle feature_bundle_from_json(const json& j) {
    FeatureBundle b;
    b.timestep = j.value("timestep", -1);
    if (j.contains("values")) {
        throw ContractError("value features cannot be overridden");
    }
    if (j.contains("spatial")) {
        b.spatial = feature_map_from_json(j.at("spatial"));
    }
    if (j.contains("queries")) {
        b.queries = feature_map_from_json(j.at("queries"));
    }
    if (j.contains("keys")) {
        b.keys = feature_map_from_json(j.at("keys"));
    }
    return b;
}

json to_json(const ConditioningSet& cond) {
    json j = {{"prompt_text", cond.prompt_text},
              {"content_weight", cond.content_weight},
              {"style_weight", cond.style_weight},
              {"guidance_weight", cond.guidance_weight}};
    j["content_embedding"] = cond.content_embedding ? floats_to_binary(*cond.content_embedding) : json(nullptr);
    j["style_embedding"] = cond.style_embedding ? floats_to_binary(*cond.style_embedding) : json(nullptr);
    j["depth"] = cond.depth ? to_json(*cond.depth) : json(nullptr);
    return j;
}

ConditioningSet conditioning_from_json(const json& j) {
    ConditioningSet c;
    c.prompt_text = j.value("prompt_text", std::string{});
    c.content_weight = j.value("content_weight", 0.8f);
    c.style_weight = j.value("style_weight", 0.6f);
    c.guidance_weight = j.value("guidance_weight", 1.0);
    if (j.contains("content_embedding") && !j.at("content_embedding").is_null()) {
        c.content_embedding = floats_from(j.at("content_embedding"));
    }
    if (j.contains("style_embedding") && !j.at("style_embedding").is_null()) {
        c.style_embedding = floats_from(j.at("style_embedding"));
    }
    if (j.contains("depth") && !j.at("depth").is_null()) {
        c.depth = depth_from_json(j.at("depth"));
    }
    return c;
}

json to_json(const LatentGrid& grid) {
    const auto& s = grid.shape();
    return {{"shape", {s.channels, s.height, s.width}},
            {"space", grid.space() == SpaceTag::latent ? "latent" : "pixel"},
            {"data", floats_to_binary(grid.values())}};
}

LatentGrid latent_from_json(const json& j) {
    const auto shape = j.at("shape").get<std::vector<int>>();
    if (shape.size() != 3) {
        throw ContractError("latent grid shape must have 3 dimensions");
    }
    const SpaceTag tag = j.value("space", std::string("latent")) == "pixel" ? SpaceTag::pixel : SpaceTag::latent;
    return LatentGrid({shape[0], shape[1], shape[2]}, floats_from(j.at("data")), tag);
}

json to_json(const Image& image) {
    return {{"width", image.width()},
            {"height", image.height()},
            {"channels", image.channels()},
            {"data", floats_to_binary(image.data())}};
}

Image image_from_json(const json& j) {
    return Image(j.at("width").get<int>(), j.at("height").get<int>(), j.at("channels").get<int>(),
                 floats_from(j.at("data")));
}

json to_json(const DepthMap& depth) {
    return {{"width", depth.width()}, {"height", depth.height()}, {"data", floats_to_binary(depth.values())}};
}

DepthMap depth_from_json(const json& j) {
    return DepthMap(j.at("width").get<int>(), j.at("height").get<int>(), floats_from(j.at("data")));
}

std::string to_string(EmbeddingRole role) {
    return role == EmbeddingRole::content ? "content" : "style";
}

}  // namespace freeinsert
