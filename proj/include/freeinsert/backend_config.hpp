// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "freeinsert/backend.hpp"
#include "freeinsert/conditioning.hpp"
#include "freeinsert/injection.hpp"
#include "freeinsert/metrics.hpp"
#include "freeinsert/schedule.hpp"

namespace freeinsert {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kProfileEnvVar = "FREEINSERT_BACKEND_PROFILE";

/// A backend profile: which implementation backs each learned component.
///
/// kind "toy" builds the in-process CPU models; kind "remote" talks to a model
/// worker over HTTP and requires every asset path to exist locally.
struct BackendConfig {
    std::string name = "toy";
    std::string kind = "toy";
    std::string endpoint;  // remote worker base URL
    std::string device = "cpu";
    int timeout_s = 600;
    /// Role -> path. Relative paths are resolved against the profile file.
    std::map<std::string, std::string> assets;
    bool refiner_enabled = false;
    std::vector<LayerSpec> catalog_overrides;
    /// Thresholds and layer lists; an empty list means every catalog layer of
    /// that kind.
    InjectionConfig injection;
    std::optional<NoiseSchedule> schedule;
    nlohmann::json engine = nlohmann::json::object();  // EngineOptions overrides
    VlmConfig vlm;
    /// Worker model names (remote) or toy ids for each extractor role.
    std::string ip_extractor = "toy-ip";
    std::string clip_extractor = "toy-clip";
    std::string dino_extractor = "toy-dino";
    std::uint64_t toy_seed = 7;
    int toy_vae_scale = 8;
    int toy_num_steps = 50;

    nlohmann::json to_json() const;
};

/// ValidationError names the offending key. `base_dir` anchors relative paths.
BackendConfig backend_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

/// "toy" is built in; anything else is a path to a profile JSON file.
BackendConfig load_backend_profile(const std::string& name_or_path);
/// $FREEINSERT_BACKEND_PROFILE, else "toy".
std::string default_profile_name();

/// Fresh, unshared instances of every component a run needs.
struct BackendSet {
    std::string profile_name;
    std::string build_id;  // hash of version + resolved profile
    std::unique_ptr<DenoiserBackend> denoiser;
    std::unique_ptr<VaeBackend> vae;
    std::unique_ptr<Refiner> refiner;  // null when disabled
    std::unique_ptr<DepthEstimator> depth;
    std::unique_ptr<ImageEmbedder> ip;  // content and style embeddings
    std::unique_ptr<ImageEmbedder> clip;
    std::unique_ptr<ImageEmbedder> dino;
    std::unique_ptr<PerceptualDistance> lpips;
    NoiseSchedule schedule = NoiseSchedule::scaled_linear();
    EngineOptions engine;  // profile defaults, injection layers resolved

    EngineBackends engine_backends() const { return {*denoiser, *vae, refiner.get(), depth.get()}; }
    MetricModels metric_models() const { return {clip.get(), dino.get(), lpips.get(), depth.get()}; }
};

/// Short hash of the library version and the resolved profile.
std::string backend_build_id(const BackendConfig& cfg);
/// Profile engine defaults with empty injection layer lists filled from
/// `catalog`; ConfigError naming any layer the catalog lacks.
EngineOptions resolve_engine_options(const BackendConfig& cfg, const LayerCatalog& catalog);

/// Toy profiles build in-process models; remote ones go through
/// real_backend_from_config.
BackendSet make_backend_set(const BackendConfig& cfg);

/// The remote adapter. Checks assets (ConfigError listing every unresolved
/// path), loads the worker, applies catalog overrides and validates the
/// injection layers (ConfigError naming the layer) before returning.
BackendSet real_backend_from_config(const BackendConfig& cfg);

}  // namespace freeinsert
