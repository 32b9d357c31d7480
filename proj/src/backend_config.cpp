// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/backend_config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>

#include <nlohmann/json.hpp>

#include "freeinsert/errors.hpp"
#include "freeinsert/hashing.hpp"
#include "freeinsert/toy_backend.hpp"

namespace freeinsert {

namespace {

using json = nlohmann::json;

const char* const kKnownKeys[] = {"name",        "kind",   "endpoint", "device",   "timeout_s",
                                  "assets",      "refiner", "catalog_overrides", "injection", "schedule",
                                  "schedule_path", "engine", "vlm",      "extractors", "toy"};

template <typename T>
void read(const json& j, const char* key, const std::string& field, T& target) {
    if (!j.contains(key)) {
        return;
    }
    try {
        target = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ValidationError(field, "malformed " + field + ": " + e.what());
    }
}

std::string resolve_path(const std::string& p, const std::filesystem::path& base_dir) {
    const std::filesystem::path path(p);
    if (path.is_absolute() || base_dir.empty()) {
        return p;
    }
    return (base_dir / path).lexically_normal().string();
}

}  // namespace

json BackendConfig::to_json() const {
    json overrides = LayerCatalog(catalog_overrides).to_json();
    json j = {{"name", name},
              {"kind", kind},
              {"endpoint", endpoint},
              {"device", device},
              {"timeout_s", timeout_s},
              {"assets", assets},
              {"refiner", {{"enabled", refiner_enabled}}},
              {"catalog_overrides", overrides},
              {"injection", freeinsert::to_json(injection)},
              {"engine", engine},
              {"vlm", freeinsert::to_json(vlm)},
              {"extractors", {{"ip", ip_extractor}, {"clip", clip_extractor}, {"dino", dino_extractor}}},
              {"toy", {{"seed", toy_seed}, {"vae_scale", toy_vae_scale}, {"num_steps", toy_num_steps}}}};
    j["schedule"] = schedule ? schedule->to_json() : json(nullptr);
    return j;
}

BackendConfig backend_config_from_json(const json& j, const std::filesystem::path& base_dir) {
    if (!j.is_object()) {
        throw ValidationError("profile", "backend profile must be a JSON object");
    }
    for (const auto& [key, value] : j.items()) {
        if (std::find(std::begin(kKnownKeys), std::end(kKnownKeys), key) == std::end(kKnownKeys)) {
            throw ValidationError(key, "unknown backend profile key \"" + key + "\"");
        }
    }
    BackendConfig cfg;
    read(j, "name", "name", cfg.name);
    read(j, "kind", "kind", cfg.kind);
    if (cfg.kind != "toy" && cfg.kind != "remote") {
        throw ValidationError("kind", "backend kind must be \"toy\" or \"remote\", got \"" + cfg.kind + "\"");
    }
    read(j, "endpoint", "endpoint", cfg.endpoint);
    read(j, "device", "device", cfg.device);
    read(j, "timeout_s", "timeout_s", cfg.timeout_s);
    if (cfg.timeout_s < 1) {
        throw ValidationError("timeout_s", "timeout_s must be >= 1");
    }
    read(j, "assets", "assets", cfg.assets);
    for (auto& [role, path] : cfg.assets) {
        path = resolve_path(path, base_dir);
    }
    if (j.contains("refiner")) {
        if (!j.at("refiner").is_object()) {
            throw ValidationError("refiner", "refiner must be an object like {\"enabled\": true}");
        }
        read(j.at("refiner"), "enabled", "refiner.enabled", cfg.refiner_enabled);
    } else {
        cfg.refiner_enabled = cfg.kind == "remote";
    }
    if (j.contains("catalog_overrides")) {
        try {
            cfg.catalog_overrides = LayerCatalog::from_json(j.at("catalog_overrides")).layers();
        } catch (const std::exception& e) {
            throw ValidationError("catalog_overrides", std::string("malformed catalog_overrides: ") + e.what());
        }
        if (cfg.kind == "toy" && !cfg.catalog_overrides.empty()) {
            throw ValidationError("catalog_overrides", "catalog overrides only apply to remote backends");
        }
    }
    if (j.contains("injection")) {
        cfg.injection = injection_config_from_json(j.at("injection"));
    }
    if (j.contains("schedule") && !j.at("schedule").is_null()) {
        try {
            cfg.schedule = NoiseSchedule::from_json(j.at("schedule"));
        } catch (const Error& e) {
            throw ValidationError("schedule", std::string("invalid schedule: ") + e.what());
        }
    }
    if (j.contains("schedule_path")) {
        std::string path;
        read(j, "schedule_path", "schedule_path", path);
        try {
            cfg.schedule = NoiseSchedule::load(resolve_path(path, base_dir));
        } catch (const Error& e) {
            throw ValidationError("schedule_path", std::string("cannot load schedule: ") + e.what());
        }
    }
    if (j.contains("engine")) {
        cfg.engine = j.at("engine");
        engine_options_from_json(cfg.engine);  // validate now, apply per run
    }
    if (j.contains("vlm")) {
        cfg.vlm = vlm_config_from_json(j.at("vlm"));
    }
    if (j.contains("extractors")) {
        const json& e = j.at("extractors");
        read(e, "ip", "extractors.ip", cfg.ip_extractor);
        read(e, "clip", "extractors.clip", cfg.clip_extractor);
        read(e, "dino", "extractors.dino", cfg.dino_extractor);
    }
    if (j.contains("toy")) {
        const json& t = j.at("toy");
        read(t, "seed", "toy.seed", cfg.toy_seed);
        read(t, "vae_scale", "toy.vae_scale", cfg.toy_vae_scale);
        read(t, "num_steps", "toy.num_steps", cfg.toy_num_steps);
        if (cfg.toy_vae_scale < 1) {
            throw ValidationError("toy.vae_scale", "toy.vae_scale must be >= 1");
        }
        if (cfg.toy_num_steps < 1) {
            throw ValidationError("toy.num_steps", "toy.num_steps must be >= 1");
        }
    }
    if (cfg.kind == "remote" && cfg.endpoint.empty()) {
        throw ValidationError("endpoint", "remote backends need an endpoint");
    }
    return cfg;
}

BackendConfig load_backend_profile(const std::string& name_or_path) {
    if (name_or_path == "toy") {
        return BackendConfig{};
    }
    const std::filesystem::path path(name_or_path);
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("backend profile \"" + name_or_path + "\" is neither built in nor a readable file");
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("backend profile " + path.string() + " is not valid JSON: " + e.what());
    }
    BackendConfig cfg = backend_config_from_json(j, std::filesystem::absolute(path).parent_path());
    if (!j.contains("name")) {
        cfg.name = path.stem().string();
    }
    return cfg;
}

std::string default_profile_name() {
    const char* env = std::getenv(kProfileEnvVar);
    return env != nullptr && *env != '\0' ? std::string(env) : std::string("toy");
}

EngineOptions resolve_engine_options(const BackendConfig& cfg, const LayerCatalog& catalog) {
    EngineOptions base;
    base.refiner_enabled = cfg.refiner_enabled;
    InjectionConfig inj = cfg.injection;
    const InjectionConfig all = InjectionConfig::all_layers(catalog);
    if (inj.spatial_layers.empty()) {
        inj.spatial_layers = all.spatial_layers;
    }
    if (inj.attention_layers.empty()) {
        inj.attention_layers = all.attention_layers;
    }
    inj.check_catalog(catalog);
    base.injection = inj;
    EngineOptions out = engine_options_from_json(cfg.engine, base);
    if (cfg.engine.contains("injection")) {
        // An engine-level override may name layers too.
        out.injection.check_catalog(catalog);
    }
    return out;
}

std::string backend_build_id(const BackendConfig& cfg) {
    Sha256 h;
    h.update(std::string_view(kVersion)).update(std::string_view("\n")).update(cfg.to_json().dump());
    return h.hex_digest().substr(0, 16);
}

BackendSet make_backend_set(const BackendConfig& cfg) {
    if (cfg.kind == "remote") {
        return real_backend_from_config(cfg);
    }
    BackendSet set;
    set.profile_name = cfg.name;
    set.build_id = backend_build_id(cfg);
    set.denoiser = make_toy_denoiser(cfg.toy_seed, {4, 0, 0});
    set.vae = make_toy_vae(cfg.toy_vae_scale);
    if (cfg.refiner_enabled) {
        set.refiner = make_toy_refiner(cfg.toy_seed + 1, set.vae->latent_channels());
    }
    set.depth = make_toy_depth_estimator();
    try {
        set.ip = make_toy_embedder(cfg.ip_extractor);
        set.clip = make_toy_embedder(cfg.clip_extractor);
        set.dino = make_toy_embedder(cfg.dino_extractor);
    } catch (const Error& e) {
        throw ConfigError(std::string("toy extractor: ") + e.what());
    }
    set.lpips = make_toy_perceptual();
    set.schedule = cfg.schedule ? *cfg.schedule : NoiseSchedule::scaled_linear(cfg.toy_num_steps);
    set.engine = resolve_engine_options(cfg, set.denoiser->catalog());
    return set;
}

}  // namespace freeinsert
