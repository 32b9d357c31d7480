// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "freeinsert/backend.hpp"
#include "freeinsert/compositing.hpp"
#include "freeinsert/ddim.hpp"

namespace freeinsert {

/// Thresholds are fractions of T; a layer group is injected while
/// t > round(tau * T).
struct InjectionConfig {
    double tau_f = 0.2;
    double tau_q = 0.5;
    double tau_k = 0.5;
    std::vector<std::string> spatial_layers;
    std::vector<std::string> attention_layers;

    /// ValidationError naming the tau outside [0, 1].
    void validate() const;
    /// ConfigError naming the first layer the catalog lacks (or has with the
    /// wrong kind).
    void check_catalog(const LayerCatalog& catalog) const;

    /// Every layer of each kind the catalog publishes.
    static InjectionConfig all_layers(const LayerCatalog& catalog, double tau_f = 0.2, double tau_q = 0.5,
                                      double tau_k = 0.5);
};

nlohmann::json to_json(const InjectionConfig& inj);
InjectionConfig injection_config_from_json(const nlohmann::json& j);

/// round(tau * T), the last timestep that is not injected.
int injection_threshold(double tau, int num_steps);

/// The Branch2 override set at timestep t. ContractError naming any configured
/// layer whose feature is missing from `captured`.
FeatureBundle apply_injection(const FeatureBundle& captured, int t, const InjectionConfig& inj, int num_steps);

/// mask * z_g + (1 - mask) * add_noise(z0_bg, t_prev, eps) with eps drawn from
/// `rng`. Implemented as a per-cell select, so masked cells keep z_g bit-exact
/// and unmasked cells at t_prev = 0 equal z0_bg bit-exact. The drawn eps is
/// written to `eps_out` when given.
LatentGrid noise_blend(const LatentGrid& z_g, const LatentGrid& z0_bg, int t_prev, const LatentGrid& latent_mask,
                       const NoiseSchedule& schedule, std::mt19937_64& rng, LatentGrid* eps_out = nullptr);
LatentGrid noise_blend(const LatentGrid& z_g, const LatentGrid& z0_bg, int t_prev, const MaskGrid& mask,
                       const NoiseSchedule& schedule, std::mt19937_64& rng, LatentGrid* eps_out = nullptr);

enum class Branch1Mode {
    replay,  // Branch1 sits on the stored inversion trajectory
    free,    // Branch1 takes its own DDIM steps from z_T
};

std::string to_string(Branch1Mode mode);
Branch1Mode branch1_mode_from_string(const std::string& s);

struct EngineOptions {
    InjectionConfig injection;
    double guidance_weight = 5.0;
    /// Guidance for inversion and Branch1.
    double inversion_guidance = 1.0;
    Branch1Mode branch1_mode = Branch1Mode::replay;
    /// Inversion conditioned on the content embedding as well. Off by default:
    /// z_T then depends on P_text and D only, so without injection Branch2 is
    /// independent of the content embedding.
    bool invert_with_content = false;
    bool noise_blending = true;
    bool depth_conditioning = true;
    /// Style embedding is passed to Branch2 while t <= round(style_tau * T).
    double style_tau = 1.0;
    bool refiner_enabled = false;
    double refiner_fraction = 0.1;
    int dilation_radius = 8;
    BackgroundDepthSource depth_source = BackgroundDepthSource::estimator;
    InversionOptions inversion;
    bool record_latent_trace = false;

    void validate() const;
};

nlohmann::json to_json(const EngineOptions& options);
/// Missing keys keep their defaults; ValidationError names the bad key.
EngineOptions engine_options_from_json(const nlohmann::json& j, EngineOptions base = {});

/// Resolved inputs of one insertion; captioning and embedding happen upstream.
struct GenerationInputs {
    Image background;
    RenderedObject render;
    Placement placement;
    std::string prompt;
    std::optional<ImageEmbedding> content_embedding;  // role must be content
    std::optional<ImageEmbedding> style_embedding;    // role must be style
    float content_weight = 0.8f;
    float style_weight = 0.6f;
    std::uint64_t seed = 0;
};

struct EngineBackends {
    DenoiserBackend& denoiser;
    VaeBackend& vae;
    Refiner* refiner = nullptr;
    DepthEstimator* depth_estimator = nullptr;
};

struct InjectionLogEntry {
    int t = 0;
    std::vector<std::string> spatial;
    std::vector<std::string> queries;
    std::vector<std::string> keys;
    bool style = false;
    bool blended = false;

    bool operator==(const InjectionLogEntry&) const = default;
};

nlohmann::json to_json(const std::vector<InjectionLogEntry>& log);

struct GenerationResult {
    Image image;  // background-sized RGB
    LatentGrid final_latent;
    std::vector<InjectionLogEntry> injection_log;  // t = T down to the last loop step
    std::uint64_t seed = 0;

    Image coarse;
    MaskGrid mask;
    DepthMap depth;
    LatentGrid background_latent;
    std::string inversion_fingerprint;
    /// Filled when record_latent_trace is set: z^g after every loop step
    /// (index i holds t = T - 1 - i) and the blending noise drawn for it.
    std::vector<LatentGrid> latent_trace;
    std::vector<LatentGrid> blend_noise;
};

/// Dual-branch denoising: paste, encode, invert I_coarse, then from z_T run
/// Branch1 (feature capture) and Branch2 (generation with injected features)
/// step by step, blending the background's noised latent back outside the
/// mask. Backend failures surface as BackendError naming branch and timestep.
GenerationResult run_controllable_generation(const GenerationInputs& inputs, const EngineBackends& backends,
                                             const NoiseSchedule& schedule, const EngineOptions& options);

}  // namespace freeinsert
