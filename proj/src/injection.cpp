// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/injection.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

namespace freeinsert {

namespace {

using json = nlohmann::json;

void check_tau(double tau, const char* name) {
    if (!(tau >= 0.0 && tau <= 1.0)) {
        throw ValidationError(name, std::string(name) + " must lie in [0, 1], got " + std::to_string(tau));
    }
}

const FeatureTensor& require_feature(const FeatureMap& map, const std::string& layer, const char* what, int t) {
    const auto it = map.find(layer);
    if (it == map.end()) {
        throw ContractError("captured bundle at t=" + std::to_string(t) + " lacks " + what + " for layer \"" +
                            layer + "\"");
    }
    return it->second;
}

void check_echo(const FeatureMap& sent, const FeatureMap& captured, const char* what) {
    for (const auto& [layer, tensor] : sent) {
        const auto it = captured.find(layer);
        if (it == captured.end() || !(it->second == tensor)) {
            throw ContractError(std::string("denoiser did not echo the ") + what + " override for layer \"" + layer +
                                "\"");
        }
    }
}

enum class Branch { one, two };

void check_routing(const ConditioningSet& cond, Branch branch) {
    if (branch == Branch::one && cond.style_embedding) {
        throw ContractError("style embedding routed to Branch1");
    }
    if (branch == Branch::two && cond.content_embedding) {
        throw ContractError("content embedding routed to Branch2");
    }
}

Prediction predict_in_context(DenoiserBackend& denoiser, const LatentGrid& z, const NoiseSchedule& schedule, int t,
                              const ConditioningSet& cond, const FeatureBundle* overrides, const char* branch) {
    const std::string where = std::string(branch) + " failed at t=" + std::to_string(t) + ": ";
    try {
        Prediction p = denoiser.predict(z, StepInfo::at(schedule, t), cond, overrides);
        if (!p.eps.all_finite()) {
            throw BackendError("non-finite noise prediction");
        }
        return p;
    } catch (const ContractError& e) {
        throw ContractError(where + e.what());
    } catch (const std::exception& e) {
        throw BackendError(where + e.what());
    }
}

std::vector<std::string> keys_of(const FeatureMap& map) {
    std::vector<std::string> out;
    for (const auto& [layer, _] : map) {
        out.push_back(layer);
    }
    return out;
}

Image crop_to(const Image& image, int width, int height) {
    if (image.width() == width && image.height() == height) {
        return image;
    }
    return crop(image, {0, 0, width, height});
}

}  // namespace

void InjectionConfig::validate() const {
    check_tau(tau_f, "tau_f");
    check_tau(tau_q, "tau_q");
    check_tau(tau_k, "tau_k");
}

void InjectionConfig::check_catalog(const LayerCatalog& catalog) const {
    for (const auto& id : spatial_layers) {
        if (!catalog.contains(id, LayerKind::spatial)) {
            throw ConfigError("spatial injection layer \"" + id + "\" is not a spatial layer of the backend catalog");
        }
    }
    for (const auto& id : attention_layers) {
        if (!catalog.contains(id, LayerKind::attention)) {
            throw ConfigError("attention injection layer \"" + id +
                              "\" is not an attention layer of the backend catalog");
        }
    }
}

InjectionConfig InjectionConfig::all_layers(const LayerCatalog& catalog, double tau_f, double tau_q, double tau_k) {
    InjectionConfig inj;
    inj.tau_f = tau_f;
    inj.tau_q = tau_q;
    inj.tau_k = tau_k;
    for (const auto& layer : catalog.layers()) {
        (layer.kind == LayerKind::spatial ? inj.spatial_layers : inj.attention_layers).push_back(layer.id);
    }
    return inj;
}

json to_json(const InjectionConfig& inj) {
    return {{"tau_f", inj.tau_f},
            {"tau_q", inj.tau_q},
            {"tau_k", inj.tau_k},
            {"spatial_layers", inj.spatial_layers},
            {"attention_layers", inj.attention_layers}};
}

InjectionConfig injection_config_from_json(const json& j) {
    InjectionConfig inj;
    for (const char* key : {"tau_f", "tau_q", "tau_k", "spatial_layers", "attention_layers"}) {
        if (!j.contains(key)) {
            continue;
        }
        try {
            const json& v = j.at(key);
            if (std::string_view(key).starts_with("tau")) {
                const double tau = v.get<double>();
                (key[4] == 'f' ? inj.tau_f : key[4] == 'q' ? inj.tau_q : inj.tau_k) = tau;
            } else {
                (key[0] == 's' ? inj.spatial_layers : inj.attention_layers) = v.get<std::vector<std::string>>();
            }
        } catch (const json::exception& e) {
            throw ValidationError(key, std::string("malformed ") + key + ": " + e.what());
        }
    }
    inj.validate();
    return inj;
}

int injection_threshold(double tau, int num_steps) {
    return static_cast<int>(std::lround(tau * num_steps));
}

FeatureBundle apply_injection(const FeatureBundle& captured, int t, const InjectionConfig& inj, int num_steps) {
    if (num_steps < 1 || t < 1 || t > num_steps) {
        throw RangeError("apply_injection: t=" + std::to_string(t) + " outside 1.." + std::to_string(num_steps));
    }
    FeatureBundle out;
    out.timestep = t;
    if (t > injection_threshold(inj.tau_f, num_steps)) {
        for (const auto& layer : inj.spatial_layers) {
            out.spatial[layer] = require_feature(captured.spatial, layer, "spatial features", t);
        }
    }
    if (t > injection_threshold(inj.tau_q, num_steps)) {
        for (const auto& layer : inj.attention_layers) {
            out.queries[layer] = require_feature(captured.queries, layer, "queries", t);
        }
    }
    if (t > injection_threshold(inj.tau_k, num_steps)) {
        for (const auto& layer : inj.attention_layers) {
            out.keys[layer] = require_feature(captured.keys, layer, "keys", t);
        }
    }
    return out;
}

LatentGrid noise_blend(const LatentGrid& z_g, const LatentGrid& z0_bg, int t_prev, const LatentGrid& latent_mask,
                       const NoiseSchedule& schedule, std::mt19937_64& rng, LatentGrid* eps_out) {
    z_g.require_compatible(z0_bg, "noise_blend background latent");
    z_g.require_compatible(latent_mask, "noise_blend mask");
    LatentGrid eps(z0_bg.shape(), z0_bg.space());
    std::normal_distribution<float> normal(0.0f, 1.0f);
    for (auto& v : eps.values()) {
        v = normal(rng);
    }
    const LatentGrid noised_bg = add_noise(z0_bg, t_prev, eps, schedule);
    LatentGrid out = z_g;
    auto o = out.values();
    const auto m = latent_mask.values();
    const auto b = noised_bg.values();
    for (std::size_t i = 0; i < o.size(); ++i) {
        if (m[i] == 0.0f) {
            o[i] = b[i];
        } else if (m[i] != 1.0f) {
            throw ContractError("noise_blend: mask values must be exactly 0 or 1");
        }
    }
    if (eps_out != nullptr) {
        *eps_out = std::move(eps);
    }
    return out;
}

LatentGrid noise_blend(const LatentGrid& z_g, const LatentGrid& z0_bg, int t_prev, const MaskGrid& mask,
                       const NoiseSchedule& schedule, std::mt19937_64& rng, LatentGrid* eps_out) {
    return noise_blend(z_g, z0_bg, t_prev, mask.latent, schedule, rng, eps_out);
}

std::string to_string(Branch1Mode mode) {
    return mode == Branch1Mode::replay ? "replay" : "free";
}

Branch1Mode branch1_mode_from_string(const std::string& s) {
    if (s == "replay") {
        return Branch1Mode::replay;
    }
    if (s == "free") {
        return Branch1Mode::free;
    }
    throw ValidationError("branch1_mode", "branch1_mode must be \"replay\" or \"free\"");
}

void EngineOptions::validate() const {
    injection.validate();
    if (!(guidance_weight >= 0.0) || !std::isfinite(guidance_weight)) {
        throw ValidationError("guidance_weight", "guidance_weight must be a finite number >= 0");
    }
    if (!(inversion_guidance >= 0.0) || !std::isfinite(inversion_guidance)) {
        throw ValidationError("inversion_guidance", "inversion_guidance must be a finite number >= 0");
    }
    check_tau(style_tau, "style_tau");
    if (!(refiner_fraction > 0.0 && refiner_fraction < 1.0)) {
        throw ValidationError("refiner_fraction", "refiner_fraction must lie in (0, 1)");
    }
    if (dilation_radius < 0) {
        throw ValidationError("mask_dilation", "mask_dilation must be >= 0");
    }
    if (inversion.fixed_point_iters < 0) {
        throw ValidationError("inversion_iters", "inversion_iters must be >= 0");
    }
}

json to_json(const EngineOptions& o) {
    return {{"injection", to_json(o.injection)},
            {"guidance_weight", o.guidance_weight},
            {"inversion_guidance", o.inversion_guidance},
            {"branch1_mode", to_string(o.branch1_mode)},
            {"invert_with_content", o.invert_with_content},
            {"noise_blending", o.noise_blending},
            {"depth_conditioning", o.depth_conditioning},
            {"style_tau", o.style_tau},
            {"refiner_enabled", o.refiner_enabled},
            {"refiner_fraction", o.refiner_fraction},
            {"mask_dilation", o.dilation_radius},
            {"bg_depth_source", to_string(o.depth_source)},
            {"inversion_iters", o.inversion.fixed_point_iters},
            {"inversion_tolerance", o.inversion.tolerance}};
}

EngineOptions engine_options_from_json(const json& j, EngineOptions o) {
    if (!j.is_object()) {
        throw ValidationError("options", "engine options must be a JSON object");
    }
    auto read = [&](const char* key, auto& target) {
        if (!j.contains(key)) {
            return;
        }
        try {
            target = j.at(key).get<std::remove_reference_t<decltype(target)>>();
        } catch (const json::exception& e) {
            throw ValidationError(key, std::string("malformed ") + key + ": " + e.what());
        }
    };
    if (j.contains("injection")) {
        o.injection = injection_config_from_json(j.at("injection"));
    }
    read("guidance_weight", o.guidance_weight);
    read("inversion_guidance", o.inversion_guidance);
    if (j.contains("branch1_mode")) {
        std::string mode;
        read("branch1_mode", mode);
        o.branch1_mode = branch1_mode_from_string(mode);
    }
    read("invert_with_content", o.invert_with_content);
    read("noise_blending", o.noise_blending);
    read("depth_conditioning", o.depth_conditioning);
    read("style_tau", o.style_tau);
    read("refiner_enabled", o.refiner_enabled);
    read("refiner_fraction", o.refiner_fraction);
    read("mask_dilation", o.dilation_radius);
    if (j.contains("bg_depth_source")) {
        std::string source;
        read("bg_depth_source", source);
        o.depth_source = depth_source_from_string(source);
    }
    read("inversion_iters", o.inversion.fixed_point_iters);
    read("inversion_tolerance", o.inversion.tolerance);
    o.validate();
    return o;
}

json to_json(const std::vector<InjectionLogEntry>& log) {
    json steps = json::array();
    for (const auto& e : log) {
        steps.push_back({{"t", e.t},
                         {"spatial", e.spatial},
                         {"queries", e.queries},
                         {"keys", e.keys},
                         {"style", e.style},
                         {"blended", e.blended}});
    }
    return steps;
}

GenerationResult run_controllable_generation(const GenerationInputs& inputs, const EngineBackends& backends,
                                             const NoiseSchedule& schedule, const EngineOptions& options) {
    options.validate();
    DenoiserBackend& denoiser = backends.denoiser;
    VaeBackend& vae = backends.vae;
    options.injection.check_catalog(denoiser.catalog());
    if (options.refiner_enabled && backends.refiner == nullptr) {
        throw ConfigError("refiner enabled but the backend set provides none");
    }
    if (inputs.content_embedding && inputs.content_embedding->role != EmbeddingRole::content) {
        throw ContractError("a " + to_string(inputs.content_embedding->role) +
                            " embedding was supplied as the Branch1 content embedding");
    }
    if (inputs.style_embedding && inputs.style_embedding->role != EmbeddingRole::style) {
        throw ContractError("a " + to_string(inputs.style_embedding->role) +
                            " embedding was supplied as the Branch2 style embedding");
    }
    if (inputs.prompt.empty()) {
        throw ValidationError("prompt", "prompt text must not be empty");
    }
    const int T = schedule.num_steps();
    const int scale = vae.scale_factor();

    GenerationResult result;
    result.seed = inputs.seed;

    // Pixel-space assembly.
    PasteResult pasted = paste(inputs.render, inputs.background, inputs.placement,
                               {options.dilation_radius, scale, vae.latent_channels()});
    ComposedDepth composed = compose_depth(inputs.render, inputs.background, inputs.placement, options.depth_source,
                                           backends.depth_estimator);
    const Image bg_rgb = to_rgb(inputs.background);
    const int width = bg_rgb.width();
    const int height = bg_rgb.height();

    const LatentGrid z0_c = vae.encode(pad_reflect_to_multiple(pasted.coarse, scale));
    const LatentGrid z0_bg = vae.encode(pad_reflect_to_multiple(bg_rgb, scale));
    const LatentGrid& mask = pasted.mask.latent;
    z0_c.require_compatible(z0_bg, "background latent");
    z0_c.require_compatible(mask, "latent mask");

    // Conditioning per role.
    ConditioningSet base;
    base.prompt_text = inputs.prompt;
    base.content_weight = inputs.content_weight;
    base.style_weight = inputs.style_weight;
    if (options.depth_conditioning) {
        base.depth = pad_reflect_to_multiple(composed.depth, scale);
    }
    ConditioningSet cond_inv = base;
    cond_inv.guidance_weight = options.inversion_guidance;
    std::optional<std::vector<float>> content;
    if (inputs.content_embedding) {
        content = inputs.content_embedding->vector;
    }
    if (options.invert_with_content) {
        cond_inv.content_embedding = content;
    }
    ConditioningSet cond_b1 = base;
    cond_b1.guidance_weight = options.inversion_guidance;
    cond_b1.content_embedding = content;
    ConditioningSet cond_b2 = base;
    cond_b2.guidance_weight = options.guidance_weight;
    ConditioningSet cond_b2_style = cond_b2;
    if (inputs.style_embedding) {
        cond_b2_style.style_embedding = inputs.style_embedding->vector;
    }
    for (const auto* c : {&cond_inv, &cond_b1}) {
        c->validate();
        check_routing(*c, Branch::one);
    }
    for (const auto* c : {&cond_b2, &cond_b2_style}) {
        c->validate();
        check_routing(*c, Branch::two);
    }

    const Trajectory trajectory = ddim_invert(z0_c, denoiser, cond_inv, schedule, options.inversion);
    if (trajectory.conditioning_fingerprint() != cond_inv.fingerprint()) {
        throw ContractError("inversion trajectory does not match the Branch1 conditioning");
    }

    const int style_until = injection_threshold(options.style_tau, T);
    const int t_stop = options.refiner_enabled ? static_cast<int>(std::lround(options.refiner_fraction * T)) : 0;
    std::mt19937_64 rng(inputs.seed);

    LatentGrid z_g = trajectory.terminal();
    LatentGrid z_c = trajectory.terminal();
    for (int t = T; t > t_stop; --t) {
        const int t_prev = t - 1;

        // Branch1: capture strictly precedes Branch2 at the same t.
        const LatentGrid& z_c_t = options.branch1_mode == Branch1Mode::replay ? trajectory.at(t) : z_c;
        Prediction b1 = predict_in_context(denoiser, z_c_t, schedule, t, cond_b1, nullptr, "Branch1");
        if (options.branch1_mode == Branch1Mode::free) {
            z_c = ddim_step(z_c_t, b1.eps, t, t_prev, schedule);
        }
        const FeatureBundle overrides = apply_injection(b1.captured, t, options.injection, T);

        // Branch2.
        const bool with_style = inputs.style_embedding.has_value() && t <= style_until;
        const ConditioningSet& cond = with_style ? cond_b2_style : cond_b2;
        Prediction b2 =
            predict_in_context(denoiser, z_g, schedule, t, cond, overrides.empty() ? nullptr : &overrides, "Branch2");
        check_echo(overrides.spatial, b2.captured.spatial, "spatial");
        check_echo(overrides.queries, b2.captured.queries, "query");
        check_echo(overrides.keys, b2.captured.keys, "key");
        z_g = ddim_step(z_g, b2.eps, t, t_prev, schedule);

        LatentGrid eps;
        if (options.noise_blending) {
            z_g = noise_blend(z_g, z0_bg, t_prev, mask, schedule, rng, &eps);
        }
        if (options.record_latent_trace) {
            result.latent_trace.push_back(z_g);
            result.blend_noise.push_back(std::move(eps));
        }
        result.injection_log.push_back({t, keys_of(overrides.spatial), keys_of(overrides.queries),
                                        keys_of(overrides.keys), with_style, options.noise_blending});
    }

    if (t_stop > 0) {
        const ConditioningSet& cond = inputs.style_embedding && t_stop <= style_until ? cond_b2_style : cond_b2;
        try {
            z_g = backends.refiner->refine(z_g, t_stop, options.refiner_fraction, schedule, cond);
        } catch (const std::exception& e) {
            throw BackendError("refiner failed at t=" + std::to_string(t_stop) + ": " + e.what());
        }
        z0_c.require_compatible(z_g, "refiner output");
        if (options.noise_blending) {
            z_g = noise_blend(z_g, z0_bg, 0, mask, schedule, rng);
        }
    }
    if (!z_g.all_finite()) {
        throw BackendError("generation produced a non-finite latent");
    }

    Image decoded;
    try {
        decoded = vae.decode(z_g);
    } catch (const std::exception& e) {
        throw BackendError(std::string("decode failed: ") + e.what());
    }
    result.image = crop_to(to_rgb(decoded), width, height);
    result.final_latent = std::move(z_g);
    result.coarse = std::move(pasted.coarse);
    result.mask = std::move(pasted.mask);
    result.depth = std::move(composed.depth);
    result.background_latent = z0_bg;
    result.inversion_fingerprint = trajectory.conditioning_fingerprint();
    return result;
}

}  // namespace freeinsert
