// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "freeinsert/compositing.hpp"
#include "freeinsert/manifest.hpp"

namespace freeinsert {

/// Ablation and baseline variants of a run.
enum class Variant { ours, paste, no_injection, no_style, no_content, no_depth, no_blend, template_prompt };

std::string to_string(Variant v);
/// ValidationError("variant") on unknown names.
Variant variant_from_string(const std::string& s);

/// One insertion job as submitted by the CLI, the service or a benchmark pair.
///
/// `object`, `background` name registry ids or, when paths are allowed, image
/// files. The render comes from the registry (`view_tag`) or from explicit
/// `render` / `render_depth` files. Inline base64 PNGs under `inline`
/// ({background, object, render, render_depth}) take precedence over both.
struct CompositeRequest {
    std::string object;
    std::string object_tag;  // template noun; defaults to the registry tag or file stem
    std::string background;
    std::string view_tag;
    std::string render;
    std::string render_depth;
    nlohmann::json inline_images = nlohmann::json::object();
    std::optional<Placement> placement;  // absent: background default, then auto
    std::optional<std::string> prompt;
    std::optional<double> tau_f;
    std::optional<double> tau_q;
    std::optional<double> tau_k;
    std::optional<double> style_tau;
    std::optional<double> guidance_weight;
    std::optional<float> content_weight;
    std::optional<float> style_weight;
    /// Further EngineOptions keys, applied over the profile defaults.
    nlohmann::json knobs = nlohmann::json::object();
    bool use_caption = true;
    std::uint64_t seed = 0;
    std::string backend_profile;  // empty: the caller's default
    Variant variant = Variant::ours;

    /// Canonical form; absent optionals are omitted so the echo is stable.
    nlohmann::json to_json() const;
    /// ValidationError naming the offending field, including knob range checks.
    static CompositeRequest from_json(const nlohmann::json& j);
};

/// Advertised ranges of the user-facing knobs:
/// {name: {min, max, default, step}}. Requests outside them are rejected.
nlohmann::json knob_ranges();

/// Applies `defaults` (request-shaped JSON) under `request` (request wins).
nlohmann::json merge_request_defaults(const nlohmann::json& defaults, const nlohmann::json& request);

/// Images and render loaded and checked.
struct ResolvedRequest {
    CompositeRequest request;
    Image background;
    Image object_image;
    RenderedObject render;
    std::string object_tag;
    Placement placement;
};

/// Loads every input. With a registry, ids resolve there first; file paths
/// are accepted only when `allow_paths` is set. ValidationError names the
/// field ("object", "background", "view_tag", "render", "render_depth").
ResolvedRequest resolve_request(const CompositeRequest& request, const BenchmarkManifest* registry, bool allow_paths);

}  // namespace freeinsert
