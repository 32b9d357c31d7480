// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/request.hpp"

#include <cmath>
#include <set>

#include "freeinsert/errors.hpp"
#include "freeinsert/hashing.hpp"

namespace freeinsert {

namespace {

using json = nlohmann::json;

constexpr std::uint64_t kMaxSeed = (std::uint64_t{1} << 53) - 1;  // exact in JSON doubles

struct KnobRange {
    const char* name;
    double min;
    double max;
    double def;
    double step;
};

constexpr KnobRange kKnobs[] = {
    {"tau_f", 0.0, 1.0, 0.2, 0.02},
    {"tau_q", 0.0, 1.0, 0.5, 0.02},
    {"tau_k", 0.0, 1.0, 0.5, 0.02},
    {"style_tau", 0.0, 1.0, 1.0, 0.02},
    {"guidance_weight", 0.0, 20.0, 5.0, 0.5},
    {"content_weight", 0.0, 2.0, 0.8, 0.05},
    {"style_weight", 0.0, 2.0, 0.6, 0.05},
    {"scale", 0.05, 4.0, 1.0, 0.01},
    {"rotation_deg", -180.0, 180.0, 0.0, 1.0},
    {"mask_dilation", 0.0, 64.0, 8.0, 1.0},
};

const KnobRange& knob(const std::string& name) {
    for (const auto& k : kKnobs) {
        if (name == k.name) {
            return k;
        }
    }
    throw ContractError("unknown knob " + name);
}

void check_range(const std::string& name, double v) {
    const KnobRange& k = knob(name);
    if (!std::isfinite(v) || v < k.min || v > k.max) {
        throw ValidationError(name, name + " must lie in [" + json(k.min).dump() + ", " + json(k.max).dump() + "], got " +
                                        json(v).dump());
    }
}

template <typename T>
std::optional<T> optional_number(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) {
        return std::nullopt;
    }
    if (!j.at(key).is_number()) {
        throw ValidationError(key, std::string(key) + " must be a number");
    }
    const T v = j.at(key).get<T>();
    check_range(key, static_cast<double>(v));
    return v;
}

std::string optional_string(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) {
        return {};
    }
    if (!j.at(key).is_string()) {
        throw ValidationError(key, std::string(key) + " must be a string");
    }
    return j.at(key).get<std::string>();
}

const char* const kRequestKeys[] = {"object",      "object_tag", "background",   "view_tag",       "render",
                                    "render_depth", "inline",     "placement",    "prompt",         "tau_f",
                                    "tau_q",       "tau_k",      "style_tau",    "guidance_weight", "content_weight",
                                    "style_weight", "knobs",      "use_caption",  "seed",           "backend_profile",
                                    "variant"};

const char* const kInlineKeys[] = {"background", "object", "render", "render_depth"};

std::vector<std::uint8_t> inline_bytes(const json& inline_images, const char* key) {
    try {
        return base64_decode(inline_images.at(key).get<std::string>());
    } catch (const std::exception& e) {
        throw ValidationError(key, std::string("inline ") + key + " is not valid base64: " + e.what());
    }
}

Image load_rgb(const std::string& field, const std::string& path) {
    try {
        return load_image(path);
    } catch (const Error& e) {
        throw ValidationError(field, field + ": cannot read image " + path);
    }
}

Image rgba_from(Image img) {
    if (img.channels() == 4) {
        return img;
    }
    Image out(img.width(), img.height(), 4);
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            for (int c = 0; c < 3; ++c) {
                out.at(x, y, c) = img.at(x, y, c);
            }
            out.at(x, y, 3) = 1.0f;
        }
    }
    return out;
}

}  // namespace

std::string to_string(Variant v) {
    switch (v) {
    case Variant::ours:
        return "ours";
    case Variant::paste:
        return "paste";
    case Variant::no_injection:
        return "no-injection";
    case Variant::no_style:
        return "no-style";
    case Variant::no_content:
        return "no-content";
    case Variant::no_depth:
        return "no-depth";
    case Variant::no_blend:
        return "no-blend";
    case Variant::template_prompt:
        return "template-prompt";
    }
    return "unknown";
}

Variant variant_from_string(const std::string& s) {
    for (Variant v : {Variant::ours, Variant::paste, Variant::no_injection, Variant::no_style, Variant::no_content,
                      Variant::no_depth, Variant::no_blend, Variant::template_prompt}) {
        if (to_string(v) == s) {
            return v;
        }
    }
    throw ValidationError("variant", "unknown variant \"" + s +
                                         "\" (ours, paste, no-injection, no-style, no-content, no-depth, no-blend, "
                                         "template-prompt)");
}

json knob_ranges() {
    json out = json::object();
    for (const auto& k : kKnobs) {
        out[k.name] = {{"min", k.min}, {"max", k.max}, {"default", k.def}, {"step", k.step}};
    }
    out["seed"] = {{"min", 0}, {"max", kMaxSeed}, {"default", 0}, {"step", 1}};
    return out;
}

json merge_request_defaults(const json& defaults, const json& request) {
    json out = defaults.is_object() ? defaults : json::object();
    // Benchmark-only settings never reach a request.
    out.erase("metrics");
    for (const auto& [key, value] : request.items()) {
        if (key == "knobs" && out.contains("knobs") && value.is_object()) {
            out["knobs"].update(value);
        } else {
            out[key] = value;
        }
    }
    return out;
}

json CompositeRequest::to_json() const {
    json j = {{"object", object},
              {"background", background},
              {"use_caption", use_caption},
              {"seed", seed},
              {"variant", freeinsert::to_string(variant)},
              {"knobs", knobs}};
    auto put_string = [&](const char* key, const std::string& v) {
        if (!v.empty()) {
            j[key] = v;
        }
    };
    put_string("object_tag", object_tag);
    put_string("view_tag", view_tag);
    put_string("render", render);
    put_string("render_depth", render_depth);
    put_string("backend_profile", backend_profile);
    if (!inline_images.empty()) {
        j["inline"] = inline_images;
    }
    if (placement) {
        j["placement"] = freeinsert::to_json(*placement);
    }
    if (prompt) {
        j["prompt"] = *prompt;
    }
    auto put = [&](const char* key, const auto& v) {
        if (v) {
            j[key] = *v;
        }
    };
    put("tau_f", tau_f);
    put("tau_q", tau_q);
    put("tau_k", tau_k);
    put("style_tau", style_tau);
    put("guidance_weight", guidance_weight);
    put("content_weight", content_weight);
    put("style_weight", style_weight);
    return j;
}

CompositeRequest CompositeRequest::from_json(const json& j) {
    if (!j.is_object()) {
        throw ValidationError("request", "request must be a JSON object");
    }
    for (const auto& [key, value] : j.items()) {
        if (std::find(std::begin(kRequestKeys), std::end(kRequestKeys), key) == std::end(kRequestKeys)) {
            throw ValidationError(key, "unknown request field \"" + key + "\"");
        }
    }
    CompositeRequest r;
    r.object = optional_string(j, "object");
    r.object_tag = optional_string(j, "object_tag");
    r.background = optional_string(j, "background");
    r.view_tag = optional_string(j, "view_tag");
    r.render = optional_string(j, "render");
    r.render_depth = optional_string(j, "render_depth");
    r.backend_profile = optional_string(j, "backend_profile");
    if (j.contains("inline") && !j.at("inline").is_null()) {
        const json& in = j.at("inline");
        if (!in.is_object()) {
            throw ValidationError("inline", "inline must be an object of base64 PNGs");
        }
        for (const auto& [key, value] : in.items()) {
            if (std::find(std::begin(kInlineKeys), std::end(kInlineKeys), key) == std::end(kInlineKeys)) {
                throw ValidationError("inline", "unknown inline image \"" + key + "\"");
            }
            if (!value.is_string()) {
                throw ValidationError(key, "inline " + key + " must be a base64 string");
            }
        }
        r.inline_images = in;
    }
    if (r.object.empty() && !r.inline_images.contains("object")) {
        throw ValidationError("object", "object is required");
    }
    if (r.background.empty() && !r.inline_images.contains("background")) {
        throw ValidationError("background", "background is required");
    }
    if (j.contains("placement") && !j.at("placement").is_null()) {
        r.placement = placement_from_json(j.at("placement"));
        check_range("scale", r.placement->scale);
        check_range("rotation_deg", r.placement->rotation_deg);
    }
    if (j.contains("prompt") && !j.at("prompt").is_null()) {
        const std::string p = optional_string(j, "prompt");
        if (p.find_first_not_of(" \t\r\n") == std::string::npos) {
            throw ValidationError("prompt", "prompt must not be blank");
        }
        r.prompt = p;
    }
    r.tau_f = optional_number<double>(j, "tau_f");
    r.tau_q = optional_number<double>(j, "tau_q");
    r.tau_k = optional_number<double>(j, "tau_k");
    r.style_tau = optional_number<double>(j, "style_tau");
    r.guidance_weight = optional_number<double>(j, "guidance_weight");
    r.content_weight = optional_number<float>(j, "content_weight");
    r.style_weight = optional_number<float>(j, "style_weight");
    if (j.contains("knobs") && !j.at("knobs").is_null()) {
        if (!j.at("knobs").is_object()) {
            throw ValidationError("knobs", "knobs must be an object");
        }
        r.knobs = j.at("knobs");
        if (r.knobs.contains("mask_dilation")) {
            if (!r.knobs.at("mask_dilation").is_number_integer()) {
                throw ValidationError("mask_dilation", "mask_dilation must be an integer");
            }
            check_range("mask_dilation", r.knobs.at("mask_dilation").get<double>());
        }
        if (r.knobs.contains("injection")) {
            throw ValidationError("knobs", "set tau_f/tau_q/tau_k at top level; injection layers come from the profile");
        }
    }
    if (j.contains("use_caption")) {
        if (!j.at("use_caption").is_boolean()) {
            throw ValidationError("use_caption", "use_caption must be a boolean");
        }
        r.use_caption = j.at("use_caption").get<bool>();
    }
    if (j.contains("seed") && !j.at("seed").is_null()) {
        const json& s = j.at("seed");
        const bool non_negative = s.is_number_unsigned() || (s.is_number_integer() && s.get<std::int64_t>() >= 0);
        if (!non_negative || s.get<std::uint64_t>() > kMaxSeed) {
            throw ValidationError("seed", "seed must be an integer in [0, 2^53 - 1]");
        }
        r.seed = s.get<std::uint64_t>();
    }
    if (j.contains("variant")) {
        r.variant = variant_from_string(optional_string(j, "variant"));
    }
    return r;
}

ResolvedRequest resolve_request(const CompositeRequest& req, const BenchmarkManifest* registry, bool allow_paths) {
    ResolvedRequest out;
    out.request = req;
    const json& in = req.inline_images;

    // Background.
    const BackgroundEntry* bg_entry = registry != nullptr ? registry->find_background(req.background) : nullptr;
    if (in.contains("background")) {
        try {
            out.background = to_rgb(decode_image(inline_bytes(in, "background")));
        } catch (const Error& e) {
            throw ValidationError("background", std::string("inline background: ") + e.what());
        }
    } else if (bg_entry != nullptr) {
        out.background = load_rgb("background", bg_entry->path.string());
    } else if (allow_paths && std::filesystem::is_regular_file(req.background)) {
        out.background = load_rgb("background", req.background);
    } else {
        throw ValidationError("background", "unknown background \"" + req.background + "\"");
    }

    // Object image and tag.
    const ObjectEntry* obj_entry = registry != nullptr ? registry->find_object(req.object) : nullptr;
    if (in.contains("object")) {
        try {
            out.object_image = to_rgb(decode_image(inline_bytes(in, "object")));
        } catch (const Error& e) {
            throw ValidationError("object", std::string("inline object: ") + e.what());
        }
        out.object_tag = req.object.empty() ? "object" : req.object;
    } else if (obj_entry != nullptr) {
        out.object_image = load_rgb("object", obj_entry->image.string());
        out.object_tag = obj_entry->tag;
    } else if (allow_paths && std::filesystem::is_regular_file(req.object)) {
        out.object_image = load_rgb("object", req.object);
        out.object_tag = std::filesystem::path(req.object).stem().string();
    } else {
        throw ValidationError("object", "unknown object \"" + req.object + "\"");
    }
    if (!req.object_tag.empty()) {
        out.object_tag = req.object_tag;
    }

    // Render: inline, explicit files, or a registry view.
    if (in.contains("render") || in.contains("render_depth")) {
        if (!in.contains("render")) {
            throw ValidationError("render", "inline render_depth given without inline render");
        }
        if (!in.contains("render_depth")) {
            throw ValidationError("render_depth", "inline render given without inline render_depth");
        }
        try {
            out.render.rgba = rgba_from(decode_image(inline_bytes(in, "render"), true));
        } catch (const Error& e) {
            throw ValidationError("render", std::string("inline render: ") + e.what());
        }
        try {
            out.render.depth = decode_depth(inline_bytes(in, "render_depth"));
        } catch (const Error& e) {
            throw ValidationError("render_depth", std::string("inline render_depth: ") + e.what());
        }
        out.render.view_tag = req.view_tag.empty() ? "inline" : req.view_tag;
    } else if (!req.render.empty() || !req.render_depth.empty()) {
        if (!allow_paths) {
            throw ValidationError("render", "render files are not accepted here; use view_tag");
        }
        if (req.render.empty()) {
            throw ValidationError("render", "render is required with render_depth");
        }
        if (req.render_depth.empty()) {
            throw ValidationError("render_depth", "render_depth is required with render");
        }
        try {
            out.render.rgba = rgba_from(load_image(req.render, true));
        } catch (const Error&) {
            throw ValidationError("render", "render: cannot read image " + req.render);
        }
        try {
            out.render.depth = load_depth(req.render_depth);
        } catch (const Error&) {
            throw ValidationError("render_depth", "render_depth: cannot read depth map " + req.render_depth);
        }
        out.render.view_tag = req.view_tag.empty() ? std::filesystem::path(req.render).stem().string() : req.view_tag;
    } else if (obj_entry != nullptr) {
        const RenderEntry* view =
            req.view_tag.empty() ? &obj_entry->renders.front() : obj_entry->find_view(req.view_tag);
        if (view == nullptr) {
            throw ValidationError("view_tag", "object \"" + req.object + "\" has no view \"" + req.view_tag + "\"");
        }
        try {
            out.render.rgba = rgba_from(load_image(view->rgba, true));
            out.render.depth = load_depth(view->depth);
        } catch (const Error& e) {
            throw ValidationError("render", std::string("registry render: ") + e.what());
        }
        out.render.view_tag = view->view_tag;
    } else {
        throw ValidationError("render", "a render is required (view_tag of a registered object, or render files)");
    }
    out.render.validate();

    if (req.placement) {
        out.placement = *req.placement;
    } else if (bg_entry != nullptr && bg_entry->placement) {
        out.placement = *bg_entry->placement;
    } else if (registry != nullptr && registry->placement) {
        out.placement = *registry->placement;
    } else {
        out.placement = auto_placement(out.background.width(), out.background.height(), out.render.rgba.width(),
                                       out.render.rgba.height());
    }
    return out;
}

}  // namespace freeinsert
