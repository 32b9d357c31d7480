// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/pipeline.hpp"

#include <atomic>
#include <fstream>

#include <unistd.h>

#include "freeinsert/errors.hpp"
#include "freeinsert/hashing.hpp"
#include "freeinsert/log.hpp"

namespace freeinsert {

namespace {

using json = nlohmann::json;

json rect_json(const Rect& r) {
    return {{"x", r.x}, {"y", r.y}, {"width", r.width}, {"height", r.height}};
}

std::optional<ImageEmbedding> try_embed(const Image& image, EmbeddingRole role, ImageEmbedder* extractor) {
    try {
        return embed(image, role, extractor);
    } catch (const ExtractorUnavailable& e) {
        log_warning(e.what());
        return std::nullopt;
    }
}

json metric_values_json(const MetricValues& v, std::span<const Metric> requested) {
    json j = json::object();
    for (Metric m : requested) {
        j[to_string(m)] = v[m] ? json(*v[m]) : json(nullptr);
    }
    return j;
}

}  // namespace

EngineOptions request_engine_options(const CompositeRequest& r, const EngineOptions& profile_defaults) {
    EngineOptions o = engine_options_from_json(r.knobs, profile_defaults);
    if (r.tau_f) {
        o.injection.tau_f = *r.tau_f;
    }
    if (r.tau_q) {
        o.injection.tau_q = *r.tau_q;
    }
    if (r.tau_k) {
        o.injection.tau_k = *r.tau_k;
    }
    if (r.style_tau) {
        o.style_tau = *r.style_tau;
    }
    if (r.guidance_weight) {
        o.guidance_weight = *r.guidance_weight;
    }
    switch (r.variant) {
    case Variant::no_injection:
        // t > round(1 * T) never holds.
        o.injection.tau_f = o.injection.tau_q = o.injection.tau_k = 1.0;
        break;
    case Variant::no_depth:
        o.depth_conditioning = false;
        break;
    case Variant::no_blend:
        o.noise_blending = false;
        break;
    default:
        break;
    }
    o.validate();
    return o;
}

RunArtifacts execute_request(const ResolvedRequest& rr, BackendSet& backends, Captioner& captioner) {
    const CompositeRequest& req = rr.request;
    RunArtifacts out;
    out.options = request_engine_options(req, backends.engine);

    if (req.prompt) {
        out.prompt = user_prompt(*req.prompt);
    } else if (req.use_caption && req.variant != Variant::template_prompt) {
        out.prompt = captioner.caption(rr.object_image, rr.object_tag);
    } else {
        out.prompt = template_prompt(rr.object_tag);
    }

    json engine_meta = nullptr;
    json embeddings = {{"content", nullptr}, {"style", nullptr}};
    if (req.variant == Variant::paste) {
        PasteOptions po;
        po.dilation_radius = out.options.dilation_radius;
        po.scale_factor = backends.vae->scale_factor();
        po.latent_channels = backends.vae->latent_channels();
        PasteResult pasted = paste(rr.render, rr.background, rr.placement, po);
        out.image = std::move(pasted.coarse);
        out.mask = std::move(pasted.mask.pixel);
    } else {
        GenerationInputs in;
        in.background = rr.background;
        in.render = rr.render;
        in.placement = rr.placement;
        in.prompt = out.prompt.text;
        in.seed = req.seed;
        in.content_weight = req.content_weight.value_or(in.content_weight);
        in.style_weight = req.style_weight.value_or(in.style_weight);
        if (req.variant != Variant::no_content) {
            in.content_embedding = try_embed(rr.object_image, EmbeddingRole::content, backends.ip.get());
        }
        if (req.variant != Variant::no_style) {
            in.style_embedding = try_embed(rr.background, EmbeddingRole::style, backends.ip.get());
        }
        if (in.content_embedding) {
            embeddings["content"] = in.content_embedding->extractor_id;
        }
        if (in.style_embedding) {
            embeddings["style"] = in.style_embedding->extractor_id;
        }
        GenerationResult result =
            run_controllable_generation(in, backends.engine_backends(), backends.schedule, out.options);
        out.image = std::move(result.image);
        out.mask = std::move(result.mask.pixel);
        out.injection_log = to_json(result.injection_log);
        engine_meta = {{"inversion_fingerprint", result.inversion_fingerprint},
                       {"content_weight", in.content_weight},
                       {"style_weight", in.style_weight}};
    }
    if (out.mask.count() == 0) {
        throw ValidationError("render", "the render has no opaque pixels at this placement");
    }
    const ComposedDepth ref =
        compose_depth(rr.render, rr.background, rr.placement, BackgroundDepthSource::constant_far, nullptr);
    out.reference_depth = ref.depth;
    out.region = RegionSpec::from_mask(out.mask);

    const std::vector<std::uint8_t> png = encode_png(out.image);
    out.png = png;
    out.image_sha256 = sha256_hex(std::span<const std::uint8_t>(png));

    out.metadata = {
        {"version", kVersion},
        {"request", req.to_json()},
        {"variant", to_string(req.variant)},
        {"prompt", {{"text", out.prompt.text}, {"source", to_string(out.prompt.source)}}},
        {"object_tag", rr.object_tag},
        {"view_tag", rr.render.view_tag},
        {"placement", to_json(rr.placement)},
        {"seed", req.seed},
        {"engine", to_json(out.options)},
        {"engine_run", engine_meta},
        {"embeddings", embeddings},
        {"backend",
         {{"profile", backends.profile_name},
          {"build_id", backends.build_id},
          {"denoiser", backends.denoiser->id()},
          {"vae", backends.vae->id()},
          {"refiner", backends.refiner ? json(backends.refiner->id()) : json(nullptr)},
          {"num_steps", backends.schedule.num_steps()}}},
        {"image",
         {{"file", "image.png"}, {"sha256", out.image_sha256}, {"width", out.image.width()}, {"height", out.image.height()}}},
        {"mask_bbox", rect_json(out.mask.bbox())},
        {"mask_pixels", out.mask.count()},
        {"region", {{"bbox", rect_json(out.region.bbox)}, {"geometry", out.region.geometry}}},
    };
    return out;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    static std::atomic<unsigned> counter{0};
    std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.parent_path() / ("." + path.filename().string() + ".tmp" + std::to_string(::getpid()) + "." +
                                           std::to_string(counter++));
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        f.flush();
        if (!f) {
            throw Error("cannot write " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_artifacts(const RunArtifacts& a, const std::filesystem::path& dir) {
    write_file_atomic(dir / "image.png", std::span<const std::uint8_t>(a.png));
    write_file_atomic(dir / "injection_log.json", a.injection_log.dump(2) + "\n");
    write_file_atomic(dir / "metadata.json", a.metadata.dump(2) + "\n");
}

MetricValues evaluate_run(const ResolvedRequest& rr, const RunArtifacts& a, const BackendSet& backends,
                          std::span<const Metric> requested) {
    EvaluationInputs in;
    in.generated = a.image;
    in.object_image = rr.object_image;
    in.background = rr.background;
    in.reference_depth = a.reference_depth;
    in.region = a.region;
    return evaluate_metrics(in, backends.metric_models(), requested);
}

json RunRecord::to_json() const {
    json names = json::array();
    for (Metric m : requested) {
        names.push_back(freeinsert::to_string(m));
    }
    return {{"pair_id", pair_id},
            {"request_hash", request_hash},
            {"status", status},
            {"error", error.empty() ? json(nullptr) : json(error)},
            {"request", request},
            {"outputs", outputs},
            {"metrics_requested", names},
            {"metrics", metric_values_json(metrics, requested)},
            {"wall_clock_s", wall_clock_s},
            {"seed", seed},
            {"pipeline_version", pipeline_version},
            {"image_sha256", image_sha256}};
}

RunRecord RunRecord::from_json(const json& j) {
    RunRecord r;
    try {
        r.pair_id = j.at("pair_id").get<std::string>();
        r.request_hash = j.at("request_hash").get<std::string>();
        r.status = j.at("status").get<std::string>();
        r.error = j.at("error").is_null() ? "" : j.at("error").get<std::string>();
        r.request = j.at("request");
        r.outputs = j.at("outputs").get<std::vector<std::string>>();
        for (const auto& name : j.at("metrics_requested")) {
            r.requested.push_back(metric_from_string(name.get<std::string>()));
        }
        for (Metric m : r.requested) {
            const json& v = j.at("metrics").at(freeinsert::to_string(m));
            if (!v.is_null()) {
                r.metrics[m] = v.get<double>();
            }
        }
        r.wall_clock_s = j.at("wall_clock_s").get<double>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.pipeline_version = j.at("pipeline_version").get<std::string>();
        r.image_sha256 = j.at("image_sha256").get<std::string>();
    } catch (const json::exception& e) {
        throw ValidationError("record", std::string("malformed run record: ") + e.what());
    }
    return r;
}

std::string request_hash(const CompositeRequest& request, const std::string& build_id, std::span<const Metric> metrics) {
    Sha256 h;
    h.update(request.to_json().dump()).update(std::string_view("\n")).update(build_id);
    for (Metric m : metrics) {
        h.update(std::string_view("\n")).update(to_string(m));
    }
    return h.hex_digest();
}

std::unique_ptr<Captioner> make_captioner(const BackendConfig& cfg) {
    return std::make_unique<Captioner>(make_vlm_client(cfg.vlm), cfg.vlm.instruction);
}

}  // namespace freeinsert
