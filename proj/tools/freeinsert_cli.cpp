// SPDX-License-Identifier: Apache-2.0

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <pthread.h>

#include "freeinsert/benchmark.hpp"
#include "freeinsert/errors.hpp"
#include "freeinsert/remote.hpp"
#include "freeinsert/service.hpp"

namespace {

using json = nlohmann::json;
using namespace freeinsert;

constexpr int kExitFailed = 1;
constexpr int kExitValidation = 2;
constexpr int kExitBackend = 3;

// Request fields whose flag is not the field name with dashes.
std::string flag_for(const std::string& field) {
    if (field == "rotation_deg") {
        return "--rotation";
    }
    if (field == "placement") {
        return "--x/--y";
    }
    std::string flag = field;
    std::replace(flag.begin(), flag.end(), '_', '-');
    return "--" + flag;
}

std::vector<std::string> split_list(const std::vector<std::string>& items) {
    std::vector<std::string> out;
    for (const auto& item : items) {
        std::stringstream ss(item);
        std::string part;
        while (std::getline(ss, part, ',')) {
            if (!part.empty()) {
                out.push_back(part);
            }
        }
    }
    return out;
}

// Inline JSON object, or the path of a file holding one.
json json_arg(const std::string& field, const std::string& value) {
    try {
        if (!value.empty() && value.front() == '{') {
            return json::parse(value);
        }
        std::ifstream in(value);
        if (!in) {
            throw ValidationError(field, "cannot read " + value);
        }
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError(field, std::string("not valid JSON: ") + e.what());
    }
}

BackendConfig profile_arg(const std::string& name) {
    return load_backend_profile(name.empty() ? default_profile_name() : name);
}

// Blocks SIGINT/SIGTERM in every thread and calls `on_signal` from a watcher.
std::thread install_stop_handler(std::function<void()> on_signal) {
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);
    return std::thread([set, on_signal = std::move(on_signal)] {
        int sig = 0;
        sigwait(&set, &sig);
        on_signal();
    });
}

struct GenerateArgs {
    std::string object, background, render, render_depth, view_tag, object_tag, prompt;
    std::string variant = "ours", backend_profile, out = "out", knobs, assets;
    int x = 0, y = 0, mask_dilation = 0;
    double scale = 1.0, rotation = 0.0, tau_f = 0, tau_q = 0, tau_k = 0, style_tau = 0, guidance_weight = 0;
    double content_weight = 0, style_weight = 0;
    std::uint64_t seed = 0;
    bool no_caption = false;
};

int run_generate(const GenerateArgs& a, const CLI::App& cmd) {
    auto given = [&](const std::string& name) { return cmd.count(name) > 0; };
    // Without a registry every input must come from a file.
    if (!given("--assets")) {
        for (const auto& [flag, field] : {std::pair{"--object", "object"},
                                          {"--background", "background"},
                                          {"--render", "render"},
                                          {"--render-depth", "render_depth"}}) {
            if (!given(flag)) {
                throw ValidationError(field, std::string(flag) + " is required");
            }
        }
    }
    json j = {{"object", a.object}, {"background", a.background}, {"seed", a.seed}, {"variant", a.variant}};
    for (const auto& [flag, key, value] :
         std::vector<std::tuple<std::string, std::string, std::string>>{{"--render", "render", a.render},
                                                                       {"--render-depth", "render_depth", a.render_depth},
                                                                       {"--view-tag", "view_tag", a.view_tag},
                                                                       {"--object-tag", "object_tag", a.object_tag},
                                                                       {"--prompt", "prompt", a.prompt}}) {
        if (given(flag)) {
            j[key] = value;
        }
    }
    for (const auto& [flag, key, value] : std::vector<std::tuple<std::string, std::string, double>>{
             {"--tau-f", "tau_f", a.tau_f},
             {"--tau-q", "tau_q", a.tau_q},
             {"--tau-k", "tau_k", a.tau_k},
             {"--style-tau", "style_tau", a.style_tau},
             {"--guidance-weight", "guidance_weight", a.guidance_weight},
             {"--content-weight", "content_weight", a.content_weight},
             {"--style-weight", "style_weight", a.style_weight}}) {
        if (given(flag)) {
            j[key] = value;
        }
    }
    if (given("--x") || given("--y") || given("--scale") || given("--rotation")) {
        if (!given("--x")) {
            throw ValidationError("x", "--x is required with --y/--scale/--rotation");
        }
        if (!given("--y")) {
            throw ValidationError("y", "--y is required with --x/--scale/--rotation");
        }
        j["placement"] = {{"x", a.x}, {"y", a.y}, {"scale", a.scale}, {"rotation_deg", a.rotation}};
    }
    json knobs = given("--knobs") ? json_arg("knobs", a.knobs) : json::object();
    if (given("--mask-dilation")) {
        knobs["mask_dilation"] = a.mask_dilation;
    }
    j["knobs"] = knobs;
    if (a.no_caption) {
        j["use_caption"] = false;
    }

    const BackendConfig profile = profile_arg(a.backend_profile);
    j["backend_profile"] = profile.name;
    const CompositeRequest request = CompositeRequest::from_json(j);
    std::optional<BenchmarkManifest> registry;
    if (given("--assets")) {
        registry = BenchmarkManifest::load(a.assets);
    }
    const ResolvedRequest resolved = resolve_request(request, registry ? &*registry : nullptr, true);

    BackendSet backends = make_backend_set(profile);
    const auto captioner = make_captioner(profile);
    const RunArtifacts artifacts = execute_request(resolved, backends, *captioner);
    const std::filesystem::path out = a.out;
    write_artifacts(artifacts, out);
    std::cout << json{{"image", (out / "image.png").string()},
                      {"metadata", (out / "metadata.json").string()},
                      {"injection_log", (out / "injection_log.json").string()},
                      {"sha256", artifacts.image_sha256},
                      {"prompt", artifacts.prompt.text}}
                     .dump(2)
              << "\n";
    return 0;
}

struct BenchmarkArgs {
    std::string manifest, runs_root = "runs", run_id, backend_profile;
    std::vector<std::string> variants, metrics;
};

int run_benchmark_cmd(const BenchmarkArgs& a) {
    const BenchmarkManifest manifest = BenchmarkManifest::load(a.manifest);
    BenchmarkOptions opt;
    opt.runs_root = a.runs_root;
    opt.run_id = a.run_id.empty() ? std::filesystem::path(a.manifest).stem().string() : a.run_id;
    const auto variants = split_list(a.variants);
    if (!variants.empty()) {
        opt.variants.clear();
        for (const auto& v : variants) {
            if (v == "ablations") {
                opt.variants.insert(opt.variants.end(), {Variant::ours, Variant::no_injection, Variant::no_style,
                                                         Variant::no_content, Variant::no_depth, Variant::no_blend,
                                                         Variant::template_prompt});
            } else {
                opt.variants.push_back(variant_from_string(v));
            }
        }
    }
    const auto metrics = split_list(a.metrics);
    if (!metrics.empty()) {
        opt.metrics.clear();
        for (const auto& m : metrics) {
            opt.metrics.push_back(metric_from_string(m));
        }
    }
    const BenchmarkOutcome outcome = run_benchmark(manifest, profile_arg(a.backend_profile), opt);
    std::cout << outcome.text_table();
    for (const auto& [v, vo] : outcome.variants) {
        std::cerr << to_string(v) << ": " << vo.computed << " computed, " << vo.reused << " reused, "
                  << vo.failed.size() << " failed -> " << (vo.run_dir / "report.json").string() << "\n";
    }
    return outcome.any_failed() ? kExitFailed : 0;
}

struct ServeArgs {
    std::string host = "127.0.0.1", manifest, out = "jobs", backend_profile;
    int port = 8080, workers = 1;
    bool allow_paths = false;
};

int run_serve(const ServeArgs& a) {
    ServiceConfig cfg;
    cfg.host = a.host;
    cfg.port = a.port;
    cfg.workers = a.workers;
    cfg.output_dir = a.out;
    cfg.allow_paths = a.allow_paths;
    cfg.profile = profile_arg(a.backend_profile);
    if (!a.manifest.empty()) {
        cfg.assets = BenchmarkManifest::load(a.manifest);
    }
    Service service(std::move(cfg));
    std::thread watcher = install_stop_handler([&] { service.stop(); });
    const int port = service.start();
    std::cerr << "serving on http://" << a.host << ":" << port << "\n";
    service.serve();
    service.stop();
    watcher.join();
    return 0;
}

int run_catalog(const std::string& profile_name) {
    const BackendConfig cfg = profile_arg(profile_name);
    const BackendSet set = make_backend_set(cfg);
    std::cout << json{{"profile", set.profile_name},
                      {"build_id", set.build_id},
                      {"denoiser", set.denoiser->id()},
                      {"catalog", set.denoiser->catalog().to_json()},
                      {"injection", to_json(set.engine.injection)}}
                     .dump(2)
              << "\n";
    return 0;
}

struct WorkerArgs {
    std::string profile = "toy", host = "127.0.0.1";
    int port = 8090;
};

int run_worker(const WorkerArgs& a) {
    const BackendConfig cfg = load_backend_profile(a.profile);
    if (cfg.kind != "toy") {
        throw ValidationError("profile", "the bundled worker serves toy profiles only");
    }
    ModelWorker worker(cfg);
    std::thread watcher = install_stop_handler([&] { worker.stop(); });
    const int port = worker.bind(a.host, a.port);
    std::cerr << "worker listening on http://" << a.host << ":" << port << "\n";
    worker.listen();
    watcher.join();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Object insertion with controllable diffusion"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);

    GenerateArgs g;
    CLI::App* gen = app.add_subcommand("generate", "insert one rendered object into a background");
    gen->add_option("--object", g.object, "object reference image (or registry id with --assets)");
    gen->add_option("--background", g.background, "background image (or registry id with --assets)");
    gen->add_option("--render", g.render, "rendered view, RGBA PNG");
    gen->add_option("--render-depth", g.render_depth, "depth of the render, 16-bit PNG or float array file");
    gen->add_option("--view-tag", g.view_tag, "view of a registered object");
    gen->add_option("--assets", g.assets, "manifest used as asset registry");
    gen->add_option("--x", g.x, "left edge of the render on the background");
    gen->add_option("--y", g.y, "top edge of the render on the background");
    gen->add_option("--scale", g.scale, "render scale");
    gen->add_option("--rotation", g.rotation, "render rotation in degrees");
    gen->add_option("--prompt", g.prompt, "text prompt (default: caption or template)");
    gen->add_option("--object-tag", g.object_tag, "object noun for the template prompt");
    gen->add_flag("--no-caption", g.no_caption, "use the template prompt instead of a caption");
    gen->add_option("--tau-f", g.tau_f, "spatial feature injection fraction");
    gen->add_option("--tau-q", g.tau_q, "query injection fraction");
    gen->add_option("--tau-k", g.tau_k, "key injection fraction");
    gen->add_option("--style-tau", g.style_tau, "fraction of steps with the style embedding");
    gen->add_option("--guidance-weight", g.guidance_weight, "classifier-free guidance weight");
    gen->add_option("--content-weight", g.content_weight, "content embedding weight");
    gen->add_option("--style-weight", g.style_weight, "style embedding weight");
    gen->add_option("--mask-dilation", g.mask_dilation, "mask dilation radius in pixels");
    gen->add_option("--knobs", g.knobs, "engine option overrides: JSON object or file");
    gen->add_option("--variant", g.variant, "ours, paste, no-injection, no-style, no-content, no-depth, no-blend, template-prompt");
    gen->add_option("--seed", g.seed, "noise seed");
    gen->add_option("--backend-profile", g.backend_profile, "profile name or file");
    gen->add_option("--out", g.out, "output directory");

    BenchmarkArgs b;
    CLI::App* bench = app.add_subcommand("benchmark", "run every manifest pair and aggregate metrics");
    bench->add_option("--manifest", b.manifest, "benchmark manifest")->required();
    bench->add_option("--runs-root", b.runs_root, "root of run directories");
    bench->add_option("--run-id", b.run_id, "run directory name (default: manifest stem)");
    bench->add_option("--variant", b.variants, "variants, comma separated, or 'ablations'");
    bench->add_option("--metrics", b.metrics, "metrics, comma separated (default: all)");
    bench->add_option("--backend-profile", b.backend_profile, "profile name or file");

    ServeArgs s;
    CLI::App* serve = app.add_subcommand("serve", "HTTP job service");
    serve->add_option("--host", s.host, "bind address");
    serve->add_option("--port", s.port, "port (0 picks a free one)");
    serve->add_option("--workers", s.workers, "generation worker threads");
    serve->add_option("--manifest", s.manifest, "asset registry manifest");
    serve->add_option("--out", s.out, "job output directory");
    serve->add_flag("--allow-paths", s.allow_paths, "accept local file paths in requests");
    serve->add_option("--backend-profile", s.backend_profile, "profile name or file");

    std::string catalog_profile;
    CLI::App* catalog = app.add_subcommand("catalog", "print the denoiser layer catalog");
    catalog->add_option("--backend-profile", catalog_profile, "profile name or file");

    WorkerArgs w;
    CLI::App* worker = app.add_subcommand("worker", "serve toy backends over the model worker protocol");
    worker->add_option("--profile", w.profile, "toy profile name or file");
    worker->add_option("--host", w.host, "bind address");
    worker->add_option("--port", w.port, "port (0 picks a free one)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitValidation;
    }

    try {
        if (*gen) {
            return run_generate(g, *gen);
        }
        if (*bench) {
            return run_benchmark_cmd(b);
        }
        if (*serve) {
            return run_serve(s);
        }
        if (*catalog) {
            return run_catalog(catalog_profile);
        }
        if (*worker) {
            return run_worker(w);
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << flag_for(e.field()) << ": " << e.what() << "\n";
        return kExitValidation;
    } catch (const BackendError& e) {
        std::cerr << "backend error: " << e.what() << "\n";
        return kExitBackend;
    } catch (const ConfigError& e) {
        std::cerr << "backend configuration error: " << e.what() << "\n";
        return kExitBackend;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailed;
    }
    return 0;
}
