// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/service.hpp"

#include <chrono>
#include <cstdio>

#include <httplib.h>

#include "freeinsert/errors.hpp"
#include "freeinsert/hashing.hpp"
#include "freeinsert/log.hpp"

namespace freeinsert {

namespace {

using json = nlohmann::json;

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message, const std::string& field = {}) {
    json body = {{"error", message}};
    if (!field.empty()) {
        body["field"] = field;
    }
    send_json(res, status, body);
}

void send_png(httplib::Response& res, const std::vector<std::uint8_t>& png) {
    res.status = 200;
    res.set_content(std::string(png.begin(), png.end()), "image/png");
}

Image mask_image(const BinaryMask& mask) {
    Image img(mask.width(), mask.height(), 3);
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            const float v = mask.at(x, y) ? 1.0f : 0.0f;
            for (int c = 0; c < 3; ++c) {
                img.at(x, y, c) = v;
            }
        }
    }
    return img;
}

// Coarse image with the mask boundary drawn in red.
Image overlay_image(const Image& coarse, const BinaryMask& mask) {
    Image out = coarse;
    const BinaryMask inner = erode(mask, 1);
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            if (mask.at(x, y) && !inner.at(x, y)) {
                out.at(x, y, 0) = 1.0f;
                out.at(x, y, 1) = 0.0f;
                out.at(x, y, 2) = 0.0f;
            }
        }
    }
    return out;
}

json rect_json(const Rect& r) {
    return {{"x", r.x}, {"y", r.y}, {"width", r.width}, {"height", r.height}};
}

std::string b64_png(const Image& img) {
    const auto png = encode_png(img);
    return base64_encode(png);
}

}  // namespace

std::string to_string(JobStatus s) {
    switch (s) {
    case JobStatus::queued:
        return "queued";
    case JobStatus::running:
        return "running";
    case JobStatus::done:
        return "done";
    case JobStatus::failed:
        return "failed";
    }
    return "unknown";
}

Service::Service(ServiceConfig config)
    : m_config(std::move(config)), m_server(std::make_unique<httplib::Server>()) {
    if (m_config.workers < 1) {
        throw ValidationError("workers", "workers must be >= 1");
    }
    m_captioner = make_captioner(m_config.profile);
    install_routes();
}

Service::~Service() {
    stop();
}

bool Service::backend_ready() const {
    std::lock_guard lock(m_mutex);
    return m_ready_workers > 0;
}

int Service::start() {
    if (m_config.port == 0) {
        m_port = m_server->bind_to_any_port(m_config.host);
    } else if (m_server->bind_to_port(m_config.host, m_config.port)) {
        m_port = m_config.port;
    } else {
        throw ConfigError("cannot bind " + m_config.host + ":" + std::to_string(m_config.port));
    }
    for (int i = 0; i < m_config.workers; ++i) {
        m_workers.emplace_back([this, i] { worker_loop(i); });
    }
    return m_port;
}

void Service::serve() {
    m_server->listen_after_bind();
}

void Service::wait_until_ready() {
    m_server->wait_until_ready();
}

void Service::stop() {
    {
        std::lock_guard lock(m_mutex);
        if (m_stopping) {
            return;
        }
        m_stopping = true;
    }
    m_cv.notify_all();
    m_server->stop();
    for (auto& t : m_workers) {
        t.join();
    }
    m_workers.clear();
}

void Service::worker_loop(int index) {
    std::optional<BackendSet> backends;
    try {
        backends.emplace(make_backend_set(m_config.profile));
        std::lock_guard lock(m_mutex);
        ++m_ready_workers;
    } catch (const std::exception& e) {
        log_error("service worker " + std::to_string(index) + ": backend unavailable: " + e.what());
        std::lock_guard lock(m_mutex);
        m_backend_error = e.what();
        return;
    }
    m_cv.notify_all();
    while (true) {
        std::shared_ptr<Job> job;
        {
            std::unique_lock lock(m_mutex);
            m_cv.wait(lock, [&] { return m_stopping || !m_queue.empty(); });
            if (m_stopping) {
                return;
            }
            job = m_jobs.at(m_queue.front());
            m_queue.pop_front();
            job->status = JobStatus::running;
        }
        json result;
        std::string error;
        try {
            const auto start = std::chrono::steady_clock::now();
            const RunArtifacts artifacts = execute_request(*job->resolved, *backends, *m_captioner);
            write_artifacts(artifacts, job->dir);
            result = {{"image_url", "/jobs/" + job->id + "/image"},
                      {"paths",
                       {{"image", (job->dir / "image.png").string()},
                        {"metadata", (job->dir / "metadata.json").string()},
                        {"injection_log", (job->dir / "injection_log.json").string()}}},
                      {"image_sha256", artifacts.image_sha256},
                      {"prompt", artifacts.metadata.at("prompt")},
                      {"metadata", artifacts.metadata},
                      {"wall_clock_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}};
        } catch (const std::exception& e) {
            error = e.what();
            log_error("job " + job->id + " failed: " + error);
        }
        std::lock_guard lock(m_mutex);
        job->resolved.reset();
        job->result = std::move(result);
        job->error = std::move(error);
        job->status = job->error.empty() ? JobStatus::done : JobStatus::failed;
    }
}

json Service::job_json(const Job& job) const {
    json j = {{"id", job.id}, {"status", to_string(job.status)}, {"request", job.request_echo}};
    if (job.status == JobStatus::done) {
        j["result"] = job.result;
    }
    if (job.status == JobStatus::failed) {
        j["error"] = job.error;
    }
    return j;
}

void Service::install_routes() {
    httplib::Server& s = *m_server;
    const BenchmarkManifest* registry = m_config.assets ? &*m_config.assets : nullptr;

    s.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    s.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.status = 204;
    });

    s.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
        std::lock_guard lock(m_mutex);
        json body = {{"profile", m_config.profile.name},
                     {"build_id", backend_build_id(m_config.profile)},
                     {"queue_depth", m_queue.size()},
                     {"workers", m_config.workers},
                     {"ready_workers", m_ready_workers}};
        if (m_ready_workers > 0) {
            body["status"] = "ok";
            send_json(res, 200, body);
        } else {
            body["status"] = m_backend_error.empty() ? "starting" : "error";
            if (!m_backend_error.empty()) {
                body["error"] = m_backend_error;
            }
            send_json(res, 503, body);
        }
    });

    s.Get("/knobs", [](const httplib::Request&, httplib::Response& res) { send_json(res, 200, knob_ranges()); });

    s.Get("/assets", [registry](const httplib::Request&, httplib::Response& res) {
        json objects = json::array();
        json backgrounds = json::array();
        if (registry != nullptr) {
            for (const auto& o : registry->objects) {
                json views = json::array();
                for (const auto& r : o.renders) {
                    views.push_back(r.view_tag);
                }
                objects.push_back({{"id", o.id},
                                   {"tag", o.tag},
                                   {"views", views},
                                   {"image_url", "/assets/objects/" + o.id + "/image"}});
            }
            for (const auto& b : registry->backgrounds) {
                const Image img = load_image(b.path);
                backgrounds.push_back({{"id", b.id},
                                       {"width", img.width()},
                                       {"height", img.height()},
                                       {"placement", b.placement ? to_json(*b.placement) : json(nullptr)},
                                       {"image_url", "/assets/backgrounds/" + b.id + "/image"}});
            }
        }
        send_json(res, 200, {{"objects", objects}, {"backgrounds", backgrounds}});
    });

    s.Get(R"(/assets/objects/([^/]+)/image)", [registry](const httplib::Request& req, httplib::Response& res) {
        const ObjectEntry* o = registry != nullptr ? registry->find_object(req.matches[1]) : nullptr;
        if (o == nullptr) {
            send_error(res, 404, "unknown object \"" + std::string(req.matches[1]) + "\"");
            return;
        }
        send_png(res, encode_png(load_image(o->image)));
    });

    s.Get(R"(/assets/backgrounds/([^/]+)/image)", [registry](const httplib::Request& req, httplib::Response& res) {
        const BackgroundEntry* b = registry != nullptr ? registry->find_background(req.matches[1]) : nullptr;
        if (b == nullptr) {
            send_error(res, 404, "unknown background \"" + std::string(req.matches[1]) + "\"");
            return;
        }
        send_png(res, encode_png(load_image(b->path)));
    });

    s.Get(R"(/renders/([^/]+))", [registry](const httplib::Request& req, httplib::Response& res) {
        const ObjectEntry* o = registry != nullptr ? registry->find_object(req.matches[1]) : nullptr;
        if (o == nullptr) {
            send_error(res, 404, "unknown object \"" + std::string(req.matches[1]) + "\"");
            return;
        }
        json views = json::array();
        for (const auto& r : o->renders) {
            const Image img = load_image(r.rgba, true);
            views.push_back({{"view_tag", r.view_tag},
                             {"width", img.width()},
                             {"height", img.height()},
                             {"image_url", "/renders/" + o->id + "/" + r.view_tag + "/image"}});
        }
        send_json(res, 200, {{"object", o->id}, {"views", views}});
    });

    s.Get(R"(/renders/([^/]+)/([^/]+)/image)", [registry](const httplib::Request& req, httplib::Response& res) {
        const ObjectEntry* o = registry != nullptr ? registry->find_object(req.matches[1]) : nullptr;
        const RenderEntry* r = o != nullptr ? o->find_view(req.matches[2]) : nullptr;
        if (r == nullptr) {
            send_error(res, 404, "unknown render " + std::string(req.matches[1]) + "/" + std::string(req.matches[2]));
            return;
        }
        send_png(res, encode_png(load_image(r->rgba, true)));
    });

    s.Post("/preview", [this, registry](const httplib::Request& req, httplib::Response& res) {
        try {
            const CompositeRequest request = CompositeRequest::from_json(json::parse(req.body));
            const ResolvedRequest rr = resolve_request(request, registry, m_config.allow_paths);
            PasteOptions po;
            if (request.knobs.contains("mask_dilation")) {
                po.dilation_radius = request.knobs.at("mask_dilation").get<int>();
            }
            if (m_config.profile.kind == "toy") {
                po.scale_factor = m_config.profile.toy_vae_scale;
            }
            const PasteResult pasted = paste(rr.render, rr.background, rr.placement, po);
            const std::string layer = req.has_param("layer") ? req.get_param_value("layer") : "";
            if (layer == "coarse") {
                send_png(res, encode_png(pasted.coarse));
            } else if (layer == "mask") {
                send_png(res, encode_png(mask_image(pasted.mask.pixel)));
            } else if (layer == "overlay") {
                send_png(res, encode_png(overlay_image(pasted.coarse, pasted.mask.pixel)));
            } else if (layer.empty()) {
                send_json(res, 200,
                          {{"coarse_png", b64_png(pasted.coarse)},
                           {"mask_png", b64_png(mask_image(pasted.mask.pixel))},
                           {"overlay_png", b64_png(overlay_image(pasted.coarse, pasted.mask.pixel))},
                           {"mask_bbox", rect_json(pasted.mask.pixel.bbox())},
                           {"footprint_bbox", rect_json(pasted.footprint.bbox())},
                           {"placement", to_json(rr.placement)},
                           {"width", pasted.coarse.width()},
                           {"height", pasted.coarse.height()}});
            } else {
                send_error(res, 400, "layer must be coarse, mask or overlay", "layer");
            }
        } catch (const PlacementError& e) {
            send_json(res, 400, {{"error", e.what()}, {"field", e.field()}, {"suggestion", to_json(e.suggestion())}});
        } catch (const ValidationError& e) {
            send_error(res, 400, e.what(), e.field());
        } catch (const json::exception& e) {
            send_error(res, 400, std::string("body is not valid JSON: ") + e.what(), "body");
        }
    });

    s.Post("/jobs", [this, registry](const httplib::Request& req, httplib::Response& res) {
        if (!backend_ready()) {
            std::lock_guard lock(m_mutex);
            send_error(res, 503, m_backend_error.empty() ? "backend is starting" : "backend unavailable: " + m_backend_error);
            return;
        }
        auto job = std::make_shared<Job>();
        try {
            const json body = json::parse(req.body);
            job->request = CompositeRequest::from_json(body);
            if (!job->request.backend_profile.empty() && job->request.backend_profile != m_config.profile.name) {
                throw ValidationError("backend_profile", "this service runs profile \"" + m_config.profile.name +
                                                             "\", not \"" + job->request.backend_profile + "\"");
            }
            engine_options_from_json(job->request.knobs);
            job->resolved = resolve_request(job->request, registry, m_config.allow_paths);
            job->request_echo = body;
        } catch (const PlacementError& e) {
            send_json(res, 400, {{"error", e.what()}, {"field", e.field()}, {"suggestion", to_json(e.suggestion())}});
            return;
        } catch (const ValidationError& e) {
            send_error(res, 400, e.what(), e.field());
            return;
        } catch (const json::exception& e) {
            send_error(res, 400, std::string("body is not valid JSON: ") + e.what(), "body");
            return;
        }
        {
            std::lock_guard lock(m_mutex);
            char id[32];
            std::snprintf(id, sizeof(id), "job-%06llu", static_cast<unsigned long long>(m_next_id++));
            job->id = id;
            job->dir = m_config.output_dir / job->id;
            m_jobs[job->id] = job;
            m_order.push_back(job->id);
            m_queue.push_back(job->id);
        }
        m_cv.notify_one();
        send_json(res, 202, {{"id", job->id}, {"status", "queued"}});
    });

    s.Get("/jobs", [this](const httplib::Request&, httplib::Response& res) {
        std::lock_guard lock(m_mutex);
        json jobs = json::array();
        for (const auto& id : m_order) {
            const Job& job = *m_jobs.at(id);
            jobs.push_back({{"id", job.id}, {"status", to_string(job.status)}});
        }
        send_json(res, 200, {{"jobs", jobs}});
    });

    s.Get(R"(/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
        std::lock_guard lock(m_mutex);
        const auto it = m_jobs.find(req.matches[1]);
        if (it == m_jobs.end()) {
            send_error(res, 404, "unknown job \"" + std::string(req.matches[1]) + "\"");
            return;
        }
        send_json(res, 200, job_json(*it->second));
    });

    s.Get(R"(/jobs/([^/]+)/image)", [this](const httplib::Request& req, httplib::Response& res) {
        std::filesystem::path path;
        {
            std::lock_guard lock(m_mutex);
            const auto it = m_jobs.find(req.matches[1]);
            if (it == m_jobs.end()) {
                send_error(res, 404, "unknown job \"" + std::string(req.matches[1]) + "\"");
                return;
            }
            if (it->second->status != JobStatus::done) {
                send_error(res, 404, "job " + it->second->id + " has no image (status " +
                                         to_string(it->second->status) + ")");
                return;
            }
            path = it->second->dir / "image.png";
        }
        const Image img = load_image(path);
        send_png(res, encode_png(img));
    });

    s.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            send_error(res, 500, e.what());
        } catch (...) {
            send_error(res, 500, "internal error");
        }
    });
}

}  // namespace freeinsert
