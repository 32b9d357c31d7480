// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/remote.hpp"

#include <cmath>
#include <filesystem>
#include <regex>

#include <httplib.h>

#include "freeinsert/errors.hpp"
#include "freeinsert/log.hpp"

namespace freeinsert {

namespace {

using json = nlohmann::json;

constexpr const char* kCbor = "application/cbor";

std::pair<std::string, std::string> split_endpoint(const std::string& url) {
    static const std::regex re(R"(^(http://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, re)) {
        throw ConfigError("worker endpoint must look like http://host:port[/prefix], got \"" + url + "\"");
    }
    std::string prefix = m[2].matched ? m[2].str() : std::string();
    while (!prefix.empty() && prefix.back() == '/') {
        prefix.pop_back();
    }
    return {m[1].str(), prefix};
}

std::string error_text(const std::string& body) {
    try {
        const json j = json::from_cbor(body);
        if (j.contains("error")) {
            return j.at("error").get<std::string>();
        }
    } catch (const json::exception&) {
    }
    return body.substr(0, 200);
}

json step_to_json(const StepInfo& s) {
    return {{"index", s.index}, {"num_steps", s.num_steps}, {"alpha_bar", s.alpha_bar}, {"model_timestep", s.model_timestep}};
}

StepInfo step_from_json(const json& j) {
    StepInfo s;
    s.index = j.at("index").get<int>();
    s.num_steps = j.at("num_steps").get<int>();
    s.alpha_bar = j.at("alpha_bar").get<double>();
    s.model_timestep = j.at("model_timestep").get<int>();
    return s;
}

// Wraps a malformed worker reply into a BackendError.
template <typename F>
auto decode_reply(const std::string& what, F&& fn) {
    try {
        return fn();
    } catch (const json::exception& e) {
        throw BackendError("malformed worker reply to " + what + ": " + e.what());
    }
}

class RemoteDenoiser final : public DenoiserBackend {
public:
    RemoteDenoiser(std::shared_ptr<WorkerClient> client, std::string id, LayerCatalog catalog)
        : m_client(std::move(client)), m_id(std::move(id)), m_catalog(std::move(catalog)) {}

    std::string id() const override { return m_id; }
    const LayerCatalog& catalog() const override { return m_catalog; }

    Prediction predict(const LatentGrid& z, const StepInfo& step, const ConditioningSet& cond,
                       const FeatureBundle* overrides) override {
        cond.validate();
        const json reply = m_client->post("/v1/predict", {{"z", to_json(z)},
                                                          {"step", step_to_json(step)},
                                                          {"cond", to_json(cond)},
                                                          {"overrides", overrides ? to_json(*overrides) : json(nullptr)}});
        Prediction p = decode_reply("predict", [&] {
            return Prediction{latent_from_json(reply.at("eps")), feature_bundle_from_json(reply.at("captured"))};
        });
        if (p.eps.shape() != z.shape()) {
            throw BackendError("worker returned eps of a different shape than z");
        }
        m_catalog.check_bundle(p.captured);
        return p;
    }

private:
    std::shared_ptr<WorkerClient> m_client;
    std::string m_id;
    LayerCatalog m_catalog;
};

class RemoteVae final : public VaeBackend {
public:
    RemoteVae(std::shared_ptr<WorkerClient> client, const json& info) : m_client(std::move(client)) {
        decode_reply("info.vae", [&] {
            m_id = info.at("id").get<std::string>();
            m_scale = info.at("scale_factor").get<int>();
            m_channels = info.at("latent_channels").get<int>();
            m_bound = info.at("round_trip_bound").get<double>();
            return 0;
        });
    }
    std::string id() const override { return m_id; }
    LatentGrid encode(const Image& image) override {
        const json reply = m_client->post("/v1/encode", {{"image", to_json(image)}});
        return decode_reply("encode", [&] { return latent_from_json(reply.at("z")); });
    }
    Image decode(const LatentGrid& latent) override {
        const json reply = m_client->post("/v1/decode", {{"z", to_json(latent)}});
        return decode_reply("decode", [&] { return image_from_json(reply.at("image")); });
    }
    int scale_factor() const override { return m_scale; }
    int latent_channels() const override { return m_channels; }
    double round_trip_bound() const override { return m_bound; }

private:
    std::shared_ptr<WorkerClient> m_client;
    std::string m_id;
    int m_scale = 8;
    int m_channels = 4;
    double m_bound = 0.0;
};

class RemoteRefiner final : public Refiner {
public:
    RemoteRefiner(std::shared_ptr<WorkerClient> client, std::string id)
        : m_client(std::move(client)), m_id(std::move(id)) {}
    std::string id() const override { return m_id; }
    LatentGrid refine(const LatentGrid& z, int start_t, double remaining_fraction, const NoiseSchedule& schedule,
                      const ConditioningSet& cond) override {
        const json reply = m_client->post("/v1/refine", {{"z", to_json(z)},
                                                         {"start_t", start_t},
                                                         {"remaining_fraction", remaining_fraction},
                                                         {"schedule", schedule.to_json()},
                                                         {"cond", to_json(cond)}});
        return decode_reply("refine", [&] { return latent_from_json(reply.at("z")); });
    }

private:
    std::shared_ptr<WorkerClient> m_client;
    std::string m_id;
};

class RemoteDepth final : public DepthEstimator {
public:
    RemoteDepth(std::shared_ptr<WorkerClient> client, std::string id)
        : m_client(std::move(client)), m_id(std::move(id)) {}
    std::string id() const override { return m_id; }
    DepthMap estimate(const Image& image) override {
        const json reply = m_client->post("/v1/depth", {{"image", to_json(image)}});
        return decode_reply("depth", [&] { return depth_from_json(reply.at("depth")); });
    }

private:
    std::shared_ptr<WorkerClient> m_client;
    std::string m_id;
};

class RemoteEmbedder final : public ImageEmbedder {
public:
    RemoteEmbedder(std::shared_ptr<WorkerClient> client, std::string model)
        : m_client(std::move(client)), m_model(std::move(model)) {}
    std::string id() const override { return m_model; }
    std::vector<float> embed(const Image& image) override {
        const json reply = m_client->post("/v1/embed", {{"model", m_model}, {"image", to_json(image)}});
        return decode_reply("embed", [&] { return floats_from_json(reply.at("vector")); });
    }

private:
    std::shared_ptr<WorkerClient> m_client;
    std::string m_model;
};

class RemotePerceptual final : public PerceptualDistance {
public:
    RemotePerceptual(std::shared_ptr<WorkerClient> client, std::string id)
        : m_client(std::move(client)), m_id(std::move(id)) {}
    std::string id() const override { return m_id; }
    double distance(const Image& a, const Image& b) override {
        const json reply = m_client->post("/v1/lpips", {{"a", to_json(a)}, {"b", to_json(b)}});
        return decode_reply("lpips", [&] { return reply.at("distance").get<double>(); });
    }

private:
    std::shared_ptr<WorkerClient> m_client;
    std::string m_id;
};

}  // namespace

WorkerClient::WorkerClient(std::string endpoint, int timeout_s)
    : m_endpoint(std::move(endpoint)), m_timeout_s(timeout_s) {
    split_endpoint(m_endpoint);
}

json WorkerClient::get(const std::string& path) const {
    const auto [origin, prefix] = split_endpoint(m_endpoint);
    httplib::Client client(origin);
    client.set_connection_timeout(m_timeout_s);
    client.set_read_timeout(m_timeout_s);
    auto res = client.Get(prefix + path);
    if (!res) {
        throw BackendError("worker " + m_endpoint + path + " unreachable: " + httplib::to_string(res.error()));
    }
    if (res->status != 200) {
        throw BackendError("worker " + path + " returned " + std::to_string(res->status) + ": " + error_text(res->body));
    }
    return decode_reply(path, [&] { return json::from_cbor(res->body); });
}

json WorkerClient::post(const std::string& path, const json& body) const {
    const auto [origin, prefix] = split_endpoint(m_endpoint);
    httplib::Client client(origin);
    client.set_connection_timeout(m_timeout_s);
    client.set_read_timeout(m_timeout_s);
    client.set_write_timeout(m_timeout_s);
    const std::vector<std::uint8_t> bytes = json::to_cbor(body);
    auto res = client.Post(prefix + path, reinterpret_cast<const char*>(bytes.data()), bytes.size(), kCbor);
    if (!res) {
        throw BackendError("worker " + m_endpoint + path + " unreachable: " + httplib::to_string(res.error()));
    }
    if (res->status != 200) {
        throw BackendError("worker " + path + " returned " + std::to_string(res->status) + ": " + error_text(res->body));
    }
    return decode_reply(path, [&] { return json::from_cbor(res->body); });
}

std::unique_ptr<DenoiserBackend> make_remote_denoiser(std::shared_ptr<WorkerClient> client, std::string id,
                                                      LayerCatalog catalog) {
    return std::make_unique<RemoteDenoiser>(std::move(client), std::move(id), std::move(catalog));
}
std::unique_ptr<VaeBackend> make_remote_vae(std::shared_ptr<WorkerClient> client, const json& vae_info) {
    return std::make_unique<RemoteVae>(std::move(client), vae_info);
}
std::unique_ptr<Refiner> make_remote_refiner(std::shared_ptr<WorkerClient> client, std::string id) {
    return std::make_unique<RemoteRefiner>(std::move(client), std::move(id));
}
std::unique_ptr<DepthEstimator> make_remote_depth(std::shared_ptr<WorkerClient> client, std::string id) {
    return std::make_unique<RemoteDepth>(std::move(client), std::move(id));
}
std::unique_ptr<ImageEmbedder> make_remote_embedder(std::shared_ptr<WorkerClient> client, std::string model) {
    return std::make_unique<RemoteEmbedder>(std::move(client), std::move(model));
}
std::unique_ptr<PerceptualDistance> make_remote_perceptual(std::shared_ptr<WorkerClient> client, std::string id) {
    return std::make_unique<RemotePerceptual>(std::move(client), std::move(id));
}

BackendSet real_backend_from_config(const BackendConfig& cfg) {
    if (cfg.kind != "remote") {
        throw ConfigError("profile \"" + cfg.name + "\" is not a remote backend");
    }
    std::vector<std::string> roles = {"denoiser", "depth_control", "ip_adapter"};
    if (cfg.refiner_enabled) {
        roles.push_back("refiner");
    }
    for (const auto& [role, path] : cfg.assets) {
        if (std::find(roles.begin(), roles.end(), role) == roles.end()) {
            roles.push_back(role);
        }
    }
    std::string unresolved;
    for (const auto& role : roles) {
        const auto it = cfg.assets.find(role);
        if (it == cfg.assets.end()) {
            unresolved += "\n  " + role + ": (no path configured)";
        } else if (!std::filesystem::exists(it->second)) {
            unresolved += "\n  " + role + ": " + it->second;
        }
    }
    if (!unresolved.empty()) {
        throw ConfigError("unresolved model assets for profile \"" + cfg.name + "\":" + unresolved);
    }

    auto client = std::make_shared<WorkerClient>(cfg.endpoint, cfg.timeout_s);
    const json info = client->get("/v1/info");
    if (info.value("protocol", 0) != kWorkerProtocol) {
        throw ConfigError("worker at " + cfg.endpoint + " speaks protocol " + info.value("protocol", json(0)).dump() +
                          ", expected " + std::to_string(kWorkerProtocol));
    }
    const LayerCatalog catalog = decode_reply("info.catalog", [&] {
        return LayerCatalog::from_json(info.at("catalog")).with_overrides(cfg.catalog_overrides);
    });
    // Layer closure is checked before the worker spends time loading weights.
    EngineOptions engine = resolve_engine_options(cfg, catalog);
    if (cfg.refiner_enabled && (!info.contains("refiner") || info.at("refiner").is_null())) {
        throw ConfigError("refiner.enabled is set but the worker at " + cfg.endpoint + " offers no refiner");
    }
    client->post("/v1/load", {{"assets", cfg.assets},
                              {"device", cfg.device},
                              {"catalog_overrides", LayerCatalog(cfg.catalog_overrides).to_json()},
                              {"refiner", cfg.refiner_enabled}});

    BackendSet set;
    set.profile_name = cfg.name;
    set.build_id = backend_build_id(cfg);
    decode_reply("info", [&] {
        set.denoiser = make_remote_denoiser(client, info.at("denoiser").get<std::string>(), catalog);
        set.vae = make_remote_vae(client, info.at("vae"));
        if (cfg.refiner_enabled) {
            set.refiner = make_remote_refiner(client, info.at("refiner").get<std::string>());
        }
        set.depth = make_remote_depth(client, info.at("depth").get<std::string>());
        set.lpips = make_remote_perceptual(client, info.at("lpips").get<std::string>());
        return 0;
    });
    set.ip = make_remote_embedder(client, cfg.ip_extractor);
    set.clip = make_remote_embedder(client, cfg.clip_extractor);
    set.dino = make_remote_embedder(client, cfg.dino_extractor);
    if (cfg.schedule) {
        set.schedule = *cfg.schedule;
    } else if (info.contains("schedule") && !info.at("schedule").is_null()) {
        set.schedule = NoiseSchedule::from_json(info.at("schedule"));
    }
    set.engine = std::move(engine);
    return set;
}

// ---------------------------------------------------------------------------

ModelWorker::ModelWorker(const BackendConfig& toy_config) : m_server(std::make_unique<httplib::Server>()) {
    if (toy_config.kind != "toy") {
        throw ConfigError("the model worker serves toy profiles only");
    }
    BackendConfig cfg = toy_config;
    cfg.refiner_enabled = true;  // offered; clients opt in
    m_set = make_backend_set(cfg);

    auto reply = [](httplib::Response& res, const json& body, int status = 200) {
        const std::vector<std::uint8_t> bytes = json::to_cbor(body);
        res.status = status;
        res.set_content(std::string(bytes.begin(), bytes.end()), kCbor);
    };
    // Runs `fn` on the decoded body under the worker lock.
    auto handle = [this, reply](auto fn) {
        return [this, reply, fn](const httplib::Request& req, httplib::Response& res) {
            json body;
            try {
                body = json::from_cbor(req.body);
            } catch (const json::exception& e) {
                reply(res, {{"error", std::string("request body is not CBOR: ") + e.what()}}, 400);
                return;
            }
            try {
                std::lock_guard lock(m_mutex);
                reply(res, fn(body));
            } catch (const json::exception& e) {
                reply(res, {{"error", std::string("malformed request: ") + e.what()}}, 400);
            } catch (const std::exception& e) {
                reply(res, {{"error", e.what()}}, 500);
            }
        };
    };

    m_server->Get("/v1/info", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, info()); });
    m_server->Post("/v1/load", handle([this](const json& body) {
                       ++m_load_calls;
                       log_info("worker: load requested for device " + body.value("device", std::string("?")));
                       return json{{"ok", true}};
                   }));
    m_server->Post("/v1/predict", handle([this](const json& body) {
                       ++m_predict_calls;
                       const LatentGrid z = latent_from_json(body.at("z"));
                       const StepInfo step = step_from_json(body.at("step"));
                       const ConditioningSet cond = conditioning_from_json(body.at("cond"));
                       std::optional<FeatureBundle> overrides;
                       if (!body.at("overrides").is_null()) {
                           overrides = feature_bundle_from_json(body.at("overrides"));
                       }
                       const Prediction p = m_set.denoiser->predict(z, step, cond, overrides ? &*overrides : nullptr);
                       return json{{"eps", to_json(p.eps)}, {"captured", to_json(p.captured)}};
                   }));
    m_server->Post("/v1/encode", handle([this](const json& body) {
                       return json{{"z", to_json(m_set.vae->encode(image_from_json(body.at("image"))))}};
                   }));
    m_server->Post("/v1/decode", handle([this](const json& body) {
                       return json{{"image", to_json(m_set.vae->decode(latent_from_json(body.at("z"))))}};
                   }));
    m_server->Post("/v1/refine", handle([this](const json& body) {
                       const LatentGrid z = m_set.refiner->refine(
                           latent_from_json(body.at("z")), body.at("start_t").get<int>(),
                           body.at("remaining_fraction").get<double>(), NoiseSchedule::from_json(body.at("schedule")),
                           conditioning_from_json(body.at("cond")));
                       return json{{"z", to_json(z)}};
                   }));
    m_server->Post("/v1/depth", handle([this](const json& body) {
                       return json{{"depth", to_json(m_set.depth->estimate(image_from_json(body.at("image"))))}};
                   }));
    m_server->Post("/v1/embed", handle([this](const json& body) {
                       const std::string model = body.at("model").get<std::string>();
                       ImageEmbedder* e = nullptr;
                       for (ImageEmbedder* candidate : {m_set.ip.get(), m_set.clip.get(), m_set.dino.get()}) {
                           if (candidate->id() == model) {
                               e = candidate;
                           }
                       }
                       if (e == nullptr) {
                           throw BackendError("worker has no embedder \"" + model + "\"");
                       }
                       return json{{"vector", floats_to_json(e->embed(image_from_json(body.at("image"))))}};
                   }));
    m_server->Post("/v1/lpips", handle([this](const json& body) {
                       return json{{"distance", m_set.lpips->distance(image_from_json(body.at("a")),
                                                                      image_from_json(body.at("b")))}};
                   }));
}

ModelWorker::~ModelWorker() {
    stop();
}

json ModelWorker::info() const {
    return {{"protocol", kWorkerProtocol},
            {"catalog", m_set.denoiser->catalog().to_json()},
            {"denoiser", m_set.denoiser->id()},
            {"vae",
             {{"id", m_set.vae->id()},
              {"scale_factor", m_set.vae->scale_factor()},
              {"latent_channels", m_set.vae->latent_channels()},
              {"round_trip_bound", m_set.vae->round_trip_bound()}}},
            {"refiner", m_set.refiner ? json(m_set.refiner->id()) : json(nullptr)},
            {"depth", m_set.depth->id()},
            {"embedders", {m_set.ip->id(), m_set.clip->id(), m_set.dino->id()}},
            {"lpips", m_set.lpips->id()},
            {"schedule", m_set.schedule.to_json()}};
}

int ModelWorker::bind(const std::string& host, int port) {
    if (port == 0) {
        return m_server->bind_to_any_port(host);
    }
    if (!m_server->bind_to_port(host, port)) {
        throw ConfigError("worker cannot bind " + host + ":" + std::to_string(port));
    }
    return port;
}

void ModelWorker::listen() {
    m_server->listen_after_bind();
}

void ModelWorker::stop() {
    if (m_server) {
        m_server->stop();
    }
}

void ModelWorker::wait_until_ready() {
    m_server->wait_until_ready();
}

}  // namespace freeinsert
