// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <memory>
#include <mutex>
#include <string>

#include <nlohmann/json.hpp>

#include "freeinsert/backend.hpp"
#include "freeinsert/backend_config.hpp"

namespace httplib {
class Server;
}

namespace freeinsert {

/// Model worker wire protocol: every request and response body is CBOR
/// (application/cbor), float arrays travel as binary float32.
///
///   GET  /v1/info     -> {protocol, catalog, denoiser, vae{...}, refiner, depth, embedders, lpips, schedule}
///   POST /v1/load     {assets, device, catalog_overrides, refiner} -> {ok}
///   POST /v1/predict  {z, step, cond, overrides} -> {eps, captured}
///   POST /v1/encode   {image} -> {z}        POST /v1/decode {z} -> {image}
///   POST /v1/refine   {z, start_t, remaining_fraction, schedule, cond} -> {z}
///   POST /v1/depth    {image} -> {depth}
///   POST /v1/embed    {model, image} -> {vector}
///   POST /v1/lpips    {a, b} -> {distance}
///
/// Errors are non-200 responses with body {error}.
inline constexpr int kWorkerProtocol = 1;

/// Stateless HTTP client for one worker. Safe to share between threads.
class WorkerClient {
public:
    WorkerClient(std::string endpoint, int timeout_s);

    const std::string& endpoint() const noexcept { return m_endpoint; }
    /// BackendError on transport failure or a non-200 status.
    nlohmann::json get(const std::string& path) const;
    nlohmann::json post(const std::string& path, const nlohmann::json& body) const;

private:
    std::string m_endpoint;
    int m_timeout_s;
};

std::unique_ptr<DenoiserBackend> make_remote_denoiser(std::shared_ptr<WorkerClient> client, std::string id,
                                                      LayerCatalog catalog);
std::unique_ptr<VaeBackend> make_remote_vae(std::shared_ptr<WorkerClient> client, const nlohmann::json& vae_info);
std::unique_ptr<Refiner> make_remote_refiner(std::shared_ptr<WorkerClient> client, std::string id);
std::unique_ptr<DepthEstimator> make_remote_depth(std::shared_ptr<WorkerClient> client, std::string id);
std::unique_ptr<ImageEmbedder> make_remote_embedder(std::shared_ptr<WorkerClient> client, std::string model);
std::unique_ptr<PerceptualDistance> make_remote_perceptual(std::shared_ptr<WorkerClient> client, std::string id);

/// Serves a toy backend set over the worker protocol. Requests are handled
/// one at a time.
class ModelWorker {
public:
    explicit ModelWorker(const BackendConfig& toy_config);
    ~ModelWorker();
    ModelWorker(const ModelWorker&) = delete;
    ModelWorker& operator=(const ModelWorker&) = delete;

    /// Binds to `port` (0 picks a free one) and returns the bound port.
    int bind(const std::string& host, int port);
    /// Blocks until stop().
    void listen();
    void stop();
    void wait_until_ready();

    int load_calls() const noexcept { return m_load_calls.load(); }
    int predict_calls() const noexcept { return m_predict_calls.load(); }

private:
    nlohmann::json info() const;

    BackendSet m_set;
    std::mutex m_mutex;
    std::unique_ptr<httplib::Server> m_server;
    std::atomic<int> m_load_calls{0};
    std::atomic<int> m_predict_calls{0};
};

}  // namespace freeinsert
