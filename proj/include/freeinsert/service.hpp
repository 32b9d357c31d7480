// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "freeinsert/backend_config.hpp"
#include "freeinsert/manifest.hpp"
#include "freeinsert/pipeline.hpp"

namespace httplib {
class Server;
}

namespace freeinsert {

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    int workers = 1;
    BackendConfig profile;
    /// Asset registry (objects, views, backgrounds); optional.
    std::optional<BenchmarkManifest> assets;
    std::filesystem::path output_dir = "jobs";
    /// Accept file paths in requests (only for trusted local use).
    bool allow_paths = false;
};

enum class JobStatus { queued, running, done, failed };
std::string to_string(JobStatus s);

/// HTTP/JSON front end. Generation jobs run FIFO on `workers` threads, each
/// owning its own backend set; preview requests bypass the queue.
///
///   POST /jobs              CompositeRequest -> 202 {id, status}
///   GET  /jobs              all jobs, oldest first
///   GET  /jobs/{id}         {id, status, request, result?, error?}
///   GET  /jobs/{id}/image   PNG
///   GET  /assets            registered objects (with views) and backgrounds
///   GET  /assets/objects/{id}/image, /assets/backgrounds/{id}/image   PNG
///   GET  /renders/{object}  available views
///   GET  /renders/{object}/{view}/image   RGBA PNG
///   POST /preview           paste only: {coarse_png, mask_png, overlay_png, mask_bbox, placement}
///                           or a single PNG with ?layer=coarse|mask|overlay
///   GET  /knobs             advertised knob ranges
///   GET  /healthz           {status, profile, build_id, queue_depth, workers}
///
/// Errors: 400 {error, field}, 404 {error}, 503 while the backend is not ready.
class Service {
public:
    explicit Service(ServiceConfig config);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    /// Binds and starts the workers; returns the bound port. Backend
    /// readiness is established in the background.
    int start();
    /// Blocks serving HTTP until stop().
    void serve();
    void stop();
    void wait_until_ready();

    bool backend_ready() const;

private:
    struct Job {
        std::string id;
        JobStatus status = JobStatus::queued;
        CompositeRequest request;
        nlohmann::json request_echo;
        std::optional<ResolvedRequest> resolved;
        nlohmann::json result;
        std::string error;
        std::filesystem::path dir;
    };

    void worker_loop(int index);
    nlohmann::json job_json(const Job& job) const;
    void install_routes();

    ServiceConfig m_config;
    std::unique_ptr<httplib::Server> m_server;
    std::unique_ptr<Captioner> m_captioner;

    mutable std::mutex m_mutex;
    std::condition_variable m_cv;
    std::deque<std::string> m_queue;
    std::map<std::string, std::shared_ptr<Job>> m_jobs;
    std::vector<std::string> m_order;
    std::uint64_t m_next_id = 1;
    bool m_stopping = false;
    int m_ready_workers = 0;
    std::string m_backend_error;
    std::vector<std::thread> m_workers;
    int m_port = 0;
};

}  // namespace freeinsert
