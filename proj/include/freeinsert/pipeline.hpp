// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "freeinsert/backend_config.hpp"
#include "freeinsert/conditioning.hpp"
#include "freeinsert/metrics.hpp"
#include "freeinsert/request.hpp"

namespace freeinsert {

/// Everything one run produces. `metadata` is a deterministic function of the
/// inputs, the seed and the backend build.
struct RunArtifacts {
    Image image;
    std::vector<std::uint8_t> png;  // encoded image, hashed as the output hash
    std::string image_sha256;
    PromptSpec prompt;
    EngineOptions options;
    BinaryMask mask;           // dilated editing mask
    DepthMap reference_depth;  // rendered depth on a far canvas, normalized
    RegionSpec region;
    nlohmann::json injection_log = nlohmann::json::array();
    nlohmann::json metadata;
};

/// Final engine options for a request: profile defaults, then request knobs,
/// then the variant's ablation.
EngineOptions request_engine_options(const CompositeRequest& request, const EngineOptions& profile_defaults);

/// Prompt, embeddings and the run itself (paste only for Variant::paste).
/// BackendError surfaces unchanged; input problems raise ValidationError.
RunArtifacts execute_request(const ResolvedRequest& request, BackendSet& backends, Captioner& captioner);

/// Writes image.png, metadata.json and injection_log.json under `dir`; each
/// file appears atomically (temp file + rename).
void write_artifacts(const RunArtifacts& artifacts, const std::filesystem::path& dir);
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

MetricValues evaluate_run(const ResolvedRequest& request, const RunArtifacts& artifacts, const BackendSet& backends,
                          std::span<const Metric> requested);

/// Persisted outcome of one benchmark pair.
struct RunRecord {
    std::string pair_id;
    std::string request_hash;
    std::string status = "done";  // "done" | "failed"
    std::string error;
    nlohmann::json request;
    std::vector<std::string> outputs;  // file names relative to the record's directory
    std::vector<Metric> requested;
    MetricValues metrics;
    double wall_clock_s = 0.0;
    std::uint64_t seed = 0;
    std::string pipeline_version;
    std::string image_sha256;

    nlohmann::json to_json() const;
    static RunRecord from_json(const nlohmann::json& j);
};

/// Hash identifying a run: canonical request, backend build and metric set.
std::string request_hash(const CompositeRequest& request, const std::string& build_id,
                         std::span<const Metric> metrics);

/// Captioner for a profile's VLM settings (template-only when none).
std::unique_ptr<Captioner> make_captioner(const BackendConfig& cfg);

}  // namespace freeinsert
