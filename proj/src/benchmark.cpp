// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/benchmark.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "freeinsert/errors.hpp"
#include "freeinsert/log.hpp"

namespace freeinsert {

namespace {

using json = nlohmann::json;

std::optional<RunRecord> read_record(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        return std::nullopt;
    }
    try {
        return RunRecord::from_json(json::parse(in));
    } catch (const std::exception& e) {
        log_warning("ignoring unreadable record " + path.string() + ": " + e.what());
        return std::nullopt;
    }
}

}  // namespace

bool BenchmarkOutcome::any_failed() const {
    for (const auto& [v, o] : variants) {
        if (!o.failed.empty()) {
            return true;
        }
    }
    return false;
}

std::string BenchmarkOutcome::text_table() const {
    if (variants.size() == 1) {
        return variants.begin()->second.report.text_table(kComparisonColumns);
    }
    std::ostringstream os;
    os << "variant         ";
    for (Metric m : kAblationColumns) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%13s", to_string(m).c_str());
        os << buf;
    }
    os << '\n';
    for (const auto& [v, o] : variants) {
        const std::string name = to_string(v);
        os << name << std::string(name.size() < 16 ? 16 - name.size() : 1, ' ');
        const MetricValues mean = o.report.aggregate();
        for (Metric m : kAblationColumns) {
            char buf[32];
            if (mean[m]) {
                std::snprintf(buf, sizeof(buf), "%13.3f", *mean[m]);
            } else {
                std::snprintf(buf, sizeof(buf), "%13s", "n/a");
            }
            os << buf;
        }
        os << '\n';
    }
    return os.str();
}

std::filesystem::path variant_run_dir(const BenchmarkOptions& options, Variant variant) {
    const std::string id = options.run_id.empty() ? "run" : options.run_id;
    return options.runs_root / (variant == Variant::ours ? id : id + "@" + to_string(variant));
}

CompositeRequest pair_request(const BenchmarkManifest& manifest, const PairEntry& pair, Variant variant) {
    json defaults = manifest.config;
    if (defaults.is_object()) {
        defaults.erase("variants");
    }
    json j = {{"object", pair.object},
              {"background", pair.background},
              {"view_tag", pair.view_tag},
              {"variant", to_string(variant)}};
    if (pair.placement) {
        j["placement"] = to_json(*pair.placement);
    }
    return CompositeRequest::from_json(merge_request_defaults(defaults, j));
}

BenchmarkOutcome run_benchmark(const BenchmarkManifest& manifest, const BackendConfig& profile,
                               const BenchmarkOptions& options) {
    manifest.validate();
    BackendSet backends = make_backend_set(profile);
    const std::unique_ptr<Captioner> captioner = make_captioner(profile);
    BenchmarkOutcome outcome;
    bool stop = false;

    for (Variant variant : options.variants) {
        VariantOutcome& vo = outcome.variants[variant];
        vo.run_dir = variant_run_dir(options, variant);
        vo.report.requested = options.metrics;
        std::filesystem::create_directories(vo.run_dir);

        for (const PairEntry& pair : manifest.pairs) {
            if (stop) {
                vo.interrupted = true;
                break;
            }
            const std::filesystem::path dir = vo.run_dir / pair.id;
            RunRecord record;
            record.pair_id = pair.id;
            record.requested = options.metrics;
            record.pipeline_version = backends.build_id;
            try {
                const CompositeRequest request = pair_request(manifest, pair, variant);
                record.request = request.to_json();
                record.seed = request.seed;
                record.request_hash = request_hash(request, backends.build_id, options.metrics);
                if (auto prior = read_record(dir / "record.json");
                    prior && prior->status == "done" && prior->request_hash == record.request_hash) {
                    ++vo.reused;
                    vo.report.per_image.push_back({pair.id, prior->metrics});
                    continue;
                }
                const auto start = std::chrono::steady_clock::now();
                const ResolvedRequest resolved = resolve_request(request, &manifest, false);
                const RunArtifacts artifacts = execute_request(resolved, backends, *captioner);
                write_artifacts(artifacts, dir);
                record.metrics = evaluate_run(resolved, artifacts, backends, options.metrics);
                record.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
                record.image_sha256 = artifacts.image_sha256;
                record.outputs = {"image.png", "metadata.json", "injection_log.json"};
                ++vo.computed;
                vo.report.per_image.push_back({pair.id, record.metrics});
            } catch (const std::exception& e) {
                record.status = "failed";
                record.error = e.what();
                vo.failed.push_back(pair.id);
                log_error("pair " + pair.id + " (" + to_string(variant) + ") failed: " + e.what());
            }
            // The record is written last: its presence marks a finished pair.
            write_file_atomic(dir / "record.json", record.to_json().dump(2) + "\n");
            if (options.on_record && !options.on_record(record)) {
                stop = true;
            }
        }
        if (stop && vo.report.per_image.size() + vo.failed.size() < manifest.pairs.size()) {
            vo.interrupted = true;
        }
        if (!vo.interrupted) {
            const json report = {{"run_id", vo.run_dir.filename().string()},
                                 {"variant", to_string(variant)},
                                 {"profile", backends.profile_name},
                                 {"pipeline_version", backends.build_id},
                                 {"pairs", manifest.pairs.size()},
                                 {"failed", vo.failed},
                                 {"report", vo.report.to_json()}};
            write_file_atomic(vo.run_dir / "report.json", report.dump(2) + "\n");
        }
        if (stop) {
            break;
        }
    }
    return outcome;
}

}  // namespace freeinsert
