// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "freeinsert/backend_config.hpp"
#include "freeinsert/manifest.hpp"
#include "freeinsert/metrics.hpp"
#include "freeinsert/pipeline.hpp"

namespace freeinsert {

struct BenchmarkOptions {
    std::filesystem::path runs_root = "runs";
    std::string run_id;  // empty: "run"
    std::vector<Variant> variants{Variant::ours};
    std::vector<Metric> metrics{kAllMetrics.begin(), kAllMetrics.end()};
    /// Called after each record is persisted; returning false stops the run
    /// (remaining pairs stay pending, as after an interruption).
    std::function<bool(const RunRecord&)> on_record;
};

struct VariantOutcome {
    std::filesystem::path run_dir;
    MetricsReport report;
    int computed = 0;
    int reused = 0;
    std::vector<std::string> failed;  // pair ids
    bool interrupted = false;
};

struct BenchmarkOutcome {
    std::map<Variant, VariantOutcome> variants;

    bool any_failed() const;
    /// Comparison table for a single variant, or the ablation table with one
    /// mean row per variant.
    std::string text_table() const;
};

/// Directory of one variant: runs_root/run_id for "ours", runs_root/run_id@variant otherwise.
std::filesystem::path variant_run_dir(const BenchmarkOptions& options, Variant variant);

/// Runs every pair of every variant into `run_dir/{pair-id}/` (image.png,
/// metadata.json, injection_log.json, record.json) and writes
/// `run_dir/report.json`. Pairs whose record.json carries the same request
/// hash and status "done" are reused, not recomputed. Per-pair failures are
/// recorded and skipped.
BenchmarkOutcome run_benchmark(const BenchmarkManifest& manifest, const BackendConfig& profile,
                               const BenchmarkOptions& options);

/// The request a pair runs under: manifest config defaults, then the pair.
CompositeRequest pair_request(const BenchmarkManifest& manifest, const PairEntry& pair, Variant variant);

}  // namespace freeinsert
