// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "freeinsert/compositing.hpp"

namespace freeinsert {

struct RenderEntry {
    std::string view_tag;
    std::filesystem::path rgba;
    std::filesystem::path depth;
};

struct ObjectEntry {
    std::string id;
    std::filesystem::path image;
    std::string tag;  // noun for the template prompt; defaults to id
    std::vector<RenderEntry> renders;

    const RenderEntry* find_view(const std::string& view_tag) const;
};

struct BackgroundEntry {
    std::string id;
    std::filesystem::path path;
    std::optional<Placement> placement;  // default spot for objects on this background
};

struct PairEntry {
    std::string id;
    std::string object;
    std::string view_tag;
    std::string background;
    std::optional<Placement> placement;
};

/// Objects with pre-rendered views, backgrounds and the pairs to run. Doubles
/// as the service's asset registry.
///
/// JSON: {"objects": [{id, image, tag?, renders: [{view_tag, rgba, depth}]}],
///        "backgrounds": [{id, path, placement?}],
///        "pairs": "cross" | [{object, background, view_tag?, placement?, id?}],
///        "placement"?: default, "config"?: request defaults object or path}
/// Relative paths resolve against the manifest's directory.
struct BenchmarkManifest {
    std::vector<ObjectEntry> objects;
    std::vector<BackgroundEntry> backgrounds;
    std::vector<PairEntry> pairs;
    std::optional<Placement> placement;
    nlohmann::json config = nlohmann::json::object();

    /// Parses and validates; ValidationError names the JSON path of the first
    /// problem (e.g. "objects[1].renders[0].depth").
    static BenchmarkManifest from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
    static BenchmarkManifest load(const std::filesystem::path& path);

    /// Unique ids, resolvable pair references and existing files.
    void validate() const;

    const ObjectEntry* find_object(const std::string& id) const;
    const BackgroundEntry* find_background(const std::string& id) const;

    nlohmann::json to_json() const;
};

/// Every render of every object against every background, objects outermost.
/// Ids are "{object}__{background}", or "{object}.{view}__{background}" when
/// the object has several views.
std::vector<PairEntry> cross_pairs(const std::vector<ObjectEntry>& objects,
                                   const std::vector<BackgroundEntry>& backgrounds);

/// Keeps the scaled render inside the canvas: scale is capped so the longer
/// side covers at most half of the shorter canvas side, then centered.
Placement auto_placement(int canvas_width, int canvas_height, int render_width, int render_height);

}  // namespace freeinsert
