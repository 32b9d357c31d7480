// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/manifest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "freeinsert/errors.hpp"

namespace freeinsert {

namespace {

using json = nlohmann::json;

std::string string_at(const json& j, const char* key, const std::string& where, bool required = true) {
    const std::string field = where + "." + key;
    if (!j.contains(key)) {
        if (required) {
            throw ValidationError(field, field + " is required");
        }
        return {};
    }
    if (!j.at(key).is_string() || j.at(key).get<std::string>().empty()) {
        throw ValidationError(field, field + " must be a non-empty string");
    }
    return j.at(key).get<std::string>();
}

std::filesystem::path path_at(const json& j, const char* key, const std::string& where,
                              const std::filesystem::path& base_dir) {
    const std::filesystem::path p(string_at(j, key, where));
    return p.is_absolute() || base_dir.empty() ? p : (base_dir / p).lexically_normal();
}

std::optional<Placement> placement_at(const json& j, const std::string& where) {
    if (!j.contains("placement") || j.at("placement").is_null()) {
        return std::nullopt;
    }
    try {
        return placement_from_json(j.at("placement"));
    } catch (const ValidationError& e) {
        throw ValidationError(where + ".placement", e.what());
    }
}

void require_file(const std::filesystem::path& p, const std::string& field) {
    if (!std::filesystem::is_regular_file(p)) {
        throw ValidationError(field, field + " references a missing file: " + p.string());
    }
}

json placement_json(const std::optional<Placement>& p) {
    return p ? to_json(*p) : json(nullptr);
}

}  // namespace

const RenderEntry* ObjectEntry::find_view(const std::string& view_tag) const {
    for (const auto& r : renders) {
        if (r.view_tag == view_tag) {
            return &r;
        }
    }
    return nullptr;
}

std::vector<PairEntry> cross_pairs(const std::vector<ObjectEntry>& objects,
                                   const std::vector<BackgroundEntry>& backgrounds) {
    std::vector<PairEntry> pairs;
    for (const auto& o : objects) {
        for (const auto& r : o.renders) {
            for (const auto& b : backgrounds) {
                const std::string stem = o.renders.size() > 1 ? o.id + "." + r.view_tag : o.id;
                pairs.push_back({stem + "__" + b.id, o.id, r.view_tag, b.id, std::nullopt});
            }
        }
    }
    return pairs;
}

Placement auto_placement(int canvas_width, int canvas_height, int render_width, int render_height) {
    const double longest = std::max(render_width, render_height);
    const double scale = std::min(1.0, 0.5 * std::min(canvas_width, canvas_height) / longest);
    const int w = static_cast<int>(std::lround(render_width * scale));
    const int h = static_cast<int>(std::lround(render_height * scale));
    return {(canvas_width - w) / 2, (canvas_height - h) / 2, scale, 0.0};
}

BenchmarkManifest BenchmarkManifest::from_json(const json& j, const std::filesystem::path& base_dir) {
    if (!j.is_object()) {
        throw ValidationError("manifest", "manifest must be a JSON object");
    }
    BenchmarkManifest m;
    if (!j.contains("objects") || !j.at("objects").is_array()) {
        throw ValidationError("objects", "objects must be an array");
    }
    if (!j.contains("backgrounds") || !j.at("backgrounds").is_array()) {
        throw ValidationError("backgrounds", "backgrounds must be an array");
    }
    for (std::size_t i = 0; i < j.at("objects").size(); ++i) {
        const json& o = j.at("objects")[i];
        const std::string where = "objects[" + std::to_string(i) + "]";
        ObjectEntry obj;
        obj.id = string_at(o, "id", where);
        obj.image = path_at(o, "image", where, base_dir);
        obj.tag = o.contains("tag") ? string_at(o, "tag", where) : obj.id;
        if (!o.contains("renders") || !o.at("renders").is_array() || o.at("renders").empty()) {
            throw ValidationError(where + ".renders", where + ".renders must be a non-empty array");
        }
        for (std::size_t k = 0; k < o.at("renders").size(); ++k) {
            const json& r = o.at("renders")[k];
            const std::string rwhere = where + ".renders[" + std::to_string(k) + "]";
            obj.renders.push_back(
                {string_at(r, "view_tag", rwhere), path_at(r, "rgba", rwhere, base_dir), path_at(r, "depth", rwhere, base_dir)});
        }
        m.objects.push_back(std::move(obj));
    }
    for (std::size_t i = 0; i < j.at("backgrounds").size(); ++i) {
        const json& b = j.at("backgrounds")[i];
        const std::string where = "backgrounds[" + std::to_string(i) + "]";
        m.backgrounds.push_back({string_at(b, "id", where), path_at(b, "path", where, base_dir), placement_at(b, where)});
    }
    m.placement = placement_at(j, "manifest");
    const json pairs = j.value("pairs", json("cross"));
    if (pairs.is_string() && pairs.get<std::string>() == "cross") {
        m.pairs = cross_pairs(m.objects, m.backgrounds);
    } else if (pairs.is_array()) {
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            const json& p = pairs[i];
            const std::string where = "pairs[" + std::to_string(i) + "]";
            PairEntry pair;
            pair.object = string_at(p, "object", where);
            pair.background = string_at(p, "background", where);
            pair.view_tag = string_at(p, "view_tag", where, false);
            if (pair.view_tag.empty()) {
                const ObjectEntry* o = m.find_object(pair.object);
                pair.view_tag = o != nullptr ? o->renders.front().view_tag : "";
            }
            pair.placement = placement_at(p, where);
            pair.id = string_at(p, "id", where, false);
            if (pair.id.empty()) {
                pair.id = pair.object + "." + pair.view_tag + "__" + pair.background;
            }
            m.pairs.push_back(std::move(pair));
        }
    } else {
        throw ValidationError("pairs", "pairs must be \"cross\" or an array");
    }
    if (j.contains("config")) {
        const json& c = j.at("config");
        if (c.is_string()) {
            std::filesystem::path p(c.get<std::string>());
            if (p.is_relative() && !base_dir.empty()) {
                p = base_dir / p;
            }
            std::ifstream in(p);
            if (!in) {
                throw ValidationError("config", "config references a missing file: " + p.string());
            }
            try {
                m.config = json::parse(in);
            } catch (const json::exception& e) {
                throw ValidationError("config", std::string("config is not valid JSON: ") + e.what());
            }
        } else if (c.is_object()) {
            m.config = c;
        } else {
            throw ValidationError("config", "config must be an object or a path");
        }
    }
    m.validate();
    return m;
}

BenchmarkManifest BenchmarkManifest::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ValidationError("manifest", "cannot read manifest " + path.string());
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError("manifest", "manifest " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j, std::filesystem::absolute(path).parent_path());
}

void BenchmarkManifest::validate() const {
    std::set<std::string> seen;
    for (std::size_t i = 0; i < objects.size(); ++i) {
        const auto& o = objects[i];
        const std::string where = "objects[" + std::to_string(i) + "]";
        if (!seen.insert(o.id).second) {
            throw ValidationError(where + ".id", "duplicate object id \"" + o.id + "\"");
        }
        require_file(o.image, where + ".image");
        std::set<std::string> views;
        for (std::size_t k = 0; k < o.renders.size(); ++k) {
            const auto& r = o.renders[k];
            const std::string rwhere = where + ".renders[" + std::to_string(k) + "]";
            if (!views.insert(r.view_tag).second) {
                throw ValidationError(rwhere + ".view_tag", "duplicate view_tag \"" + r.view_tag + "\" for " + o.id);
            }
            require_file(r.rgba, rwhere + ".rgba");
            require_file(r.depth, rwhere + ".depth");
        }
    }
    seen.clear();
    for (std::size_t i = 0; i < backgrounds.size(); ++i) {
        const auto& b = backgrounds[i];
        const std::string where = "backgrounds[" + std::to_string(i) + "]";
        if (!seen.insert(b.id).second) {
            throw ValidationError(where + ".id", "duplicate background id \"" + b.id + "\"");
        }
        require_file(b.path, where + ".path");
    }
    seen.clear();
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        const std::string where = "pairs[" + std::to_string(i) + "]";
        if (!seen.insert(p.id).second) {
            throw ValidationError(where + ".id", "duplicate pair id \"" + p.id + "\"");
        }
        const ObjectEntry* o = find_object(p.object);
        if (o == nullptr) {
            throw ValidationError(where + ".object", "unknown object \"" + p.object + "\"");
        }
        if (o->find_view(p.view_tag) == nullptr) {
            throw ValidationError(where + ".view_tag", "object \"" + p.object + "\" has no view \"" + p.view_tag + "\"");
        }
        if (find_background(p.background) == nullptr) {
            throw ValidationError(where + ".background", "unknown background \"" + p.background + "\"");
        }
    }
}

const ObjectEntry* BenchmarkManifest::find_object(const std::string& id) const {
    const auto it = std::find_if(objects.begin(), objects.end(), [&](const ObjectEntry& o) { return o.id == id; });
    return it == objects.end() ? nullptr : &*it;
}

const BackgroundEntry* BenchmarkManifest::find_background(const std::string& id) const {
    const auto it =
        std::find_if(backgrounds.begin(), backgrounds.end(), [&](const BackgroundEntry& b) { return b.id == id; });
    return it == backgrounds.end() ? nullptr : &*it;
}

json BenchmarkManifest::to_json() const {
    json objs = json::array();
    for (const auto& o : objects) {
        json renders = json::array();
        for (const auto& r : o.renders) {
            renders.push_back({{"view_tag", r.view_tag}, {"rgba", r.rgba.string()}, {"depth", r.depth.string()}});
        }
        objs.push_back({{"id", o.id}, {"image", o.image.string()}, {"tag", o.tag}, {"renders", renders}});
    }
    json bgs = json::array();
    for (const auto& b : backgrounds) {
        bgs.push_back({{"id", b.id}, {"path", b.path.string()}, {"placement", placement_json(b.placement)}});
    }
    json ps = json::array();
    for (const auto& p : pairs) {
        ps.push_back({{"id", p.id},
                      {"object", p.object},
                      {"view_tag", p.view_tag},
                      {"background", p.background},
                      {"placement", placement_json(p.placement)}});
    }
    return {{"objects", objs},
            {"backgrounds", bgs},
            {"pairs", ps},
            {"placement", placement_json(placement)},
            {"config", config}};
}

}  // namespace freeinsert
