// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "freeinsert/image.hpp"
#include "test_util.hpp"

namespace freeinsert::testing {

// A render: opaque disc of radius r centered in a size x size RGBA canvas.
inline Image disc_rgba(int size, float r, float g, float b) {
    Image img(size, size, 4);
    const float c = 0.5f * static_cast<float>(size - 1);
    const float radius = 0.4f * static_cast<float>(size);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const float dx = static_cast<float>(x) - c;
            const float dy = static_cast<float>(y) - c;
            const bool in = dx * dx + dy * dy <= radius * radius;
            img.at(x, y, 0) = r;
            img.at(x, y, 1) = g;
            img.at(x, y, 2) = b;
            img.at(x, y, 3) = in ? 1.0f : 0.0f;
        }
    }
    return img;
}

// Writes `objects` x `backgrounds` small assets plus manifest.json under `dir`
// and returns the manifest path. Objects are "obj0", "obj1", ...; backgrounds
// "bg0", "bg1", ...; each object has the single view "front".
inline std::filesystem::path write_dataset(const std::filesystem::path& dir, int objects, int backgrounds,
                                           int canvas = 64, int render = 24) {
    using nlohmann::json;
    std::filesystem::create_directories(dir);
    json objs = json::array();
    for (int i = 0; i < objects; ++i) {
        const std::string id = "obj" + std::to_string(i);
        const float hue = 0.2f + 0.3f * static_cast<float>(i);
        save_png(disc_rgba(render, hue, 0.9f - hue, 0.4f), dir / (id + "_front.png"));
        DepthMap depth(render, render, 0.25f + 0.1f * static_cast<float>(i));
        save_depth_png16(depth, dir / (id + "_front_depth.png"));
        save_png(blocky_image(48, 48, 8, 100 + i), dir / (id + ".png"));
        objs.push_back({{"id", id},
                        {"image", id + ".png"},
                        {"tag", i % 2 == 0 ? "mug" : "lamp"},
                        {"renders", {{{"view_tag", "front"}, {"rgba", id + "_front.png"}, {"depth", id + "_front_depth.png"}}}}});
    }
    json bgs = json::array();
    for (int i = 0; i < backgrounds; ++i) {
        const std::string id = "bg" + std::to_string(i);
        save_png(blocky_image(canvas, canvas, 8, 200 + i), dir / (id + ".png"));
        bgs.push_back({{"id", id}, {"path", id + ".png"}});
    }
    const json manifest = {{"objects", objs},
                           {"backgrounds", bgs},
                           {"pairs", "cross"},
                           {"placement", {{"x", 16}, {"y", 16}, {"scale", 1.0}, {"rotation_deg", 0.0}}},
                           {"config", {{"seed", 3}}}};
    const auto path = dir / "manifest.json";
    std::ofstream(path) << manifest.dump(2);
    return path;
}

}  // namespace freeinsert::testing
