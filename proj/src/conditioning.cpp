// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/conditioning.hpp"

#include <sys/wait.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <regex>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "freeinsert/hashing.hpp"
#include "freeinsert/log.hpp"

namespace freeinsert {

namespace {

using json = nlohmann::json;

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) {
        return {};
    }
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'') {
            out += "'\\''";
        } else {
            out += c;
        }
    }
    return out + "'";
}

struct Url {
    std::string origin;  // scheme://host[:port]
    std::string path;
};

Url split_url(const std::string& url) {
    static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, re)) {
        throw ConfigError("VLM endpoint is not an http(s) URL: " + url);
    }
    return {m[1].str(), m[2].matched ? m[2].str() : "/"};
}

class HttpVlmClient final : public VlmClient {
public:
    HttpVlmClient(const std::string& url, int timeout_s) : m_url(split_url(url)), m_timeout_s(timeout_s) {}

    std::string describe(const Image& image, const std::string& instruction) override {
        httplib::Client client(m_url.origin);
        client.set_connection_timeout(m_timeout_s, 0);
        client.set_read_timeout(m_timeout_s, 0);
        client.set_write_timeout(m_timeout_s, 0);
        const auto png = encode_png(to_rgb(image));
        const httplib::MultipartFormDataItems items = {
            {"image", std::string(png.begin(), png.end()), "object.png", "image/png"},
            {"prompt", instruction, "", ""},
        };
        const auto res = client.Post(m_url.path, items);
        if (!res) {
            throw BackendError("VLM request failed: " + httplib::to_string(res.error()));
        }
        if (res->status != 200) {
            throw BackendError("VLM returned HTTP " + std::to_string(res->status));
        }
        std::string text = res->body;
        if (res->get_header_value("Content-Type").find("json") != std::string::npos) {
            const json body = json::parse(res->body, nullptr, false);
            if (!body.is_object() || !body.contains("text") || !body["text"].is_string()) {
                throw BackendError("VLM JSON response lacks a \"text\" string");
            }
            text = body["text"].get<std::string>();
        }
        return text;
    }

private:
    Url m_url;
    int m_timeout_s;
};

class LocalVlmClient final : public VlmClient {
public:
    LocalVlmClient(std::string executable, int timeout_s)
        : m_executable(std::move(executable)), m_timeout_s(timeout_s) {}

    std::string describe(const Image& image, const std::string& instruction) override {
        std::random_device rd;
        const auto path = std::filesystem::temp_directory_path() /
                          ("freeinsert-vlm-" + std::to_string(rd()) + std::to_string(rd()) + ".png");
        save_png(to_rgb(image), path);
        const std::string command = "timeout " + std::to_string(m_timeout_s) + " " + shell_quote(m_executable) + " " +
                                    shell_quote(path.string()) + " " + shell_quote(instruction) + " 2>/dev/null";
        std::string output;
        int status = -1;
        if (FILE* pipe = ::popen(command.c_str(), "r")) {
            std::array<char, 4096> buffer{};
            std::size_t n = 0;
            while ((n = std::fread(buffer.data(), 1, buffer.size(), pipe)) > 0) {
                output.append(buffer.data(), n);
            }
            status = ::pclose(pipe);
        }
        std::error_code ec;
        std::filesystem::remove(path, ec);
        if (status == -1) {
            throw BackendError("could not start local VLM command");
        }
        if (WIFEXITED(status) && WEXITSTATUS(status) == 124) {
            throw BackendError("local VLM timed out after " + std::to_string(m_timeout_s) + " s");
        }
        if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
            throw BackendError("local VLM exited with status " + std::to_string(WEXITSTATUS(status)));
        }
        return output;
    }

private:
    std::string m_executable;
    int m_timeout_s;
};

}  // namespace

std::string to_string(PromptSource source) {
    switch (source) {
    case PromptSource::vlm:
        return "vlm";
    case PromptSource::user:
        return "user";
    case PromptSource::template_:
        return "template";
    }
    return "unknown";
}

PromptSpec template_prompt(const std::string& tag) {
    const std::string t = trim(tag);
    return {"a photo of a " + (t.empty() ? std::string("object") : t), PromptSource::template_};
}

PromptSpec user_prompt(const std::string& text) {
    const std::string t = trim(text);
    if (t.empty()) {
        throw ValidationError("prompt", "prompt must not be blank");
    }
    return {t, PromptSource::user};
}

VlmConfig vlm_config_from_json(const json& j) {
    VlmConfig cfg;
    if (!j.is_object()) {
        throw ValidationError("vlm", "VLM config must be an object");
    }
    try {
        const std::string mode = j.value("mode", std::string("none"));
        if (mode == "http") {
            cfg.mode = VlmConfig::Mode::http;
        } else if (mode == "local") {
            cfg.mode = VlmConfig::Mode::local;
        } else if (mode == "none") {
            cfg.mode = VlmConfig::Mode::none;
        } else {
            throw ValidationError("vlm.mode", "vlm.mode must be \"http\", \"local\" or \"none\"");
        }
        cfg.endpoint = j.value("endpoint", std::string());
        cfg.timeout_s = j.value("timeout_s", cfg.timeout_s);
        cfg.instruction = j.value("instruction", cfg.instruction);
    } catch (const json::exception& e) {
        throw ValidationError("vlm", std::string("malformed VLM config: ") + e.what());
    }
    if (cfg.mode != VlmConfig::Mode::none && cfg.endpoint.empty()) {
        throw ValidationError("vlm.endpoint", "vlm.endpoint is required for mode " + j.value("mode", std::string()));
    }
    if (cfg.timeout_s < 1) {
        throw ValidationError("vlm.timeout_s", "vlm.timeout_s must be >= 1");
    }
    return cfg;
}

json to_json(const VlmConfig& cfg) {
    const char* mode = cfg.mode == VlmConfig::Mode::http ? "http" : cfg.mode == VlmConfig::Mode::local ? "local" : "none";
    return {{"mode", mode}, {"endpoint", cfg.endpoint}, {"timeout_s", cfg.timeout_s}, {"instruction", cfg.instruction}};
}

std::unique_ptr<VlmClient> make_http_vlm_client(const std::string& url, int timeout_s) {
    return std::make_unique<HttpVlmClient>(url, timeout_s);
}

std::unique_ptr<VlmClient> make_local_vlm_client(const std::string& executable, int timeout_s) {
    return std::make_unique<LocalVlmClient>(executable, timeout_s);
}

std::unique_ptr<VlmClient> make_vlm_client(const VlmConfig& cfg) {
    switch (cfg.mode) {
    case VlmConfig::Mode::http:
        return make_http_vlm_client(cfg.endpoint, cfg.timeout_s);
    case VlmConfig::Mode::local:
        return make_local_vlm_client(cfg.endpoint, cfg.timeout_s);
    case VlmConfig::Mode::none:
        break;
    }
    return nullptr;
}

std::string image_content_hash(const Image& image) {
    Sha256 h;
    h.update_pod(image.width());
    h.update_pod(image.height());
    h.update_pod(image.channels());
    h.update_floats(image.data());
    return h.hex_digest();
}

Captioner::Captioner(std::shared_ptr<VlmClient> client, std::string instruction)
    : m_client(std::move(client)), m_instruction(std::move(instruction)) {}

std::size_t Captioner::cache_size() const {
    std::lock_guard lock(m_mutex);
    return m_cache.size();
}

PromptSpec Captioner::caption(const Image& object_image, const std::string& fallback_tag) {
    if (!m_client) {
        return template_prompt(fallback_tag);
    }
    const std::string key = image_content_hash(object_image);
    {
        std::lock_guard lock(m_mutex);
        if (const auto it = m_cache.find(key); it != m_cache.end()) {
            return {it->second, PromptSource::vlm};
        }
    }
    try {
        ++m_calls;
        const std::string text = trim(m_client->describe(object_image, m_instruction));
        if (text.empty()) {
            throw BackendError("VLM returned an empty caption");
        }
        std::lock_guard lock(m_mutex);
        m_cache.emplace(key, text);
        return {text, PromptSource::vlm};
    } catch (const std::exception& e) {
        const PromptSpec fallback = template_prompt(fallback_tag);
        log_warning(std::string("captioning failed (") + e.what() + "); using template prompt \"" + fallback.text +
                    "\"");
        return fallback;
    }
}

ImageEmbedding embed(const Image& image, EmbeddingRole role, ImageEmbedder* extractor) {
    if (extractor == nullptr) {
        throw ExtractorUnavailable("no embedding extractor configured; the " + to_string(role) +
                                   " control is disabled");
    }
    ImageEmbedding out{extractor->embed(to_rgb(image)), role, extractor->id()};
    if (out.vector.empty()) {
        throw BackendError("extractor " + out.extractor_id + " returned an empty embedding");
    }
    for (float v : out.vector) {
        if (!std::isfinite(v)) {
            throw BackendError("extractor " + out.extractor_id + " returned a non-finite embedding");
        }
    }
    return out;
}

}  // namespace freeinsert
