// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>

#include <nlohmann/json_fwd.hpp>

#include "freeinsert/backend.hpp"
#include "freeinsert/errors.hpp"
#include "freeinsert/image.hpp"

namespace freeinsert {

enum class PromptSource { vlm, user, template_ };

std::string to_string(PromptSource source);

struct PromptSpec {
    std::string text;  // never empty
    PromptSource source = PromptSource::user;

    bool operator==(const PromptSpec&) const = default;
};

/// "a photo of a <tag>"; an empty tag reads "object".
PromptSpec template_prompt(const std::string& tag);
/// ValidationError("prompt") on blank text.
PromptSpec user_prompt(const std::string& text);

inline constexpr const char* kDefaultCaptionInstruction =
    "Describe the main object in detail, including color, material, and distinctive features.";

struct VlmConfig {
    enum class Mode { none, http, local };

    Mode mode = Mode::none;
    /// http: URL of the describe endpoint. local: executable invoked as
    /// `<endpoint> <image.png> <instruction>`; the caption is its stdout.
    std::string endpoint;
    int timeout_s = 30;
    std::string instruction = kDefaultCaptionInstruction;
};

VlmConfig vlm_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const VlmConfig& cfg);

/// A captioning model behind some transport. Implementations throw on any
/// failure (unreachable, timeout, empty answer).
class VlmClient {
public:
    virtual ~VlmClient() = default;
    virtual std::string describe(const Image& image, const std::string& instruction) = 0;
};

/// POSTs multipart/form-data with fields "image" (PNG) and "prompt"; accepts a
/// JSON body {"text": ...} or plain text.
std::unique_ptr<VlmClient> make_http_vlm_client(const std::string& url, int timeout_s);
std::unique_ptr<VlmClient> make_local_vlm_client(const std::string& executable, int timeout_s);
/// nullptr for Mode::none.
std::unique_ptr<VlmClient> make_vlm_client(const VlmConfig& cfg);

/// Captions object images with a content-hash cache. Every failure degrades
/// to the template prompt with a logged warning. Thread-safe.
class Captioner {
public:
    Captioner(std::shared_ptr<VlmClient> client, std::string instruction = kDefaultCaptionInstruction);

    PromptSpec caption(const Image& object_image, const std::string& fallback_tag);

    std::size_t client_calls() const noexcept { return m_calls.load(); }
    std::size_t cache_size() const;

private:
    std::shared_ptr<VlmClient> m_client;
    std::string m_instruction;
    mutable std::mutex m_mutex;
    std::unordered_map<std::string, std::string> m_cache;
    std::atomic<std::size_t> m_calls{0};
};

/// SHA-256 over the image's dimensions and pixel bits.
std::string image_content_hash(const Image& image);

/// The extractor for a control is missing; callers treat the embedding as
/// absent (the corresponding control is disabled).
class ExtractorUnavailable : public BackendError {
public:
    using BackendError::BackendError;
};

/// Deterministic role-tagged embedding of `image`. ExtractorUnavailable when
/// `extractor` is null; BackendError on non-finite output.
ImageEmbedding embed(const Image& image, EmbeddingRole role, ImageEmbedder* extractor);

}  // namespace freeinsert
