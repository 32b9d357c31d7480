// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <fstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "freeinsert/conditioning.hpp"
#include "freeinsert/log.hpp"
#include "freeinsert/toy_backend.hpp"
#include "test_util.hpp"

namespace freeinsert {
namespace {

using testing::blocky_image;
using testing::TempDir;

// Minimal captioning endpoint on a random local port.
class FakeVlmServer {
public:
    FakeVlmServer() {
        m_server.Post("/describe", [this](const httplib::Request& req, httplib::Response& res) {
            ++calls;
            if (delay_ms > 0) {
                std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
            }
            if (!req.has_file("image") || !req.has_file("prompt")) {
                res.status = 400;
                return;
            }
            last_prompt = req.get_file_value("prompt").content;
            last_image_size = req.get_file_value("image").content.size();
            if (fail) {
                res.status = 500;
                return;
            }
            if (plain_text) {
                res.set_content("  a red ceramic mug with a chipped handle \n", "text/plain");
            } else {
                res.set_content(nlohmann::json{{"text", "a red ceramic mug with a glossy glaze"}}.dump(),
                                "application/json");
            }
        });
        m_port = m_server.bind_to_any_port("127.0.0.1");
        m_thread = std::thread([this] { m_server.listen_after_bind(); });
        m_server.wait_until_ready();
    }
    ~FakeVlmServer() {
        m_server.stop();
        m_thread.join();
    }

    std::string url() const { return "http://127.0.0.1:" + std::to_string(m_port) + "/describe"; }

    std::atomic<int> calls{0};
    std::atomic<int> delay_ms{0};
    std::atomic<bool> fail{false};
    std::atomic<bool> plain_text{false};
    std::string last_prompt;
    std::size_t last_image_size = 0;

private:
    httplib::Server m_server;
    int m_port = 0;
    std::thread m_thread;
};

// Captures warnings for the duration of a test.
class LogCapture {
public:
    LogCapture() {
        m_old = set_log_sink([this](LogLevel level, const std::string& msg) {
            if (level == LogLevel::warning) {
                warnings.push_back(msg);
            }
        });
    }
    ~LogCapture() { set_log_sink(m_old); }
    std::vector<std::string> warnings;

private:
    LogSink m_old;
};

TEST(Prompt, TemplateAndUserPrompts) {
    EXPECT_EQ(template_prompt("dog"), (PromptSpec{"a photo of a dog", PromptSource::template_}));
    EXPECT_EQ(template_prompt(" ").text, "a photo of a object");
    EXPECT_EQ(user_prompt("  a teapot ").text, "a teapot");
    try {
        user_prompt("   ");
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_EQ(e.field(), "prompt");
    }
}

TEST(Captioner, ClientDownFallsBackToTemplateWithWarning) {
    LogCapture capture;
    // Port 9 (discard) on loopback is closed in the sandbox.
    Captioner captioner(make_http_vlm_client("http://127.0.0.1:9/describe", 2));
    const auto prompt = captioner.caption(blocky_image(32, 32, 8, 1), "dog");
    EXPECT_EQ(prompt, (PromptSpec{"a photo of a dog", PromptSource::template_}));
    ASSERT_EQ(capture.warnings.size(), 1u);
    EXPECT_NE(capture.warnings[0].find("template"), std::string::npos);
}

TEST(Captioner, NoClientUsesTemplateSilently) {
    Captioner captioner(nullptr);
    EXPECT_EQ(captioner.caption(blocky_image(32, 32, 8, 1), "lamp").text, "a photo of a lamp");
}

TEST(Captioner, HttpClientSendsInstructionAndCaches) {
    FakeVlmServer server;
    Captioner captioner(make_http_vlm_client(server.url(), 5));
    const Image img = blocky_image(32, 32, 8, 1);
    const auto first = captioner.caption(img, "mug");
    EXPECT_EQ(first, (PromptSpec{"a red ceramic mug with a glossy glaze", PromptSource::vlm}));
    EXPECT_EQ(server.last_prompt, kDefaultCaptionInstruction);
    EXPECT_GT(server.last_image_size, 8u);
    EXPECT_EQ(server.calls.load(), 1);

    const auto second = captioner.caption(img, "mug");
    EXPECT_EQ(second, first);
    EXPECT_EQ(server.calls.load(), 1);
    EXPECT_EQ(captioner.client_calls(), 1u);

    captioner.caption(blocky_image(32, 32, 8, 2), "mug");
    EXPECT_EQ(server.calls.load(), 2);
    EXPECT_EQ(captioner.cache_size(), 2u);
}

TEST(Captioner, PlainTextResponseIsTrimmed) {
    FakeVlmServer server;
    server.plain_text = true;
    Captioner captioner(make_http_vlm_client(server.url(), 5));
    EXPECT_EQ(captioner.caption(blocky_image(16, 16, 8, 1), "mug").text, "a red ceramic mug with a chipped handle");
}

TEST(Captioner, ServerErrorIsNotCached) {
    LogCapture capture;
    FakeVlmServer server;
    server.fail = true;
    Captioner captioner(make_http_vlm_client(server.url(), 5));
    const Image img = blocky_image(16, 16, 8, 3);
    EXPECT_EQ(captioner.caption(img, "cup").source, PromptSource::template_);
    server.fail = false;
    EXPECT_EQ(captioner.caption(img, "cup").source, PromptSource::vlm);
    EXPECT_EQ(server.calls.load(), 2);
}

TEST(Captioner, TimeoutFallsBack) {
    LogCapture capture;
    FakeVlmServer server;
    server.delay_ms = 2500;
    Captioner captioner(make_http_vlm_client(server.url(), 1));
    const auto start = std::chrono::steady_clock::now();
    EXPECT_EQ(captioner.caption(blocky_image(16, 16, 8, 4), "vase").text, "a photo of a vase");
    EXPECT_LT(std::chrono::steady_clock::now() - start, std::chrono::milliseconds(2400));
    EXPECT_EQ(capture.warnings.size(), 1u);
}

TEST(Captioner, ConcurrentCallersShareCache) {
    FakeVlmServer server;
    Captioner captioner(make_http_vlm_client(server.url(), 5));
    const Image img = blocky_image(16, 16, 8, 5);
    captioner.caption(img, "x");
    std::vector<std::thread> threads;
    std::atomic<int> vlm_answers{0};
    for (int i = 0; i < 4; ++i) {
        threads.emplace_back([&] {
            for (int k = 0; k < 10; ++k) {
                if (captioner.caption(img, "x").source == PromptSource::vlm) {
                    ++vlm_answers;
                }
            }
        });
    }
    for (auto& t : threads) {
        t.join();
    }
    EXPECT_EQ(vlm_answers.load(), 40);
    EXPECT_EQ(server.calls.load(), 1);
}

class LocalVlmTest : public ::testing::Test {
protected:
    std::string script(const std::string& body) {
        const auto path = dir / ("vlm" + std::to_string(m_count++) + ".sh");
        std::ofstream(path) << "#!/bin/sh\n" << body << "\n";
        std::filesystem::permissions(path, std::filesystem::perms::owner_all);
        return path.string();
    }
    TempDir dir;

private:
    int m_count = 0;
};

TEST_F(LocalVlmTest, StdoutBecomesCaption) {
    const auto exe = script("test -s \"$1\" || exit 3\necho \"a small wooden chair ($2)\"");
    Captioner captioner(make_local_vlm_client(exe, 5), "Describe briefly.");
    const auto prompt = captioner.caption(blocky_image(16, 16, 8, 1), "chair");
    EXPECT_EQ(prompt, (PromptSpec{"a small wooden chair (Describe briefly.)", PromptSource::vlm}));
}

TEST_F(LocalVlmTest, FailureAndTimeoutFallBack) {
    LogCapture capture;
    Captioner failing(make_local_vlm_client(script("exit 1"), 5));
    EXPECT_EQ(failing.caption(blocky_image(16, 16, 8, 1), "chair").source, PromptSource::template_);
    Captioner slow(make_local_vlm_client(script("sleep 5\necho late"), 1));
    const auto start = std::chrono::steady_clock::now();
    EXPECT_EQ(slow.caption(blocky_image(16, 16, 8, 1), "chair").text, "a photo of a chair");
    EXPECT_LT(std::chrono::steady_clock::now() - start, std::chrono::seconds(4));
    Captioner missing(make_local_vlm_client((dir / "absent").string(), 5));
    EXPECT_EQ(missing.caption(blocky_image(16, 16, 8, 1), "chair").source, PromptSource::template_);
    EXPECT_EQ(capture.warnings.size(), 3u);
}

TEST(VlmConfig, ParsesAndValidates) {
    const auto cfg = vlm_config_from_json(nlohmann::json{{"mode", "http"}, {"endpoint", "http://h:1/x"}, {"timeout_s", 7}});
    EXPECT_EQ(cfg.mode, VlmConfig::Mode::http);
    EXPECT_EQ(cfg.timeout_s, 7);
    EXPECT_EQ(cfg.instruction, kDefaultCaptionInstruction);
    EXPECT_EQ(vlm_config_from_json(to_json(cfg)).endpoint, "http://h:1/x");
    try {
        vlm_config_from_json(nlohmann::json{{"mode", "grpc"}});
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_EQ(e.field(), "vlm.mode");
    }
    try {
        vlm_config_from_json(nlohmann::json{{"mode", "local"}});
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_EQ(e.field(), "vlm.endpoint");
    }
    EXPECT_EQ(make_vlm_client(VlmConfig{}), nullptr);
    EXPECT_THROW(make_http_vlm_client("ftp://x", 1), ConfigError);
}

TEST(Embed, DeterministicAndRoleTagged) {
    auto extractor = make_toy_embedder("toy-ip");
    const Image img = blocky_image(48, 40, 8, 9);
    const auto a = embed(img, EmbeddingRole::style, extractor.get());
    const auto b = embed(img, EmbeddingRole::style, extractor.get());
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.role, EmbeddingRole::style);
    EXPECT_EQ(a.extractor_id, "toy-ip");
    EXPECT_EQ(embed(img, EmbeddingRole::content, extractor.get()).vector, a.vector);
}

TEST(Embed, MissingExtractorDisablesControl) {
    try {
        embed(blocky_image(16, 16, 8, 1), EmbeddingRole::style, nullptr);
        FAIL();
    } catch (const ExtractorUnavailable& e) {
        EXPECT_NE(std::string(e.what()).find("style control is disabled"), std::string::npos);
    }
}

TEST(Embed, SmallPerturbationKeepsDirection) {
    // Photo-like input: flat regions with edges plus a smooth shading ramp.
    Image img = blocky_image(64, 64, 8, 9);
    const Image ramp = testing::gradient_image(64, 64);
    for (std::size_t i = 0; i < img.data().size(); ++i) {
        img.data()[i] = 0.7f * img.data()[i] + 0.3f * ramp.data()[i];
    }
    Image noisy = img;
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<float> noise(-0.004f, 0.004f);
    for (auto& v : noisy.data()) {
        v = std::clamp(v + noise(rng), 0.0f, 1.0f);
    }
    for (const char* id : {"toy-clip", "toy-dino", "toy-ip"}) {
        auto extractor = make_toy_embedder(id);
        const auto a = embed(img, EmbeddingRole::content, extractor.get()).vector;
        const auto b = embed(noisy, EmbeddingRole::content, extractor.get()).vector;
        double dot = 0, na = 0, nb = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        EXPECT_GT(dot / std::sqrt(na * nb), 0.99) << id;
    }
}

}  // namespace
}  // namespace freeinsert
