// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/image.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "freeinsert/errors.hpp"

namespace freeinsert {

namespace {

std::uint8_t to_u8(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

Image from_mat(const cv::Mat& mat, bool keep_alpha) {
    cv::Mat src = mat;
    const int depth = src.depth();
    double scale = 1.0;
    if (depth == CV_8U) {
        scale = 1.0 / 255.0;
    } else if (depth == CV_16U) {
        scale = 1.0 / 65535.0;
    } else if (depth != CV_32F) {
        throw ValidationError("image", "unsupported image bit depth");
    }
    const int in_channels = src.channels();
    const int out_channels = (keep_alpha && in_channels == 4) ? 4 : 3;
    Image out(src.cols, src.rows, out_channels);
    for (int y = 0; y < src.rows; ++y) {
        for (int x = 0; x < src.cols; ++x) {
            float px[4] = {0, 0, 0, 1};
            for (int c = 0; c < in_channels; ++c) {
                double v = 0.0;
                if (depth == CV_8U) {
                    v = src.ptr<std::uint8_t>(y)[x * in_channels + c];
                } else if (depth == CV_16U) {
                    v = src.ptr<std::uint16_t>(y)[x * in_channels + c];
                } else {
                    v = src.ptr<float>(y)[x * in_channels + c];
                }
                px[c] = static_cast<float>(v * scale);
            }
            if (in_channels == 1) {
                px[1] = px[2] = px[0];
            }
            if (in_channels >= 3) {
                std::swap(px[0], px[2]);  // BGR(A) -> RGB(A)
            }
            for (int c = 0; c < out_channels; ++c) {
                out.at(x, y, c) = std::clamp(px[c], 0.0f, 1.0f);
            }
        }
    }
    return out;
}

cv::Mat to_mat_u8(const Image& image) {
    const int ch = image.channels();
    cv::Mat mat(image.height(), image.width(), CV_8UC(ch));
    for (int y = 0; y < image.height(); ++y) {
        auto* row = mat.ptr<std::uint8_t>(y);
        for (int x = 0; x < image.width(); ++x) {
            for (int c = 0; c < ch; ++c) {
                int src_c = c;
                if (ch >= 3 && c < 3) {
                    src_c = 2 - c;
                }
                row[x * ch + c] = to_u8(image.at(x, y, src_c));
            }
        }
    }
    return mat;
}

int reflect_index(int i, int n) {
    if (n == 1) {
        return 0;
    }
    const int period = 2 * n - 2;
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

float sample_clamped(std::span<const float> data, int width, int height, int channels, int c, float sx,
                     float sy) {
    sx = std::clamp(sx, 0.0f, static_cast<float>(width - 1));
    sy = std::clamp(sy, 0.0f, static_cast<float>(height - 1));
    const int x0 = static_cast<int>(std::floor(sx));
    const int y0 = static_cast<int>(std::floor(sy));
    const int x1 = std::min(x0 + 1, width - 1);
    const int y1 = std::min(y0 + 1, height - 1);
    const float fx = sx - static_cast<float>(x0);
    const float fy = sy - static_cast<float>(y0);
    auto px = [&](int x, int y) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; };
    const float top = px(x0, y0) + (px(x1, y0) - px(x0, y0)) * fx;
    const float bottom = px(x0, y1) + (px(x1, y1) - px(x0, y1)) * fx;
    return top + (bottom - top) * fy;
}

}  // namespace

Image::Image(int width, int height, int channels, float fill)
    : m_width(width), m_height(height), m_channels(channels),
      m_data(static_cast<std::size_t>(width) * height * channels, fill) {
    if (width < 0 || height < 0 || channels < 1 || channels > 4) {
        throw ContractError("image: invalid dimensions");
    }
}

Image::Image(int width, int height, int channels, std::vector<float> data)
    : m_width(width), m_height(height), m_channels(channels), m_data(std::move(data)) {
    if (m_data.size() != static_cast<std::size_t>(width) * height * channels) {
        throw ContractError("image: data size does not match dimensions");
    }
}

DepthMap::DepthMap(int width, int height, float fill)
    : m_width(width), m_height(height), m_values(static_cast<std::size_t>(width) * height, fill) {}

DepthMap::DepthMap(int width, int height, std::vector<float> values)
    : m_width(width), m_height(height), m_values(std::move(values)) {
    if (m_values.size() != static_cast<std::size_t>(width) * height) {
        throw ContractError("depth map: data size does not match dimensions");
    }
}

bool DepthMap::in_unit_range() const noexcept {
    return std::all_of(m_values.begin(), m_values.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
}

Rect intersect(const Rect& a, const Rect& b) {
    const int x0 = std::max(a.x, b.x);
    const int y0 = std::max(a.y, b.y);
    const int x1 = std::min(a.x + a.width, b.x + b.width);
    const int y1 = std::min(a.y + a.height, b.y + b.height);
    if (x1 <= x0 || y1 <= y0) {
        return {x0, y0, 0, 0};
    }
    return {x0, y0, x1 - x0, y1 - y0};
}

Image load_image(const std::filesystem::path& path, bool keep_alpha) {
    cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (mat.empty()) {
        throw ValidationError("image", "cannot read image " + path.string());
    }
    return from_mat(mat, keep_alpha);
}

std::vector<std::uint8_t> encode_png(const Image& image) {
    std::vector<std::uint8_t> bytes;
    if (!cv::imencode(".png", to_mat_u8(image), bytes)) {
        throw Error("png encoding failed");
    }
    return bytes;
}

Image decode_image(std::span<const std::uint8_t> bytes, bool keep_alpha) {
    cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8U, const_cast<std::uint8_t*>(bytes.data()));
    cv::Mat mat = cv::imdecode(raw, cv::IMREAD_UNCHANGED);
    if (mat.empty()) {
        throw ValidationError("image", "cannot decode image bytes");
    }
    return from_mat(mat, keep_alpha);
}

void save_png(const Image& image, const std::filesystem::path& path) {
    if (!cv::imwrite(path.string(), to_mat_u8(image))) {
        throw Error("cannot write " + path.string());
    }
}

namespace {

DepthMap depth_from_mat(const cv::Mat& mat, const std::string& what) {
    if (mat.empty()) {
        throw ValidationError("depth", "cannot read depth map " + what);
    }
    DepthMap depth(mat.cols, mat.rows);
    for (int y = 0; y < mat.rows; ++y) {
        for (int x = 0; x < mat.cols; ++x) {
            float v = 0.0f;
            switch (mat.depth()) {
                case CV_8U: v = mat.at<std::uint8_t>(y, x) / 255.0f; break;
                case CV_16U: v = mat.at<std::uint16_t>(y, x) / 65535.0f; break;
                case CV_32F: v = mat.at<float>(y, x); break;
                default: throw ValidationError("depth", "unsupported depth map format " + what);
            }
            if (!std::isfinite(v)) {
                v = 0.0f;
            }
            depth.at(x, y) = std::clamp(v, 0.0f, 1.0f);
        }
    }
    return depth;
}

}  // namespace

DepthMap load_depth(const std::filesystem::path& path) {
    return depth_from_mat(cv::imread(path.string(), cv::IMREAD_ANYDEPTH | cv::IMREAD_GRAYSCALE), path.string());
}

DepthMap decode_depth(std::span<const std::uint8_t> bytes) {
    const cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
    return depth_from_mat(cv::imdecode(buf, cv::IMREAD_ANYDEPTH | cv::IMREAD_GRAYSCALE), "(inline bytes)");
}

void save_depth_png16(const DepthMap& depth, const std::filesystem::path& path) {
    cv::Mat mat(depth.height(), depth.width(), CV_16UC1);
    for (int y = 0; y < depth.height(); ++y) {
        for (int x = 0; x < depth.width(); ++x) {
            mat.at<std::uint16_t>(y, x) =
                static_cast<std::uint16_t>(std::lround(std::clamp(depth.at(x, y), 0.0f, 1.0f) * 65535.0f));
        }
    }
    if (!cv::imwrite(path.string(), mat)) {
        throw Error("cannot write " + path.string());
    }
}

Image crop(const Image& image, const Rect& rect) {
    const Rect r = intersect(rect, {0, 0, image.width(), image.height()});
    if (r != rect || r.empty()) {
        throw RangeError("crop rectangle outside image");
    }
    Image out(r.width, r.height, image.channels());
    for (int y = 0; y < r.height; ++y) {
        for (int x = 0; x < r.width; ++x) {
            for (int c = 0; c < image.channels(); ++c) {
                out.at(x, y, c) = image.at(r.x + x, r.y + y, c);
            }
        }
    }
    return out;
}

DepthMap crop(const DepthMap& depth, const Rect& rect) {
    const Rect r = intersect(rect, {0, 0, depth.width(), depth.height()});
    if (r != rect || r.empty()) {
        throw RangeError("crop rectangle outside depth map");
    }
    DepthMap out(r.width, r.height);
    for (int y = 0; y < r.height; ++y) {
        for (int x = 0; x < r.width; ++x) {
            out.at(x, y) = depth.at(r.x + x, r.y + y);
        }
    }
    return out;
}

Image resize_bilinear(const Image& image, int width, int height) {
    if (width == image.width() && height == image.height()) {
        return image;
    }
    Image out(width, height, image.channels());
    const float sx = static_cast<float>(image.width()) / width;
    const float sy = static_cast<float>(image.height()) / height;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const float fx = (x + 0.5f) * sx - 0.5f;
            const float fy = (y + 0.5f) * sy - 0.5f;
            for (int c = 0; c < image.channels(); ++c) {
                out.at(x, y, c) =
                    sample_clamped(image.data(), image.width(), image.height(), image.channels(), c, fx, fy);
            }
        }
    }
    return out;
}

DepthMap resize_bilinear(const DepthMap& depth, int width, int height) {
    if (width == depth.width() && height == depth.height()) {
        return depth;
    }
    DepthMap out(width, height);
    const float sx = static_cast<float>(depth.width()) / width;
    const float sy = static_cast<float>(depth.height()) / height;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            out.at(x, y) = sample_clamped(depth.values(), depth.width(), depth.height(), 1, 0,
                                          (x + 0.5f) * sx - 0.5f, (y + 0.5f) * sy - 0.5f);
        }
    }
    return out;
}

Image to_rgb(const Image& image) {
    if (image.channels() == 3) {
        return image;
    }
    Image out(image.width(), image.height(), 3);
    for (int y = 0; y < image.height(); ++y) {
        for (int x = 0; x < image.width(); ++x) {
            for (int c = 0; c < 3; ++c) {
                out.at(x, y, c) = image.at(x, y, image.channels() == 1 ? 0 : c);
            }
        }
    }
    return out;
}

Image to_luma(const Image& image) {
    Image out(image.width(), image.height(), 1);
    for (int y = 0; y < image.height(); ++y) {
        for (int x = 0; x < image.width(); ++x) {
            if (image.channels() < 3) {
                out.at(x, y, 0) = image.at(x, y, 0);
            } else {
                out.at(x, y, 0) =
                    0.299f * image.at(x, y, 0) + 0.587f * image.at(x, y, 1) + 0.114f * image.at(x, y, 2);
            }
        }
    }
    return out;
}

Image pad_reflect_to_multiple(const Image& image, int multiple) {
    const int w = (image.width() + multiple - 1) / multiple * multiple;
    const int h = (image.height() + multiple - 1) / multiple * multiple;
    if (w == image.width() && h == image.height()) {
        return image;
    }
    Image out(w, h, image.channels());
    for (int y = 0; y < h; ++y) {
        const int sy = reflect_index(y, image.height());
        for (int x = 0; x < w; ++x) {
            const int sx = reflect_index(x, image.width());
            for (int c = 0; c < image.channels(); ++c) {
                out.at(x, y, c) = image.at(sx, sy, c);
            }
        }
    }
    return out;
}

DepthMap pad_reflect_to_multiple(const DepthMap& depth, int multiple) {
    const int w = (depth.width() + multiple - 1) / multiple * multiple;
    const int h = (depth.height() + multiple - 1) / multiple * multiple;
    if (w == depth.width() && h == depth.height()) {
        return depth;
    }
    DepthMap out(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            out.at(x, y) = depth.at(reflect_index(x, depth.width()), reflect_index(y, depth.height()));
        }
    }
    return out;
}

double mean_abs_diff(const Image& a, const Image& b) {
    if (a.width() != b.width() || a.height() != b.height() || a.channels() != b.channels()) {
        throw ContractError("mean_abs_diff: image shapes differ");
    }
    if (a.empty()) {
        return 0.0;
    }
    double sum = 0.0;
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < ad.size(); ++i) {
        sum += std::abs(static_cast<double>(ad[i]) - bd[i]);
    }
    return sum / static_cast<double>(ad.size());
}

}  // namespace freeinsert
