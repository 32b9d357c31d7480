// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/log.hpp"

#include <iostream>
#include <mutex>

namespace freeinsert {

namespace {

std::mutex g_mutex;
LogLevel g_min_level = LogLevel::info;

void stderr_sink(LogLevel level, const std::string& message) {
    std::cerr << "[" << to_string(level) << "] " << message << '\n';
}

LogSink g_sink = stderr_sink;

}  // namespace

std::string to_string(LogLevel level) {
    switch (level) {
    case LogLevel::debug:
        return "debug";
    case LogLevel::info:
        return "info";
    case LogLevel::warning:
        return "warning";
    case LogLevel::error:
        return "error";
    }
    return "unknown";
}

LogSink set_log_sink(LogSink sink) {
    std::lock_guard lock(g_mutex);
    LogSink old = std::move(g_sink);
    g_sink = sink ? std::move(sink) : LogSink(stderr_sink);
    return old;
}

void set_log_level(LogLevel min_level) {
    std::lock_guard lock(g_mutex);
    g_min_level = min_level;
}

void log(LogLevel level, const std::string& message) {
    std::lock_guard lock(g_mutex);
    if (level >= g_min_level) {
        g_sink(level, message);
    }
}

}  // namespace freeinsert
