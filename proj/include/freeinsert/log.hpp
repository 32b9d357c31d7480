// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>

namespace freeinsert {

enum class LogLevel { debug, info, warning, error };

std::string to_string(LogLevel level);

using LogSink = std::function<void(LogLevel, const std::string&)>;

/// Replaces the process-wide sink (stderr by default); returns the old one.
LogSink set_log_sink(LogSink sink);
void set_log_level(LogLevel min_level);

void log(LogLevel level, const std::string& message);
inline void log_info(const std::string& message) { log(LogLevel::info, message); }
inline void log_warning(const std::string& message) { log(LogLevel::warning, message); }
inline void log_error(const std::string& message) { log(LogLevel::error, message); }

}  // namespace freeinsert
