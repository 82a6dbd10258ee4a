#pragma once

#include <string>

namespace diredi {

enum class LogLevel { quiet = 0, info = 1, debug = 2 };

void set_log_level(LogLevel level);
LogLevel log_level();

// Writes "[diredi] message" to stderr when `level` is enabled.
void log(LogLevel level, const std::string& message);
inline void log_info(const std::string& message) { log(LogLevel::info, message); }
inline void log_debug(const std::string& message) { log(LogLevel::debug, message); }

}  // namespace diredi
