#include "diredi/log.hpp"

#include <atomic>
#include <cstdio>

namespace diredi {
namespace {
std::atomic<int> g_level{static_cast<int>(LogLevel::info)};
}

void set_log_level(LogLevel level) { g_level = static_cast<int>(level); }

LogLevel log_level() { return static_cast<LogLevel>(g_level.load()); }

void log(LogLevel level, const std::string& message) {
  if (static_cast<int>(level) > g_level.load() || level == LogLevel::quiet) return;
  std::fprintf(stderr, "[diredi] %s\n", message.c_str());
}

}  // namespace diredi
