#include "advshape/log.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>
#include <iostream>
#include <mutex>

namespace advshape {
namespace {

LogLevel initial_level() {
  const char* env = std::getenv("ADVSHAPE_LOG");
  if (env == nullptr) return LogLevel::warn;
  if (std::strcmp(env, "quiet") == 0) return LogLevel::quiet;
  if (std::strcmp(env, "info") == 0) return LogLevel::info;
  return LogLevel::warn;
}

std::atomic<LogLevel> g_level{initial_level()};
std::mutex g_mutex;

}  // namespace

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level; }

void log_warn(std::string_view msg) {
  if (g_level < LogLevel::warn) return;
  std::lock_guard lock(g_mutex);
  std::cerr << "[warn] " << msg << '\n';
}

void log_info(std::string_view msg) {
  if (g_level < LogLevel::info) return;
  std::lock_guard lock(g_mutex);
  std::cerr << "[info] " << msg << '\n';
}

}  // namespace advshape
