#pragma once

#include <string_view>

namespace advshape {

enum class LogLevel { quiet = 0, warn = 1, info = 2 };

void set_log_level(LogLevel level);
LogLevel log_level();
void log_warn(std::string_view msg);
void log_info(std::string_view msg);

}  // namespace advshape
