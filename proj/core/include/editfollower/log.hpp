#pragma once

#include <string>

namespace ebg::log {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

Level level();
void set_level(Level lvl);

// Reads EDITFOLLOWER_LOG (error|warn|info|debug); unknown values keep the
// current level.
void set_level_from_env();

void write(Level lvl, const std::string& msg);

inline void error(const std::string& msg) { write(Level::error, msg); }
inline void warn(const std::string& msg) { write(Level::warn, msg); }
inline void info(const std::string& msg) { write(Level::info, msg); }
inline void debug(const std::string& msg) { write(Level::debug, msg); }

}  // namespace ebg::log
