#include "editfollower/log.hpp"

#include <cstdio>
#include <cstdlib>

namespace ebg::log {

namespace {
Level g_level = Level::warn;

const char* tag(Level lvl) {
  switch (lvl) {
    case Level::error: return "error";
    case Level::warn: return "warn";
    case Level::info: return "info";
    case Level::debug: return "debug";
  }
  return "?";
}
}  // namespace

Level level() { return g_level; }

void set_level(Level lvl) { g_level = lvl; }

void set_level_from_env() {
  const char* env = std::getenv("EDITFOLLOWER_LOG");
  if (env == nullptr) return;
  const std::string v(env);
  if (v == "error") g_level = Level::error;
  else if (v == "warn") g_level = Level::warn;
  else if (v == "info") g_level = Level::info;
  else if (v == "debug") g_level = Level::debug;
}

void write(Level lvl, const std::string& msg) {
  if (static_cast<int>(lvl) > static_cast<int>(g_level)) return;
  std::fprintf(stderr, "[%s] %s\n", tag(lvl), msg.c_str());
}

}  // namespace ebg::log
