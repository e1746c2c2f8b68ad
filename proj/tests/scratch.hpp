#pragma once

#include <filesystem>
#include <string>
#include <unistd.h>

inline std::filesystem::path scratch_root() {
  return std::filesystem::temp_directory_path() / ("rlscale_" + std::to_string(::getpid()));
}

// Fresh per-process directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = scratch_root() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}
