#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "advshape/point_cloud.hpp"

namespace advshape::io {

namespace fs = std::filesystem;

/// ASCII XYZ: one "x y z" triple per line; blank lines and '#' comments skipped.
Points read_xyz(const fs::path& path);
void write_xyz(const fs::path& path, const Points& points);

/// Binary little-endian PLY with float32 x/y/z vertex properties.
Points read_ply(const fs::path& path);
void write_ply(const fs::path& path, const Points& points);

/// Dispatches on extension (.xyz / .ply).
Points read_cloud(const fs::path& path);
void write_cloud(const fs::path& path, const Points& points);

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  std::string label;
  std::string split;
};

std::vector<ManifestEntry> read_manifest(const fs::path& path);
void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries);

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

}  // namespace advshape::io
