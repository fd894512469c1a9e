#include "advshape/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

namespace advshape::io {
namespace {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  for (auto& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return e;
}

}  // namespace

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

Points read_xyz(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<double> v;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    double x, y, z;
    if (!(ls >> x >> y >> z)) throw Error(path.string() + ":" + std::to_string(lineno) + ": expected 'x y z'");
    v.insert(v.end(), {x, y, z});
  }
  Points p(static_cast<Eigen::Index>(v.size() / 3), 3);
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (int c = 0; c < 3; ++c) p(i, c) = v[static_cast<std::size_t>(3 * i + c)];
  require_finite(p, path.string().c_str());
  return p;
}

void write_xyz(const fs::path& path, const Points& points) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << std::setprecision(17);
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    out << points(i, 0) << ' ' << points(i, 1) << ' ' << points(i, 2) << '\n';
}

Points read_ply(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("ply", 0) != 0) throw Error(path.string() + ": not a PLY file");
  long vertices = -1;
  std::vector<std::string> props;
  bool in_vertex = false;
  bool binary_le = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "format") {
      std::string fmt;
      ls >> fmt;
      binary_le = fmt == "binary_little_endian";
    } else if (key == "element") {
      std::string name;
      long count;
      ls >> name >> count;
      in_vertex = name == "vertex";
      if (in_vertex) vertices = count;
      else if (count > 0) throw Error(path.string() + ": only vertex elements are supported");
    } else if (key == "property" && in_vertex) {
      std::string type, name;
      ls >> type >> name;
      if (type != "float" && type != "float32") throw Error(path.string() + ": vertex properties must be float32");
      props.push_back(name);
    } else if (key == "end_header") {
      break;
    }
  }
  if (!binary_le) throw Error(path.string() + ": only binary_little_endian PLY is supported");
  if (vertices < 0) throw Error(path.string() + ": missing vertex element");
  int ix = -1, iy = -1, iz = -1;
  for (std::size_t i = 0; i < props.size(); ++i) {
    if (props[i] == "x") ix = static_cast<int>(i);
    if (props[i] == "y") iy = static_cast<int>(i);
    if (props[i] == "z") iz = static_cast<int>(i);
  }
  if (ix < 0 || iy < 0 || iz < 0) throw Error(path.string() + ": missing x/y/z properties");
  std::vector<float> row(props.size());
  Points p(vertices, 3);
  for (long v = 0; v < vertices; ++v) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!in) throw Error(path.string() + ": truncated vertex data");
    p(v, 0) = row[static_cast<std::size_t>(ix)];
    p(v, 1) = row[static_cast<std::size_t>(iy)];
    p(v, 2) = row[static_cast<std::size_t>(iz)];
  }
  require_finite(p, path.string().c_str());
  return p;
}

void write_ply(const fs::path& path, const Points& points) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "ply\nformat binary_little_endian 1.0\nelement vertex " << points.rows()
      << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const float xyz[3] = {static_cast<float>(points(i, 0)), static_cast<float>(points(i, 1)),
                          static_cast<float>(points(i, 2))};
    out.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
  }
}

Points read_cloud(const fs::path& path) {
  const auto ext = lower_ext(path);
  if (ext == ".ply") return read_ply(path);
  if (ext == ".xyz" || ext == ".txt") return read_xyz(path);
  throw Error("unsupported point-cloud extension: " + path.string());
}

void write_cloud(const fs::path& path, const Points& points) {
  const auto ext = lower_ext(path);
  if (ext == ".ply") return write_ply(path, points);
  if (ext == ".xyz" || ext == ".txt") return write_xyz(path, points);
  throw Error("unsupported point-cloud extension: " + path.string());
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  const auto j = nlohmann::json::parse(read_text(path));
  if (!j.is_array()) throw Error(path.string() + ": manifest must be a JSON list");
  std::vector<ManifestEntry> out;
  for (const auto& e : j) {
    ManifestEntry m;
    m.path = e.at("path").get<std::string>();
    m.label = e.at("label").is_string() ? e.at("label").get<std::string>() : std::to_string(e.at("label").get<int>());
    m.split = e.value("split", std::string("train"));
    out.push_back(std::move(m));
  }
  return out;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : entries) j.push_back({{"path", e.path}, {"label", e.label}, {"split", e.split}});
  write_text(path, j.dump(1) + "\n");
}

}  // namespace advshape::io
