#include "advshape/eval.hpp"

#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include "advshape/checkpoint.hpp"
#include "advshape/rng.hpp"

#ifndef ADVSHAPE_VERSION
#define ADVSHAPE_VERSION "0.0.0"
#endif

namespace advshape {

std::string software_version() { return ADVSHAPE_VERSION; }

std::string format_real(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

namespace {

double parse_real(const std::string& s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) throw Error("not a number: '" + s + "'");
  return v;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    rows.push_back(split_csv_line(line));
  }
  return rows;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

}  // namespace

std::uint64_t defense_seed(const DefenseConfig& defense, std::size_t index) {
  return derive_seed(defense.seed, {0xDEFULL, static_cast<std::uint64_t>(index)});
}

double eval_asr(const std::vector<PointCloud>& adversarial, const Classifier& target, const DefenseConfig* defense) {
  if (adversarial.empty()) throw Error("eval_asr: empty adversarial set");
  int fooled = 0;
  for (std::size_t i = 0; i < adversarial.size(); ++i) {
    const auto& x = adversarial[i];
    if (!x.label) throw Error("eval_asr: example '" + x.id + "' has no label");
    int pred = 0;
    if (defense) {
      DefenseConfig d = *defense;
      d.seed = defense_seed(*defense, i);
      pred = target.predict(apply_defense(x, d).points);
    } else {
      pred = target.predict(x.points);
    }
    if (pred != *x.label) ++fooled;
  }
  return static_cast<double>(fooled) / static_cast<double>(adversarial.size());
}

QualityReport eval_quality(const std::vector<PointCloud>& benign, const std::vector<PointCloud>& adversarial) {
  std::map<std::string, const PointCloud*> by_id;
  for (const auto& b : benign) by_id[b.id] = &b;
  QualityReport r;
  for (const auto& a : adversarial) {
    const auto it = by_id.find(a.id);
    if (it == by_id.end() || it->second->size() != a.size()) {
      ++r.skipped;
      continue;
    }
    const auto d = distances(it->second->points, a.points);
    r.mean.chamfer += d.chamfer;
    r.mean.hausdorff += d.hausdorff;
    r.mean.mse += d.mse;
    ++r.pairs;
  }
  if (r.pairs > 0) {
    r.mean.chamfer /= r.pairs;
    r.mean.hausdorff /= r.pairs;
    r.mean.mse /= r.pairs;
  }
  return r;
}

TimingReport eval_timing(const std::vector<TimedRun>& runs) {
  if (runs.empty()) throw Error("eval_timing: no runs");
  std::map<std::string, double> secs;
  std::map<std::string, int> views, successes;
  for (const auto& run : runs) {
    const auto key = to_string(run.sampler);
    for (const auto& v : run.result.views) secs[key] += v.seconds;
    views[key] += static_cast<int>(run.result.views.size());
    successes[key] += static_cast<int>(run.result.successful_views.size());
  }
  TimingReport t;
  for (const auto& [key, s] : secs) {
    t.seconds_per_view[key] = views[key] > 0 ? s / views[key] : 0.0;
    t.seconds_per_example[key] = successes[key] > 0 ? std::optional<double>(s / successes[key]) : std::nullopt;
  }
  return t;
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd m;
  m.n = static_cast<int>(values.size());
  if (values.empty()) return m;
  double sum = 0.0;
  for (double v : values) sum += v;
  m.mean = sum / m.n;
  double ss = 0.0;
  for (double v : values) ss += (v - m.mean) * (v - m.mean);
  m.std = std::sqrt(ss / m.n);
  m.min = *std::min_element(values.begin(), values.end());
  m.max = *std::max_element(values.begin(), values.end());
  // Rounding can push the mean of near-equal values a hair outside [min, max].
  m.mean = std::clamp(m.mean, m.min, m.max);
  return m;
}

std::vector<LongTailRow> long_tail_table(const Dataset& dataset, const std::vector<PointCloud>& successful) {
  std::vector<LongTailRow> rows(dataset.classes.size());
  for (std::size_t c = 0; c < rows.size(); ++c) rows[c].cls = dataset.classes[c];
  for (const auto& x : dataset.train) ++rows.at(static_cast<std::size_t>(*x.label)).data_count;
  for (const auto& x : successful) {
    if (!x.label) throw Error("long_tail_table: unlabelled example");
    ++rows.at(static_cast<std::size_t>(*x.label)).success_count;
  }
  int data = 0, succ = 0;
  for (const auto& r : rows) {
    data += r.data_count;
    succ += r.success_count;
  }
  for (auto& r : rows) {
    r.data_share = data > 0 ? static_cast<double>(r.data_count) / data : 0.0;
    r.success_share = succ > 0 ? static_cast<double>(r.success_count) / succ : 0.0;
  }
  return rows;
}

std::vector<LongTailRow> long_tail_table(const Dataset& dataset, const std::vector<AttackResult>& results) {
  std::vector<PointCloud> successful;
  for (const auto& r : results)
    for (const auto& v : r.views)
      if (v.substitute_success) successful.push_back(v.adversarial_cloud);
  return long_tail_table(dataset, successful);
}

void write_long_tail(const std::filesystem::path& csv, const std::filesystem::path& png,
                     const std::vector<LongTailRow>& rows) {
  auto out = open_out(csv);
  out << "class,data_count,success_count,data_share,success_share\n";
  for (const auto& r : rows)
    out << csv_field(r.cls) << ',' << r.data_count << ',' << r.success_count << ',' << format_real(r.data_share) << ','
        << format_real(r.success_share) << '\n';
  if (!png.empty()) {
    std::vector<std::vector<double>> groups;
    for (const auto& r : rows) groups.push_back({r.data_share, r.success_share});
    write_png(png, bar_chart_image(groups));
  }
}

std::vector<LongTailRow> read_long_tail_csv(const std::filesystem::path& csv) {
  const auto rows = read_csv(csv);
  if (rows.empty()) throw Error("read_long_tail_csv: missing header");
  std::vector<LongTailRow> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& f = rows[i];
    if (f.size() != 5) throw Error("read_long_tail_csv: expected 5 fields");
    out.push_back({f[0], std::stoi(f[1]), std::stoi(f[2]), parse_real(f[3]), parse_real(f[4])});
  }
  return out;
}

SimilarityReport similarity_report(const std::vector<ClassifierPtr>& models, const std::vector<PointCloud>& sample) {
  std::vector<Points> clouds;
  std::vector<int> labels;
  for (const auto& c : sample) {
    if (!c.label) throw Error("similarity_report: unlabelled cloud");
    clouds.push_back(c.points);
    labels.push_back(*c.label);
  }
  SimilarityReport r;
  for (const auto& m : models) r.models.push_back(m->name.empty() ? m->architecture_id() : m->name);
  r.matrix = gradient_cosine_matrix(models, clouds, labels);
  return r;
}

void write_similarity(const std::filesystem::path& csv, const std::filesystem::path& png,
                      const SimilarityReport& report) {
  auto out = open_out(csv);
  out << "# used=" << report.matrix.used << " skipped=" << report.matrix.skipped << '\n';
  out << "model";
  for (const auto& m : report.models) out << ',' << csv_field(m);
  out << '\n';
  for (std::size_t i = 0; i < report.models.size(); ++i) {
    out << csv_field(report.models[i]);
    for (std::size_t j = 0; j < report.models.size(); ++j)
      out << ',' << format_real(report.matrix.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    out << '\n';
  }
  if (!png.empty()) write_png(png, heatmap_image(report.matrix.values, -1.0, 1.0));
}

SimilarityReport read_similarity_csv(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw Error("cannot read " + csv.string());
  SimilarityReport r;
  bool counted = false;
  for (std::string line; !counted && std::getline(in, line) && !line.empty() && line[0] == '#';)
    counted = std::sscanf(line.c_str(), "# used=%d skipped=%d", &r.matrix.used, &r.matrix.skipped) == 2;
  if (!counted) throw Error("read_similarity_csv: missing count line");
  const auto rows = read_csv(csv);
  if (rows.empty()) throw Error("read_similarity_csv: missing header");
  r.models.assign(rows[0].begin() + 1, rows[0].end());
  const auto n = static_cast<Eigen::Index>(r.models.size());
  if (static_cast<Eigen::Index>(rows.size()) != n + 1) throw Error("read_similarity_csv: row count mismatch");
  r.matrix.values.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& f = rows[static_cast<std::size_t>(i + 1)];
    if (static_cast<Eigen::Index>(f.size()) != n + 1) throw Error("read_similarity_csv: column count mismatch");
    for (Eigen::Index j = 0; j < n; ++j) r.matrix.values(i, j) = parse_real(f[static_cast<std::size_t>(j + 1)]);
  }
  return r;
}

double TransferMatrix::blackbox_average(std::size_t row) const {
  double sum = 0.0;
  int n = 0;
  for (std::size_t c = 0; c < cols.size(); ++c)
    // Defended columns ("model+defense") are reported but not averaged.
    if (!excluded.at(c) && cols[c].find('+') == std::string::npos) {
      sum += mean(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(c));
      ++n;
    }
  return n > 0 ? sum / n : 0.0;
}

nlohmann::json TransferMatrix::to_json() const {
  nlohmann::json j;
  j["rows"] = rows;
  j["cols"] = cols;
  j["excluded"] = excluded;
  auto mat = [](const Eigen::MatrixXd& m) {
    nlohmann::json a = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      std::vector<double> row(static_cast<std::size_t>(m.cols()));
      for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
      a.push_back(row);
    }
    return a;
  };
  j["mean"] = mat(mean);
  j["std"] = mat(std);
  return j;
}

TransferMatrix TransferMatrix::from_json(const nlohmann::json& j) {
  TransferMatrix m;
  m.rows = j.at("rows").get<std::vector<std::string>>();
  m.cols = j.at("cols").get<std::vector<std::string>>();
  m.excluded = j.at("excluded").get<std::vector<bool>>();
  auto mat = [&](const nlohmann::json& a) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(m.rows.size()), static_cast<Eigen::Index>(m.cols.size()));
    for (Eigen::Index r = 0; r < out.rows(); ++r)
      for (Eigen::Index c = 0; c < out.cols(); ++c)
        out(r, c) = a.at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(c)).get<double>();
    return out;
  };
  m.mean = mat(j.at("mean"));
  m.std = mat(j.at("std"));
  return m;
}

void write_transfer_csv(const std::filesystem::path& path, const TransferMatrix& m) {
  auto out = open_out(path);
  out << "attack";
  for (std::size_t c = 0; c < m.cols.size(); ++c) {
    const std::string name = m.cols[c] + (m.excluded[c] ? " [substitute]" : "");
    out << ',' << csv_field(name) << ',' << csv_field(name + " std");
  }
  out << ",blackbox_avg\n";
  for (std::size_t r = 0; r < m.rows.size(); ++r) {
    out << csv_field(m.rows[r]);
    for (std::size_t c = 0; c < m.cols.size(); ++c)
      out << ',' << format_real(m.mean(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c))) << ','
          << format_real(m.std(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
    out << ',' << format_real(m.blackbox_average(r)) << '\n';
  }
}

TransferMatrix read_transfer_csv(const std::filesystem::path& path) {
  const auto rows = read_csv(path);
  if (rows.empty()) throw Error("read_transfer_csv: missing header");
  const auto& h = rows[0];
  if (h.size() < 2 || (h.size() - 2) % 2 != 0) throw Error("read_transfer_csv: malformed header");
  TransferMatrix m;
  const std::string tag = " [substitute]";
  for (std::size_t c = 1; c + 1 < h.size(); c += 2) {
    std::string name = h[c];
    const bool ex = name.size() > tag.size() && name.compare(name.size() - tag.size(), tag.size(), tag) == 0;
    if (ex) name.resize(name.size() - tag.size());
    m.cols.push_back(name);
    m.excluded.push_back(ex);
  }
  const auto nc = static_cast<Eigen::Index>(m.cols.size());
  m.mean.resize(static_cast<Eigen::Index>(rows.size() - 1), nc);
  m.std.resize(m.mean.rows(), nc);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& f = rows[r];
    if (f.size() != h.size()) throw Error("read_transfer_csv: ragged row");
    m.rows.push_back(f[0]);
    for (Eigen::Index c = 0; c < nc; ++c) {
      m.mean(static_cast<Eigen::Index>(r - 1), c) = parse_real(f[static_cast<std::size_t>(1 + 2 * c)]);
      m.std(static_cast<Eigen::Index>(r - 1), c) = parse_real(f[static_cast<std::size_t>(2 + 2 * c)]);
    }
  }
  return m;
}

nlohmann::json RunManifest::to_json() const {
  return {{"config", config},
          {"seeds", seeds},
          {"checkpoint_digests", checkpoint_digests},
          {"stage_seconds", stage_seconds},
          {"version", version}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  RunManifest m;
  m.config = j.at("config");
  m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
  m.checkpoint_digests = j.at("checkpoint_digests").get<std::map<std::string, std::string>>();
  m.stage_seconds = j.value("stage_seconds", std::map<std::string, double>{});
  m.version = j.at("version").get<std::string>();
  return m;
}

std::string RunManifest::digest() const {
  const nlohmann::json core = {
      {"config", config}, {"seeds", seeds}, {"checkpoint_digests", checkpoint_digests}, {"version", version}};
  return sha256_hex(core.dump());
}

void write_manifest(const std::filesystem::path& path, const RunManifest& m) {
  auto out = open_out(path);
  out << m.to_json().dump(2) << '\n';
}

RunManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  return RunManifest::from_json(nlohmann::json::parse(in));
}

Image::Image(int w, int h, std::uint8_t fill)
    : width(w), height(h), rgb(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3, fill) {
  if (w <= 0 || h <= 0) throw Error("Image: empty size");
}

void Image::fill_rect(int x0, int y0, int x1, int y1, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  x0 = std::clamp(x0, 0, width);
  x1 = std::clamp(x1, 0, width);
  y0 = std::clamp(y0, 0, height);
  y1 = std::clamp(y1, 0, height);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      auto* p = &rgb[(static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * 3];
      p[0] = r;
      p[1] = g;
      p[2] = b;
    }
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw Error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("write_png: out of memory");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    throw Error("write_png: libpng failure on " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y)
    png_write_row(png, image.rgb.data() + static_cast<std::size_t>(y) * static_cast<std::size_t>(image.width) * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image heatmap_image(const Eigen::MatrixXd& values, double lo, double hi, int cell) {
  Image img(static_cast<int>(values.cols()) * cell, static_cast<int>(values.rows()) * cell);
  for (Eigen::Index r = 0; r < values.rows(); ++r)
    for (Eigen::Index c = 0; c < values.cols(); ++c) {
      const double u = hi > lo ? std::clamp((values(r, c) - lo) / (hi - lo), 0.0, 1.0) : 0.5;
      const auto red = static_cast<std::uint8_t>(std::lround(40 + 215 * u));
      const auto green = static_cast<std::uint8_t>(std::lround(40 + 180 * u));
      const auto blue = static_cast<std::uint8_t>(std::lround(140 * (1.0 - u) + 30));
      img.fill_rect(static_cast<int>(c) * cell, static_cast<int>(r) * cell, static_cast<int>(c + 1) * cell,
                    static_cast<int>(r + 1) * cell, red, green, blue);
    }
  return img;
}

Image bar_chart_image(const std::vector<std::vector<double>>& groups, int bar) {
  static const std::uint8_t palette[][3] = {{70, 110, 180}, {220, 120, 50}, {90, 160, 90}, {160, 80, 160}};
  const int height = 200;
  std::size_t series = 0;
  for (const auto& g : groups) series = std::max(series, g.size());
  const int group_w = static_cast<int>(series) * bar + bar;
  Image img(std::max(1, static_cast<int>(groups.size()) * group_w + bar), height + 10);
  img.fill_rect(0, height, img.width, height + 1, 0, 0, 0);
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (std::size_t s = 0; s < groups[g].size(); ++s) {
      const int x0 = bar + static_cast<int>(g) * group_w + static_cast<int>(s) * bar;
      const int h = static_cast<int>(std::lround(std::clamp(groups[g][s], 0.0, 1.0) * (height - 10)));
      const auto* col = palette[s % 4];
      img.fill_rect(x0, height - h, x0 + bar - 2, height, col[0], col[1], col[2]);
    }
  return img;
}

}  // namespace advshape
