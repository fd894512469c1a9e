#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advshape/attack.hpp"
#include "advshape/classifier.hpp"
#include "advshape/dataset.hpp"
#include "advshape/defense.hpp"

namespace advshape {

/// Seed of the defense draw for the i-th example of an evaluated set.
std::uint64_t defense_seed(const DefenseConfig& defense, std::size_t index);

/// Fraction of labelled clouds whose top-1 prediction (after the optional defense) differs from the label.
double eval_asr(const std::vector<PointCloud>& adversarial, const Classifier& target,
                const DefenseConfig* defense = nullptr);

struct QualityReport {
  DistanceReport mean;
  int pairs = 0;
  int skipped = 0;
};
/// Mean distances over id-matched pairs; unmatched or size-mismatched items are counted as skipped.
QualityReport eval_quality(const std::vector<PointCloud>& benign, const std::vector<PointCloud>& adversarial);
/// Chamfer distance in the reporting unit (x 1e-2).
inline double chamfer_report_units(double cd) { return cd * 100.0; }

struct TimingReport {
  /// Mean wall-clock seconds per view run, keyed by sampler name.
  std::map<std::string, double> seconds_per_view;
  /// Wall-clock seconds divided by the number of successful views; absent when none succeeded.
  std::map<std::string, std::optional<double>> seconds_per_example;
};
struct TimedRun {
  SamplerKind sampler = SamplerKind::ddpm;
  AttackResult result;
};
TimingReport eval_timing(const std::vector<TimedRun>& runs);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  double min = 0.0;
  double max = 0.0;
  int n = 0;
};
/// Population standard deviation; the sum runs in input order.
MeanStd mean_std(const std::vector<double>& values);

struct LongTailRow {
  std::string cls;
  int data_count = 0;
  int success_count = 0;
  double data_share = 0.0;
  double success_share = 0.0;
};
/// Per-class training-data share against the share of successful adversarial examples.
std::vector<LongTailRow> long_tail_table(const Dataset& dataset, const std::vector<AttackResult>& results);
std::vector<LongTailRow> long_tail_table(const Dataset& dataset, const std::vector<PointCloud>& successful);
void write_long_tail(const std::filesystem::path& csv, const std::filesystem::path& png,
                     const std::vector<LongTailRow>& rows);
std::vector<LongTailRow> read_long_tail_csv(const std::filesystem::path& csv);

struct SimilarityReport {
  std::vector<std::string> models;
  CosineMatrix matrix;
};
SimilarityReport similarity_report(const std::vector<ClassifierPtr>& models, const std::vector<PointCloud>& sample);
void write_similarity(const std::filesystem::path& csv, const std::filesystem::path& png,
                      const SimilarityReport& report);
SimilarityReport read_similarity_csv(const std::filesystem::path& csv);

/// Rows are attack configurations, columns target models (optionally defended).
struct TransferMatrix {
  std::vector<std::string> rows;
  std::vector<std::string> cols;
  /// Columns that are ensemble members are reported but left out of the black-box average.
  std::vector<bool> excluded;
  Eigen::MatrixXd mean;
  Eigen::MatrixXd std;

  [[nodiscard]] double blackbox_average(std::size_t row) const;
  [[nodiscard]] nlohmann::json to_json() const;
  static TransferMatrix from_json(const nlohmann::json& j);
};
void write_transfer_csv(const std::filesystem::path& path, const TransferMatrix& m);
TransferMatrix read_transfer_csv(const std::filesystem::path& path);

struct RunManifest {
  nlohmann::json config;
  std::map<std::string, std::uint64_t> seeds;
  std::map<std::string, std::string> checkpoint_digests;
  std::map<std::string, double> stage_seconds;
  std::string version;

  [[nodiscard]] nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  /// SHA-256 of the reproducibility-relevant fields (config, seeds, digests, version).
  [[nodiscard]] std::string digest() const;
};
void write_manifest(const std::filesystem::path& path, const RunManifest& m);
RunManifest read_manifest(const std::filesystem::path& path);

/// Version string compiled into the library.
std::string software_version();

/// Exact decimal rendering used in every emitted table (round-trips through strtod).
std::string format_real(double v);

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image(int w, int h, std::uint8_t fill = 255);
  void fill_rect(int x0, int y0, int x1, int y1, std::uint8_t r, std::uint8_t g, std::uint8_t b);
};
void write_png(const std::filesystem::path& path, const Image& image);
/// Row-major matrix rendered with a blue-yellow ramp between `lo` and `hi`.
Image heatmap_image(const Eigen::MatrixXd& values, double lo, double hi, int cell = 32);
/// Grouped bar chart: one group per row, one bar per series, values in [0, 1].
Image bar_chart_image(const std::vector<std::vector<double>>& groups, int bar = 18);

}  // namespace advshape
