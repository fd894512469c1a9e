#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "advshape/nn.hpp"
#include "advshape/point_cloud.hpp"

namespace advshape {

/// Aggregation styles of the classifier family.
///   pointnet  - shared point MLP, global max-pool
///   dgcnn     - k-NN edge features [x_i, x_j - x_i], max over neighbours
///   setabs    - farthest-point centroids, local PointNet on k-NN groups
///   attention - single-head self-attention over point embeddings
///   pointconv - mean-aggregated local relative-position features
enum class Arch { pointnet, dgcnn, setabs, attention, pointconv };

std::string to_string(Arch arch);
Arch arch_from_string(const std::string& s);
std::vector<Arch> all_archs();

class Classifier {
 public:
  Classifier(Arch arch, int num_classes, std::uint64_t seed);
  Classifier(Arch arch, int num_classes, nn::ParamStore params);

  /// Appends the forward pass to `graph`; returns a 1 x C logit node.
  nn::Graph::Var build(nn::Graph& graph, nn::Graph::Var points) const;
  [[nodiscard]] Eigen::VectorXd logits(const Points& points) const;
  [[nodiscard]] int predict(const Points& points) const;
  /// Index sets the forward pass selects (neighbour lists, centroids, groups);
  /// empty for architectures without discrete selection. The logits are
  /// smooth in the points wherever this stays constant.
  [[nodiscard]] std::vector<Eigen::Index> selection(const Points& points) const;

  [[nodiscard]] Arch arch() const { return arch_; }
  [[nodiscard]] std::string architecture_id() const { return to_string(arch_); }
  [[nodiscard]] int num_classes() const { return num_classes_; }
  [[nodiscard]] const nn::ParamStore& params() const { return params_; }
  nn::ParamStore& mutable_params() { return params_; }

  std::vector<std::string> class_names;
  std::string name;

 private:
  void init_params(std::uint64_t seed);
  nn::Graph::Var head(nn::Graph& g, nn::Graph::Var pooled) const;

  Arch arch_;
  int num_classes_;
  nn::ParamStore params_;
};

using ClassifierPtr = std::shared_ptr<const Classifier>;

struct PredictiveDistribution {
  Eigen::VectorXd logits;
  Eigen::VectorXd probs;
};
PredictiveDistribution predictive(const Classifier& model, const Points& points);

/// How member outputs are fused inside the ensemble softmax.
enum class CombineMode { logits, probs };

struct EnsembleSpec {
  std::vector<ClassifierPtr> members;
  std::vector<double> weights;
  CombineMode mode = CombineMode::logits;

  static EnsembleSpec uniform(std::vector<ClassifierPtr> members, CombineMode mode = CombineMode::logits);
  void validate() const;
  [[nodiscard]] std::size_t size() const { return members.size(); }
};

struct GradientField {
  Points grad;
  double loss = 0.0;
};

/// Forward passes of every member on one cloud, kept on a single tape so the
/// fused loss can be differentiated for any weights chosen afterwards.
class EnsembleForward {
 public:
  EnsembleForward(const EnsembleSpec& ensemble, const Points& cloud);

  [[nodiscard]] const std::vector<Eigen::VectorXd>& member_logits() const { return logits_; }
  [[nodiscard]] std::vector<int> member_predictions() const;
  /// Fused loss -log softmax(sum_n w_n s_n)[y] and its gradient w.r.t. the points.
  GradientField loss_and_gradient(const std::vector<double>& weights, int y, CombineMode mode);

 private:
  nn::Graph graph_;
  nn::Graph::Var input_;
  std::vector<nn::Graph::Var> outputs_;
  std::vector<Eigen::VectorXd> logits_;
};

/// Fused ensemble scores (logits mode: the weighted logit sum; probs mode: the
/// weighted probability sum) before the final softmax.
Eigen::VectorXd fused_scores(const std::vector<Eigen::VectorXd>& member_logits, const std::vector<double>& weights,
                             CombineMode mode);
double fused_loss(const std::vector<Eigen::VectorXd>& member_logits, const std::vector<double>& weights, int y,
                  CombineMode mode);

GradientField loss_and_gradient(const EnsembleSpec& ensemble, const PointCloud& cloud, int y);
GradientField loss_and_gradient(const EnsembleSpec& ensemble, const Points& cloud, int y);
double ensemble_loss(const EnsembleSpec& ensemble, const Points& cloud, int y);
int ensemble_predict(const EnsembleSpec& ensemble, const Points& cloud);

/// w_n proportional to (correct_n + kappa), kappa = kappa_fraction * n_clouds.
EnsembleSpec update_adaptive_weights(const EnsembleSpec& ensemble, const std::vector<Points>& clouds,
                                     const std::vector<int>& labels, double kappa_fraction = 0.05);
std::vector<double> adaptive_weights(const std::vector<int>& correct_counts, int n_clouds, double kappa);

struct CosineMatrix {
  Eigen::MatrixXd values;
  int skipped = 0;
  int used = 0;
};
/// Mean pairwise cosine similarity between per-model input gradients.
CosineMatrix gradient_cosine_matrix(const std::vector<ClassifierPtr>& models, const std::vector<Points>& clouds,
                                    const std::vector<int>& labels);
/// Per-cloud cosine between two models' gradients; nullopt when either is zero.
std::optional<double> gradient_cosine(const Classifier& a, const Classifier& b, const Points& cloud, int y);

struct ClassifierTrainConfig {
  int epochs = 12;
  int batch = 8;
  double lr = 2e-3;
  double lr_final = 2e-4;
  double label_smoothing = 0.1;
  int min_points = 128;
  int max_points = 384;
  double jitter = 0.005;
  std::uint64_t seed = 1;
  double accuracy_floor = 0.85;
};

struct ClassifierTrainReport {
  double test_accuracy = 0.0;
  std::vector<double> epoch_loss;
  bool met_floor = false;
};

ClassifierPtr train_classifier(Arch arch, const std::vector<PointCloud>& train, const std::vector<PointCloud>& test,
                               const std::vector<std::string>& class_names, const ClassifierTrainConfig& config,
                               ClassifierTrainReport* report = nullptr);
double accuracy(const Classifier& model, const std::vector<PointCloud>& clouds);

void save_classifier(const std::filesystem::path& path, const Classifier& model, std::uint64_t training_seed);
ClassifierPtr load_classifier(const std::filesystem::path& path);

}  // namespace advshape
