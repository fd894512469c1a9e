#include "advshape/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "advshape/checkpoint.hpp"
#include "advshape/log.hpp"
#include "advshape/rng.hpp"

namespace advshape {
namespace {

using Var = nn::Graph::Var;

constexpr int kEdgeNeighbours = 8;
constexpr int kCentroids = 32;
constexpr int kGroupSize = 16;

std::vector<Eigen::Index> repeat_each(Eigen::Index n, Eigen::Index k) {
  std::vector<Eigen::Index> idx;
  idx.reserve(static_cast<std::size_t>(n * k));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < k; ++j) idx.push_back(i);
  return idx;
}

// Neighbour lists flattened row-major; a lone point is its own neighbour.
std::pair<std::vector<Eigen::Index>, Eigen::Index> flat_knn(const Points& pts, int k) {
  const auto nbrs = knn_indices(pts, k);
  const Eigen::Index kk = pts.rows() > 1 ? static_cast<Eigen::Index>(nbrs[0].size()) : 1;
  std::vector<Eigen::Index> flat;
  flat.reserve(static_cast<std::size_t>(pts.rows() * kk));
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    if (pts.rows() == 1) flat.push_back(0);
    else flat.insert(flat.end(), nbrs[static_cast<std::size_t>(i)].begin(), nbrs[static_cast<std::size_t>(i)].end());
  }
  return {flat, kk};
}

struct Groups {
  std::vector<Eigen::Index> centres;
  std::vector<Eigen::Index> members;
  Eigen::Index k = 0;
};

Groups set_groups(const Points& pts) {
  const Eigen::Index n = pts.rows();
  const Eigen::Index s = std::min<Eigen::Index>(kCentroids, n);
  const Eigen::Index k = std::min<Eigen::Index>(kGroupSize, n);
  // Seeding FPS from the point farthest from the centroid keeps the
  // model invariant to point order.
  const Eigen::RowVector3d mean = pts.colwise().mean();
  Eigen::Index seed_point = 0;
  for (Eigen::Index i = 1; i < n; ++i) {
    const double di = (pts.row(i) - mean).squaredNorm(), ds = (pts.row(seed_point) - mean).squaredNorm();
    if (di > ds || (di == ds && std::lexicographical_compare(pts.row(i).begin(), pts.row(i).end(),
                                                             pts.row(seed_point).begin(),
                                                             pts.row(seed_point).end())))
      seed_point = i;
  }
  const auto centres = farthest_point_sample(pts, s, seed_point);
  std::vector<Eigen::Index> members;
  members.reserve(static_cast<std::size_t>(s * k));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (auto c : centres) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    const Eigen::RowVector3d cp = pts.row(c);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Eigen::Index a, Eigen::Index b) {
      const double da = (pts.row(a) - cp).squaredNorm(), db = (pts.row(b) - cp).squaredNorm();
      return da < db || (da == db && a < b);
    });
    members.insert(members.end(), order.begin(), order.begin() + k);
  }
  return {centres, members, k};
}

}  // namespace

std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::pointnet: return "pointnet";
    case Arch::dgcnn: return "dgcnn";
    case Arch::setabs: return "setabs";
    case Arch::attention: return "attention";
    case Arch::pointconv: return "pointconv";
  }
  return "unknown";
}

Arch arch_from_string(const std::string& s) {
  for (auto a : all_archs())
    if (to_string(a) == s) return a;
  throw Error("unknown architecture '" + s + "'");
}

std::vector<Arch> all_archs() { return {Arch::pointnet, Arch::dgcnn, Arch::setabs, Arch::attention, Arch::pointconv}; }

Classifier::Classifier(Arch arch, int num_classes, std::uint64_t seed) : arch_(arch), num_classes_(num_classes) {
  if (num_classes < 2) throw Error("Classifier: need at least two classes");
  init_params(seed);
}

Classifier::Classifier(Arch arch, int num_classes, nn::ParamStore params)
    : arch_(arch), num_classes_(num_classes), params_(std::move(params)) {}

void Classifier::init_params(std::uint64_t seed) {
  auto layer = [&](const std::string& name, int in, int out) {
    params_.add(name + ".w", in, out, seed);
    params_.add_zero(name + ".b", 1, out);
  };
  int pooled = 128;
  switch (arch_) {
    case Arch::pointnet:
      layer("mlp1", 3, 32);
      layer("mlp2", 32, 64);
      layer("mlp3", 64, 128);
      break;
    case Arch::dgcnn:
      layer("edge1", 6, 48);
      layer("point1", 48, 128);
      break;
    case Arch::setabs:
      layer("local1", 3, 32);
      layer("local2", 32, 64);
      layer("group1", 67, 128);
      break;
    case Arch::attention:
      layer("embed1", 3, 32);
      params_.add("attn.q", 32, 16, seed);
      params_.add("attn.k", 32, 16, seed);
      params_.add("attn.v", 32, 32, seed);
      layer("point1", 32, 96);
      pooled = 96;
      break;
    case Arch::pointconv:
      layer("rel1", 3, 32);
      layer("point1", 35, 112);
      pooled = 112;
      break;
  }
  layer("head1", pooled, 64);
  layer("head2", 64, num_classes_);
}

Var Classifier::head(nn::Graph& g, Var pooled) const {
  return g.linear(g.silu(g.linear(pooled, params_, "head1")), params_, "head2");
}

Var Classifier::build(nn::Graph& g, Var x) const {
  const Points& pts = g.value(x);
  const Eigen::Index n = pts.rows();
  if (n < 1) throw Error("Classifier: empty cloud");
  switch (arch_) {
    case Arch::pointnet: {
      auto h = g.silu(g.linear(x, params_, "mlp1"));
      h = g.silu(g.linear(h, params_, "mlp2"));
      h = g.silu(g.linear(h, params_, "mlp3"));
      return head(g, g.max_rows(h));
    }
    case Arch::dgcnn: {
      auto [nbr, k] = flat_knn(pts, kEdgeNeighbours);
      const auto xi = g.gather_rows(x, repeat_each(n, k));
      const auto xj = g.gather_rows(x, std::move(nbr));
      auto e = g.concat_cols(xi, g.sub(xj, xi));
      e = g.silu(g.linear(e, params_, "edge1"));
      auto h = g.segment_max(e, k);
      h = g.silu(g.linear(h, params_, "point1"));
      return head(g, g.max_rows(h));
    }
    case Arch::setabs: {
      auto [centres, members, k] = set_groups(pts);
      std::vector<Eigen::Index> centre_rep;
      centre_rep.reserve(members.size());
      for (auto c : centres)
        for (Eigen::Index j = 0; j < k; ++j) centre_rep.push_back(c);
      auto local = g.sub(g.gather_rows(x, std::move(members)), g.gather_rows(x, std::move(centre_rep)));
      local = g.silu(g.linear(local, params_, "local1"));
      local = g.silu(g.linear(local, params_, "local2"));
      auto grouped = g.concat_cols(g.segment_max(local, k), g.gather_rows(x, centres));
      grouped = g.silu(g.linear(grouped, params_, "group1"));
      return head(g, g.max_rows(grouped));
    }
    case Arch::attention: {
      const auto e = g.silu(g.linear(x, params_, "embed1"));
      const auto q = g.matmul(e, g.param(params_, "attn.q"));
      const auto kk = g.matmul(e, g.param(params_, "attn.k"));
      const auto v = g.matmul(e, g.param(params_, "attn.v"));
      const auto attn = g.softmax_rows(g.scale(g.matmul_nt(q, kk), 0.25));
      auto h = g.add(e, g.matmul(attn, v));
      h = g.silu(g.linear(h, params_, "point1"));
      return head(g, g.max_rows(h));
    }
    case Arch::pointconv: {
      auto [nbr, k] = flat_knn(pts, kEdgeNeighbours);
      const auto rel = g.sub(g.gather_rows(x, std::move(nbr)), g.gather_rows(x, repeat_each(n, k)));
      auto f = g.segment_mean(g.silu(g.linear(rel, params_, "rel1")), k);
      f = g.silu(g.linear(g.concat_cols(f, x), params_, "point1"));
      return head(g, g.max_rows(f));
    }
  }
  throw Error("Classifier: unknown architecture");
}

Eigen::VectorXd Classifier::logits(const Points& points) const {
  nn::Graph g;
  const auto x = g.input(points);
  return g.value(build(g, x)).row(0).transpose();
}

std::vector<Eigen::Index> Classifier::selection(const Points& points) const {
  switch (arch_) {
    case Arch::dgcnn:
    case Arch::pointconv:
      return flat_knn(points, kEdgeNeighbours).first;
    case Arch::setabs: {
      auto g = set_groups(points);
      g.centres.insert(g.centres.end(), g.members.begin(), g.members.end());
      return g.centres;
    }
    default:
      return {};
  }
}

int Classifier::predict(const Points& points) const {
  Eigen::Index best;
  logits(points).maxCoeff(&best);
  return static_cast<int>(best);
}

PredictiveDistribution predictive(const Classifier& model, const Points& points) {
  PredictiveDistribution d;
  d.logits = model.logits(points);
  d.probs = nn::softmax(d.logits);
  return d;
}

EnsembleSpec EnsembleSpec::uniform(std::vector<ClassifierPtr> members, CombineMode mode) {
  EnsembleSpec e;
  const auto n = members.size();
  e.members = std::move(members);
  e.weights.assign(n, n > 0 ? 1.0 / static_cast<double>(n) : 0.0);
  e.mode = mode;
  return e;
}

void EnsembleSpec::validate() const {
  if (members.empty()) throw Error("ensemble has no members");
  if (weights.size() != members.size()) throw Error("ensemble weights do not match member count");
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw Error("ensemble weights must be nonnegative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw Error("ensemble weights must sum to 1");
}

EnsembleForward::EnsembleForward(const EnsembleSpec& ensemble, const Points& cloud) {
  ensemble.validate();
  if (cloud.rows() == 0) throw Error("EnsembleForward: empty cloud");
  input_ = graph_.input(cloud, true);
  for (const auto& m : ensemble.members) {
    const auto out = m->build(graph_, input_);
    outputs_.push_back(out);
    logits_.push_back(graph_.value(out).row(0).transpose());
  }
}

std::vector<int> EnsembleForward::member_predictions() const {
  std::vector<int> out;
  for (const auto& z : logits_) {
    Eigen::Index b;
    z.maxCoeff(&b);
    out.push_back(static_cast<int>(b));
  }
  return out;
}

Eigen::VectorXd fused_scores(const std::vector<Eigen::VectorXd>& member_logits, const std::vector<double>& weights,
                             CombineMode mode) {
  Eigen::VectorXd s = Eigen::VectorXd::Zero(member_logits.at(0).size());
  for (std::size_t n = 0; n < member_logits.size(); ++n)
    s += weights[n] * (mode == CombineMode::logits ? member_logits[n] : nn::softmax(member_logits[n]));
  return s;
}

double fused_loss(const std::vector<Eigen::VectorXd>& member_logits, const std::vector<double>& weights, int y,
                  CombineMode mode) {
  const Eigen::VectorXd s = fused_scores(member_logits, weights, mode);
  return nn::softmax_cross_entropy(s.transpose(), y).loss;
}

GradientField EnsembleForward::loss_and_gradient(const std::vector<double>& weights, int y, CombineMode mode) {
  if (weights.size() != outputs_.size()) throw Error("loss_and_gradient: weight count mismatch");
  const Eigen::VectorXd s = fused_scores(logits_, weights, mode);
  const auto ce = nn::softmax_cross_entropy(s.transpose(), y);
  const Eigen::VectorXd r = ce.dlogits.row(0).transpose();
  graph_.zero_grad();
  for (std::size_t n = 0; n < outputs_.size(); ++n) {
    if (weights[n] == 0.0) continue;
    Eigen::VectorXd seed;
    if (mode == CombineMode::logits) {
      seed = weights[n] * r;
    } else {
      const Eigen::VectorXd p = nn::softmax(logits_[n]);
      seed = weights[n] * (p.array() * (r.array() - p.dot(r))).matrix();
    }
    graph_.backward(outputs_[n], seed.transpose());
  }
  GradientField out;
  out.loss = ce.loss;
  out.grad = graph_.grad(input_).size() > 0 ? Points(graph_.grad(input_))
                                            : Points::Zero(graph_.value(input_).rows(), 3);
  return out;
}

GradientField loss_and_gradient(const EnsembleSpec& ensemble, const Points& cloud, int y) {
  EnsembleForward f(ensemble, cloud);
  return f.loss_and_gradient(ensemble.weights, y, ensemble.mode);
}

GradientField loss_and_gradient(const EnsembleSpec& ensemble, const PointCloud& cloud, int y) {
  return loss_and_gradient(ensemble, cloud.points, y);
}

double ensemble_loss(const EnsembleSpec& ensemble, const Points& cloud, int y) {
  ensemble.validate();
  std::vector<Eigen::VectorXd> z;
  for (const auto& m : ensemble.members) z.push_back(m->logits(cloud));
  return fused_loss(z, ensemble.weights, y, ensemble.mode);
}

int ensemble_predict(const EnsembleSpec& ensemble, const Points& cloud) {
  ensemble.validate();
  std::vector<Eigen::VectorXd> z;
  for (const auto& m : ensemble.members) z.push_back(m->logits(cloud));
  Eigen::Index b;
  fused_scores(z, ensemble.weights, ensemble.mode).maxCoeff(&b);
  return static_cast<int>(b);
}

std::vector<double> adaptive_weights(const std::vector<int>& correct_counts, int n_clouds, double kappa) {
  (void)n_clouds;
  std::vector<double> w(correct_counts.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) sum += (w[i] = static_cast<double>(correct_counts[i]) + kappa);
  if (!(sum > 0.0)) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(w.size()));
    return w;
  }
  for (auto& x : w) x /= sum;
  return w;
}

EnsembleSpec update_adaptive_weights(const EnsembleSpec& ensemble, const std::vector<Points>& clouds,
                                     const std::vector<int>& labels, double kappa_fraction) {
  ensemble.validate();
  if (clouds.empty()) throw Error("update_adaptive_weights: no clouds");
  if (clouds.size() != labels.size()) throw Error("update_adaptive_weights: label count mismatch");
  std::vector<int> correct(ensemble.size(), 0);
  for (std::size_t c = 0; c < clouds.size(); ++c)
    for (std::size_t n = 0; n < ensemble.size(); ++n)
      if (ensemble.members[n]->predict(clouds[c]) == labels[c]) ++correct[n];
  EnsembleSpec out = ensemble;
  const int n_clouds = static_cast<int>(clouds.size());
  out.weights = adaptive_weights(correct, n_clouds, kappa_fraction * n_clouds);
  return out;
}

namespace {

Points single_gradient(const Classifier& m, const Points& cloud, int y) {
  nn::Graph g;
  const auto x = g.input(cloud, true);
  const auto out = m.build(g, x);
  const auto ce = nn::softmax_cross_entropy(g.value(out), y);
  g.backward(out, ce.dlogits);
  return g.grad(x).size() > 0 ? Points(g.grad(x)) : Points::Zero(cloud.rows(), 3);
}

double cosine(const Points& a, const Points& b) {
  return (a.array() * b.array()).sum() / (a.norm() * b.norm());
}

}  // namespace

std::optional<double> gradient_cosine(const Classifier& a, const Classifier& b, const Points& cloud, int y) {
  const Points ga = single_gradient(a, cloud, y);
  const Points gb = single_gradient(b, cloud, y);
  if (ga.norm() == 0.0 || gb.norm() == 0.0) return std::nullopt;
  return cosine(ga, gb);
}

CosineMatrix gradient_cosine_matrix(const std::vector<ClassifierPtr>& models, const std::vector<Points>& clouds,
                                    const std::vector<int>& labels) {
  if (models.size() < 2) throw Error("gradient_cosine_matrix: need at least two models");
  if (clouds.size() != labels.size()) throw Error("gradient_cosine_matrix: label count mismatch");
  const auto m = static_cast<Eigen::Index>(models.size());
  CosineMatrix out;
  out.values = Eigen::MatrixXd::Zero(m, m);
  for (std::size_t c = 0; c < clouds.size(); ++c) {
    std::vector<Points> grads;
    bool zero = false;
    for (const auto& model : models) {
      grads.push_back(single_gradient(*model, clouds[c], labels[c]));
      if (grads.back().norm() == 0.0) zero = true;
    }
    if (zero) {
      ++out.skipped;
      continue;
    }
    ++out.used;
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = i + 1; j < m; ++j) {
        const double v = cosine(grads[static_cast<std::size_t>(i)], grads[static_cast<std::size_t>(j)]);
        out.values(i, j) += v;
        out.values(j, i) += v;
      }
  }
  if (out.used > 0) out.values /= static_cast<double>(out.used);
  out.values.diagonal().setOnes();
  return out;
}

double accuracy(const Classifier& model, const std::vector<PointCloud>& clouds) {
  if (clouds.empty()) return 0.0;
  int correct = 0;
  for (const auto& c : clouds)
    if (c.label && model.predict(c.points) == *c.label) ++correct;
  return static_cast<double>(correct) / static_cast<double>(clouds.size());
}

ClassifierPtr train_classifier(Arch arch, const std::vector<PointCloud>& train, const std::vector<PointCloud>& test,
                               const std::vector<std::string>& class_names, const ClassifierTrainConfig& config,
                               ClassifierTrainReport* report) {
  const int n_classes = static_cast<int>(class_names.size());
  if (n_classes < 2) throw Error("train_classifier: need at least two classes");
  if (train.empty()) throw Error("train_classifier: empty dataset");
  for (const auto& c : train)
    if (!c.label || *c.label < 0 || *c.label >= n_classes) throw Error("train_classifier: unlabeled cloud " + c.id);
  auto model = std::make_shared<Classifier>(arch, n_classes, derive_seed(config.seed, {0xC1}));
  model->class_names = class_names;
  model->name = to_string(arch) + "_s" + std::to_string(config.seed);
  nn::Adam opt(model->params(), config.lr);
  Rng rng(derive_seed(config.seed, {0xC2}));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  ClassifierTrainReport rep;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double frac = config.epochs > 1 ? static_cast<double>(epoch) / (config.epochs - 1) : 1.0;
    opt.set_lr(config.lr * std::pow(config.lr_final / config.lr, frac));
    std::shuffle(order.begin(), order.end(), rng.engine());
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch));
      auto grads = nn::zero_grads(model->params());
      for (std::size_t k = start; k < end; ++k) {
        const auto& cloud = train[order[k]];
        const int hi = std::min<int>(config.max_points, static_cast<int>(cloud.size()));
        const int lo = std::min(config.min_points, hi);
        const int count = lo + static_cast<int>(rng.index(static_cast<std::size_t>(hi - lo + 1)));
        std::vector<Eigen::Index> idx(static_cast<std::size_t>(cloud.size()));
        std::iota(idx.begin(), idx.end(), Eigen::Index{0});
        std::shuffle(idx.begin(), idx.end(), rng.engine());
        idx.resize(static_cast<std::size_t>(count));
        Points pts = gather_rows(cloud.points, idx);
        for (Eigen::Index i = 0; i < pts.rows(); ++i)
          for (int c = 0; c < 3; ++c) pts(i, c) += config.jitter * rng.normal();
        nn::Graph g(true);
        const auto x = g.input(pts);
        const auto out = model->build(g, x);
        const auto ce = nn::softmax_cross_entropy(g.value(out), *cloud.label, config.label_smoothing);
        total += ce.loss;
        g.backward(out, ce.dlogits);
        g.collect_param_grads(grads);
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (auto& gm : grads) gm *= inv;
      opt.step(model->mutable_params(), grads);
    }
    rep.epoch_loss.push_back(total / static_cast<double>(order.size()));
  }
  model->mutable_params().quantize_to_float();
  rep.test_accuracy = accuracy(*model, test.empty() ? train : test);
  rep.met_floor = rep.test_accuracy >= config.accuracy_floor;
  if (!rep.met_floor)
    log_warn("train_classifier: " + model->name + " accuracy " + std::to_string(rep.test_accuracy) +
             " below floor " + std::to_string(config.accuracy_floor));
  if (report != nullptr) *report = rep;
  return model;
}

void save_classifier(const std::filesystem::path& path, const Classifier& model, std::uint64_t training_seed) {
  nlohmann::json h;
  h["kind"] = "classifier";
  h["architecture"] = model.architecture_id();
  h["num_classes"] = model.num_classes();
  h["classes"] = model.class_names;
  h["name"] = model.name;
  h["training_seed"] = training_seed;
  save_checkpoint(path, h, model.params());
}

ClassifierPtr load_classifier(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  if (ck.header.value("kind", "") != "classifier") throw Error(path.string() + ": not a classifier checkpoint");
  auto model = std::make_shared<Classifier>(arch_from_string(ck.header.at("architecture").get<std::string>()),
                                            ck.header.at("num_classes").get<int>(), std::move(ck.params));
  model->class_names = ck.header.value("classes", std::vector<std::string>{});
  model->name = ck.header.value("name", model->architecture_id());
  return model;
}

}  // namespace advshape
