#include "advshape/nn.hpp"

#include <cmath>
#include <stdexcept>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "advshape/point_cloud.hpp"
#include "advshape/rng.hpp"

namespace advshape::nn {
namespace {

// Tape temporaries are often a few hundred KiB; keep them on the heap instead of
// a fresh mmap/munmap pair per allocation.
[[maybe_unused]] const bool g_allocator_tuned = [] {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
  return true;
}();

}  // namespace

std::size_t ParamStore::add(const std::string& name, Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {params_.size()}));
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Mat m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.uniform(-limit, limit);
  params_.push_back({name, std::move(m)});
  return params_.size() - 1;
}

std::size_t ParamStore::add_zero(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  params_.push_back({name, Mat::Zero(rows, cols)});
  return params_.size() - 1;
}

std::size_t ParamStore::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  throw Error("no parameter named '" + name + "'");
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

void ParamStore::quantize_to_float() {
  for (auto& p : params_) p.value = p.value.cast<float>().cast<double>();
}

ParamGrads zero_grads(const ParamStore& store) {
  ParamGrads g;
  g.reserve(store.size());
  for (const auto& p : store.all()) g.push_back(Mat::Zero(p.value.rows(), p.value.cols()));
  return g;
}

Graph::Var Graph::push(Mat value, bool requires_grad, std::function<void(Graph&, const Mat&)> back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Graph::Var Graph::input(Mat value, bool requires_grad) { return push(std::move(value), requires_grad, nullptr); }

Graph::Var Graph::param(const ParamStore& store, std::size_t index) {
  Node n;
  n.ref = &store[index].value;
  n.requires_grad = param_grads_;
  n.param_index = static_cast<int>(index);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

const Mat& Graph::value(Var v) const {
  const Node& n = node(v);
  return n.ref != nullptr ? *n.ref : n.value;
}

void Graph::accumulate(Var v, const Mat& g) { accumulate_expr(v, g); }

template <typename Expr>
void Graph::accumulate_expr(Var v, const Expr& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (n.grad.size() == 0)
    n.grad = g;
  else
    n.grad += g;
}

void Graph::backward(Var out, const Mat& seed) {
  const Node& o = node(out);
  if (!o.requires_grad) return;
  const Mat& ov = value(out);
  if (seed.rows() != ov.rows() || seed.cols() != ov.cols()) throw Error("Graph::backward: seed shape mismatch");
  // Intermediate gradients are rebuilt on every call; only leaves accumulate.
  for (auto& n : nodes_)
    if (n.back) n.grad.resize(0, 0);
  accumulate(out, seed);
  for (int i = out.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || !n.back || n.grad.size() == 0) continue;
    n.back(*this, n.grad);
  }
}

void Graph::zero_grad() {
  for (auto& n : nodes_) n.grad.resize(0, 0);
}

void Graph::collect_param_grads(ParamGrads& grads) const {
  for (const auto& n : nodes_)
    if (n.param_index >= 0 && n.grad.size() > 0) grads[static_cast<std::size_t>(n.param_index)] += n.grad;
}

Graph::Var Graph::matmul(Var a, Var b) {
  const Mat& av = value(a);
  const Mat& bv = value(b);
  if (av.cols() != bv.rows()) throw Error("matmul: inner dimension mismatch");
  Mat out(av.rows(), bv.cols());
  out.noalias() = av * bv;
  return push(std::move(out), requires_grad(a) || requires_grad(b), [a, b](Graph& g, const Mat& d) {
    if (g.requires_grad(a)) g.accumulate_expr(a, d * g.value(b).transpose());
    if (g.requires_grad(b)) g.accumulate_expr(b, g.value(a).transpose() * d);
  });
}

Graph::Var Graph::matmul_nt(Var a, Var b) {
  const Mat& av = value(a);
  const Mat& bv = value(b);
  if (av.cols() != bv.cols()) throw Error("matmul_nt: dimension mismatch");
  Mat out(av.rows(), bv.rows());
  out.noalias() = av * bv.transpose();
  return push(std::move(out), requires_grad(a) || requires_grad(b), [a, b](Graph& g, const Mat& d) {
    if (g.requires_grad(a)) g.accumulate_expr(a, d * g.value(b));
    if (g.requires_grad(b)) g.accumulate_expr(b, d.transpose() * g.value(a));
  });
}

Graph::Var Graph::add_bias(Var a, Var bias) {
  const Mat& av = value(a);
  const Mat& bv = value(bias);
  if (bv.rows() != 1 || bv.cols() != av.cols()) throw Error("add_bias: bias must be 1 x cols");
  Mat out = av.rowwise() + bv.row(0);
  return push(std::move(out), requires_grad(a) || requires_grad(bias), [a, bias](Graph& g, const Mat& d) {
    g.accumulate(a, d);
    if (g.requires_grad(bias)) g.accumulate_expr(bias, d.colwise().sum());
  });
}

Graph::Var Graph::add(Var a, Var b) {
  if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) throw Error("add: shape mismatch");
  Mat out = value(a) + value(b);
  return push(std::move(out), requires_grad(a) || requires_grad(b), [a, b](Graph& g, const Mat& d) {
    g.accumulate(a, d);
    g.accumulate(b, d);
  });
}

Graph::Var Graph::sub(Var a, Var b) {
  if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) throw Error("sub: shape mismatch");
  Mat out = value(a) - value(b);
  return push(std::move(out), requires_grad(a) || requires_grad(b), [a, b](Graph& g, const Mat& d) {
    g.accumulate(a, d);
    if (g.requires_grad(b)) g.accumulate_expr(b, -d);
  });
}

Graph::Var Graph::mul(Var a, Var b) {
  if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) throw Error("mul: shape mismatch");
  Mat out = value(a).cwiseProduct(value(b));
  return push(std::move(out), requires_grad(a) || requires_grad(b), [a, b](Graph& g, const Mat& d) {
    if (g.requires_grad(a)) g.accumulate_expr(a, d.cwiseProduct(g.value(b)));
    if (g.requires_grad(b)) g.accumulate_expr(b, d.cwiseProduct(g.value(a)));
  });
}

Graph::Var Graph::scale(Var a, double s) {
  Mat out = value(a) * s;
  return push(std::move(out), requires_grad(a), [a, s](Graph& g, const Mat& d) { g.accumulate_expr(a, d * s); });
}

Graph::Var Graph::relu(Var a) {
  Mat out = value(a).cwiseMax(0.0);
  return push(std::move(out), requires_grad(a), [a](Graph& g, const Mat& d) {
    g.accumulate_expr(a, (g.value(a).array() > 0.0).select(d, 0.0));
  });
}

Graph::Var Graph::silu(Var a) {
  const Mat& x = value(a);
  Mat sig = (1.0 + (-x.array()).exp()).inverse().matrix();
  Mat out = x.cwiseProduct(sig);
  return push(std::move(out), requires_grad(a), [a, sig = std::move(sig)](Graph& g, const Mat& d) {
    const auto& xv = g.value(a).array();
    g.accumulate_expr(a, (d.array() * (sig.array() * (1.0 + xv * (1.0 - sig.array())))).matrix());
  });
}

Graph::Var Graph::concat_cols(Var a, Var b) {
  const Mat& av = value(a);
  const Mat& bv = value(b);
  if (av.rows() != bv.rows()) throw Error("concat_cols: row mismatch");
  Mat out(av.rows(), av.cols() + bv.cols());
  out << av, bv;
  const Eigen::Index ca = av.cols(), cb = bv.cols();
  return push(std::move(out), requires_grad(a) || requires_grad(b), [a, b, ca, cb](Graph& g, const Mat& d) {
    if (g.requires_grad(a)) g.accumulate_expr(a, d.leftCols(ca));
    if (g.requires_grad(b)) g.accumulate_expr(b, d.rightCols(cb));
  });
}

Graph::Var Graph::broadcast_rows(Var row, Eigen::Index n) {
  const Mat& rv = value(row);
  if (rv.rows() != 1) throw Error("broadcast_rows: expected a single row");
  Mat out = rv.replicate(n, 1);
  return push(std::move(out), requires_grad(row),
              [row](Graph& g, const Mat& d) { g.accumulate_expr(row, d.colwise().sum()); });
}

Graph::Var Graph::max_rows(Var a) {
  const Mat& av = value(a);
  if (av.rows() == 0) throw Error("max_rows: empty input");
  Mat out(1, av.cols());
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(av.cols()));
  for (Eigen::Index c = 0; c < av.cols(); ++c) {
    Eigen::Index r;
    out(0, c) = av.col(c).maxCoeff(&r);
    arg[static_cast<std::size_t>(c)] = r;
  }
  const Eigen::Index rows = av.rows();
  return push(std::move(out), requires_grad(a), [a, rows, arg = std::move(arg)](Graph& g, const Mat& d) {
    Mat ga = Mat::Zero(rows, d.cols());
    for (Eigen::Index c = 0; c < d.cols(); ++c) ga(arg[static_cast<std::size_t>(c)], c) = d(0, c);
    g.accumulate(a, ga);
  });
}

Graph::Var Graph::mean_rows(Var a) {
  const Mat& av = value(a);
  if (av.rows() == 0) throw Error("mean_rows: empty input");
  Mat out = av.colwise().mean();
  const Eigen::Index rows = av.rows();
  return push(std::move(out), requires_grad(a), [a, rows](Graph& g, const Mat& d) {
    g.accumulate_expr(a, d.replicate(rows, 1) / static_cast<double>(rows));
  });
}

Graph::Var Graph::gather_rows(Var a, std::vector<Eigen::Index> idx) {
  const Mat& av = value(a);
  Mat out(static_cast<Eigen::Index>(idx.size()), av.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = av.row(idx[i]);
  const Eigen::Index rows = av.rows();
  return push(std::move(out), requires_grad(a), [a, rows, idx = std::move(idx)](Graph& g, const Mat& d) {
    Mat ga = Mat::Zero(rows, d.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += d.row(static_cast<Eigen::Index>(i));
    g.accumulate(a, ga);
  });
}

Graph::Var Graph::segment_max(Var a, Eigen::Index group) {
  const Mat& av = value(a);
  if (group < 1 || av.rows() % group != 0) throw Error("segment_max: rows not divisible by group size");
  const Eigen::Index n = av.rows() / group;
  Mat out(n, av.cols());
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(n * av.cols()));
  for (Eigen::Index c = 0; c < av.cols(); ++c)
    for (Eigen::Index s = 0; s < n; ++s) {
      Eigen::Index r;
      out(s, c) = av.col(c).segment(s * group, group).maxCoeff(&r);
      arg[static_cast<std::size_t>(c * n + s)] = s * group + r;
    }
  const Eigen::Index rows = av.rows();
  return push(std::move(out), requires_grad(a), [a, rows, n, arg = std::move(arg)](Graph& g, const Mat& d) {
    Mat ga = Mat::Zero(rows, d.cols());
    for (Eigen::Index c = 0; c < d.cols(); ++c)
      for (Eigen::Index s = 0; s < n; ++s) ga(arg[static_cast<std::size_t>(c * n + s)], c) += d(s, c);
    g.accumulate(a, ga);
  });
}

Graph::Var Graph::segment_mean(Var a, Eigen::Index group) {
  const Mat& av = value(a);
  if (group < 1 || av.rows() % group != 0) throw Error("segment_mean: rows not divisible by group size");
  const Eigen::Index n = av.rows() / group;
  Mat out(n, av.cols());
  for (Eigen::Index s = 0; s < n; ++s) out.row(s) = av.middleRows(s * group, group).colwise().mean();
  return push(std::move(out), requires_grad(a), [a, group, n](Graph& g, const Mat& d) {
    Mat ga(n * group, d.cols());
    for (Eigen::Index s = 0; s < n; ++s) ga.middleRows(s * group, group) = d.row(s).replicate(group, 1) / static_cast<double>(group);
    g.accumulate(a, ga);
  });
}

Graph::Var Graph::softmax_rows(Var a) {
  const Mat& av = value(a);
  Mat out(av.rows(), av.cols());
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    const double m = av.row(r).maxCoeff();
    out.row(r) = (av.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  const Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), requires_grad(a), [a, self](Graph& g, const Mat& d) {
    const Mat& s = g.value(self);
    const Eigen::VectorXd dot = d.cwiseProduct(s).rowwise().sum();
    g.accumulate_expr(a, (s.array() * (d.colwise() - dot).array()).matrix());
  });
}

Graph::Var Graph::linear(Var x, const ParamStore& store, const std::string& prefix) {
  return add_bias(matmul(x, param(store, prefix + ".w")), param(store, prefix + ".b"));
}

Adam::Adam(const ParamStore& store, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(zero_grads(store)), v_(zero_grads(store)) {}

void Adam::step(ParamStore& store, const ParamGrads& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < store.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseProduct(grads[i]);
    store[i].value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  const double m = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - m).exp();
  return e / e.sum();
}

CrossEntropy softmax_cross_entropy(const Mat& logits, int label, double label_smoothing) {
  if (logits.rows() != 1) throw Error("softmax_cross_entropy: expected 1 x C logits");
  const Eigen::Index c = logits.cols();
  if (label < 0 || label >= c) throw Error("softmax_cross_entropy: label out of range");
  const Eigen::VectorXd z = logits.row(0).transpose();
  const double m = z.maxCoeff();
  const double lse = m + std::log((z.array() - m).exp().sum());
  Eigen::VectorXd target = Eigen::VectorXd::Constant(c, label_smoothing / static_cast<double>(c));
  target[label] += 1.0 - label_smoothing;
  const Eigen::VectorXd logp = z.array() - lse;
  CrossEntropy ce;
  ce.loss = -(target.array() * logp.array()).sum();
  ce.dlogits = (logp.array().exp() - target.array()).matrix().transpose();
  return ce;
}

}  // namespace advshape::nn
