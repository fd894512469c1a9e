#include <functional>

#include "advshape/nn.hpp"
#include "helpers.hpp"

using namespace advshape;
using nn::Graph;
using nn::Mat;

namespace {

using Op = std::function<Graph::Var(Graph&, Graph::Var)>;

Mat random_mat(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng(seed);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
  return m;
}

// Max relative error of the tape gradient of sum(W .* op(x)) against central differences.
double fd_error(const Op& op, const Mat& x0) {
  Graph probe;
  const Mat shape = probe.value(op(probe, probe.input(x0)));
  const Mat w = random_mat(shape.rows(), shape.cols(), 99);
  auto value = [&](const Mat& x) {
    Graph g;
    return (g.value(op(g, g.input(x))).array() * w.array()).sum();
  };
  Graph g;
  auto in = g.input(x0, true);
  g.backward(op(g, in), w);
  const Mat analytic = g.grad(in);
  double worst = 0.0;
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    Mat xp = x0, xm = x0;
    xp.data()[i] += h;
    xm.data()[i] -= h;
    const double numeric = (value(xp) - value(xm)) / (2 * h);
    worst = std::max(worst, std::abs(numeric - analytic.data()[i]) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace

TEST_SUITE("nn") {
  TEST_CASE("elementwise and reduction ops have exact gradients") {
    const Mat x = random_mat(6, 4, 1);
    const Mat b = random_mat(4, 3, 2);
    const Mat row = random_mat(1, 4, 3);
    std::vector<std::pair<const char*, Op>> ops{
        {"matmul", [&](Graph& g, Graph::Var v) { return g.matmul(v, g.input(b)); }},
        {"matmul_nt", [&](Graph& g, Graph::Var v) { return g.matmul_nt(v, v); }},
        {"add_bias", [&](Graph& g, Graph::Var v) { return g.add_bias(v, g.input(row)); }},
        {"mul", [&](Graph& g, Graph::Var v) { return g.mul(v, g.scale(v, 0.5)); }},
        {"sub", [&](Graph& g, Graph::Var v) { return g.sub(g.relu(v), v); }},
        {"silu", [&](Graph& g, Graph::Var v) { return g.silu(v); }},
        {"concat", [&](Graph& g, Graph::Var v) { return g.concat_cols(v, g.scale(v, 2.0)); }},
        {"max_rows", [&](Graph& g, Graph::Var v) { return g.max_rows(v); }},
        {"mean_rows", [&](Graph& g, Graph::Var v) { return g.mean_rows(v); }},
        {"broadcast", [&](Graph& g, Graph::Var v) { return g.broadcast_rows(g.mean_rows(v), 5); }},
        {"gather", [&](Graph& g, Graph::Var v) { return g.gather_rows(v, {0, 3, 3, 5}); }},
        {"segment_max", [&](Graph& g, Graph::Var v) { return g.segment_max(v, 3); }},
        {"segment_mean", [&](Graph& g, Graph::Var v) { return g.segment_mean(v, 2); }},
        {"softmax", [&](Graph& g, Graph::Var v) { return g.softmax_rows(v); }},
    };
    for (const auto& [name, op] : ops) {
      CAPTURE(name);
      CHECK(fd_error(op, x) < 1e-6);
    }
  }

  TEST_CASE("softmax cross-entropy matches the closed form") {
    Mat logits(1, 3);
    logits << 1.0, -2.0, 0.5;
    const auto ce = nn::softmax_cross_entropy(logits, 2);
    const double z = std::exp(1.0) + std::exp(-2.0) + std::exp(0.5);
    CHECK(ce.loss == doctest::Approx(-std::log(std::exp(0.5) / z)).epsilon(1e-12));
    CHECK(ce.dlogits.sum() == doctest::Approx(0.0).epsilon(1e-12));
  }

  TEST_CASE("softmax stays normalized at extreme logits") {
    Eigen::VectorXd l(4);
    l << 50.0, -50.0, 49.0, 0.0;
    const auto p = nn::softmax(l);
    CHECK(std::abs(p.sum() - 1.0) < 1e-9);
    CHECK(p.allFinite());
  }

  TEST_CASE("parameter gradients flow when enabled") {
    nn::ParamStore store;
    store.add("fc.w", 4, 2, 5);
    store.add_zero("fc.b", 1, 2);
    Graph g(true);
    auto out = g.linear(g.input(random_mat(3, 4, 6)), store, "fc");
    g.backward(out, Mat::Ones(3, 2));
    auto grads = nn::zero_grads(store);
    g.collect_param_grads(grads);
    CHECK(grads[1](0, 0) == doctest::Approx(3.0));
    CHECK(grads[0].norm() > 0.0);
  }

  TEST_CASE("adam moves parameters against the gradient") {
    nn::ParamStore store;
    store.add_zero("p", 1, 1);
    nn::Adam opt(store, 0.1);
    nn::ParamGrads g{Mat::Constant(1, 1, 2.0)};
    opt.step(store, g);
    CHECK(store[0].value(0, 0) == doctest::Approx(-0.1).epsilon(1e-6));
  }
}
