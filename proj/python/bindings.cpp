#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>

#include "advshape/attack.hpp"
#include "advshape/dataset.hpp"
#include "advshape/defense.hpp"
#include "advshape/eval.hpp"
#include "advshape/experiment.hpp"
#include "advshape/rng.hpp"

namespace py = pybind11;
using namespace advshape;

namespace {

using RowPoints = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

Points to_points(const Eigen::Ref<const RowPoints>& p) { return Points(p); }
RowPoints from_points(const Points& p) { return RowPoints(p); }

struct PyDenoiser {
  LoadedDenoiser loaded;
};

SamplerConfig sampler_config(const std::string& kind, int ddim_steps, std::uint64_t seed) {
  SamplerConfig s;
  s.kind = sampler_kind_from_string(kind);
  s.ddim_steps = ddim_steps;
  s.seed = seed;
  return s;
}

}  // namespace

PYBIND11_MODULE(_advshape, m) {
  m.doc() = "advshape core bindings; point arrays are (n, 3) float64";
  m.attr("__version__") = software_version();

  py::register_exception<Error>(m, "Error", PyExc_ValueError);

  m.def("chamfer", [](const Eigen::Ref<const RowPoints>& a, const Eigen::Ref<const RowPoints>& b) {
    return chamfer(to_points(a), to_points(b));
  });
  m.def("hausdorff", [](const Eigen::Ref<const RowPoints>& a, const Eigen::Ref<const RowPoints>& b) {
    return hausdorff(to_points(a), to_points(b));
  });
  m.def("mse", [](const Eigen::Ref<const RowPoints>& a, const Eigen::Ref<const RowPoints>& b) {
    return mse(to_points(a), to_points(b));
  });
  m.def(
      "linf_clip",
      [](const Eigen::Ref<const RowPoints>& guided, const Eigen::Ref<const RowPoints>& ref, double eps) {
        return from_points(linf_clip(to_points(guided), to_points(ref), eps));
      },
      py::arg("guided"), py::arg("reference"), py::arg("eps") = kDefaultEps);
  m.def(
      "farthest_point_sample",
      [](const Eigen::Ref<const RowPoints>& p, Eigen::Index k, Eigen::Index start) {
        return farthest_point_sample(to_points(p), k, start);
      },
      py::arg("points"), py::arg("k"), py::arg("start") = 0);
  m.def("normalize", [](const Eigen::Ref<const RowPoints>& p) {
    return from_points(normalize(PointCloud(to_points(p))).points);
  });
  m.def(
      "partial_shape",
      [](const Eigen::Ref<const RowPoints>& p, int view, int k_p, int n_views, std::uint64_t seed) {
        return from_points(make_partial_shape(PointCloud(to_points(p)), view, k_p, n_views, seed).points());
      },
      py::arg("points"), py::arg("view"), py::arg("k_p") = 64, py::arg("n_views") = kDefaultViews,
      py::arg("seed") = 0);

  m.def("synthetic_classes", &synthetic_classes);
  m.def(
      "sample_shape",
      [](int category, int points, std::uint64_t seed, double variation) {
        Rng rng(seed);
        return from_points(sample_shape(category, points, rng, variation).points);
      },
      py::arg("category"), py::arg("points") = 512, py::arg("seed") = 0, py::arg("variation") = 2.5);

  m.def(
      "srs_defense",
      [](const Eigen::Ref<const RowPoints>& p, double ratio, std::uint64_t seed) {
        DefenseConfig d;
        d.srs_drop_ratio = ratio;
        d.validate();
        return from_points(srs_defense(PointCloud(to_points(p)), d, seed).points);
      },
      py::arg("points"), py::arg("drop_ratio") = 0.5, py::arg("seed") = 0);
  m.def(
      "sor_defense",
      [](const Eigen::Ref<const RowPoints>& p, int k, double alpha) {
        DefenseConfig d;
        d.kind = DefenseKind::sor;
        d.sor_k = k;
        d.sor_alpha = alpha;
        d.validate();
        return from_points(sor_defense(PointCloud(to_points(p)), d).points);
      },
      py::arg("points"), py::arg("k") = 2, py::arg("alpha") = 1.1);

  py::class_<Classifier, std::shared_ptr<Classifier>>(m, "Classifier")
      .def(py::init([](const std::string& arch, int num_classes, std::uint64_t seed) {
             return std::make_shared<Classifier>(arch_from_string(arch), num_classes, seed);
           }),
           py::arg("arch"), py::arg("num_classes"), py::arg("seed") = 1)
      .def_static("load",
                  [](const std::filesystem::path& path) { return std::make_shared<Classifier>(*load_classifier(path)); })
      .def("save", [](const Classifier& c, const std::filesystem::path& path,
                      std::uint64_t seed) { save_classifier(path, c, seed); },
           py::arg("path"), py::arg("training_seed") = 0)
      .def("logits", [](const Classifier& c, const Eigen::Ref<const RowPoints>& p) { return c.logits(to_points(p)); })
      .def("predict", [](const Classifier& c, const Eigen::Ref<const RowPoints>& p) { return c.predict(to_points(p)); })
      .def("loss_and_gradient",
           [](const std::shared_ptr<Classifier>& c, const Eigen::Ref<const RowPoints>& p, int y) {
             const auto g = loss_and_gradient(EnsembleSpec::uniform({c}), to_points(p), y);
             return py::make_tuple(g.loss, from_points(g.grad));
           })
      .def_property_readonly("arch", &Classifier::architecture_id)
      .def_property_readonly("num_classes", &Classifier::num_classes)
      .def_readwrite("name", &Classifier::name)
      .def_readwrite("class_names", &Classifier::class_names);

  py::class_<PyDenoiser>(m, "Denoiser")
      .def_static("load", [](const std::filesystem::path& path) { return PyDenoiser{load_denoiser(path)}; })
      .def_property_readonly("category", [](const PyDenoiser& d) { return d.loaded.denoiser->category(); })
      .def_property_readonly("T", [](const PyDenoiser& d) { return d.loaded.schedule.T; })
      .def(
          "complete",
          [](const PyDenoiser& d, const Eigen::Ref<const RowPoints>& partial, int k_free, const std::string& sampler,
             int ddim_steps, std::uint64_t seed) {
            const PartialShape ps(to_points(partial), "python", 0);
            const auto s = sampler_config(sampler, ddim_steps, seed);
            PointCloud out;
            {
              py::gil_scoped_release release;
              out = complete_shape(ps, *d.loaded.denoiser, d.loaded.schedule, s, k_free);
            }
            return from_points(out.points);
          },
          py::arg("partial"), py::arg("k_free") = 320, py::arg("sampler") = "ddpm", py::arg("ddim_steps") = 200,
          py::arg("seed") = 0);

  m.def(
      "attack",
      [](const Eigen::Ref<const RowPoints>& source, int label, const std::vector<std::shared_ptr<Classifier>>& members,
         const PyDenoiser& d, double a, double eps, int n_points, int m_samples, int views, const std::string& sampler,
         int ddim_steps, std::uint64_t seed, bool use_mu, int k_p, int k_free) {
        std::vector<ClassifierPtr> ptrs(members.begin(), members.end());
        AttackConfig cfg;
        cfg.guidance.a = a;
        cfg.guidance.eps = eps;
        cfg.guidance.n_points = n_points;
        cfg.guidance.m_samples = m_samples;
        cfg.guidance.use_mu = use_mu;
        cfg.n_views = views;
        cfg.sampler = sampler_config(sampler, ddim_steps, seed);
        cfg.k_p = k_p;
        cfg.k_free = k_free;
        cfg.record_trace = false;
        const auto src = normalize(PointCloud(to_points(source), label, "python"));
        AttackResult res;
        {
          py::gil_scoped_release release;
          res = run_attack(src, EnsembleSpec::uniform(ptrs), *d.loaded.denoiser, d.loaded.schedule, cfg);
        }
        py::list out;
        for (const auto& v : res.views) {
          py::dict row;
          row["view"] = v.view_index;
          row["points"] = from_points(v.adversarial_cloud.points);
          row["success"] = v.substitute_success;
          row["prediction"] = v.ensemble_pred;
          out.append(row);
        }
        return out;
      },
      py::arg("source"), py::arg("label"), py::arg("ensemble"), py::arg("denoiser"), py::arg("a") = 0.4,
      py::arg("eps") = kDefaultEps, py::arg("n_points") = 200, py::arg("m_samples") = 5,
      py::arg("views") = kDefaultViews, py::arg("sampler") = "ddpm", py::arg("ddim_steps") = 200,
      py::arg("seed") = 0, py::arg("use_mu") = true, py::arg("k_p") = 64, py::arg("k_free") = 320);

  m.def(
      "run_experiment",
      [](const std::filesystem::path& config, const std::filesystem::path& out) {
        const auto cfg = load_experiment_config(config);
        ExperimentSummary s;
        {
          py::gil_scoped_release release;
          s = run_experiment(cfg, out);
        }
        py::dict d;
        d["out_dir"] = s.out_dir.string();
        d["manifest_digest"] = s.manifest.digest();
        d["source_success_rate"] = s.source_success_rate;
        d["transfer"] = py::module_::import("json").attr("loads")(s.transfer.to_json().dump());
        return d;
      },
      py::arg("config"), py::arg("out"));
  m.def(
      "reproduce_experiment",
      [](const std::filesystem::path& manifest, const std::filesystem::path& out) {
        py::gil_scoped_release release;
        return reproduce_experiment(manifest, out);
      },
      py::arg("manifest"), py::arg("out"));
}
