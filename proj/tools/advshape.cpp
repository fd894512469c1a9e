// Command-line front end: dataset, training, attack, defense and reporting.
#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "advshape/attack.hpp"
#include "advshape/checkpoint.hpp"
#include "advshape/dataset.hpp"
#include "advshape/defense.hpp"
#include "advshape/eval.hpp"
#include "advshape/experiment.hpp"
#include "advshape/io.hpp"
#include "advshape/log.hpp"

namespace fs = std::filesystem;
using namespace advshape;
using nlohmann::json;

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, sep);)
    if (!item.empty()) out.push_back(item);
  return out;
}

Dataset load_or_make(const std::string& manifest, double variation, std::uint64_t seed) {
  if (!manifest.empty()) return load_dataset(manifest);
  SyntheticSpec spec;
  spec.variation = variation;
  spec.seed = seed;
  return make_synthetic_dataset(spec);
}

// Adversarial directories carry a dataset-style manifest; clouds are read
// as written, without re-normalization.
std::vector<PointCloud> read_labeled_dir(const fs::path& dir, const std::vector<std::string>& classes) {
  const auto entries = io::read_manifest(dir / "manifest.json");
  std::vector<PointCloud> out;
  for (const auto& e : entries) {
    const auto it = std::find(classes.begin(), classes.end(), e.label);
    if (it == classes.end()) throw Error("label '" + e.label + "' is unknown to the target models");
    out.emplace_back(io::read_cloud(dir / e.path), static_cast<int>(it - classes.begin()),
                     fs::path(e.path).stem().string());
  }
  return out;
}

void print_transfer(const TransferMatrix& m) {
  std::cout << "attack";
  for (std::size_t c = 0; c < m.cols.size(); ++c) std::cout << '\t' << m.cols[c] << (m.excluded[c] ? "*" : "");
  std::cout << "\tblackbox_avg\n";
  for (std::size_t r = 0; r < m.rows.size(); ++r) {
    std::cout << m.rows[r];
    for (std::size_t c = 0; c < m.cols.size(); ++c) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "\t%.1f±%.1f", 100 * m.mean(Eigen::Index(r), Eigen::Index(c)),
                    100 * m.std(Eigen::Index(r), Eigen::Index(c)));
      std::cout << buf;
    }
    std::cout << '\t' << format_real(100 * m.blackbox_average(r)) << '\n';
  }
  std::cout << "(* substitute column, excluded from the black-box average)\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial point clouds via guided diffusion"};
  app.require_subcommand(1);
  bool verbose = false, quiet = false;
  app.add_flag("-v,--verbose", verbose, "Progress messages");
  app.add_flag("-q,--quiet", quiet, "Errors only");

  // make-dataset
  auto* mk = app.add_subcommand("make-dataset", "Write the synthetic shape corpus");
  SyntheticSpec mk_spec;
  std::string mk_out;
  int mk_train = 120;
  mk->add_option("--out", mk_out, "Output directory")->required();
  mk->add_option("--train", mk_train, "Training clouds per class");
  mk->add_option("--test", mk_spec.test_per_class, "Test clouds per class");
  mk->add_option("--points", mk_spec.points, "Points per cloud");
  mk->add_option("--variation", mk_spec.variation, "Deformation multiplier");
  mk->add_option("--seed", mk_spec.seed, "Seed");

  // train-diffusion
  auto* td = app.add_subcommand("train-diffusion", "Train a per-category denoiser");
  DenoiserTrainConfig td_cfg;
  std::string td_dataset, td_category, td_out;
  double td_variation = SyntheticSpec{}.variation;
  bool td_uncond = false;
  int td_T = 1000;
  td->add_option("--dataset", td_dataset, "Dataset manifest (default: synthetic corpus)");
  td->add_option("--variation", td_variation, "Synthetic deformation multiplier");
  td->add_option("--category", td_category, "Category name")->required();
  td->add_option("--epochs", td_cfg.epochs, "Epochs");
  td->add_option("--seed", td_cfg.seed, "Training seed");
  td->add_option("--steps", td_T, "Diffusion steps T");
  td->add_flag("--unconditional", td_uncond, "Train for generation instead of completion");
  td->add_option("--out", td_out, "Checkpoint path")->required();

  // train-classifiers
  auto* tc = app.add_subcommand("train-classifiers", "Train classifiers, one checkpoint per architecture");
  ClassifierTrainConfig tc_cfg;
  std::string tc_dataset, tc_out, tc_arch = "pointnet,dgcnn,setabs,attention,pointconv";
  double tc_variation = SyntheticSpec{}.variation;
  tc->add_option("--arch", tc_arch, "Comma-separated architectures");
  tc->add_option("--dataset", tc_dataset, "Dataset manifest (default: synthetic corpus)");
  tc->add_option("--variation", tc_variation, "Synthetic deformation multiplier");
  tc->add_option("--seed", tc_cfg.seed, "Training seed");
  tc->add_option("--epochs", tc_cfg.epochs, "Epochs");
  tc->add_option("--out", tc_out, "Output directory")->required();

  // attack
  auto* at = app.add_subcommand("attack", "Guided-diffusion attack on test clouds of one category");
  AttackConfig at_cfg;
  std::string at_dataset, at_category, at_ensemble, at_denoiser, at_out, at_sampler = "ddpm";
  double at_variation = SyntheticSpec{}.variation;
  int at_sources = 5;
  bool at_no_mu = false;
  at->add_option("--dataset", at_dataset, "Dataset manifest (default: synthetic corpus)");
  at->add_option("--variation", at_variation, "Synthetic deformation multiplier");
  at->add_option("--category", at_category, "Category name")->required();
  at->add_option("--ensemble", at_ensemble, "Comma-separated classifier checkpoints")->required();
  at->add_option("--denoiser", at_denoiser, "Denoiser checkpoint")->required();
  at->add_option("--a", at_cfg.guidance.a, "Guidance scale");
  at->add_option("--eps", at_cfg.guidance.eps, "L-infinity budget");
  at->add_option("--n", at_cfg.guidance.n_points, "Critical points per step");
  at->add_option("--m", at_cfg.guidance.m_samples, "Subsamples per gradient estimate");
  at->add_option("--t-adv", at_cfg.guidance.t_adv_fraction, "Guided fraction of the trajectory");
  at->add_option("--views", at_cfg.n_views, "Views per source");
  at->add_option("--sampler", at_sampler, "ddpm or ddim")->check(CLI::IsMember({"ddpm", "ddim"}));
  at->add_option("--ddim-steps", at_cfg.sampler.ddim_steps, "DDIM subsequence length");
  at->add_option("--seed", at_cfg.sampler.seed, "Master seed");
  at->add_option("--sources", at_sources, "Test clouds to attack");
  at->add_option("--workers", at_cfg.workers, "Parallel views");
  at->add_flag("--no-mu", at_no_mu, "Single full-cloud gradient");
  at->add_option("--out", at_out, "Output directory")->required();

  // defend
  auto* df = app.add_subcommand("defend", "Apply an input-transformation defense");
  std::string df_kind, df_params, df_in, df_out;
  std::uint64_t df_seed = 0;
  df->add_option("--kind", df_kind, "srs or sor")->required()->check(CLI::IsMember({"srs", "sor"}));
  df->add_option("--params", df_params, "srs: drop ratio; sor: k[:alpha]");
  df->add_option("--seed", df_seed, "SRS seed");
  df->add_option("--in", df_in, "Cloud file or directory")->required();
  df->add_option("--out", df_out, "Output file or directory")->required();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Transfer ASR of an adversarial directory");
  std::string ev_dir, ev_targets, ev_defenses, ev_out, ev_exclude;
  ev->add_option("--adversarial-dir", ev_dir, "Directory with manifest.json")->required();
  ev->add_option("--targets", ev_targets, "Comma-separated classifier checkpoints")->required();
  ev->add_option("--defenses", ev_defenses, "Comma-separated defenses, e.g. srs:0.5,sor:2:1.1");
  ev->add_option("--exclude", ev_exclude, "Comma-separated substitute model names");
  ev->add_option("--out", ev_out, "Output directory")->required();

  // report
  auto* rp = app.add_subcommand("report", "Print or export the tables of a run");
  std::string rp_dir, rp_format = "csv";
  rp->add_option("--run-dir", rp_dir, "Experiment output directory")->required();
  rp->add_option("--format", rp_format, "csv, json or png")->check(CLI::IsMember({"csv", "json", "png"}));

  // experiment / reproduce
  auto* ex = app.add_subcommand("experiment", "Full pipeline from a YAML config");
  std::string ex_config, ex_out;
  bool ex_print = false;
  ex->add_option("--config", ex_config, "YAML config (default: built-in)");
  ex->add_option("--out", ex_out, "Output directory");
  ex->add_flag("--print-config", ex_print, "Print the effective config and exit");

  auto* re = app.add_subcommand("reproduce", "Re-run from a manifest and compare tables");
  std::string re_manifest, re_out;
  re->add_option("--manifest", re_manifest, "manifest.json of a previous run")->required();
  re->add_option("--out", re_out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);
  set_log_level(quiet ? LogLevel::quiet : verbose ? LogLevel::info : LogLevel::warn);

  try {
    if (*mk) {
      mk_spec.train_per_class = {mk_train};
      const auto ds = make_synthetic_dataset(mk_spec);
      save_dataset(mk_out, ds);
      std::cout << "wrote " << ds.train.size() << " train / " << ds.test.size() << " test clouds to " << mk_out << '\n';
    } else if (*td) {
      const auto ds = load_or_make(td_dataset, td_variation, SyntheticSpec{}.seed);
      const int y = ds.class_index(td_category);
      td_cfg.model.conditional = !td_uncond;
      const auto schedule = make_schedule(td_T);
      DenoiserTrainReport rep;
      const auto d = train_denoiser(ds.train_of(y), ds.test_of(y), td_category, schedule, td_cfg, &rep);
      save_denoiser(td_out, d, schedule, td_cfg.seed);
      std::cout << "held-out loss " << rep.initial_heldout_loss << " -> " << rep.final_heldout_loss << "; wrote "
                << td_out << '\n';
    } else if (*tc) {
      const auto ds = load_or_make(tc_dataset, tc_variation, SyntheticSpec{}.seed);
      fs::create_directories(tc_out);
      for (const auto& name : split(tc_arch, ',')) {
        const Arch arch = arch_from_string(name);
        ClassifierTrainReport rep;
        const auto m = train_classifier(arch, ds.train, ds.test, ds.classes, tc_cfg, &rep);
        const fs::path path = fs::path(tc_out) / (name + ".ck");
        save_classifier(path, *m, tc_cfg.seed);
        std::cout << name << ": test accuracy " << rep.test_accuracy << (rep.met_floor ? "" : " (below floor)")
                  << " -> " << path.string() << '\n';
      }
    } else if (*at) {
      const auto ds = load_or_make(at_dataset, at_variation, SyntheticSpec{}.seed);
      const int y = ds.class_index(at_category);
      std::vector<ClassifierPtr> members;
      for (const auto& p : split(at_ensemble, ',')) members.push_back(load_classifier(p));
      const auto ensemble = EnsembleSpec::uniform(members);
      const auto den = load_denoiser(at_denoiser);
      at_cfg.sampler.kind = sampler_kind_from_string(at_sampler);
      at_cfg.guidance.use_mu = !at_no_mu;
      at_cfg.trials = 1;
      fs::create_directories(fs::path(at_out) / "clouds");
      std::ofstream jsonl(fs::path(at_out) / "results.jsonl");
      std::vector<io::ManifestEntry> entries;
      const auto test = ds.test_of(y);
      int successes = 0, views_ok = 0, attempted = 0;
      for (int s = 0; s < std::min<int>(at_sources, static_cast<int>(test.size())); ++s) {
        AttackConfig cfg = at_cfg;
        cfg.sampler.seed = derive_seed(at_cfg.sampler.seed, {static_cast<std::uint64_t>(s)});
        auto r = run_attack(test[static_cast<std::size_t>(s)], ensemble, *den.denoiser, den.schedule, cfg);
        for (auto& v : r.views) {
          if (v.substitute_success) {
            const std::string rel = "clouds/" + v.adversarial_cloud.id + ".xyz";
            io::write_xyz(fs::path(at_out) / rel, v.adversarial_cloud.points);
            entries.push_back({rel, at_category, "adversarial"});
            v.trace_path = "clouds/" + v.adversarial_cloud.id + ".trace.jsonl";
            write_trace_jsonl(fs::path(at_out) / v.trace_path, v.trace);
          }
          jsonl << view_record_json(r, v, 0).dump() << '\n';
        }
        ++attempted;
        successes += r.success();
        views_ok += static_cast<int>(r.successful_views.size());
      }
      io::write_manifest(fs::path(at_out) / "manifest.json", entries);
      const json summary = {{"category", at_category},
                            {"sources", attempted},
                            {"source_success_rate", attempted ? double(successes) / attempted : 0.0},
                            {"successful_views", views_ok},
                            {"views", attempted * at_cfg.n_views}};
      io::write_text(fs::path(at_out) / "summary.json", summary.dump(2) + "\n");
      std::cout << summary.dump(2) << '\n';
    } else if (*df) {
      const DefenseConfig cfg = parse_defense(df_params.empty() ? df_kind : df_kind + ":" + df_params);
      auto one = [&](const fs::path& in, const fs::path& out, std::uint64_t seed) {
        DefenseConfig c = cfg;
        c.seed = seed;
        const auto kept = apply_defense(PointCloud(io::read_cloud(in)), c);
        io::write_cloud(out, kept.points);
      };
      if (fs::is_directory(df_in)) {
        fs::create_directories(df_out);
        std::size_t i = 0;
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(df_in))
          if (e.path().extension() == ".xyz" || e.path().extension() == ".ply") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) one(f, fs::path(df_out) / f.filename(), derive_seed(df_seed, {i++}));
        std::cout << "defended " << files.size() << " clouds with " << cfg.label() << '\n';
      } else {
        one(df_in, df_out, df_seed);
      }
    } else if (*ev) {
      std::vector<ClassifierPtr> targets;
      for (const auto& p : split(ev_targets, ',')) {
        auto m = std::make_shared<Classifier>(*load_classifier(p));
        m->name = fs::path(p).stem().string();
        targets.push_back(m);
      }
      const auto set = read_labeled_dir(ev_dir, targets.front()->class_names);
      std::vector<DefenseConfig> defenses;
      for (const auto& d : split(ev_defenses, ',')) defenses.push_back(parse_defense(d));
      const auto excluded_names = split(ev_exclude, ',');
      TransferMatrix tm;
      tm.rows = {fs::path(ev_dir).filename().string()};
      std::vector<double> values;
      auto add = [&](const ClassifierPtr& m, const DefenseConfig* d) {
        tm.cols.push_back(d ? m->name + "+" + d->label() : m->name);
        tm.excluded.push_back(std::find(excluded_names.begin(), excluded_names.end(), m->name) !=
                              excluded_names.end());
        values.push_back(set.empty() ? 0.0 : eval_asr(set, *m, d));
      };
      for (const auto& m : targets) add(m, nullptr);
      for (const auto& d : defenses)
        for (const auto& m : targets) add(m, &d);
      tm.mean = Eigen::Map<Eigen::RowVectorXd>(values.data(), Eigen::Index(values.size()));
      tm.std = Eigen::MatrixXd::Zero(1, Eigen::Index(values.size()));
      fs::create_directories(ev_out);
      write_transfer_csv(fs::path(ev_out) / "transfer.csv", tm);
      io::write_text(fs::path(ev_out) / "transfer.json", tm.to_json().dump(2) + "\n");
      print_transfer(tm);
    } else if (*rp) {
      const fs::path dir = rp_dir;
      if (rp_format == "csv") {
        for (const auto& name : deterministic_tables()) {
          const fs::path p = dir / "tables" / name;
          if (name == "views.csv" || !fs::exists(p)) continue;
          std::cout << "== " << name << '\n' << io::read_text(p) << '\n';
        }
        print_transfer(read_transfer_csv(dir / "tables" / "transfer.csv"));
      } else if (rp_format == "json") {
        std::cout << io::read_text(dir / "summary.json");
      } else {
        const auto tm = read_transfer_csv(dir / "tables" / "transfer.csv");
        fs::create_directories(dir / "plots");
        write_png(dir / "plots" / "transfer.png", heatmap_image(tm.mean, 0.0, 1.0));
        std::cout << "wrote " << (dir / "plots" / "transfer.png").string() << '\n';
        for (const auto& e : fs::directory_iterator(dir / "plots")) std::cout << e.path().string() << '\n';
      }
    } else if (*ex) {
      const auto cfg = ex_config.empty() ? ExperimentConfig::defaults() : load_experiment_config(ex_config);
      if (ex_print) {
        std::cout << experiment_config_yaml(cfg);
        return 0;
      }
      if (ex_out.empty()) throw Error("experiment: --out is required");
      const auto s = run_experiment(cfg, ex_out);
      std::cout << "sources with a successful view: " << format_real(s.source_success_rate) << '\n';
      print_transfer(s.transfer);
      std::cout << "manifest " << s.manifest.digest() << '\n';
    } else if (*re) {
      const auto diffs = reproduce_experiment(re_manifest, re_out);
      if (diffs.empty()) {
        std::cout << "all tables reproduced bit-identically\n";
      } else {
        for (const auto& d : diffs) std::cout << "differs: " << d << '\n';
        return 1;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
