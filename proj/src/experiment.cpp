#include "advshape/experiment.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "advshape/checkpoint.hpp"
#include "advshape/io.hpp"
#include "advshape/log.hpp"
#include "advshape/rng.hpp"

namespace advshape {
namespace fs = std::filesystem;
using nlohmann::json;

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.synthetic.variation = 2.5;
  c.classifiers = {{"pointnet", Arch::pointnet, 1},
                   {"dgcnn", Arch::dgcnn, 1},
                   {"setabs", Arch::setabs, 1},
                   {"attention", Arch::attention, 2},
                   {"pointconv", Arch::pointconv, 2}};
  c.ensemble = {"pointnet", "dgcnn", "setabs"};
  c.defenses = {DefenseConfig{}};
  DefenseConfig sor;
  sor.kind = DefenseKind::sor;
  c.defenses.push_back(sor);
  return c;
}

void ExperimentConfig::validate() const {
  if (classifiers.empty()) throw Error("experiment: no classifiers configured");
  std::set<std::string> names;
  for (const auto& s : classifiers)
    if (!names.insert(s.name).second) throw Error("experiment: duplicate classifier name '" + s.name + "'");
  if (ensemble.empty()) throw Error("experiment: empty ensemble");
  for (const auto& e : ensemble)
    if (!names.count(e)) throw Error("experiment: ensemble member '" + e + "' is not a configured classifier");
  if (!pgd.substitute.empty() && !names.count(pgd.substitute))
    throw Error("experiment: PGD substitute '" + pgd.substitute + "' is not a configured classifier");
  if (sources_per_class < 1) throw Error("experiment: sources_per_class must be positive");
  if (attack.k_p != diffusion.k_p || attack.k_free != diffusion.k_free)
    throw Error("experiment: attack and diffusion point counts disagree");
  attack.validate();
  for (const auto& d : defenses) d.validate();
}

namespace {

std::string defense_spec_string(const DefenseConfig& d) {
  return d.kind == DefenseKind::srs ? "srs:" + format_real(d.srs_drop_ratio)
                                    : "sor:" + std::to_string(d.sor_k) + ":" + format_real(d.sor_alpha);
}

template <class T>
void read_key(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  j["seed"] = c.seed;
  const auto& s = c.synthetic;
  j["dataset"] = {{"manifest", c.dataset_manifest},   {"train_per_class", s.train_per_class},
                  {"test_per_class", s.test_per_class}, {"points", s.points},
                  {"variation", s.variation},         {"seed", s.seed}};
  j["classifiers"] = json::array();
  for (const auto& m : c.classifiers)
    j["classifiers"].push_back({{"name", m.name}, {"arch", to_string(m.arch)}, {"seed", m.seed}});
  j["ensemble"] = c.ensemble;
  const auto& ct = c.classifier_training;
  j["classifier_training"] = {{"epochs", ct.epochs},         {"batch", ct.batch},
                              {"lr", ct.lr},                 {"lr_final", ct.lr_final},
                              {"label_smoothing", ct.label_smoothing}, {"min_points", ct.min_points},
                              {"max_points", ct.max_points}, {"jitter", ct.jitter},
                              {"accuracy_floor", ct.accuracy_floor}};
  const auto& d = c.diffusion;
  j["diffusion"] = {{"T", c.T},          {"beta_min", c.beta_min}, {"beta_max", c.beta_max}, {"epochs", d.epochs},
                    {"batch", d.batch},  {"lr", d.lr},             {"lr_final", d.lr_final}, {"k_p", d.k_p},
                    {"k_free", d.k_free}, {"seed", d.seed}};
  const auto& a = c.attack;
  const auto& g = a.guidance;
  j["attack"] = {{"a", g.a},
                 {"t_adv_fraction", g.t_adv_fraction},
                 {"n", g.n_points},
                 {"m", g.m_samples},
                 {"eps", g.eps},
                 {"saliency", to_string(g.saliency_mode)},
                 {"direction", to_string(g.direction)},
                 {"use_mu", g.use_mu},
                 {"adaptive_weights", g.adaptive_weights},
                 {"kappa_fraction", g.kappa_fraction},
                 {"views", a.n_views},
                 {"trials", a.trials},
                 {"sampler", to_string(a.sampler.kind)},
                 {"ddim_steps", a.sampler.ddim_steps},
                 {"mode", to_string(a.mode)},
                 {"success", to_string(a.success)},
                 {"sources_per_class", c.sources_per_class},
                 {"workers", a.workers},
                 {"record_trace", a.record_trace}};
  j["pgd"] = {{"enabled", c.pgd.enabled},
              {"steps", c.pgd.steps},
              {"step_size", c.pgd.step_size},
              {"substitute", c.pgd.substitute}};
  j["defenses"] = json::array();
  for (const auto& df : c.defenses) j["defenses"].push_back(defense_spec_string(df));
  j["similarity_clouds"] = c.similarity_clouds;
  return j;
}

ExperimentConfig experiment_config_from_json(const json& j) {
  ExperimentConfig c = ExperimentConfig::defaults();
  read_key(j, "name", c.name);
  read_key(j, "seed", c.seed);
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    read_key(d, "manifest", c.dataset_manifest);
    if (d.contains("train_per_class")) {
      const auto& t = d["train_per_class"];
      c.synthetic.train_per_class = t.is_array() ? t.get<std::vector<int>>() : std::vector<int>{t.get<int>()};
    }
    read_key(d, "test_per_class", c.synthetic.test_per_class);
    read_key(d, "points", c.synthetic.points);
    read_key(d, "variation", c.synthetic.variation);
    read_key(d, "seed", c.synthetic.seed);
  }
  if (j.contains("classifiers")) {
    c.classifiers.clear();
    for (const auto& m : j["classifiers"]) {
      ClassifierSpec s;
      s.arch = arch_from_string(m.at("arch").get<std::string>());
      s.name = m.value("name", to_string(s.arch));
      read_key(m, "seed", s.seed);
      c.classifiers.push_back(s);
    }
  }
  read_key(j, "ensemble", c.ensemble);
  if (j.contains("classifier_training")) {
    const auto& t = j["classifier_training"];
    auto& ct = c.classifier_training;
    read_key(t, "epochs", ct.epochs);
    read_key(t, "batch", ct.batch);
    read_key(t, "lr", ct.lr);
    read_key(t, "lr_final", ct.lr_final);
    read_key(t, "label_smoothing", ct.label_smoothing);
    read_key(t, "min_points", ct.min_points);
    read_key(t, "max_points", ct.max_points);
    read_key(t, "jitter", ct.jitter);
    read_key(t, "accuracy_floor", ct.accuracy_floor);
  }
  if (j.contains("diffusion")) {
    const auto& t = j["diffusion"];
    auto& d = c.diffusion;
    read_key(t, "T", c.T);
    read_key(t, "beta_min", c.beta_min);
    read_key(t, "beta_max", c.beta_max);
    read_key(t, "epochs", d.epochs);
    read_key(t, "batch", d.batch);
    read_key(t, "lr", d.lr);
    read_key(t, "lr_final", d.lr_final);
    read_key(t, "k_p", d.k_p);
    read_key(t, "k_free", d.k_free);
    read_key(t, "seed", d.seed);
  }
  c.attack.k_p = c.diffusion.k_p;
  c.attack.k_free = c.diffusion.k_free;
  if (j.contains("attack")) {
    const auto& t = j["attack"];
    auto& a = c.attack;
    auto& g = a.guidance;
    read_key(t, "a", g.a);
    read_key(t, "t_adv_fraction", g.t_adv_fraction);
    read_key(t, "n", g.n_points);
    read_key(t, "m", g.m_samples);
    read_key(t, "eps", g.eps);
    if (t.contains("saliency")) g.saliency_mode = saliency_mode_from_string(t["saliency"].get<std::string>());
    if (t.contains("direction")) g.direction = guidance_direction_from_string(t["direction"].get<std::string>());
    read_key(t, "use_mu", g.use_mu);
    read_key(t, "adaptive_weights", g.adaptive_weights);
    read_key(t, "kappa_fraction", g.kappa_fraction);
    read_key(t, "views", a.n_views);
    read_key(t, "trials", a.trials);
    if (t.contains("sampler")) a.sampler.kind = sampler_kind_from_string(t["sampler"].get<std::string>());
    read_key(t, "ddim_steps", a.sampler.ddim_steps);
    if (t.contains("mode")) a.mode = attack_mode_from_string(t["mode"].get<std::string>());
    if (t.contains("success")) a.success = success_rule_from_string(t["success"].get<std::string>());
    read_key(t, "sources_per_class", c.sources_per_class);
    read_key(t, "workers", a.workers);
    read_key(t, "record_trace", a.record_trace);
  }
  if (j.contains("pgd")) {
    const auto& t = j["pgd"];
    read_key(t, "enabled", c.pgd.enabled);
    read_key(t, "steps", c.pgd.steps);
    read_key(t, "step_size", c.pgd.step_size);
    read_key(t, "substitute", c.pgd.substitute);
  }
  if (j.contains("defenses")) {
    c.defenses.clear();
    for (const auto& d : j["defenses"]) c.defenses.push_back(parse_defense(d.get<std::string>()));
  }
  read_key(j, "similarity_clouds", c.similarity_clouds);
  c.validate();
  return c;
}

namespace {

json yaml_to_json(const YAML::Node& n) {
  switch (n.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
      return nullptr;
    case YAML::NodeType::Sequence: {
      json a = json::array();
      for (const auto& e : n) a.push_back(yaml_to_json(e));
      return a;
    }
    case YAML::NodeType::Map: {
      json o = json::object();
      for (const auto& kv : n) o[kv.first.as<std::string>()] = yaml_to_json(kv.second);
      return o;
    }
    case YAML::NodeType::Scalar:
      break;
  }
  const std::string s = n.Scalar();
  if (n.Tag() == "!") return s;  // quoted scalar
  if (s == "true" || s == "True" || s == "yes") return true;
  if (s == "false" || s == "False" || s == "no") return false;
  const char* b = s.data();
  const char* e = b + s.size();
  std::int64_t i = 0;
  if (auto r = std::from_chars(b, e, i); r.ec == std::errc{} && r.ptr == e) return i;
  std::uint64_t u = 0;
  if (auto r = std::from_chars(b, e, u); r.ec == std::errc{} && r.ptr == e) return u;
  double d = 0.0;
  if (auto r = std::from_chars(b, e, d); r.ec == std::errc{} && r.ptr == e) return d;
  return s;
}

void emit_yaml(YAML::Emitter& out, const json& j) {
  if (j.is_object()) {
    out << YAML::BeginMap;
    for (const auto& [k, v] : j.items()) {
      out << YAML::Key << k << YAML::Value;
      emit_yaml(out, v);
    }
    out << YAML::EndMap;
  } else if (j.is_array()) {
    const bool flat = std::all_of(j.begin(), j.end(), [](const json& e) { return e.is_primitive(); });
    out << (flat ? YAML::Flow : YAML::Block) << YAML::BeginSeq;
    for (const auto& e : j) emit_yaml(out, e);
    out << YAML::EndSeq;
  } else if (j.is_string()) {
    out << YAML::DoubleQuoted << j.get<std::string>();
  } else if (j.is_boolean()) {
    out << (j.get<bool>() ? "true" : "false");
  } else if (j.is_number_float()) {
    out << format_real(j.get<double>());
  } else {
    out << j.dump();
  }
}

}  // namespace

ExperimentConfig load_experiment_config(const fs::path& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path.string());
  } catch (const YAML::Exception& e) {
    throw Error("cannot parse config " + path.string() + ": " + e.what());
  }
  return experiment_config_from_json(yaml_to_json(root));
}

std::string experiment_config_yaml(const ExperimentConfig& c) {
  YAML::Emitter out;
  emit_yaml(out, to_json(c));
  return std::string(out.c_str()) + "\n";
}

fs::path cache_dir() {
  if (const char* env = std::getenv("ADVSHAPE_CACHE"); env && *env) return env;
  if (const char* home = std::getenv("HOME"); home && *home) return fs::path(home) / ".cache" / "advshape";
  return ".advshape-cache";
}

Dataset experiment_dataset(const ExperimentConfig& c) {
  if (!c.dataset_manifest.empty()) return load_dataset(c.dataset_manifest);
  return make_synthetic_dataset(c.synthetic);
}

namespace {

json dataset_identity(const ExperimentConfig& c) {
  if (!c.dataset_manifest.empty()) {
    // A user corpus is identified by the bytes of its manifest and clouds.
    std::string all = file_digest(c.dataset_manifest);
    const fs::path base = fs::path(c.dataset_manifest).parent_path();
    for (const auto& e : io::read_manifest(c.dataset_manifest)) all += file_digest(base / e.path);
    return {{"corpus", sha256_hex(all)}};
  }
  return to_json(c)["dataset"];
}

fs::path cached_path(const json& key) {
  return cache_dir() / "models" / (sha256_hex(key.dump()).substr(0, 24) + ".ck");
}

void publish(const fs::path& tmp, const fs::path& final_path) {
  std::error_code ec;
  fs::rename(tmp, final_path, ec);
  if (ec) throw Error("cannot move " + tmp.string() + " into the cache: " + ec.message());
}

}  // namespace

fs::path ensure_classifier(const ExperimentConfig& c, const Dataset& ds, const ClassifierSpec& spec) {
  const json cfg = to_json(c);
  const json key = {{"kind", "classifier"},        {"dataset", dataset_identity(c)},
                    {"arch", to_string(spec.arch)}, {"seed", spec.seed},
                    {"training", cfg["classifier_training"]}, {"version", software_version()}};
  const fs::path path = cached_path(key);
  if (fs::exists(path)) return path;
  fs::create_directories(path.parent_path());
  ClassifierTrainConfig tc = c.classifier_training;
  tc.seed = spec.seed;
  log_info("training classifier " + spec.name + " (" + to_string(spec.arch) + ")");
  auto model = train_classifier(spec.arch, ds.train, ds.test, ds.classes, tc);
  const fs::path tmp = path.string() + ".tmp";
  save_classifier(tmp, *model, spec.seed);
  publish(tmp, path);
  return path;
}

fs::path ensure_denoiser(const ExperimentConfig& c, const Dataset& ds, int label, bool conditional) {
  const json cfg = to_json(c);
  const std::string& category = ds.classes.at(static_cast<std::size_t>(label));
  const json key = {{"kind", "denoiser"},   {"dataset", dataset_identity(c)}, {"category", category},
                    {"conditional", conditional}, {"training", cfg["diffusion"]},
                    {"version", software_version()}};
  const fs::path path = cached_path(key);
  if (fs::exists(path)) return path;
  fs::create_directories(path.parent_path());
  DenoiserTrainConfig dc = c.diffusion;
  dc.model.conditional = conditional;
  dc.seed = derive_seed(c.diffusion.seed, {static_cast<std::uint64_t>(label), conditional ? 1ULL : 0ULL});
  const auto schedule = make_schedule(c.T, c.beta_min, c.beta_max);
  log_info("training denoiser for " + category + (conditional ? "" : " (unconditional)"));
  const auto d = train_denoiser(ds.train_of(label), ds.test_of(label), category, schedule, dc);
  const fs::path tmp = path.string() + ".tmp";
  save_denoiser(tmp, d, schedule, dc.seed);
  publish(tmp, path);
  return path;
}

const std::vector<std::string>& deterministic_tables() {
  static const std::vector<std::string> names{"transfer.csv", "quality.csv", "long_tail.csv", "similarity.csv",
                                              "views.csv"};
  return names;
}

json view_record_json(const AttackResult& result, const ViewRecord& view, int trial) {
  return {{"trial", trial},
          {"source_id", result.source_id},
          {"label", result.label},
          {"view_index", view.view_index},
          {"substitute_success", view.substitute_success},
          {"ensemble_pred", view.ensemble_pred},
          {"cloud", view.adversarial_cloud.id},
          {"trace", view.trace_path},
          {"seconds", view.seconds}};
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void prepend_line(const fs::path& path, const std::string& line) {
  const std::string body = io::read_text(path);
  io::write_text(path, line + "\n" + body);
}

std::string join(const std::vector<std::string>& v, const char* sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + v[i];
  return s;
}

}  // namespace

ExperimentSummary run_experiment(const ExperimentConfig& config, const fs::path& out_dir) {
  config.validate();
  fs::create_directories(out_dir / "tables");
  fs::create_directories(out_dir / "plots");
  ExperimentSummary summary;
  summary.out_dir = out_dir;
  RunManifest& manifest = summary.manifest;
  manifest.config = to_json(config);
  manifest.version = software_version();
  manifest.seeds["master"] = config.seed;
  manifest.seeds["dataset"] = config.synthetic.seed;
  manifest.seeds["diffusion"] = config.diffusion.seed;

  auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = experiment_dataset(config);
  manifest.stage_seconds["dataset"] = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  std::map<std::string, ClassifierPtr> models;
  std::vector<ClassifierPtr> ordered;
  for (const auto& spec : config.classifiers) {
    const auto path = ensure_classifier(config, ds, spec);
    auto m = load_classifier(path);
    auto named = std::make_shared<Classifier>(*m);
    named->name = spec.name;
    models[spec.name] = named;
    ordered.push_back(named);
    manifest.checkpoint_digests["classifier:" + spec.name] = file_digest(path);
    manifest.seeds["classifier:" + spec.name] = spec.seed;
  }
  manifest.stage_seconds["classifiers"] = seconds_since(t0);

  std::vector<ClassifierPtr> members;
  for (const auto& n : config.ensemble) members.push_back(models.at(n));
  auto ensemble = EnsembleSpec::uniform(members);
  const std::string pgd_name = config.pgd.substitute.empty() ? config.ensemble.front() : config.pgd.substitute;

  const bool generation = config.attack.mode == AttackMode::generation;
  t0 = std::chrono::steady_clock::now();
  std::vector<LoadedDenoiser> denoisers;
  for (int c = 0; c < static_cast<int>(ds.classes.size()); ++c) {
    const auto path = ensure_denoiser(config, ds, c, !generation);
    denoisers.push_back(load_denoiser(path));
    manifest.checkpoint_digests["denoiser:" + ds.classes[static_cast<std::size_t>(c)]] = file_digest(path);
  }
  manifest.stage_seconds["denoisers"] = seconds_since(t0);

  std::vector<PointCloud> sources;
  for (int c = 0; c < static_cast<int>(ds.classes.size()); ++c) {
    const auto test = ds.test_of(c);
    for (int k = 0; k < std::min<int>(config.sources_per_class, static_cast<int>(test.size())); ++k)
      sources.push_back(test[static_cast<std::size_t>(k)]);
  }
  if (sources.empty()) throw Error("experiment: no test clouds to attack");

  std::ofstream jsonl(out_dir / "results.jsonl");
  std::ostringstream views_csv;
  views_csv << "trial,source_id,label,view,success,ensemble_pred\n";
  std::vector<PointCloud> benign_all, adversarial_all;
  std::vector<TimedRun> timed;
  int source_successes = 0, source_total = 0;

  t0 = std::chrono::steady_clock::now();
  for (int trial = 0; trial < config.attack.trials; ++trial) {
    TrialOutcome outcome;
    outcome.seed = derive_seed(config.seed, {0x7121A1ULL, static_cast<std::uint64_t>(trial)});
    manifest.seeds["trial:" + std::to_string(trial)] = outcome.seed;
    const fs::path cloud_dir = out_dir / "clouds" / ("trial" + std::to_string(trial));
    fs::create_directories(cloud_dir);
    for (std::size_t s = 0; s < sources.size(); ++s) {
      const auto& src = sources[s];
      const int y = *src.label;
      AttackConfig ac = config.attack;
      ac.sampler.seed = derive_seed(outcome.seed, {static_cast<std::uint64_t>(s)});
      const auto& den = denoisers[static_cast<std::size_t>(y)];
      AttackResult r = generation ? run_generation_attack(y, ensemble, *den.denoiser, den.schedule, ac)
                                  : run_attack(src, ensemble, *den.denoiser, den.schedule, ac);
      if (generation) r.source_id = src.id;
      for (auto& v : r.views) {
        if (generation) v.adversarial_cloud.id = src.id + "_gen" + std::to_string(v.view_index);
        views_csv << trial << ',' << r.source_id << ',' << y << ',' << v.view_index << ',' << int(v.substitute_success)
                  << ',' << v.ensemble_pred << '\n';
        if (!v.substitute_success) continue;
        io::write_xyz(cloud_dir / (v.adversarial_cloud.id + ".xyz"), v.adversarial_cloud.points);
        if (config.attack.record_trace) {
          v.trace_path = "clouds/trial" + std::to_string(trial) + "/" + v.adversarial_cloud.id + ".trace.jsonl";
          write_trace_jsonl(out_dir / v.trace_path, v.trace);
        }
        auto benign = generation ? benign_generation(y, v.view_index, *den.denoiser, den.schedule, ac)
                                 : benign_view(src, v.view_index, *den.denoiser, den.schedule, ac);
        benign.id = v.adversarial_cloud.id;
        benign_all.push_back(std::move(benign));
        adversarial_all.push_back(v.adversarial_cloud);
      }
      for (const auto& v : r.views) jsonl << view_record_json(r, v, trial).dump() << '\n';
      ++source_total;
      if (r.success()) ++source_successes;
      if (config.pgd.enabled) {
        auto adv = pgd_baseline(src, *models.at(pgd_name), config.attack.guidance.eps, config.pgd.steps,
                                config.pgd.step_size);
        adv.id = src.id + "_pgd";
        outcome.pgd_examples.push_back(std::move(adv));
      }
      timed.push_back({config.attack.sampler.kind, r});
      outcome.results.push_back(std::move(r));
    }
    summary.trials.push_back(std::move(outcome));
  }
  manifest.stage_seconds["attack"] = seconds_since(t0);
  summary.source_success_rate = static_cast<double>(source_successes) / source_total;

  // Transfer matrix: clean columns, then one column per (model, defense).
  t0 = std::chrono::steady_clock::now();
  TransferMatrix& tm = summary.transfer;
  std::vector<std::pair<ClassifierPtr, const DefenseConfig*>> columns;
  for (const auto& spec : config.classifiers) {
    tm.cols.push_back(spec.name);
    columns.emplace_back(models.at(spec.name), nullptr);
  }
  for (const auto& d : config.defenses)
    for (const auto& spec : config.classifiers) {
      tm.cols.push_back(spec.name + "+" + d.label());
      columns.emplace_back(models.at(spec.name), &d);
    }
  for (std::size_t c = 0; c < columns.size(); ++c) {
    const auto& name = columns[c].first->name;
    const bool member = std::find(config.ensemble.begin(), config.ensemble.end(), name) != config.ensemble.end();
    tm.excluded.push_back(member || (config.pgd.enabled && name == pgd_name));
  }
  tm.rows.push_back(to_string(config.attack.mode) + "[" + join(config.ensemble, "+") + "]");
  if (config.pgd.enabled) tm.rows.push_back("pgd[" + pgd_name + "]");
  const auto nr = static_cast<Eigen::Index>(tm.rows.size());
  const auto nc = static_cast<Eigen::Index>(columns.size());
  tm.mean = Eigen::MatrixXd::Zero(nr, nc);
  tm.std = Eigen::MatrixXd::Zero(nr, nc);
  for (Eigen::Index r = 0; r < nr; ++r)
    for (Eigen::Index c = 0; c < nc; ++c) {
      std::vector<double> per_trial;
      for (const auto& t : summary.trials) {
        std::vector<PointCloud> set;
        if (r == 0) {
          for (const auto& res : t.results)
            for (const auto& v : res.views)
              if (v.substitute_success) set.push_back(v.adversarial_cloud);
        } else {
          set = t.pgd_examples;
        }
        const auto& [model, defense] = columns[static_cast<std::size_t>(c)];
        // A trial that produced no adversarial example fools nothing.
        per_trial.push_back(set.empty() ? 0.0 : eval_asr(set, *model, defense));
      }
      const auto ms = mean_std(per_trial);
      tm.mean(r, c) = ms.mean;
      tm.std(r, c) = ms.std;
    }
  summary.quality = eval_quality(benign_all, adversarial_all);
  const auto long_tail = long_tail_table(ds, adversarial_all);
  std::vector<PointCloud> sim_sample;
  for (std::size_t i = 0; i < ds.test.size() && static_cast<int>(sim_sample.size()) < config.similarity_clouds; ++i)
    sim_sample.push_back(ds.test[(i * 7919) % ds.test.size()]);
  std::optional<SimilarityReport> similarity;
  if (ordered.size() >= 2 && !sim_sample.empty()) similarity = similarity_report(ordered, sim_sample);
  const auto timing = eval_timing(timed);
  manifest.stage_seconds["evaluate"] = seconds_since(t0);

  const std::string digest = manifest.digest();
  const std::string tag = "# manifest " + digest;
  const fs::path tables = out_dir / "tables";
  write_transfer_csv(tables / "transfer.csv", tm);
  prepend_line(tables / "transfer.csv", tag);
  io::write_text(tables / "transfer.json", tm.to_json().dump(2) + "\n");
  {
    std::ostringstream q;
    q << tag << "\npairs,skipped,hd,cd_x1e-2,mse\n"
      << summary.quality.pairs << ',' << summary.quality.skipped << ',' << format_real(summary.quality.mean.hausdorff)
      << ',' << format_real(chamfer_report_units(summary.quality.mean.chamfer)) << ','
      << format_real(summary.quality.mean.mse) << '\n';
    io::write_text(tables / "quality.csv", q.str());
  }
  write_long_tail(tables / "long_tail.csv", out_dir / "plots" / "long_tail.png", long_tail);
  prepend_line(tables / "long_tail.csv", tag);
  if (similarity) {
    write_similarity(tables / "similarity.csv", out_dir / "plots" / "similarity.png", *similarity);
    prepend_line(tables / "similarity.csv", tag);
  } else {
    io::write_text(tables / "similarity.csv", tag + "\n");
  }
  io::write_text(tables / "views.csv", tag + "\n" + views_csv.str());
  {
    std::ostringstream t;
    t << "sampler,seconds_per_view,seconds_per_example\n";
    for (const auto& [k, v] : timing.seconds_per_view) {
      const auto& e = timing.seconds_per_example.at(k);
      t << k << ',' << format_real(v) << ',' << (e ? format_real(*e) : std::string("")) << '\n';
    }
    io::write_text(tables / "timing.csv", tag + "\n" + t.str());
  }

  json s;
  s["name"] = config.name;
  s["manifest_digest"] = digest;
  s["sources"] = source_total;
  s["source_success_rate"] = summary.source_success_rate;
  s["successful_views"] = adversarial_all.size();
  s["transfer"] = tm.to_json();
  s["blackbox_average"] = json::array();
  for (std::size_t r = 0; r < tm.rows.size(); ++r) s["blackbox_average"].push_back(tm.blackbox_average(r));
  s["quality"] = {{"pairs", summary.quality.pairs},
                  {"skipped", summary.quality.skipped},
                  {"hd", summary.quality.mean.hausdorff},
                  {"cd_x1e-2", chamfer_report_units(summary.quality.mean.chamfer)},
                  {"mse", summary.quality.mean.mse}};
  s["timing"] = json::object();
  for (const auto& [k, v] : timing.seconds_per_view) s["timing"][k] = {{"seconds_per_view", v}};
  io::write_text(out_dir / "summary.json", s.dump(2) + "\n");
  io::write_text(out_dir / "config.yaml", experiment_config_yaml(config));
  write_manifest(out_dir / "manifest.json", manifest);
  return summary;
}

std::vector<std::string> reproduce_experiment(const fs::path& manifest_path, const fs::path& out_dir) {
  const RunManifest original = read_manifest(manifest_path);
  if (original.version != software_version())
    log_warn("manifest was written by version " + original.version + ", running " + software_version());
  const auto config = experiment_config_from_json(original.config);
  const auto rerun = run_experiment(config, out_dir);
  std::vector<std::string> diffs;
  for (const auto& [k, v] : original.checkpoint_digests) {
    const auto it = rerun.manifest.checkpoint_digests.find(k);
    if (it == rerun.manifest.checkpoint_digests.end() || it->second != v) diffs.push_back("checkpoint:" + k);
  }
  const fs::path old_tables = manifest_path.parent_path() / "tables";
  for (const auto& name : deterministic_tables()) {
    const fs::path a = old_tables / name, b = out_dir / "tables" / name;
    if (!fs::exists(a) || !fs::exists(b) || io::read_text(a) != io::read_text(b)) diffs.push_back(name);
  }
  return diffs;
}

}  // namespace advshape
