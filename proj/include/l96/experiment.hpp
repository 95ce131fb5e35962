#ifndef L96_EXPERIMENT_HPP_
#define L96_EXPERIMENT_HPP_

// Config-driven experiment stages. Each stage writes into <out>/<stage>/ and
// records every file it emits, with hashes, in that directory's manifest.json.
// Later stages read earlier stages' artifacts from disk only.

#include "l96/closures.hpp"
#include "l96/dynamics.hpp"
#include "l96/ensemble.hpp"
#include "l96/flows.hpp"
#include "l96/io.hpp"
#include "l96/metrics.hpp"
#include "l96/uncertainty.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

namespace l96::cli {

using io::json;
namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "1.0.0";

enum ExitCode : int { kOk = 0, kConfigError = 2, kDivergence = 3, kPartialFailure = 4 };

/// Partial-failure threshold exceeded in an ensemble stage.
class partial_failure_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ClosureSpec {
  std::string name;
  std::string kind;
  FlowVariant variant = FlowVariant::normal;
  int tau = 0;
};

/// A runnable model: a fitted closure plus (for flows) a latent sampling mode.
struct ModelSpec {
  std::string name;
  std::string closure;
  LatentMode latent = LatentMode::iid;
};

struct ClimatologySpec {
  int truth_runs = 3;
  double truth_duration = 2000.0;
  int reduced_runs = 24;
  double reduced_duration = 250.0;
  double discard = 10.0;
  double spin_up = 20.0;
  int bins = 100;
  std::vector<std::string> models;
};

struct SensitivitySpec {
  int n_init = 50;
  int n_ens = 10;
  double horizon = 10.0;
};

struct CorrelationSpec {
  int runs = 3;
  double duration = 500.0;
  double max_lag = 10.0;
  double compare_lag = 4.0;
  std::vector<std::string> models;
};

struct ExperimentConfig {
  std::optional<std::uint64_t> seed;
  fs::path out = "out";
  int workers = 0;
  L96Params params;
  IntegratorConfig integrator;
  DatasetSpec dataset;
  FlowConfig flow;
  std::vector<ClosureSpec> closures;
  std::vector<ModelSpec> models;
  ClimatologySpec climatology;
  EnsembleConfig ensemble;
  std::vector<std::string> ensemble_models;
  std::string mixed_model;
  std::vector<std::string> internal_models;
  SensitivitySpec sensitivity;
  CorrelationSpec correlations;
  double failure_threshold = 0.01;

  std::uint64_t master_seed() const {
    if (!seed) throw precondition_error("config: a master seed is required (config 'seed' or --seed)");
    return *seed;
  }

  const ClosureSpec& closure(const std::string& name) const {
    for (const auto& c : closures) {
      if (c.name == name) return c;
    }
    throw precondition_error("config: unknown closure '" + name + "'");
  }
  const ModelSpec& model(const std::string& name) const {
    for (const auto& m : models) {
      if (m.name == name) return m;
    }
    throw precondition_error("config: unknown model '" + name + "'");
  }
};

namespace cfg_detail {

template <typename T>
void read_opt(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

inline std::vector<std::string> names_of(const std::vector<ModelSpec>& models) {
  std::vector<std::string> out;
  for (const auto& m : models) out.push_back(m.name);
  return out;
}

}  // namespace cfg_detail

inline std::vector<ClosureSpec> default_closures() {
  return {{"deterministic", "deterministic", FlowVariant::normal, 0},
          {"poly_ar1", "poly_ar1", FlowVariant::normal, 0},
          {"bayesian", "bayesian", FlowVariant::normal, 0},
          {"flow_normal", "flow", FlowVariant::normal, 0},
          {"flow_history", "flow", FlowVariant::history, 1},
          {"flow_base_ar1", "flow", FlowVariant::base_ar1, 0},
          {"flow_tail", "flow", FlowVariant::tail, 0}};
}

/// Parses a JSON config. Missing sections take the built-in defaults.
inline ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
    cfg_detail::read_opt(j, "workers", c.workers);
    cfg_detail::read_opt(j, "failure_threshold", c.failure_threshold);
    if (j.contains("params")) c.params = io::params_from_json(j["params"]);
    if (j.contains("integrator")) c.integrator = io::integrator_from_json(j["integrator"]);
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      cfg_detail::read_opt(d, "spin_up", c.dataset.spin_up);
      cfg_detail::read_opt(d, "n_steps", c.dataset.n_steps);
      cfg_detail::read_opt(d, "n_train", c.dataset.n_train);
      cfg_detail::read_opt(d, "n_val", c.dataset.n_val);
    }
    if (j.contains("flow")) c.flow = io::flow_config_from(j["flow"]);
    c.flow.dim = c.params.K;

    c.closures = default_closures();
    if (j.contains("closures")) {
      c.closures.clear();
      for (const auto& e : j["closures"]) {
        ClosureSpec s;
        s.name = e.at("name").get<std::string>();
        s.kind = e.at("kind").get<std::string>();
        if (e.contains("variant")) s.variant = parse_flow_variant(e["variant"].get<std::string>());
        cfg_detail::read_opt(e, "tau", s.tau);
        c.closures.push_back(s);
      }
    }
    std::set<std::string> seen;
    for (const auto& s : c.closures) {
      if (s.kind != "deterministic" && s.kind != "poly_ar1" && s.kind != "bayesian" && s.kind != "flow") {
        throw precondition_error("config: closure '" + s.name + "' has unknown kind '" + s.kind + "'");
      }
      if (!seen.insert(s.name).second) throw precondition_error("config: duplicate closure name '" + s.name + "'");
      if (s.kind == "flow") {
        FlowConfig fc = c.flow;
        fc.variant = s.variant;
        fc.tau = s.tau;
        fc.validate();
        c.models.push_back({s.name + "_iid", s.name, LatentMode::iid});
        c.models.push_back({s.name + "_ar1", s.name, LatentMode::ar1});
      } else {
        c.models.push_back({s.name, s.name, LatentMode::iid});
      }
    }

    c.climatology.models = cfg_detail::names_of(c.models);
    if (j.contains("climatology")) {
      const auto& s = j["climatology"];
      cfg_detail::read_opt(s, "truth_runs", c.climatology.truth_runs);
      cfg_detail::read_opt(s, "truth_duration", c.climatology.truth_duration);
      cfg_detail::read_opt(s, "reduced_runs", c.climatology.reduced_runs);
      cfg_detail::read_opt(s, "reduced_duration", c.climatology.reduced_duration);
      cfg_detail::read_opt(s, "discard", c.climatology.discard);
      cfg_detail::read_opt(s, "spin_up", c.climatology.spin_up);
      cfg_detail::read_opt(s, "bins", c.climatology.bins);
      cfg_detail::read_opt(s, "models", c.climatology.models);
    }
    c.ensemble_models = {"deterministic", "poly_ar1", "bayesian"};
    c.mixed_model = "poly_ar1";
    if (j.contains("ensemble")) {
      const auto& e = j["ensemble"];
      c.ensemble = io::ensemble_config_from(e);
      cfg_detail::read_opt(e, "models", c.ensemble_models);
      cfg_detail::read_opt(e, "mixed_model", c.mixed_model);
    }
    c.internal_models = {"deterministic", "poly_ar1", "bayesian"};
    if (j.contains("internal_variability")) cfg_detail::read_opt(j["internal_variability"], "models", c.internal_models);
    if (j.contains("sensitivity")) {
      const auto& s = j["sensitivity"];
      cfg_detail::read_opt(s, "n_init", c.sensitivity.n_init);
      cfg_detail::read_opt(s, "n_ens", c.sensitivity.n_ens);
      cfg_detail::read_opt(s, "horizon", c.sensitivity.horizon);
    }
    c.correlations.models = {"deterministic", "poly_ar1"};
    if (j.contains("correlations")) {
      const auto& s = j["correlations"];
      cfg_detail::read_opt(s, "runs", c.correlations.runs);
      cfg_detail::read_opt(s, "duration", c.correlations.duration);
      cfg_detail::read_opt(s, "max_lag", c.correlations.max_lag);
      cfg_detail::read_opt(s, "compare_lag", c.correlations.compare_lag);
      cfg_detail::read_opt(s, "models", c.correlations.models);
    }
  } catch (const json::exception& e) {
    throw precondition_error(std::string("config: ") + e.what());
  }

  for (const auto& lists : {c.climatology.models, c.ensemble_models, c.internal_models, c.correlations.models}) {
    for (const auto& m : lists) (void)c.model(m);
  }
  if (!c.mixed_model.empty()) (void)c.model(c.mixed_model);
  c.ensemble.validate();
  detail::require(c.climatology.truth_runs >= 1 && c.climatology.reduced_runs >= 1, "config: climatology runs must be >= 1");
  detail::require(c.climatology.bins >= 1, "config: climatology bins must be >= 1");
  detail::require(c.sensitivity.n_init >= 1 && c.sensitivity.n_ens >= 2, "config: sensitivity needs n_ens >= 2");
  detail::require(c.correlations.runs >= 1 && c.correlations.duration > c.correlations.max_lag,
                  "config: correlation runs must be longer than max_lag");
  detail::require(c.failure_threshold >= 0, "config: failure_threshold must be >= 0");
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) { return parse_config(io::read_json(path)); }

/// Canonical JSON of the resolved config (used for hashing and manifests).
inline json config_json(const ExperimentConfig& c) {
  json closures = json::array();
  for (const auto& s : c.closures) {
    closures.push_back({{"name", s.name}, {"kind", s.kind}, {"variant", to_string(s.variant)}, {"tau", s.tau}});
  }
  return {{"seed", c.seed ? json(*c.seed) : json(nullptr)},
          {"params", io::to_json(c.params)},
          {"integrator", io::to_json(c.integrator)},
          {"dataset", {{"spin_up", c.dataset.spin_up}, {"n_steps", c.dataset.n_steps},
                       {"n_train", c.dataset.n_train}, {"n_val", c.dataset.n_val}}},
          {"flow", io::flow_config_json(c.flow)},
          {"closures", closures},
          {"climatology", {{"truth_runs", c.climatology.truth_runs}, {"truth_duration", c.climatology.truth_duration},
                           {"reduced_runs", c.climatology.reduced_runs},
                           {"reduced_duration", c.climatology.reduced_duration},
                           {"discard", c.climatology.discard}, {"spin_up", c.climatology.spin_up},
                           {"bins", c.climatology.bins}, {"models", c.climatology.models}}},
          {"ensemble", io::ensemble_config_json(c.ensemble)},
          {"ensemble_models", c.ensemble_models},
          {"mixed_model", c.mixed_model},
          {"internal_models", c.internal_models},
          {"sensitivity", {{"n_init", c.sensitivity.n_init}, {"n_ens", c.sensitivity.n_ens},
                           {"horizon", c.sensitivity.horizon}}},
          {"correlations", {{"runs", c.correlations.runs}, {"duration", c.correlations.duration},
                            {"max_lag", c.correlations.max_lag}, {"compare_lag", c.correlations.compare_lag},
                            {"models", c.correlations.models}}},
          {"failure_threshold", c.failure_threshold}};
}

inline std::string config_hash(const ExperimentConfig& c) { return io::hash_string(config_json(c).dump()); }

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

class Manifest {
 public:
  Manifest(fs::path dir, std::string stage, const ExperimentConfig& cfg)
      : dir_(std::move(dir)), stage_(std::move(stage)), config_hash_(config_hash(cfg)),
        start_(std::chrono::steady_clock::now()) {
    fs::create_directories(dir_);
  }

  const fs::path& dir() const { return dir_; }

  void add_file(const std::string& rel) { files_[rel] = io::hash_file(dir_ / rel); }
  void add_input(const fs::path& path) { inputs_[path.generic_string()] = io::hash_file(path); }
  void set(const std::string& key, json value) { extra_[key] = std::move(value); }
  void add_failures(const std::string& what, std::size_t n) { failures_[what] = n; }

  void write_csv(const std::string& rel, const io::CsvWriter& csv) {
    csv.save(dir_ / rel);
    add_file(rel);
  }
  void write_json(const std::string& rel, const json& j) {
    io::write_json(dir_ / rel, j);
    add_file(rel);
  }

  void finish(const std::string& status) {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    json j = {{"stage", stage_},   {"status", status},         {"config_hash", config_hash_},
              {"tool_version", kToolVersion}, {"inputs", inputs_}, {"files", files_},
              {"failure_counts", failures_}, {"wall_clock_s", wall}};
    for (auto& [k, v] : extra_.items()) j[k] = v;
    io::write_json(dir_ / "manifest.json", j);
  }

 private:
  fs::path dir_;
  std::string stage_;
  std::string config_hash_;
  std::chrono::steady_clock::time_point start_;
  json files_ = json::object();
  json inputs_ = json::object();
  json failures_ = json::object();
  json extra_ = json::object();
};

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

struct Context {
  const ExperimentConfig& cfg;
  std::ostream& log;
  fs::path stage_dir(const std::string& stage) const { return cfg.out / stage; }
};

inline void note(Context& ctx, const std::string& msg) { ctx.log << "[l96] " << msg << std::endl; }

inline fs::path require_path(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) {
    throw precondition_error(what + " not found at " + p.string() + " (run the producing stage first)");
  }
  return p;
}

inline io::Checkpoint load_checkpoint(Context& ctx, const std::string& closure, Manifest* m = nullptr) {
  const fs::path p = require_path(ctx.stage_dir("fit") / (closure + ".json"), "checkpoint '" + closure + "'");
  if (m) m->add_input(p);
  return io::checkpoint_from(io::read_json(p));
}

inline ClosureFactory model_factory(Context& ctx, const std::string& model_name, Manifest* m = nullptr) {
  const ModelSpec& spec = ctx.cfg.model(model_name);
  return io::make_factory(load_checkpoint(ctx, spec.closure, m), spec.latent);
}

inline ClimatologyStats load_truth_stats(Context& ctx, Manifest* m = nullptr) {
  const fs::path p = require_path(ctx.stage_dir("climatology") / "truth.json", "truth climatology");
  if (m) m->add_input(p);
  const json j = io::read_json(p);
  ClimatologyStats s;
  s.sigma_clim = j.at("sigma_clim").get<double>();
  s.mean_clim = j.at("mean_clim").get<double>();
  s.k_mean = io::vec_from(j.at("k_mean"));
  s.k_std = io::vec_from(j.at("k_std"));
  s.count = j.at("count").get<long>();
  s.n_runs = j.at("n_runs").get<int>();
  return s;
}

inline EnsembleConfig ensemble_config(const ExperimentConfig& cfg) {
  EnsembleConfig e = cfg.ensemble;
  e.seed = cfg.master_seed();
  return e;
}

inline std::vector<FullState> perfect_states(Context& ctx, const EnsembleConfig& e) {
  note(ctx, detail::concat("perfect states: ", e.n_init, " x ", e.spacing, " MTU"));
  return generate_perfect_states(ctx.cfg.params, ctx.cfg.integrator, e);
}

inline std::vector<std::string> k_header(const std::string& prefix, int K) {
  std::vector<std::string> h;
  for (int k = 0; k < K; ++k) h.push_back(prefix + std::to_string(k));
  return h;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

inline void cmd_gen_data(Context& ctx) {
  const auto& cfg = ctx.cfg;
  Manifest m(ctx.stage_dir("gen-data"), "gen-data", cfg);
  note(ctx, detail::concat("gen-data: ", cfg.dataset.n_steps, " full-model steps"));
  const TendencyDataset ds = build_training_dataset(cfg.params, cfg.integrator, cfg.master_seed(), cfg.dataset);
  const std::string hash = io::save_dataset(m.dir(), ds, cfg.params, cfg.integrator, cfg.master_seed());
  m.add_file("dataset.csv");
  m.add_file("dataset.json");
  m.set("dataset_hash", hash);
  m.set("split", {{"train", ds.split.train.size()}, {"val", ds.split.val.size()}, {"test", ds.split.test.size()}});
  m.finish("ok");
}

inline void cmd_fit(Context& ctx) {
  const auto& cfg = ctx.cfg;
  Manifest m(ctx.stage_dir("fit"), "fit", cfg);
  const fs::path ddir = ctx.stage_dir("gen-data");
  require_path(ddir / "dataset.json", "dataset");
  m.add_input(ddir / "dataset.csv");
  m.add_input(ddir / "dataset.json");
  const io::LoadedDataset loaded = io::load_dataset(ddir);
  const TendencyDataset& ds = loaded.data;
  const auto train_rows = ds.split.train;

  std::uint64_t idx = 0;
  for (const auto& spec : cfg.closures) {
    io::Checkpoint c;
    c.name = spec.name;
    c.kind = spec.kind;
    c.dataset_hash = loaded.hash;
    c.seed = derive_seed(cfg.master_seed(), SeedRole::training, {idx++});
    note(ctx, "fit: " + spec.name);
    if (spec.kind == "deterministic") {
      c.coeffs = fit_cubic_lsq(ds, train_rows);
    } else if (spec.kind == "poly_ar1") {
      c.coeffs = fit_cubic_lsq(ds, train_rows);
      c.ar1 = fit_ar1(cubic_residuals(ds, train_rows, c.coeffs));
    } else if (spec.kind == "bayesian") {
      c.posterior = fit_bayesian_posterior(ds, train_rows);
    } else {
      FlowConfig fc = cfg.flow;
      fc.variant = spec.variant;
      fc.tau = spec.tau;
      FlowModel model(fc, derive_seed(c.seed, SeedRole::init_weights));
      model = l96::train(std::move(model), ds, c.seed);
      model.dataset_hash = loaded.hash;
      if (!model.has_base_ar1()) model.latent = fit_latent_ar1(model, ds);
      io::save_loss_curve(m.dir() / (spec.name + "_loss.csv"), model.history);
      m.add_file(spec.name + "_loss.csv");
      note(ctx, detail::concat("  best epoch ", model.history.best_epoch, " of ", model.history.val_nll.size(),
                               ", val nll ", model.history.val_nll[static_cast<std::size_t>(model.history.best_epoch)]));
      c.flow = std::make_shared<const FlowModel>(std::move(model));
    }
    m.write_json(spec.name + ".json", io::checkpoint_json(c));
  }
  m.finish("ok");
}

inline void cmd_climatology(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto& cs = cfg.climatology;
  Manifest m(ctx.stage_dir("climatology"), "climatology", cfg);
  const std::uint64_t seed = cfg.master_seed();
  note(ctx, detail::concat("climatology: truth ", cs.truth_runs, " x ", cs.truth_duration, " MTU"));
  const auto truth_runs =
      truth_climatology_runs(cfg.params, cfg.integrator, seed, cs.truth_runs, cs.truth_duration, cs.spin_up, cfg.workers);
  const ClimatologyStats truth = climatology(truth_runs, "truth");
  std::vector<double> truth_sample = pooled_sample(truth_runs);
  m.write_json("truth.json", {{"sigma_clim", truth.sigma_clim}, {"mean_clim", truth.mean_clim},
                              {"k_mean", io::vec_json(truth.k_mean)}, {"k_std", io::vec_json(truth.k_std)},
                              {"count", truth.count}, {"n_runs", truth.n_runs},
                              {"duration", cs.truth_duration}});

  io::CsvWriter table({"model", "hellinger", "ks", "sigma_clim", "mean_clim", "failed_runs"});
  table.row(std::vector<std::string>{"truth", "0", "0", io::fmt(truth.sigma_clim), io::fmt(truth.mean_clim), "0"});
  for (const auto& name : cs.models) {
    note(ctx, detail::concat("climatology: ", name, " ", cs.reduced_runs, " x ", cs.reduced_duration, " MTU"));
    std::vector<char> failed;
    const auto runs = reduced_climatology_runs(model_factory(ctx, name, &m), cfg.params, cfg.integrator,
                                               derive_seed(seed, SeedRole::climatology, {1000}), cs.reduced_runs,
                                               cs.reduced_duration, cs.discard, cs.spin_up, cfg.workers, &failed);
    const auto n_failed = static_cast<std::size_t>(std::count(failed.begin(), failed.end(), 1));
    m.add_failures(name, n_failed);
    if (runs.empty()) {
      table.row(std::vector<std::string>{name, "nan", "nan", "nan", "nan", std::to_string(n_failed)});
      continue;
    }
    const ClimatologyStats st = climatology(runs, name);
    const std::vector<double> sample = pooled_sample(runs);
    const auto edges = shared_edges(truth_sample, sample, cs.bins);
    const Histogram ht = histogram(truth_sample, edges);
    const Histogram hm = histogram(sample, edges);
    const double h = hellinger(ht, hm);
    const double ks = ks_statistic(truth_sample, sample);
    table.row(std::vector<std::string>{name, io::fmt(h), io::fmt(ks), io::fmt(st.sigma_clim), io::fmt(st.mean_clim),
                                       std::to_string(n_failed)});
    io::CsvWriter hist({"lo", "hi", "truth", "model"});
    for (std::size_t b = 0; b < ht.bins(); ++b) {
      hist.row(std::vector<double>{edges[b], edges[b + 1], ht.masses[b], hm.masses[b]});
    }
    m.write_csv("hist_" + name + ".csv", hist);
  }
  m.write_csv("table.csv", table);
  m.finish("ok");
}

inline void cmd_internal_variability(Context& ctx) {
  const auto& cfg = ctx.cfg;
  Manifest m(ctx.stage_dir("internal-variability"), "internal-variability", cfg);
  EnsembleConfig e = ensemble_config(cfg);
  detail::require(e.n_init >= 2, "internal-variability: need n_init >= 2");
  const auto states = perfect_states(ctx, e);
  e.n_ens = 1;
  e.n_model = 1;
  e.pert_frac = 0.0;

  auto emit = [&](const std::string& name, const InternalVariability& iv, const std::vector<double>& times) {
    std::vector<std::string> header{"t", "sd_avg"};
    for (auto& h : k_header("sd_k", cfg.params.K)) header.push_back(h);
    io::CsvWriter csv(header);
    for (std::size_t t = 0; t < times.size(); ++t) {
      std::vector<double> row{times[t], iv.sd_avg[static_cast<Eigen::Index>(t)]};
      for (int k = 0; k < cfg.params.K; ++k) row.push_back(iv.sd(static_cast<Eigen::Index>(t), k));
      csv.row(row);
    }
    m.write_csv(name + ".csv", csv);
  };

  note(ctx, "internal-variability: truth");
  const auto truth = run_truth(e, states, cfg.params, cfg.integrator, cfg.workers);
  const auto times = l96::detail::stored_times(e, cfg.integrator);
  emit("truth", internal_variability(truth, times), times);
  for (const auto& name : cfg.internal_models) {
    note(ctx, "internal-variability: " + name);
    const EnsembleCube cube = run_mixed(e, model_factory(ctx, name, &m), states, 0.0, cfg.params, cfg.integrator,
                                        cfg.workers);
    m.add_failures(name, cube.failures.size());
    const auto runs = cube_member_runs(cube);
    if (runs.size() < 2) continue;
    emit(name, internal_variability(runs, cube.times), cube.times);
  }
  m.finish("ok");
}

inline void cmd_sensitivity(Context& ctx) {
  const auto& cfg = ctx.cfg;
  Manifest m(ctx.stage_dir("sensitivity"), "sensitivity", cfg);
  const ClimatologyStats clim = load_truth_stats(ctx, &m);
  EnsembleConfig e = ensemble_config(cfg);
  e.n_init = cfg.sensitivity.n_init;
  e.n_ens = cfg.sensitivity.n_ens;
  e.n_model = 1;
  e.horizon = cfg.sensitivity.horizon;
  const auto states = perfect_states(ctx, e);
  note(ctx, detail::concat("sensitivity: ", e.n_init, " x ", e.n_ens, " full-model members"));
  const EnsembleCube cube = run_truth_ensemble(e, states, clim.sigma_clim, cfg.params, cfg.integrator, cfg.workers);
  m.add_failures("truth", cube.failures.size());
  const auto a = apd(cube);
  const auto sp = rms_spread(cube);
  io::CsvWriter csv({"t", "apd", "spread"});
  for (std::size_t t = 0; t < cube.times.size(); ++t) csv.row(std::vector<double>{cube.times[t], a[t], sp[t]});
  m.write_csv("apd.csv", csv);
  m.finish("ok");
}

inline void cmd_ensemble(Context& ctx) {
  const auto& cfg = ctx.cfg;
  Manifest m(ctx.stage_dir("ensemble"), "ensemble", cfg);
  const ClimatologyStats clim = load_truth_stats(ctx, &m);
  const EnsembleConfig e = ensemble_config(cfg);
  const auto states = perfect_states(ctx, e);
  note(ctx, "ensemble: truth runs");
  const auto truth = run_truth(e, states, cfg.params, cfg.integrator, cfg.workers);
  bool exceeded = false;

  auto run = [&](const std::string& model, EnsembleConfig ec, const std::string& label) {
    note(ctx, detail::concat("ensemble: ", model, " ", label, " (", ec.n_init, " x ", ec.members_per_init(), ")"));
    EnsembleCube cube = run_ensemble(ec, model_factory(ctx, model, &m), states, clim.sigma_clim, cfg.params,
                                     cfg.integrator, cfg.workers);
    cube.truth = truth;
    const std::string stem = model + "_" + label;
    io::save_cube(m.dir() / stem, cube);
    m.add_file(stem + ".bin");
    m.add_file(stem + ".json");
    m.add_failures(stem, cube.failures.size());
    if (cube.failure_fraction() > cfg.failure_threshold) exceeded = true;
  };

  for (const auto& model : cfg.ensemble_models) {
    EnsembleConfig ec = e;
    ec.mode = EnsembleMode::separated;
    run(model, ec, "separated");
  }
  if (!cfg.mixed_model.empty()) {
    EnsembleConfig ec = e;
    ec.mode = EnsembleMode::mixed;
    run(cfg.mixed_model, ec, "mixed");
    ec.n_ens = e.n_ens * e.n_model;  // same total member count as the separated cube
    run(cfg.mixed_model, ec, "mixed_matched");
  }
  m.finish(exceeded ? "partial_failure" : "ok");
  if (exceeded) throw partial_failure_error("ensemble: member failure fraction above threshold");
}

inline std::vector<std::string> cube_stems(Context& ctx, const std::string& suffix_filter = {}) {
  const auto& cfg = ctx.cfg;
  std::vector<std::string> stems;
  for (const auto& model : cfg.ensemble_models) stems.push_back(model + "_separated");
  if (!cfg.mixed_model.empty()) {
    stems.push_back(cfg.mixed_model + "_mixed");
    stems.push_back(cfg.mixed_model + "_mixed_matched");
  }
  if (suffix_filter.empty()) return stems;
  std::vector<std::string> out;
  for (auto& s : stems) {
    if (ends_with(s, suffix_filter)) out.push_back(s);
  }
  return out;
}

inline EnsembleCube load_stage_cube(Context& ctx, const std::string& stem, Manifest& m) {
  const fs::path base = ctx.stage_dir("ensemble") / stem;
  fs::path j = base;
  j += ".json";
  require_path(j, "ensemble cube '" + stem + "'");
  fs::path b = base;
  b += ".bin";
  m.add_input(j);
  m.add_input(b);
  return io::load_cube(base);
}

inline void cmd_decompose(Context& ctx) {
  const auto& cfg = ctx.cfg;
  Manifest m(ctx.stage_dir("decompose"), "decompose", cfg);
  const std::string chash = config_hash(cfg);
  for (const auto& model : cfg.ensemble_models) {
    const std::string stem = model + "_separated";
    const EnsembleCube cube = load_stage_cube(ctx, stem, m);
    const VarianceDecomposition d = decompose(cube);
    io::CsvWriter csv({"t", "k", "v_total", "v_ens", "v_model", "interaction", "sd_total", "sd_ens", "sd_model"});
    double worst = 0.0;
    for (std::size_t t = 0; t < d.times.size(); ++t) {
      const auto ti = static_cast<Eigen::Index>(t);
      for (int k = 0; k <= cube.K; ++k) {
        const bool avg = k == cube.K;
        const double vt = avg ? d.v_total_avg[ti] : d.v_total(ti, k);
        const double ve = avg ? d.v_ens_avg[ti] : d.v_ens(ti, k);
        const double vm = avg ? d.v_model_avg[ti] : d.v_model(ti, k);
        const double in = avg ? d.interaction_avg[ti] : d.interaction(ti, k);
        if (vt > 0) worst = std::max(worst, std::abs(vt - ve - vm - in) / vt);
        csv.row(std::vector<std::string>{io::fmt(d.times[t]), avg ? "avg" : std::to_string(k), io::fmt(vt),
                                         io::fmt(ve), io::fmt(vm), io::fmt(in), io::fmt(std::sqrt(vt)),
                                         io::fmt(std::sqrt(ve)), io::fmt(std::sqrt(vm))});
      }
    }
    m.write_csv(model + ".csv", csv);
    m.write_json(model + ".json", {{"model", model}, {"slope", d.slope}, {"n_used", d.n_used},
                                   {"pert_std", cube.pert_std}, {"identity_max_rel", worst},
                                   {"config_hash", chash}});
  }
  if (!cfg.mixed_model.empty()) {
    const auto sep = total_spread(load_stage_cube(ctx, cfg.mixed_model + "_separated", m));
    const auto mix = mixed_total_spread(load_stage_cube(ctx, cfg.mixed_model + "_mixed", m));
    io::CsvWriter csv({"t", "sd_total_separated", "sd_total_mixed", "mean_separated", "mean_mixed"});
    const Vector ss = sep.sd_total_avg();
    const Vector sm = mix.sd_total_avg();
    for (std::size_t t = 0; t < sep.times.size(); ++t) {
      const auto ti = static_cast<Eigen::Index>(t);
      csv.row(std::vector<double>{sep.times[t], ss[ti], sm[ti], sep.mean_avg[ti], mix.mean_avg[ti]});
    }
    m.write_csv("mixed_vs_separated.csv", csv);
  }
  m.finish("ok");
}

inline void cmd_skill(Context& ctx) {
  const auto& cfg = ctx.cfg;
  Manifest m(ctx.stage_dir("skill"), "skill", cfg);
  const ClimatologyStats clim = load_truth_stats(ctx, &m);
  for (const auto& stem : cube_stems(ctx)) {
    const EnsembleCube cube = load_stage_cube(ctx, stem, m);
    const SkillSeries s = skill(cube, clim.mean_clim);
    io::CsvWriter csv({"t", "rmse", "ancr", "spread", "consistency_distance"});
    for (std::size_t t = 0; t < s.times.size(); ++t) {
      csv.row(std::vector<double>{s.times[t], s.rmse[t], s.ancr[t], s.spread[t], s.distance[t]});
    }
    m.write_csv(stem + ".csv", csv);
    int excluded = 0;
    for (int v : s.ancr_excluded) excluded += v;
    m.add_failures(stem + "_ancr_excluded", static_cast<std::size_t>(excluded));
  }
  m.finish("ok");
}

inline CorrelationSeries mean_correlations(const std::vector<Matrix>& runs, long max_lag, double dt) {
  CorrelationSeries acc;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    CorrelationSeries c = correlations(runs[r], max_lag, dt);
    if (r == 0) {
      acc = std::move(c);
      continue;
    }
    acc.acf += c.acf;
    acc.ccf += c.ccf;
  }
  const double n = static_cast<double>(runs.size());
  acc.acf /= n;
  acc.ccf /= n;
  acc.acf_avg = acc.acf.rowwise().mean();
  acc.ccf_avg = acc.ccf.rowwise().mean();
  return acc;
}

inline void cmd_correlations(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto& cs = cfg.correlations;
  Manifest m(ctx.stage_dir("correlations"), "correlations", cfg);
  const std::uint64_t seed = derive_seed(cfg.master_seed(), SeedRole::climatology, {2000});
  const double dt = cfg.integrator.dt_out;
  detail::require(std::abs(cfg.integrator.dt_reduced - dt) < 1e-12,
                  "correlations: full and reduced output intervals must match");
  const long max_lag = detail::exact_steps(cs.max_lag, dt, "correlation max_lag");

  auto emit = [&](const std::string& name, const CorrelationSeries& c) {
    std::vector<std::string> header{"lag", "acf", "ccf"};
    for (auto& h : k_header("acf_k", cfg.params.K)) header.push_back(h);
    for (auto& h : k_header("ccf_k", cfg.params.K)) header.push_back(h);
    io::CsvWriter csv(header);
    for (std::size_t l = 0; l < c.lags.size(); ++l) {
      const auto li = static_cast<Eigen::Index>(l);
      std::vector<double> row{c.lags[l], c.acf_avg[li], c.ccf_avg[li]};
      for (int k = 0; k < cfg.params.K; ++k) row.push_back(c.acf(li, k));
      for (int k = 0; k < cfg.params.K; ++k) row.push_back(c.ccf(li, k));
      csv.row(row);
    }
    m.write_csv(name + ".csv", csv);
  };

  note(ctx, detail::concat("correlations: truth ", cs.runs, " x ", cs.duration, " MTU"));
  const auto truth_runs =
      truth_climatology_runs(cfg.params, cfg.integrator, seed, cs.runs, cs.duration, cfg.climatology.spin_up, cfg.workers);
  const CorrelationSeries truth = mean_correlations(truth_runs, max_lag, dt);
  emit("truth", truth);
  io::CsvWriter summary({"model", "acf_deviation", "ccf_deviation"});
  for (const auto& name : cs.models) {
    note(ctx, "correlations: " + name);
    std::vector<char> failed;
    const auto runs = reduced_climatology_runs(model_factory(ctx, name, &m), cfg.params, cfg.integrator, seed, cs.runs,
                                               cs.duration, cfg.climatology.discard, cfg.climatology.spin_up,
                                               cfg.workers, &failed);
    m.add_failures(name, static_cast<std::size_t>(std::count(failed.begin(), failed.end(), 1)));
    if (runs.empty()) continue;
    const CorrelationSeries c = mean_correlations(runs, max_lag, dt);
    emit(name, c);
    const auto [da, dc] = correlation_deviation(c, truth, cs.compare_lag);
    summary.row(std::vector<std::string>{name, io::fmt(da), io::fmt(dc)});
  }
  m.write_csv("summary.csv", summary);
  m.finish("ok");
}

// ---------------------------------------------------------------------------
// Report: aggregation of persisted artifacts only
// ---------------------------------------------------------------------------

inline double value_at(const std::vector<double>& t, const std::vector<double>& v, double at) {
  const long i = time_index(t, at);
  return i < 0 ? std::nan("") : v[static_cast<std::size_t>(i)];
}

inline void cmd_report(Context& ctx) {
  const auto& cfg = ctx.cfg;
  Manifest m(ctx.stage_dir("report"), "report", cfg);
  json summary = {{"config_hash", config_hash(cfg)}};
  auto input_csv = [&](const fs::path& p) {
    m.add_input(p);
    return io::read_csv(p);
  };
  auto exists = [&](const std::string& stage, const std::string& file) {
    return fs::exists(ctx.stage_dir(stage) / file);
  };

  if (exists("climatology", "table.csv")) {
    const auto truth = io::read_json(ctx.stage_dir("climatology") / "truth.json");
    m.add_input(ctx.stage_dir("climatology") / "truth.json");
    const auto t = input_csv(ctx.stage_dir("climatology") / "table.csv");
    json rows = json::array();
    io::CsvWriter a1({"model", "hellinger", "ks"});
    for (const auto& r : t.rows) {
      rows.push_back({{"model", r[0]}, {"hellinger", std::stod(r[1])}, {"ks", std::stod(r[2])},
                      {"sigma_clim", std::stod(r[3])}, {"failed_runs", std::stol(r[5])}});
      if (r[0] != "truth") a1.row(std::vector<std::string>{r[0], r[1], r[2]});
    }
    m.write_csv("table_a1.csv", a1);
    summary["climatology"] = {{"truth", truth}, {"models", rows}};
  }

  if (exists("internal-variability", "truth.csv")) {
    json iv = json::object();
    for (const auto& name : [&] {
           std::vector<std::string> v{"truth"};
           v.insert(v.end(), cfg.internal_models.begin(), cfg.internal_models.end());
           return v;
         }()) {
      if (!exists("internal-variability", name + ".csv")) continue;
      const auto t = input_csv(ctx.stage_dir("internal-variability") / (name + ".csv"));
      const auto times = t.numbers("t");
      const auto sd = t.numbers("sd_avg");
      double late = 0.0, min_early = sd.front();
      int n = 0;
      for (std::size_t i = 0; i < times.size(); ++i) {
        if (times[i] >= 2.0 - 1e-9) {
          late += sd[i];
          ++n;
        }
        if (times[i] <= 1.0 + 1e-9) min_early = std::min(min_early, sd[i]);
      }
      iv[name] = {{"sd0", sd.front()}, {"mean_sd_after_2", n ? late / n : std::nan("")}, {"min_sd_0_1", min_early}};
    }
    summary["internal_variability"] = iv;
  }

  if (exists("sensitivity", "apd.csv")) {
    const auto t = input_csv(ctx.stage_dir("sensitivity") / "apd.csv");
    const auto times = t.numbers("t");
    const auto a = t.numbers("apd");
    const auto sp = t.numbers("spread");
    // Least-squares slope of log APD over t in [0, 1.5].
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int n = 0;
    double late_spread = 0.0;
    int nl = 0;
    for (std::size_t i = 0; i < times.size(); ++i) {
      if (times[i] <= 1.5 + 1e-9 && a[i] > 0) {
        const double y = std::log(a[i]);
        sx += times[i];
        sy += y;
        sxx += times[i] * times[i];
        sxy += times[i] * y;
        ++n;
      }
      if (times[i] >= 5.0 - 1e-9) {
        late_spread += sp[i];
        ++nl;
      }
    }
    const double slope = n >= 2 ? (n * sxy - sx * sy) / (n * sxx - sx * sx) : std::nan("");
    summary["sensitivity"] = {{"log_apd_slope_0_1_5", slope},
                              {"apd_4", value_at(times, a, 4.0)},
                              {"apd_5", value_at(times, a, 5.0)},
                              {"apd_ratio_4_5", value_at(times, a, 4.0) / value_at(times, a, 5.0)},
                              {"mean_spread_after_5", nl ? late_spread / nl : std::nan("")}};
  }

  json dec = json::object();
  for (const auto& model : cfg.ensemble_models) {
    if (!exists("decompose", model + ".json")) continue;
    const auto j = io::read_json(ctx.stage_dir("decompose") / (model + ".json"));
    m.add_input(ctx.stage_dir("decompose") / (model + ".json"));
    const auto t = input_csv(ctx.stage_dir("decompose") / (model + ".csv"));
    std::vector<double> times, sd_total, sd_ens, sd_model;
    const long kc = t.column("k");
    for (const auto& r : t.rows) {
      if (r[static_cast<std::size_t>(kc)] != "avg") continue;
      times.push_back(std::stod(r[0]));
      sd_total.push_back(std::stod(r[6]));
      sd_ens.push_back(std::stod(r[7]));
      sd_model.push_back(std::stod(r[8]));
    }
    dec[model] = {{"slope", j.at("slope")}, {"identity_max_rel", j.at("identity_max_rel")},
                  {"pert_std", j.at("pert_std")}, {"times", times}, {"sd_total", sd_total},
                  {"sd_ens", sd_ens}, {"sd_model", sd_model}};
  }
  if (!dec.empty()) summary["decomposition"] = dec;

  if (exists("decompose", "mixed_vs_separated.csv")) {
    const auto t = input_csv(ctx.stage_dir("decompose") / "mixed_vs_separated.csv");
    summary["mixed"] = {{"times", t.numbers("t")},
                        {"sd_total_separated", t.numbers("sd_total_separated")},
                        {"sd_total_mixed", t.numbers("sd_total_mixed")},
                        {"mean_separated", t.numbers("mean_separated")},
                        {"mean_mixed", t.numbers("mean_mixed")}};
  }

  json sk = json::object();
  for (const auto& stem : cube_stems(ctx)) {
    if (!exists("skill", stem + ".csv")) continue;
    const auto t = input_csv(ctx.stage_dir("skill") / (stem + ".csv"));
    sk[stem] = {{"times", t.numbers("t")}, {"rmse", t.numbers("rmse")}, {"ancr", t.numbers("ancr")},
                {"spread", t.numbers("spread")}, {"consistency_distance", t.numbers("consistency_distance")}};
  }
  if (!sk.empty()) summary["skill"] = sk;

  if (exists("correlations", "summary.csv")) {
    const auto t = input_csv(ctx.stage_dir("correlations") / "summary.csv");
    json c = json::object();
    for (const auto& r : t.rows) c[r[0]] = {{"acf_deviation", std::stod(r[1])}, {"ccf_deviation", std::stod(r[2])}};
    const auto tr = input_csv(ctx.stage_dir("correlations") / "truth.csv");
    const auto lags = tr.numbers("lag");
    const auto ccf_truth = tr.numbers("ccf");
    std::size_t arg = 0;
    for (std::size_t l = 1; l < lags.size(); ++l) {
      if (std::abs(ccf_truth[l]) > std::abs(ccf_truth[arg])) arg = l;
    }
    summary["correlations"] = {{"deviation", c}, {"truth_ccf_extremum_lag", lags[arg]},
                               {"truth_ccf_extremum", ccf_truth[arg]}};
  }

  m.write_json("summary.json", summary);
  m.finish("ok");
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"gen-data",    "fit",      "climatology", "internal-variability",
                                              "sensitivity", "ensemble", "decompose",   "skill",
                                              "correlations", "report"};
  return names;
}

inline void run_stage(const std::string& stage, Context& ctx) {
  if (stage == "gen-data") return cmd_gen_data(ctx);
  if (stage == "fit") return cmd_fit(ctx);
  if (stage == "climatology") return cmd_climatology(ctx);
  if (stage == "internal-variability") return cmd_internal_variability(ctx);
  if (stage == "sensitivity") return cmd_sensitivity(ctx);
  if (stage == "ensemble") return cmd_ensemble(ctx);
  if (stage == "decompose") return cmd_decompose(ctx);
  if (stage == "skill") return cmd_skill(ctx);
  if (stage == "correlations") return cmd_correlations(ctx);
  if (stage == "report") return cmd_report(ctx);
  throw precondition_error("unknown stage '" + stage + "'");
}

/// Maps an exception from a stage to the CLI exit code.
inline int exit_code_for(std::exception_ptr e, std::string& message) {
  try {
    std::rethrow_exception(e);
  } catch (const partial_failure_error& x) {
    message = x.what();
    return kPartialFailure;
  } catch (const divergence_error& x) {
    message = x.what();
    return kDivergence;
  } catch (const training_diverged_error& x) {
    message = x.what();
    return kDivergence;
  } catch (const numerical_error& x) {
    message = x.what();
    return kDivergence;
  } catch (const precondition_error& x) {
    message = x.what();
    return kConfigError;
  } catch (const std::exception& x) {
    message = x.what();
    return kConfigError;
  }
}

inline void print_plan(const std::string& command, const ExperimentConfig& cfg, std::ostream& os) {
  const std::vector<std::string> stages =
      command == "suite" ? stage_names() : std::vector<std::string>{command};
  os << "config hash " << config_hash(cfg) << ", seed " << cfg.master_seed() << ", out " << cfg.out.string()
     << ", workers " << resolve_workers(cfg.workers) << "\n";
  for (const auto& s : stages) {
    os << "  " << s << ": ";
    if (s == "gen-data") {
      os << cfg.dataset.n_steps << " full-model samples, split " << cfg.dataset.n_train << "/" << cfg.dataset.n_val;
    } else if (s == "fit") {
      for (const auto& c : cfg.closures) os << c.name << " ";
    } else if (s == "climatology") {
      os << "truth " << cfg.climatology.truth_runs << "x" << cfg.climatology.truth_duration << " MTU; "
         << cfg.climatology.models.size() << " models " << cfg.climatology.reduced_runs << "x"
         << cfg.climatology.reduced_duration << " MTU";
    } else if (s == "internal-variability") {
      os << cfg.ensemble.n_init << " initial states; models " << cfg.internal_models.size();
    } else if (s == "sensitivity") {
      os << cfg.sensitivity.n_init << "x" << cfg.sensitivity.n_ens << " full-model members, "
         << cfg.sensitivity.horizon << " MTU";
    } else if (s == "ensemble") {
      os << cfg.ensemble.n_init << "x" << cfg.ensemble.n_ens << "x" << cfg.ensemble.n_model << " for "
         << cfg.ensemble_models.size() << " models; mixed " << (cfg.mixed_model.empty() ? "none" : cfg.mixed_model);
    } else if (s == "correlations") {
      os << cfg.correlations.runs << "x" << cfg.correlations.duration << " MTU, lags to " << cfg.correlations.max_lag;
    } else {
      os << "from persisted artifacts";
    }
    os << "\n";
  }
}

/// Runs one stage or the whole suite; returns the process exit code.
/// In the suite a failing stage is recorded and later stages still run.
inline int run_command(const std::string& command, const ExperimentConfig& cfg, std::ostream& log,
                       bool dry_run = false) {
  std::string msg;
  try {
    (void)cfg.master_seed();
    if (command != "suite") {
      bool known = false;
      for (const auto& s : stage_names()) known = known || s == command;
      if (!known) throw precondition_error("unknown command '" + command + "'");
    }
  } catch (...) {
    const int code = exit_code_for(std::current_exception(), msg);
    log << "error: " << msg << std::endl;
    return code;
  }
  if (dry_run) {
    print_plan(command, cfg, log);
    return kOk;
  }
  Context ctx{cfg, log};
  if (command != "suite") {
    try {
      run_stage(command, ctx);
      return kOk;
    } catch (...) {
      const int code = exit_code_for(std::current_exception(), msg);
      log << "error: " << command << ": " << msg << std::endl;
      return code;
    }
  }
  int first = kOk;
  json stages = json::object();
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& s : stage_names()) {
    try {
      run_stage(s, ctx);
      stages[s] = "ok";
    } catch (...) {
      const int code = exit_code_for(std::current_exception(), msg);
      log << "error: " << s << ": " << msg << std::endl;
      stages[s] = {{"status", "failed"}, {"exit_code", code}, {"message", msg}};
      if (first == kOk) first = code;
    }
  }
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  io::write_json(cfg.out / "manifest.json", {{"stage", "suite"}, {"config_hash", config_hash(cfg)},
                                             {"tool_version", kToolVersion}, {"stages", stages},
                                             {"config", config_json(cfg)}, {"wall_clock_s", wall}});
  return first;
}

}  // namespace l96::cli

#endif  // L96_EXPERIMENT_HPP_
