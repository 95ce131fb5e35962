#ifndef L96_IO_HPP_
#define L96_IO_HPP_

// Persistence: CSV tables with JSON sidecars, binary ensemble cubes, and JSON
// closure checkpoints. Hashes are FNV-1a 64 over file bytes.

#include "l96/closures.hpp"
#include "l96/common.hpp"
#include "l96/dynamics.hpp"
#include "l96/ensemble.hpp"
#include "l96/flows.hpp"

#include <json.hpp>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace l96::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Hashing and raw files
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string hash_string(const std::string& s) { return hex64(fnv1a64(s.data(), s.size())); }

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw precondition_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string hash_file(const fs::path& path) { return hash_string(read_file(path)); }

inline void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

inline void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw precondition_error("invalid JSON in " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

/// Round-trip representation for data that is read back.
inline std::string fmt_exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header) { row(header); }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c) os_ << ',';
      os_ << cells[c];
    }
    os_ << '\n';
  }
  void row(const std::vector<double>& values) {
    std::vector<std::string> cells;
    cells.reserve(values.size());
    for (double v : values) cells.push_back(fmt(v));
    row(cells);
  }
  std::string str() const { return os_.str(); }
  void save(const fs::path& path) const { write_file(path, str()); }

 private:
  std::ostringstream os_;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  long column(const std::string& name) const {
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (header[c] == name) return static_cast<long>(c);
    }
    throw precondition_error("CSV has no column '" + name + "'");
  }
  std::vector<double> numbers(const std::string& name) const {
    const long c = column(name);
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(std::stod(r[static_cast<std::size_t>(c)]));
    return out;
  }
};

inline CsvTable read_csv(const fs::path& path) {
  std::istringstream in(read_file(path));
  CsvTable t;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (first) {
      t.header = std::move(cells);
      first = false;
    } else {
      t.rows.push_back(std::move(cells));
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

inline json to_json(const L96Params& p) {
  return {{"K", p.K}, {"J", p.J}, {"h", p.h}, {"b", p.b}, {"c", p.c}, {"F", p.F}};
}

inline L96Params params_from_json(const json& j, L96Params p = {}) {
  p.K = j.value("K", p.K);
  p.J = j.value("J", p.J);
  p.h = j.value("h", p.h);
  p.b = j.value("b", p.b);
  p.c = j.value("c", p.c);
  p.F = j.value("F", p.F);
  p.validate();
  return p;
}

inline json to_json(const IntegratorConfig& c) {
  return {{"dt_full", c.dt_full}, {"dt_out", c.dt_out}, {"dt_reduced", c.dt_reduced}};
}

inline IntegratorConfig integrator_from_json(const json& j, IntegratorConfig c = {}) {
  c.dt_full = j.value("dt_full", c.dt_full);
  c.dt_out = j.value("dt_out", c.dt_out);
  c.dt_reduced = j.value("dt_reduced", c.dt_reduced);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Dataset: CSV `t, x0.., u0..` + sidecar with split boundaries
// ---------------------------------------------------------------------------

inline json range_json(IndexRange r) { return json::array({r.begin, r.end}); }
inline IndexRange range_from(const json& j) { return {j.at(0).get<std::size_t>(), j.at(1).get<std::size_t>()}; }

/// Writes dataset.csv and dataset.json; returns the CSV content hash.
inline std::string save_dataset(const fs::path& dir, const TendencyDataset& ds, const L96Params& p,
                                const IntegratorConfig& icfg, std::uint64_t seed) {
  std::vector<std::string> header{"t"};
  for (int k = 0; k < p.K; ++k) header.push_back("x" + std::to_string(k));
  for (int k = 0; k < p.K; ++k) header.push_back("u" + std::to_string(k));
  CsvWriter csv(header);
  std::vector<std::string> row(static_cast<std::size_t>(1 + 2 * p.K));
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    row[0] = fmt_exact(ds.times[r]);
    for (int k = 0; k < p.K; ++k) {
      row[static_cast<std::size_t>(1 + k)] = fmt_exact(ds.x(static_cast<Eigen::Index>(r), k));
      row[static_cast<std::size_t>(1 + p.K + k)] = fmt_exact(ds.u(static_cast<Eigen::Index>(r), k));
    }
    csv.row(row);
  }
  const std::string content = csv.str();
  write_file(dir / "dataset.csv", content);
  const std::string hash = hash_string(content);
  json side = {{"params", to_json(p)},
               {"integrator", to_json(icfg)},
               {"dt", ds.dt},
               {"seed", seed},
               {"rows", ds.rows()},
               {"split", {{"train", range_json(ds.split.train)}, {"val", range_json(ds.split.val)},
                          {"test", range_json(ds.split.test)}}},
               {"hash", hash}};
  write_json(dir / "dataset.json", side);
  return hash;
}

struct LoadedDataset {
  TendencyDataset data;
  L96Params params;
  std::string hash;
  std::uint64_t seed = 0;
};

inline LoadedDataset load_dataset(const fs::path& dir) {
  const json side = read_json(dir / "dataset.json");
  const std::string content = read_file(dir / "dataset.csv");
  LoadedDataset out;
  out.params = params_from_json(side.at("params"));
  out.hash = hash_string(content);
  if (side.contains("hash") && side["hash"] != out.hash) {
    throw precondition_error("dataset.csv does not match the hash recorded in dataset.json");
  }
  out.seed = side.value("seed", std::uint64_t{0});
  const CsvTable t = read_csv(dir / "dataset.csv");
  const int K = out.params.K;
  const auto n = static_cast<Eigen::Index>(t.rows.size());
  auto& ds = out.data;
  ds.dt = side.at("dt").get<double>();
  ds.x.resize(n, K);
  ds.u.resize(n, K);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& row = t.rows[static_cast<std::size_t>(r)];
    ds.times.push_back(std::stod(row[0]));
    for (int k = 0; k < K; ++k) {
      ds.x(r, k) = std::stod(row[static_cast<std::size_t>(1 + k)]);
      ds.u(r, k) = std::stod(row[static_cast<std::size_t>(1 + K + k)]);
    }
  }
  const auto& sp = side.at("split");
  ds.split = {range_from(sp.at("train")), range_from(sp.at("val")), range_from(sp.at("test"))};
  return out;
}

// ---------------------------------------------------------------------------
// Closure checkpoints
// ---------------------------------------------------------------------------

inline json to_json(const CubicCoeffs& c) { return json::array({c.a, c.b, c.c, c.d}); }
inline CubicCoeffs cubic_from(const json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>()};
}

template <typename Derived>
json vec_json(const Eigen::MatrixBase<Derived>& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Eigen::VectorXd vec_from(const json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  return v;
}

template <typename Derived>
json mat_json(const Eigen::MatrixBase<Derived>& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline json posterior_json(const BayesPosterior& p) {
  return {{"mean", vec_json(p.mean)}, {"cov_scale", mat_json(p.cov_scale)}, {"shape", p.shape},
          {"rate", p.rate}, {"log_evidence", p.log_evidence}};
}

inline BayesPosterior posterior_from(const json& j) {
  BayesPosterior p;
  p.mean = vec_from(j.at("mean"));
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) p.cov_scale(r, c) = j.at("cov_scale").at(r).at(c).get<double>();
  p.shape = j.at("shape").get<double>();
  p.rate = j.at("rate").get<double>();
  p.log_evidence = j.value("log_evidence", 0.0);
  p.validate();
  return p;
}

inline json flow_config_json(const FlowConfig& c) {
  return {{"dim", c.dim}, {"n_coupling", c.n_coupling}, {"hidden", c.hidden}, {"depth", c.depth},
          {"activation", "relu"}, {"lr", c.lr}, {"batch", c.batch}, {"max_epochs", c.max_epochs},
          {"patience", c.patience}, {"seq_len", c.seq_len}, {"variant", to_string(c.variant)},
          {"tau", c.tau}, {"cond_dim", c.cond_dim()}};
}

inline FlowConfig flow_config_from(const json& j, FlowConfig c = {}) {
  c.dim = j.value("dim", c.dim);
  c.n_coupling = j.value("n_coupling", c.n_coupling);
  c.hidden = j.value("hidden", c.hidden);
  c.depth = j.value("depth", c.depth);
  c.lr = j.value("lr", c.lr);
  c.batch = j.value("batch", c.batch);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.seq_len = j.value("seq_len", c.seq_len);
  if (j.contains("variant")) c.variant = parse_flow_variant(j["variant"].get<std::string>());
  c.tau = j.value("tau", c.tau);
  return c;
}

inline json mlp_json(const nn::Mlp& net, const Eigen::VectorXd& theta) {
  json layers = json::array();
  for (int l = 0; l < net.n_layers(); ++l) {
    layers.push_back({{"W", mat_json(net.W(theta, l))}, {"b", vec_json(net.b(theta, l))}});
  }
  return layers;
}

inline void mlp_from(const json& j, const nn::Mlp& net, Eigen::VectorXd& theta) {
  detail::require(static_cast<int>(j.size()) == net.n_layers(), "flow checkpoint: layer count mismatch");
  for (int l = 0; l < net.n_layers(); ++l) {
    auto W = net.W(theta, l);
    auto b = net.b(theta, l);
    const auto& jl = j.at(static_cast<std::size_t>(l));
    detail::require(static_cast<Eigen::Index>(jl.at("W").size()) == W.rows(), "flow checkpoint: weight shape mismatch");
    for (Eigen::Index r = 0; r < W.rows(); ++r) {
      detail::require(static_cast<Eigen::Index>(jl["W"][static_cast<std::size_t>(r)].size()) == W.cols(),
                      "flow checkpoint: weight shape mismatch");
      for (Eigen::Index c = 0; c < W.cols(); ++c) {
        W(r, c) = jl["W"][static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
      }
    }
    b = vec_from(jl.at("b"));
  }
}

inline json flow_json(const FlowModel& m) {
  json layers = json::array();
  for (int l = 0; l < m.config.n_coupling; ++l) {
    layers.push_back({{"mask", vec_json(m.mask(l))}, {"s_net", mlp_json(m.s_net(l), m.theta)},
                      {"t_net", mlp_json(m.t_net(l), m.theta)}});
  }
  json j = {{"config", flow_config_json(m.config)},
            {"layers", layers},
            {"standardization", {{"x_mean", vec_json(m.scale.x_mean)}, {"x_std", vec_json(m.scale.x_std)},
                                 {"u_mean", vec_json(m.scale.u_mean)}, {"u_std", vec_json(m.scale.u_std)}}},
            {"history", {{"train_nll", m.history.train_nll}, {"val_nll", m.history.val_nll},
                         {"best_epoch", m.history.best_epoch}}},
            {"dataset_hash", m.dataset_hash},
            {"seed", m.seed}};
  if (m.has_tail()) {
    const Eigen::Index K = m.config.dim;
    const Eigen::Index o = m.tail_offset();
    j["tail"] = {{"mu", vec_json(m.theta.segment(o, K))},
                 {"log_sigma", vec_json(m.theta.segment(o + K, K))},
                 {"log_lambda_pos", vec_json(m.theta.segment(o + 2 * K, K))},
                 {"log_lambda_neg", vec_json(m.theta.segment(o + 3 * K, K))}};
  }
  if (m.has_base_ar1()) {
    const Eigen::Index K = m.config.dim;
    const Eigen::Index o = m.ar_offset();
    auto [rho, sigma] = m.base_ar1_params();
    j["base_ar1"] = {{"atanh_rho", vec_json(m.theta.segment(o, K))}, {"log_sigma", vec_json(m.theta.segment(o + K, K))},
                     {"rho", vec_json(rho)}, {"sigma", vec_json(sigma)}};
  }
  if (m.latent) j["latent_ar1"] = {{"rho", vec_json(m.latent->rho)}, {"sigma_z", vec_json(m.latent->sigma_z)}};
  return j;
}

inline FlowModel flow_from(const json& j) {
  FlowModel m;
  m.config = flow_config_from(j.at("config"));
  m.config.validate();
  m.build_layout();
  m.theta = Eigen::VectorXd::Zero(m.n_params());
  const auto& layers = j.at("layers");
  detail::require(static_cast<int>(layers.size()) == m.config.n_coupling, "flow checkpoint: coupling count mismatch");
  for (int l = 0; l < m.config.n_coupling; ++l) {
    mlp_from(layers[static_cast<std::size_t>(l)].at("s_net"), m.s_net(l), m.theta);
    mlp_from(layers[static_cast<std::size_t>(l)].at("t_net"), m.t_net(l), m.theta);
  }
  const Eigen::Index K = m.config.dim;
  if (m.has_tail()) {
    const auto& t = j.at("tail");
    const Eigen::Index o = m.tail_offset();
    m.theta.segment(o, K) = vec_from(t.at("mu"));
    m.theta.segment(o + K, K) = vec_from(t.at("log_sigma"));
    m.theta.segment(o + 2 * K, K) = vec_from(t.at("log_lambda_pos"));
    m.theta.segment(o + 3 * K, K) = vec_from(t.at("log_lambda_neg"));
  }
  if (m.has_base_ar1()) {
    const auto& a = j.at("base_ar1");
    m.theta.segment(m.ar_offset(), K) = vec_from(a.at("atanh_rho"));
    m.theta.segment(m.ar_offset() + K, K) = vec_from(a.at("log_sigma"));
  }
  const auto& s = j.at("standardization");
  m.scale = {vec_from(s.at("x_mean")), vec_from(s.at("x_std")), vec_from(s.at("u_mean")), vec_from(s.at("u_std"))};
  if (j.contains("latent_ar1")) {
    m.latent = LatentAR1{vec_from(j["latent_ar1"].at("rho")), vec_from(j["latent_ar1"].at("sigma_z"))};
  }
  if (j.contains("history")) {
    m.history.train_nll = j["history"].value("train_nll", std::vector<double>{});
    m.history.val_nll = j["history"].value("val_nll", std::vector<double>{});
    m.history.best_epoch = j["history"].value("best_epoch", -1);
  }
  m.dataset_hash = j.value("dataset_hash", std::string{});
  m.seed = j.value("seed", std::uint64_t{0});
  return m;
}

inline void save_loss_curve(const fs::path& path, const TrainingHistory& h) {
  CsvWriter csv({"epoch", "train_nll", "val_nll"});
  for (std::size_t e = 0; e < h.train_nll.size(); ++e) {
    csv.row(std::vector<std::string>{std::to_string(e), fmt(h.train_nll[e]), fmt(h.val_nll[e])});
  }
  csv.save(path);
}

/// A fitted closure as held in memory: exactly one of the payloads is set.
struct Checkpoint {
  std::string name;
  std::string kind;  // deterministic | poly_ar1 | bayesian | flow
  CubicCoeffs coeffs;
  AR1Params ar1;
  BayesPosterior posterior;
  std::shared_ptr<const FlowModel> flow;
  std::string dataset_hash;
  std::uint64_t seed = 0;
};

inline json checkpoint_json(const Checkpoint& c) {
  json j = {{"name", c.name}, {"kind", c.kind}, {"dataset_hash", c.dataset_hash}, {"seed", c.seed}};
  if (c.kind == "deterministic" || c.kind == "poly_ar1") j["coeffs"] = to_json(c.coeffs);
  if (c.kind == "poly_ar1") j["ar1"] = {{"rho", c.ar1.rho}, {"sigma_e", c.ar1.sigma_e}};
  if (c.kind == "bayesian") j["posterior"] = posterior_json(c.posterior);
  if (c.kind == "flow") j["flow"] = flow_json(*c.flow);
  return j;
}

inline Checkpoint checkpoint_from(const json& j) {
  Checkpoint c;
  c.name = j.value("name", std::string{});
  c.kind = j.at("kind").get<std::string>();
  c.dataset_hash = j.value("dataset_hash", std::string{});
  c.seed = j.value("seed", std::uint64_t{0});
  if (c.kind == "deterministic" || c.kind == "poly_ar1") c.coeffs = cubic_from(j.at("coeffs"));
  if (c.kind == "poly_ar1") {
    c.ar1 = {j.at("ar1").at("rho").get<double>(), j.at("ar1").at("sigma_e").get<double>()};
    c.ar1.validate();
  }
  if (c.kind == "bayesian") c.posterior = posterior_from(j.at("posterior"));
  if (c.kind == "flow") c.flow = std::make_shared<const FlowModel>(flow_from(j.at("flow")));
  if (c.kind != "deterministic" && c.kind != "poly_ar1" && c.kind != "bayesian" && c.kind != "flow") {
    throw precondition_error("unknown closure kind '" + c.kind + "'");
  }
  return c;
}

/// Factory producing fresh closure instances; `latent` only matters for flows.
inline ClosureFactory make_factory(const Checkpoint& c, LatentMode latent = LatentMode::iid) {
  if (c.kind == "deterministic") return [co = c.coeffs] { return ClosurePtr(new DeterministicClosure(co)); };
  if (c.kind == "poly_ar1") {
    return [co = c.coeffs, ar = c.ar1] { return ClosurePtr(new PolyAR1Closure(co, ar)); };
  }
  if (c.kind == "bayesian") return [post = c.posterior] { return ClosurePtr(new BayesianClosure(post)); };
  if (latent == LatentMode::ar1) (void)c.flow->sampling_ar1();  // fail early when unfitted
  return [f = c.flow, latent] { return ClosurePtr(new FlowClosure(f, latent)); };
}

// ---------------------------------------------------------------------------
// Ensemble cube: raw little-endian doubles + JSON sidecar
// ---------------------------------------------------------------------------

inline json ensemble_config_json(const EnsembleConfig& c) {
  return {{"n_init", c.n_init}, {"n_ens", c.n_ens}, {"n_model", c.n_model}, {"spacing", c.spacing},
          {"pert_frac", c.pert_frac}, {"horizon", c.horizon}, {"spin_up", c.spin_up},
          {"store_stride", c.store_stride}, {"mode", to_string(c.mode)}, {"seed", c.seed}};
}

inline EnsembleConfig ensemble_config_from(const json& j, EnsembleConfig c = {}) {
  c.n_init = j.value("n_init", c.n_init);
  c.n_ens = j.value("n_ens", c.n_ens);
  c.n_model = j.value("n_model", c.n_model);
  c.spacing = j.value("spacing", c.spacing);
  c.pert_frac = j.value("pert_frac", c.pert_frac);
  c.horizon = j.value("horizon", c.horizon);
  c.spin_up = j.value("spin_up", c.spin_up);
  c.store_stride = j.value("store_stride", c.store_stride);
  if (j.contains("mode")) c.mode = parse_ensemble_mode(j["mode"].get<std::string>());
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

/// Writes <stem>.bin and <stem>.json; returns the binary hash.
inline std::string save_cube(const fs::path& stem, const EnsembleCube& cube) {
  std::string bin(reinterpret_cast<const char*>(cube.data.data()), cube.data.size() * sizeof(double));
  for (const auto& tr : cube.truth) {
    bin.append(reinterpret_cast<const char*>(tr.data()), static_cast<std::size_t>(tr.size()) * sizeof(double));
  }
  fs::path bin_path = stem;
  bin_path += ".bin";
  write_file(bin_path, bin);
  json failures = json::array();
  for (const auto& f : cube.failures) failures.push_back({f.i, f.j, f.m});
  const std::string hash = hash_string(bin);
  json side = {{"shape", {cube.n_init(), cube.n_ens(), cube.n_model(), cube.n_times(), cube.K}},
               {"layout", "i,j,m,t,k row-major float64 little-endian, then truth (i,t,k)"},
               {"times", cube.times},
               {"config", ensemble_config_json(cube.config)},
               {"pert_std", cube.pert_std},
               {"closure", cube.closure_kind},
               {"has_truth", cube.has_truth()},
               {"failures", failures},
               {"failure_fraction", cube.failure_fraction()},
               {"hash", hash}};
  fs::path json_path = stem;
  json_path += ".json";
  write_json(json_path, side);
  return hash;
}

inline EnsembleCube load_cube(const fs::path& stem) {
  fs::path json_path = stem;
  json_path += ".json";
  fs::path bin_path = stem;
  bin_path += ".bin";
  const json side = read_json(json_path);
  const std::string bin = read_file(bin_path);
  EnsembleCube cube;
  const EnsembleConfig cfg = ensemble_config_from(side.at("config"));
  const int K = side.at("shape").at(4).get<int>();
  cube.allocate(cfg, K, side.at("times").get<std::vector<double>>());
  cube.pert_std = side.at("pert_std").get<double>();
  cube.closure_kind = side.value("closure", std::string{});
  const std::size_t n = cube.data.size() * sizeof(double);
  const bool truth = side.value("has_truth", false);
  const std::size_t tn = truth ? static_cast<std::size_t>(cube.n_init()) * cube.times.size() * K * sizeof(double) : 0;
  if (bin.size() != n + tn) throw precondition_error("cube binary size does not match its sidecar: " + bin_path.string());
  std::memcpy(cube.data.data(), bin.data(), n);
  if (truth) {
    std::size_t off = n;
    for (int i = 0; i < cube.n_init(); ++i) {
      Matrix tr(cube.n_times(), K);
      std::memcpy(tr.data(), bin.data() + off, static_cast<std::size_t>(tr.size()) * sizeof(double));
      off += static_cast<std::size_t>(tr.size()) * sizeof(double);
      cube.truth.push_back(std::move(tr));
    }
  }
  for (const auto& f : side.at("failures")) {
    MemberFailure mf{f.at(0).get<int>(), f.at(1).get<int>(), f.at(2).get<int>()};
    cube.failures.push_back(mf);
    cube.init_failed[static_cast<std::size_t>(mf.i)] = 1;
  }
  return cube;
}

}  // namespace l96::io

#endif  // L96_IO_HPP_
