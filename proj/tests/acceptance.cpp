// Acceptance runner: executes the desk-scale suite (twice, for the
// determinism check) and prints one PASS/FAIL line per criterion.
//
//   acceptance [--config presets/desk_scale.json] [--out DIR] [--reuse]
//
// --reuse skips a suite run whose output directory already has a root manifest.
// Exit status is 0 once every criterion has been evaluated; criterion outcomes
// are reported on stdout and in DIR/acceptance.txt, not through the exit status.

#include "l96/experiment.hpp"
#include "oracles.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

namespace {

using namespace l96;
namespace fs = std::filesystem;
using io::json;

struct Verdict {
  bool pass = false;
  std::string detail;
};

int g_passed = 0;
int g_total = 0;
std::ofstream g_report;

void report(int id, const std::string& name, const std::function<Verdict()>& check) {
  Verdict v;
  try {
    v = check();
  } catch (const std::exception& e) {
    v = {false, std::string("error: ") + e.what()};
  }
  ++g_total;
  if (v.pass) ++g_passed;
  char line[2048];
  std::snprintf(line, sizeof line, "AC%-2d %s  %-34s %s\n", id, v.pass ? "PASS" : "FAIL", name.c_str(),
                v.detail.c_str());
  std::fputs(line, stdout);
  std::fflush(stdout);
  g_report << line << std::flush;
}

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

bool within(double v, double target, double tol) { return std::abs(v - target) <= tol; }

int run_suite(const cli::ExperimentConfig& cfg, bool reuse) {
  if (reuse && fs::exists(cfg.out / "manifest.json")) return 0;
  fs::remove_all(cfg.out);
  std::cerr << "running suite into " << cfg.out << "\n";
  return cli::run_command("suite", cfg, std::cerr);
}

std::map<std::string, std::string> csv_files(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().extension() == ".csv") {
      out[fs::relative(e.path(), root).generic_string()] = io::hash_file(e.path());
    }
  }
  return out;
}

struct ClimRow {
  double hellinger = NAN, ks = NAN;
};

std::map<std::string, ClimRow> climatology_table(const fs::path& out) {
  std::map<std::string, ClimRow> rows;
  const auto t = io::read_csv(out / "climatology" / "table.csv");
  for (const auto& r : t.rows) rows[r[0]] = {std::stod(r[1]), std::stod(r[2])};
  return rows;
}

double at_time(const json& times, const json& values, double t) {
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (std::abs(times[i].get<double>() - t) < 1e-9) return values[i].get<double>();
  }
  throw std::runtime_error("time " + fmt(t) + " not on grid");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance runner"};
  std::string config = L96_SOURCE_DIR "/presets/desk_scale.json";
  std::string out = "acceptance_out";
  bool reuse = false;
  app.add_option("--config", config, "experiment preset");
  app.add_option("--out", out, "scratch directory for the two suite runs");
  app.add_flag("--reuse", reuse, "reuse existing suite outputs");
  CLI11_PARSE(app, argc, argv);

  fs::create_directories(out);
  g_report.open(fs::path(out) / "acceptance.txt");
  cli::ExperimentConfig cfg = cli::load_config(config);
  cfg.out = fs::path(out) / "run1";
  const int rc1 = run_suite(cfg, reuse);
  std::cerr << "suite exit code " << rc1 << "\n";
  const fs::path o = cfg.out;
  const json summary = io::read_json(o / "report" / "summary.json");
  const double sigma_clim = summary.at("climatology").at("truth").at("sigma_clim").get<double>();
  auto cube = [&](const std::string& stem) { return io::load_cube(o / "ensemble" / stem); };

  report(1, "climatological amplitude", [&] {
    return Verdict{within(sigma_clim, 5.07, 0.15), "sigma_clim=" + fmt(sigma_clim) + " (5.07 +- 0.15)"};
  });

  report(2, "invariant-measure distances", [&] {
    const auto t = climatology_table(o);
    const auto& det = t.at("deterministic");
    const auto& ar = t.at("poly_ar1");
    bool ok = within(det.hellinger, 0.0416, 0.010) && within(det.ks, 0.0160, 0.005) &&
              within(ar.hellinger, 0.0311, 0.010) && ar.hellinger < det.hellinger;
    std::string d = "det H=" + fmt(det.hellinger) + " KS=" + fmt(det.ks) + "; ar1 H=" + fmt(ar.hellinger);
    for (const auto& c : cfg.closures) {
      if (c.kind != "flow") continue;
      const auto& iid = t.at(c.name + "_iid");
      const auto& a1 = t.at(c.name + "_ar1");
      const bool band = iid.hellinger >= 0.02 && iid.hellinger <= 0.12 && a1.hellinger >= 0.02 && a1.hellinger <= 0.12;
      const bool order = a1.hellinger <= iid.hellinger;
      ok = ok && band && order;
      d += "; " + c.name + " iid=" + fmt(iid.hellinger) + " ar1=" + fmt(a1.hellinger) + (band ? "" : " [band]") +
           (order ? "" : " [order]");
    }
    return Verdict{ok, d};
  });

  report(3, "decomposition identity", [&] {
    double worst = 0.0, brute = 0.0;
    for (std::uint64_t s = 0; s < 100; ++s) {
      const EnsembleCube c = oracle::synthetic_cube(3, 2 + static_cast<int>(s % 5), 2 + static_cast<int>(s % 3), 3, 4, s);
      const VarianceDecomposition d = decompose(c);
      worst = std::max(worst, oracle::identity_violation(d));
      for (long t = 0; t < 3; ++t) {
        for (int k = 0; k < 4; ++k) {
          const auto b = oracle::brute_decompose(c, t, k);
          worst = std::max(worst, std::abs(b.total - b.ens - b.model - b.inter) / b.total);
          brute = std::max({brute, std::abs(d.v_ens(t, k) - b.ens) / b.total, std::abs(d.v_model(t, k) - b.model) / b.total,
                            std::abs(d.interaction(t, k) - b.inter) / b.total});
        }
      }
    }
    int n_sim = 0;
    for (const auto& m : cfg.ensemble_models) {
      const EnsembleCube c = cube(m + "_separated");
      const VarianceDecomposition d = decompose(c);
      worst = std::max(worst, oracle::identity_violation(d));
      for (long t = 0; t < c.n_times(); t += 20) {
        const auto b = oracle::brute_decompose(c, t, 0);
        if (b.total > 0) worst = std::max(worst, std::abs(b.total - b.ens - b.model - b.inter) / b.total);
      }
      ++n_sim;
    }
    return Verdict{worst <= 1e-10 && brute <= 1e-10,
                   "max rel identity violation " + fmt(worst, 3) + ", max brute-force deviation " + fmt(brute, 3) +
                       " (100 synthetic + " + std::to_string(n_sim) + " simulated cubes)"};
  });

  report(4, "attribution sanity", [&] {
    bool ok = true;
    std::string d;
    for (const auto& m : cfg.ensemble_models) {
      const EnsembleCube c = cube(m + "_separated");
      const VarianceDecomposition dec = decompose(c);
      if (m == "deterministic") {
        const double vm = dec.v_model.cwiseAbs().maxCoeff();
        const double in = dec.interaction.cwiseAbs().maxCoeff();
        ok = ok && vm == 0.0 && in == 0.0;
        d += "det max|v_model|=" + fmt(vm) + " max|inter|=" + fmt(in);
        continue;
      }
      const double sm0 = std::sqrt(dec.v_model_avg[0]);
      const double ratio = std::sqrt(dec.v_ens_avg[0]) / c.pert_std;
      ok = ok && sm0 == 0.0 && within(ratio, 1.0, 0.05);
      d += "; " + m + " sd_model(0)=" + fmt(sm0) + " sd_ens(0)/pert=" + fmt(ratio);
    }
    return Verdict{ok, d};
  });

  report(5, "Bayesian delayed growth", [&] {
    const json& b = summary.at("decomposition").at("bayesian");
    bool early = true;
    double worst = 0.0;
    for (std::size_t i = 0; i < b["times"].size(); ++i) {
      const double t = b["times"][i].get<double>();
      if (t > 1.0 + 1e-9) break;
      const double sm = b["sd_model"][i].get<double>(), se = b["sd_ens"][i].get<double>();
      worst = std::max(worst, sm / se);
      early = early && sm < 0.1 * se;
    }
    const double growth = at_time(b["times"], b["sd_model"], 4.0) / at_time(b["times"], b["sd_model"], 1.0);
    return Verdict{early && growth >= 10.0,
                   "max sd_model/sd_ens on t<=1: " + fmt(worst) + "; sd_model(4)/sd_model(1)=" + fmt(growth)};
  });

  report(6, "early-growth ordering", [&] {
    const json& d = summary.at("decomposition");
    const double det = d.at("deterministic").at("slope").get<double>();
    const double ar = d.at("poly_ar1").at("slope").get<double>();
    const double fl = d.at("flow_base_ar1_ar1").at("slope").get<double>();
    return Verdict{ar > det && fl > det, "m: det=" + fmt(det) + " poly_ar1=" + fmt(ar) + " flow_base_ar1(ar1)=" + fmt(fl)};
  });

  report(7, "sensitivity / predictability", [&] {
    const json& s = summary.at("sensitivity");
    const double slope = s.at("log_apd_slope_0_1_5").get<double>();
    const double ratio = s.at("apd_ratio_4_5").get<double>();
    const double spread = s.at("mean_spread_after_5").get<double>();
    const bool ok = slope > 0 && ratio >= 0.8 && ratio <= 1.25 && std::abs(spread / sigma_clim - 1) <= 0.15;
    return Verdict{ok, "log-APD slope=" + fmt(slope) + " APD(4)/APD(5)=" + fmt(ratio) +
                           " spread/sigma_clim=" + fmt(spread / sigma_clim)};
  });

  report(8, "calibration ordering", [&] {
    const json& sk = summary.at("skill");
    const json& det = sk.at("deterministic_separated");
    const json& ar = sk.at("poly_ar1_separated");
    bool ok = true;
    std::string d;
    for (double t : {1.0, 2.0, 3.0}) {
      const double dd = at_time(det["times"], det["consistency_distance"], t);
      const double da = at_time(ar["times"], ar["consistency_distance"], t);
      ok = ok && dd < 0 && std::abs(da) < std::abs(dd);
      d += "t=" + fmt(t) + ": det=" + fmt(dd) + " ar1=" + fmt(da) + "  ";
    }
    return Verdict{ok, d};
  });

  report(9, "mixed vs separated", [&] {
    const json& mx = summary.at("mixed");
    double dev_sd = 0, dev_mean = 0;
    for (std::size_t i = 0; i < mx["times"].size(); ++i) {
      dev_sd = std::max(dev_sd, std::abs(mx["sd_total_mixed"][i].get<double>() - mx["sd_total_separated"][i].get<double>()));
      dev_mean = std::max(dev_mean, std::abs(mx["mean_mixed"][i].get<double>() - mx["mean_separated"][i].get<double>()));
    }
    dev_sd /= sigma_clim;
    dev_mean /= sigma_clim;
    const json& sep = summary.at("skill").at(cfg.mixed_model + "_separated");
    const json& mat = summary.at("skill").at(cfg.mixed_model + "_mixed_matched");
    double d_rmse = 0, d_spread = 0, d_ancr = 0;
    for (std::size_t i = 0; i < sep["times"].size(); ++i) {
      d_rmse = std::max(d_rmse, std::abs(sep["rmse"][i].get<double>() - mat["rmse"][i].get<double>()));
      d_spread = std::max(d_spread, std::abs(sep["spread"][i].get<double>() - mat["spread"][i].get<double>()));
      d_ancr = std::max(d_ancr, std::abs(sep["ancr"][i].get<double>() - mat["ancr"][i].get<double>()));
    }
    d_rmse /= sigma_clim;
    d_spread /= sigma_clim;
    const bool ok = dev_sd < 0.05 && dev_mean < 0.05 && d_rmse < 0.02 && d_spread < 0.02 && d_ancr < 0.02;
    return Verdict{ok, "max|dsd|/sigma=" + fmt(dev_sd) + " max|dmean|/sigma=" + fmt(dev_mean) + "; matched: rmse " +
                           fmt(d_rmse) + " spread " + fmt(d_spread) + " ancr " + fmt(d_ancr)};
  });

  report(10, "flow correctness", [&] {
    double rt = 0, jac = 0, grad = 0, seq = 0;
    for (FlowVariant v : {FlowVariant::normal, FlowVariant::history, FlowVariant::base_ar1, FlowVariant::tail}) {
      FlowConfig c;
      c.dim = 4;
      c.hidden = 16;
      c.depth = 2;
      c.variant = v;
      c.tau = v == FlowVariant::history ? 2 : 0;
      const FlowModel m = oracle::random_flow(c, 21);
      const auto z = oracle::gaussian(64, 4, 1, 2.0);
      const auto cond = oracle::gaussian(64, c.cond_dim(), 2);
      rt = std::max(rt, oracle::coupling_roundtrip_error(m, z, cond));
      const FlowModel g = oracle::random_flow(c, 22, 0.2);
      std::vector<Segment> segs;
      if (g.has_base_ar1()) segs = {{0, 25}, {25, 15}};
      grad = std::max(grad, oracle::gradient_rel_error(g, oracle::gaussian(40, 4, 3), oracle::gaussian(40, c.cond_dim(), 4),
                                                       segs, 150, 5));
      if (v == FlowVariant::base_ar1) seq = oracle::sequence_vs_iid(m, oracle::gaussian(30, 4, 6), oracle::gaussian(30, 4, 7));
      if (v == FlowVariant::normal || v == FlowVariant::tail) {
        c.dim = 2;
        const FlowModel m2 = oracle::random_flow(c, 23);
        jac = std::max(jac, oracle::logdet_vs_jacobian(m2, oracle::gaussian(20, 2, 8), oracle::gaussian(20, 2, 9)));
      }
    }
    Eigen::Matrix<double, 41, 3> y;
    for (int r = 0; r < 41; ++r) y.row(r).setConstant(-10 + 0.5 * r);
    TailParams tp{Eigen::VectorXd::LinSpaced(3, -0.5, 0.5), Eigen::VectorXd::LinSpaced(3, 0.5, 2.0),
                  Eigen::VectorXd::LinSpaced(3, 0.05, 0.8), Eigen::VectorXd::LinSpaced(3, 0.6, 0.02)};
    rt = std::max(rt, oracle::tail_roundtrip_error(tp, y));
    FlowConfig q;
    q.dim = 2;
    q.hidden = 16;
    q.depth = 2;
    const double mass = oracle::density_mass_2d(oracle::random_flow(q, 12, 0.05), Eigen::VectorXd::Constant(2, 1.0), -30, 28, 1200);
    // Whole-flow round trip on the fitted checkpoints, tail included.
    int n_fit = 0;
    for (const auto& c : cfg.closures) {
      if (c.kind != "flow") continue;
      const io::Checkpoint ck = io::checkpoint_from(io::read_json(o / "fit" / (c.name + ".json")));
      const FlowModel& f = *ck.flow;
      rt = std::max(rt, oracle::flow_roundtrip_error(f, oracle::gaussian(256, f.config.dim, 31),
                                                     oracle::gaussian(256, f.config.cond_dim(), 32)));
      ++n_fit;
    }
    const bool ok = rt < 1e-8 && jac < 1e-6 && grad < 1e-4 && std::abs(mass - 1) < 1e-3 && seq < 1e-8;
    return Verdict{ok, "round-trip " + fmt(rt, 2) + " (incl. " + std::to_string(n_fit) + " fitted flows)" + ", logdet-vs-J " + fmt(jac, 2) + ", grad rel " + fmt(grad, 2) +
                           ", mass " + fmt(mass, 7) + ", seq-vs-iid " + fmt(seq, 2)};
  });

  report(11, "estimator recovery", [&] {
    std::vector<double> x, u;
    for (int i = 0; i < 400; ++i) {
      const double v = -10 + 25.0 * i / 399;
      x.push_back(v);
      u.push_back(0.1 * v * v * v - 0.2 * v * v + 1.5 * v + 3);
    }
    const CubicCoeffs c = fit_cubic_lsq(x, u);
    const double lsq = (c.vec() - Eigen::Vector4d(0.1, -0.2, 1.5, 3)).cwiseAbs().maxCoeff();
    const auto e = oracle::simulate_ar1(0.9, 1.0, 100000, 17);
    const AR1Params a = fit_ar1(Eigen::Map<const Matrix>(e.data(), 100000, 1));
    NigPrior vague;
    vague.cov_scale *= 1e6;
    const double post_lsq = (fit_bayesian_posterior(x, u, vague).mean - c.vec()).cwiseAbs().maxCoeff();
    NoiseStream noise(21);
    std::vector<double> xs, us;
    for (int i = 0; i < 25; ++i) {
      const double v = -2 + 4 * noise.uniform();
      xs.push_back(v);
      us.push_back(0.5 * v * v * v - v * v + 0.3 * v + 1 + 0.5 * noise.normal());
    }
    const BayesPosterior post = fit_bayesian_posterior(xs, us);
    const auto mh = oracle::metropolis_cubic(xs, us, NigPrior{}, 400000, 20000, 99);
    double z = 0;
    for (int d = 0; d < 4; ++d) z = std::max(z, std::abs(mh.mean[d] - post.mean[d]) / mh.std_error[d]);
    const bool ok = lsq < 1e-8 && within(a.rho, 0.9, 0.02) && post_lsq < 1e-6 && z < 3;
    return Verdict{ok, "lsq err " + fmt(lsq, 2) + ", rho=" + fmt(a.rho) + ", post-vs-lsq " + fmt(post_lsq, 2) +
                           ", Metropolis max |z|=" + fmt(z, 3)};
  });

  report(12, "correlation structure", [&] {
    const auto e = oracle::simulate_ar1(0.8, 1.0, 200000, 3);
    const auto r = acf(e, 20);
    double worst = 0;
    for (long t = 0; t <= 20; ++t) worst = std::max(worst, std::abs(r[static_cast<std::size_t>(t)] - std::pow(0.8, t)));
    const json& dev = summary.at("correlations").at("deviation");
    const double det_a = dev.at("deterministic").at("acf_deviation").get<double>();
    const double det_c = dev.at("deterministic").at("ccf_deviation").get<double>();
    const double ar_a = dev.at("poly_ar1").at("acf_deviation").get<double>();
    const double ar_c = dev.at("poly_ar1").at("ccf_deviation").get<double>();
    const bool ok = worst <= 0.02 && ar_a < det_a && ar_c < det_c;
    return Verdict{ok, "AR(1) acf max err " + fmt(worst) + "; acf dev det=" + fmt(det_a) + " ar1=" + fmt(ar_a) +
                           "; ccf dev det=" + fmt(det_c) + " ar1=" + fmt(ar_c)};
  });

  report(13, "determinism", [&] {
    cli::ExperimentConfig again = cfg;
    again.out = fs::path(out) / "run2";
    const int rc2 = run_suite(again, reuse);
    const auto a = csv_files(cfg.out);
    const auto b = csv_files(again.out);
    int differ = 0;
    std::string first;
    for (const auto& [k, h] : a) {
      auto it = b.find(k);
      if (it == b.end() || it->second != h) {
        if (first.empty()) first = k;
        ++differ;
      }
    }
    const bool ok = rc1 == rc2 && a.size() == b.size() && differ == 0 && !a.empty();
    return Verdict{ok, std::to_string(a.size()) + " CSVs compared, " + std::to_string(differ) + " differ" +
                           (first.empty() ? "" : " (first: " + first + ")")};
  });

  std::printf("%d/%d criteria passed\n", g_passed, g_total);
  g_report << g_passed << "/" << g_total << " criteria passed\n";
  return 0;
}
