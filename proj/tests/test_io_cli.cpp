#include "l96/experiment.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

namespace l96 {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("l96_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(Io, DatasetRoundTripAndHash) {
  const fs::path dir = scratch("dataset");
  DatasetSpec spec{1.0, 400, 200, 100};
  const TendencyDataset ds = build_training_dataset({}, {}, 3, spec);
  const std::string h = io::save_dataset(dir, ds, {}, {}, 3);
  const io::LoadedDataset back = io::load_dataset(dir);
  EXPECT_EQ(back.hash, h);
  EXPECT_EQ(back.data.x, ds.x);
  EXPECT_EQ(back.data.u, ds.u);
  EXPECT_EQ(back.data.split.val.begin, ds.split.val.begin);
  // Tampering is detected.
  std::string csv = io::read_file(dir / "dataset.csv");
  csv[csv.size() / 2] = csv[csv.size() / 2] == '1' ? '2' : '1';
  io::write_file(dir / "dataset.csv", csv);
  EXPECT_THROW(io::load_dataset(dir), precondition_error);
}

TEST(Io, FlowCheckpointRoundTrip) {
  FlowConfig cfg;
  cfg.dim = 4;
  cfg.hidden = 8;
  cfg.depth = 2;
  for (FlowVariant v : {FlowVariant::history, FlowVariant::base_ar1, FlowVariant::tail}) {
    cfg.variant = v;
    cfg.tau = v == FlowVariant::history ? 1 : 0;
    FlowModel m = oracle::random_flow(cfg, 4);
    m.history.train_nll = {3.0, 2.0};
    m.history.val_nll = {3.5, 2.5};
    m.history.best_epoch = 1;
    if (!m.has_base_ar1()) m.latent = LatentAR1{Eigen::VectorXd::Constant(4, 0.5), Eigen::VectorXd::Ones(4)};
    io::Checkpoint c;
    c.name = "f";
    c.kind = "flow";
    c.flow = std::make_shared<const FlowModel>(m);
    const io::Checkpoint back = io::checkpoint_from(io::json::parse(io::checkpoint_json(c).dump()));
    const Eigen::MatrixXd u = oracle::gaussian(5, 4, 1);
    const Eigen::MatrixXd x = oracle::gaussian(5, cfg.cond_dim(), 2);
    EXPECT_EQ(log_prob(*back.flow, u, x), log_prob(m, u, x)) << to_string(v);
    EXPECT_EQ(back.flow->history.best_epoch, 1);
  }
}

TEST(Io, CubeRoundTrip) {
  const fs::path dir = scratch("cube");
  EnsembleCube c = oracle::synthetic_cube(2, 3, 2, 4, 3, 5);
  c.truth = {Matrix::Ones(4, 3), Matrix::Zero(4, 3)};
  c.failures = {{1, 2, 0}};
  c.init_failed[1] = 1;
  c.pert_std = 0.25;
  io::save_cube(dir / "c", c);
  const EnsembleCube b = io::load_cube(dir / "c");
  EXPECT_EQ(b.data, c.data);
  EXPECT_EQ(b.times, c.times);
  EXPECT_EQ(b.truth[0], c.truth[0]);
  EXPECT_EQ(b.failures.size(), 1u);
  EXPECT_FALSE(b.usable(1));
  EXPECT_EQ(b.pert_std, 0.25);
}

TEST(Cli, MissingSeedIsConfigError) {
  const auto cfg = cli::parse_config(io::json::object());
  std::ostringstream log;
  EXPECT_EQ(cli::run_command("gen-data", cfg, log, true), cli::kConfigError);
  EXPECT_NE(log.str().find("seed"), std::string::npos);
}

TEST(Cli, UnknownModelRejected) {
  const io::json j = {{"seed", 1}, {"ensemble", {{"models", {"nope"}}}}};
  EXPECT_THROW(cli::parse_config(j), precondition_error);
  const io::json bad_kind = {{"seed", 1}, {"closures", {{{"name", "x"}, {"kind", "spline"}}}}};
  EXPECT_THROW(cli::parse_config(bad_kind), precondition_error);
}

TEST(Cli, FlowModelsAreDerived) {
  const auto cfg = cli::parse_config({{"seed", 1}});
  EXPECT_NO_THROW(cfg.model("flow_tail_ar1"));
  EXPECT_NO_THROW(cfg.model("flow_history_iid"));
  EXPECT_EQ(cfg.model("flow_history_iid").closure, "flow_history");
}

TEST(Cli, DryRunPrintsPlan) {
  auto cfg = cli::parse_config({{"seed", 5}});
  std::ostringstream log;
  EXPECT_EQ(cli::run_command("suite", cfg, log, true), cli::kOk);
  EXPECT_NE(log.str().find("correlations"), std::string::npos);
  EXPECT_EQ(cli::run_command("bogus", cfg, log, true), cli::kConfigError);
}

TEST(Cli, StageWithoutInputsFailsCleanly) {
  auto cfg = cli::parse_config({{"seed", 5}});
  cfg.out = scratch("missing");
  std::ostringstream log;
  EXPECT_EQ(cli::run_command("fit", cfg, log), cli::kConfigError);
  EXPECT_NE(log.str().find("dataset"), std::string::npos);
}

TEST(Cli, ConfigHashIgnoresOutputLocation) {
  auto a = cli::parse_config({{"seed", 5}});
  auto b = a;
  b.out = "elsewhere";
  b.workers = 3;
  EXPECT_EQ(cli::config_hash(a), cli::config_hash(b));
  b.ensemble.n_ens = 11;
  EXPECT_NE(cli::config_hash(a), cli::config_hash(b));
}

}  // namespace
}  // namespace l96
