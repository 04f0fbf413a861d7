#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "spherebridge/ipf.hpp"

using namespace spherebridge;

namespace {

std::string fresh_dir(const std::string& stem) {
  const std::string path = (std::filesystem::temp_directory_path() / stem).string();
  std::filesystem::remove_all(path);
  return path;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

NetConfig tiny_net() {
  NetConfig cfg;
  cfg.width = 16;
  cfg.time_features = 2;
  return cfg;
}

IpfConfig tiny_ipf(std::uint64_t seed) {
  IpfConfig cfg;
  cfg.seed = seed;
  cfg.rounds = 0;
  cfg.inner_steps = 20;
  cfg.batch = 32;
  cfg.diag_samples = 64;
  cfg.diag_bootstrap = 8;
  return cfg;
}

BatchSampler pole_vmf_sampler() {
  return [](int n, Rng& rng) {
    std::vector<VmfComponent> comps{{Eigen::Vector3d(0, 0, 1), 8.0, 1.0}};
    return sample_vmf_mixture(comps, n, rng);
  };
}

BatchSampler uniform_sampler() {
  return [](int n, Rng& rng) { return uniform_batch(n, rng); };
}

}  // namespace

TEST_CASE("plain diffusion round produces checkpoint, metrics, and models") {
  const std::string dir = fresh_dir("sb_ipf_basic");
  IpfConfig cfg = tiny_ipf(11);
  cfg.skip_forward = true;
  NetConfig net = tiny_net();
  IpfResult res = run_ipf(cfg, net, NoiseSchedule{}, TimeGrid{5, 1.0}, OptimizerState{},
                          LossOptions{}, pole_vmf_sampler(), uniform_sampler(), dir);

  CHECK(res.completed_phases == 1);
  CHECK_FALSE(res.halted);
  REQUIRE(res.phases.size() == 1);
  const PhaseSummary& ph = res.phases[0];
  CHECK(ph.n == 0);
  CHECK(ph.side == 'b');
  CHECK(ph.steps_run == 20);
  CHECK_FALSE(ph.early_stopped);
  CHECK(std::isfinite(ph.final_loss));
  CHECK(std::isfinite(ph.grad_norm));
  CHECK(std::isfinite(ph.mmd_prior));
  CHECK(std::isfinite(ph.mmd_prior_se));
  CHECK(std::isfinite(ph.mmd_data));
  CHECK(ph.mmd_prior_se > 0.0);

  REQUIRE(res.backward_model.has_value());
  CHECK_FALSE(res.forward_model.has_value());
  REQUIRE(std::filesystem::exists(ph.checkpoint));
  DriftModel loaded = DriftModel::load(ph.checkpoint, &net);
  CHECK(loaded.params() == res.backward_model->params());

  REQUIRE(latest_checkpoint(dir, 'b').has_value());
  CHECK(*latest_checkpoint(dir, 'b') == ph.checkpoint);
  CHECK_FALSE(latest_checkpoint(dir, 'f').has_value());

  const std::vector<std::string> rows = lines_of(slurp(res.metrics_path));
  REQUIRE(rows.size() == 1 + 20 + 1);
  CHECK(rows[0] == "wall_time,n,phase,inner_step,loss,grad_norm,mmd_prior,mmd_data");
  CHECK(rows[1].rfind("0.000,0,b,0,", 0) == 0);
  CHECK(rows[1].substr(rows[1].size() - 8) == ",nan,nan");
  // Summary row reports the steps-run count and finite discrepancies.
  CHECK(rows[21].rfind("0.000,0,b,20,", 0) == 0);
  CHECK(rows[21].find("nan") == std::string::npos);
}

TEST_CASE("reruns with one seed are bitwise identical, different seeds are not") {
  IpfConfig cfg = tiny_ipf(21);
  cfg.skip_forward = true;
  cfg.inner_steps = 10;
  NetConfig net = tiny_net();
  auto run_in = [&](const std::string& stem, std::uint64_t seed) {
    const std::string dir = fresh_dir(stem);
    IpfConfig c = cfg;
    c.seed = seed;
    run_ipf(c, net, NoiseSchedule{}, TimeGrid{5, 1.0}, OptimizerState{}, LossOptions{},
            pole_vmf_sampler(), uniform_sampler(), dir);
    return dir;
  };
  const std::string a = run_in("sb_ipf_rerun_a", 21);
  const std::string b = run_in("sb_ipf_rerun_b", 21);
  const std::string c = run_in("sb_ipf_rerun_c", 22);
  CHECK(slurp(a + "/metrics.csv") == slurp(b + "/metrics.csv"));
  CHECK(slurp(a + "/ipf_0_b.ckpt") == slurp(b + "/ipf_0_b.ckpt"));
  CHECK(slurp(a + "/ipf_0_b.ckpt") != slurp(c + "/ipf_0_b.ckpt"));
  CHECK(slurp(a + "/metrics.csv") != slurp(c + "/metrics.csv"));
}

TEST_CASE("halted runs resume to match an uninterrupted run bitwise") {
  NetConfig net = tiny_net();
  IpfConfig cfg = tiny_ipf(31);
  cfg.rounds = 1;
  cfg.inner_steps = 8;
  auto invoke = [&](const std::string& dir, int halt) {
    IpfConfig c = cfg;
    c.halt_after_phases = halt;
    return run_ipf(c, net, NoiseSchedule{}, TimeGrid{4, 1.0}, OptimizerState{}, LossOptions{},
                   pole_vmf_sampler(), uniform_sampler(), dir);
  };

  const std::string full = fresh_dir("sb_ipf_full");
  IpfResult whole = invoke(full, 0);
  CHECK(whole.completed_phases == 4);

  const std::string part = fresh_dir("sb_ipf_part");
  IpfResult r1 = invoke(part, 1);
  CHECK(r1.halted);
  CHECK(r1.completed_phases == 1);
  CHECK(r1.phases.size() == 1);

  // Fake an interruption mid-phase: stale rows for the incomplete (0, f)
  // phase must be dropped on resume.
  {
    std::ofstream m(part + "/metrics.csv", std::ios::app);
    m << "0.000,0,f,0,123.0,1.0,nan,nan\n";
  }

  IpfResult r2 = invoke(part, 3);
  CHECK(r2.halted);
  CHECK(r2.completed_phases == 3);
  CHECK(r2.phases.size() == 2);

  IpfResult r3 = invoke(part, 0);
  CHECK_FALSE(r3.halted);
  CHECK(r3.completed_phases == 4);
  CHECK(r3.phases.size() == 1);

  CHECK(slurp(full + "/metrics.csv") == slurp(part + "/metrics.csv"));
  for (const char* name : {"ipf_0_b.ckpt", "ipf_0_f.ckpt", "ipf_1_b.ckpt", "ipf_1_f.ckpt"})
    CHECK(slurp(full + "/" + name) == slurp(part + "/" + name));

  // Resuming a finished run trains nothing and leaves files untouched.
  IpfResult r4 = invoke(part, 0);
  CHECK(r4.phases.empty());
  CHECK(r4.completed_phases == 4);
  CHECK(slurp(full + "/metrics.csv") == slurp(part + "/metrics.csv"));
  REQUIRE(r4.backward_model.has_value());
  CHECK(r4.backward_model->params() ==
        DriftModel::load(part + "/ipf_1_b.ckpt", &net).params());
}

TEST_CASE("warm start hands the previous model to the next round") {
  NetConfig net = tiny_net();
  IpfConfig cfg = tiny_ipf(41);
  cfg.rounds = 1;
  cfg.skip_forward = true;
  cfg.inner_steps = 0;  // phases reduce to their initialization

  const std::string warm = fresh_dir("sb_ipf_warm");
  run_ipf(cfg, net, NoiseSchedule{}, TimeGrid{4, 1.0}, OptimizerState{}, LossOptions{},
          pole_vmf_sampler(), uniform_sampler(), warm);
  CHECK(slurp(warm + "/ipf_0_b.ckpt") == slurp(warm + "/ipf_1_b.ckpt"));

  const std::string cold = fresh_dir("sb_ipf_cold");
  IpfConfig cc = cfg;
  cc.warm_start = false;
  run_ipf(cc, net, NoiseSchedule{}, TimeGrid{4, 1.0}, OptimizerState{}, LossOptions{},
          pole_vmf_sampler(), uniform_sampler(), cold);
  // Fresh initializations use round-specific seeds.
  CHECK(slurp(cold + "/ipf_0_b.ckpt") != slurp(cold + "/ipf_1_b.ckpt"));
  // A freshly initialized drift is identically zero either way.
  DriftModel m = DriftModel::load(cold + "/ipf_1_b.ckpt", &net);
  Rng rng(1);
  for (int i = 0; i < 20; ++i)
    CHECK(m.forward(0.3, SpherePoint{sample_uniform(rng).coords}).vec.norm() == 0.0);
}

TEST_CASE("hand-rolled diffusion training loop matches the runner bitwise") {
  NetConfig net = tiny_net();
  NoiseSchedule sched;
  TimeGrid grid{5, 1.0};
  IpfConfig cfg = tiny_ipf(51);
  cfg.skip_forward = true;
  cfg.inner_steps = 12;

  const std::string dir = fresh_dir("sb_ipf_standalone");
  run_ipf(cfg, net, sched, grid, OptimizerState{}, LossOptions{}, pole_vmf_sampler(),
          uniform_sampler(), dir);
  DriftModel from_runner = DriftModel::load(dir + "/ipf_0_b.ckpt", &net);

  // The documented derivation chain, replayed without the runner.
  BatchSampler data = pole_vmf_sampler();
  DriftModel model(net, mix_seed(cfg.seed, {stream_tag("phase-init"), 0, 0}));
  OptimizerState opt;
  FrozenDrift frozen = FrozenDrift::zero();
  Rng draw(mix_seed(cfg.seed, {stream_tag("ipf-draw"), 0, 0}));
  Rng pick(mix_seed(cfg.seed, {stream_tag("ipf-pick"), 0, 0}));
  for (int step = 0; step < cfg.inner_steps; ++step) {
    const std::uint64_t noise_seed =
        mix_seed(cfg.seed, {stream_tag("ipf-noise"), 0, 0, static_cast<std::uint64_t>(step)});
    TrajectoryBatch traj =
        simulate_forward(ZeroDrift{}, data, cfg.batch, sched, grid, draw, noise_seed, 1);
    LossBatch batch = sample_loss_batch(traj, pick);
    LossOptions opts;
    opts.probe_seed =
        mix_seed(cfg.seed, {stream_tag("ipf-probe"), 0, 0, static_cast<std::uint64_t>(step)});
    implicit_drift_loss(model, frozen, batch, sched, opts);
    optimizer_step(model, opt);
  }
  CHECK(model.params() == from_runner.params());
}

TEST_CASE("early stopping fires once the loss plateaus") {
  NetConfig net = tiny_net();
  IpfConfig cfg = tiny_ipf(61);
  cfg.skip_forward = true;
  cfg.inner_steps = 200;
  cfg.stop_window = 10;
  cfg.stop_patience = 15;
  cfg.stop_tol = 0.5;  // demand an implausible 50% improvement
  OptimizerState opt;
  opt.lr = 0.0;  // the zero-initialized drift never moves; the loss stays 0

  const std::string dir = fresh_dir("sb_ipf_earlystop");
  IpfResult res = run_ipf(cfg, net, NoiseSchedule{}, TimeGrid{4, 1.0}, opt, LossOptions{},
                          pole_vmf_sampler(), uniform_sampler(), dir);
  REQUIRE(res.phases.size() == 1);
  CHECK(res.phases[0].early_stopped);
  // Window fills at step 9 (best), patience runs out 15 steps later.
  CHECK(res.phases[0].steps_run == 25);
}

TEST_CASE("training reduces the loss on a concentrated target") {
  NetConfig net = tiny_net();
  IpfConfig cfg = tiny_ipf(71);
  cfg.skip_forward = true;
  cfg.inner_steps = 80;
  cfg.batch = 64;
  OptimizerState opt;
  opt.lr = 2e-3;

  const std::string dir = fresh_dir("sb_ipf_learns");
  IpfResult res = run_ipf(cfg, net, NoiseSchedule{}, TimeGrid{5, 1.0}, opt, LossOptions{},
                          pole_vmf_sampler(), uniform_sampler(), dir);

  std::vector<double> losses;
  for (const std::string& row : lines_of(slurp(res.metrics_path))) {
    if (row.rfind("0.000,0,b,", 0) != 0) continue;
    std::stringstream ss(row);
    std::string field;
    for (int i = 0; i < 5; ++i) std::getline(ss, field, ',');
    losses.push_back(std::stod(field));
  }
  losses.pop_back();  // drop the summary row
  REQUIRE(losses.size() == 80);
  double head = 0, tail = 0;
  for (int i = 0; i < 20; ++i) {
    head += losses[i] / 20;
    tail += losses[60 + i] / 20;
  }
  INFO("head=" << head << " tail=" << tail);
  CHECK(tail < head);
}

TEST_CASE("phase-end discrepancies do not degrade across rounds") {
  NetConfig net = tiny_net();
  IpfConfig cfg = tiny_ipf(81);
  cfg.rounds = 2;
  cfg.inner_steps = 150;
  cfg.batch = 64;
  cfg.diag_samples = 256;
  cfg.diag_bootstrap = 32;
  OptimizerState opt;
  opt.lr = 2e-3;

  const std::string dir = fresh_dir("sb_ipf_trend");
  IpfResult res = run_ipf(cfg, net, NoiseSchedule{}, TimeGrid{5, 1.0}, opt, LossOptions{},
                          pole_vmf_sampler(), uniform_sampler(), dir);
  REQUIRE(res.phases.size() == 6);

  std::vector<const PhaseSummary*> b_phases, f_phases;
  for (const PhaseSummary& p : res.phases)
    (p.side == 'b' ? b_phases : f_phases).push_back(&p);
  REQUIRE(b_phases.size() == 3);
  REQUIRE(f_phases.size() == 3);
  for (std::size_t i = 1; i < b_phases.size(); ++i) {
    INFO("round " << i << " mmd_data " << b_phases[i]->mmd_data << " prev "
                  << b_phases[i - 1]->mmd_data);
    CHECK(b_phases[i]->mmd_data <= b_phases[i - 1]->mmd_data +
                                       2.0 * (b_phases[i]->mmd_data_se +
                                              b_phases[i - 1]->mmd_data_se));
  }
  for (std::size_t i = 1; i < f_phases.size(); ++i) {
    INFO("round " << i << " mmd_prior " << f_phases[i]->mmd_prior << " prev "
                  << f_phases[i - 1]->mmd_prior);
    CHECK(f_phases[i]->mmd_prior <= f_phases[i - 1]->mmd_prior +
                                        2.0 * (f_phases[i]->mmd_prior_se +
                                               f_phases[i - 1]->mmd_prior_se));
  }
}

TEST_CASE("non-finite failures carry round, phase, and step context") {
  NetConfig net = tiny_net();
  IpfConfig cfg = tiny_ipf(91);
  cfg.skip_forward = true;
  cfg.inner_steps = 5;

  SECTION("poisoned sampler surfaces as a non-finite state") {
    BatchSampler nan_sampler = [](int n, Rng&) {
      Points3 out = Points3::Zero(3, n);
      out.row(2).setConstant(1.0);
      out(0, 0) = std::numeric_limits<double>::quiet_NaN();
      return out;
    };
    const std::string dir = fresh_dir("sb_ipf_nanstate");
    try {
      run_ipf(cfg, net, NoiseSchedule{}, TimeGrid{4, 1.0}, OptimizerState{}, LossOptions{},
              nan_sampler, uniform_sampler(), dir);
      FAIL("expected a non-finite state error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::NonFiniteState);
      CHECK(std::string(e.what()).find("(round 0, phase b, step 0)") != std::string::npos);
    }
  }

  SECTION("non-finite optimizer update surfaces on the following step") {
    OptimizerState opt;
    opt.lr = std::numeric_limits<double>::quiet_NaN();
    const std::string dir = fresh_dir("sb_ipf_nangrad");
    try {
      run_ipf(cfg, net, NoiseSchedule{}, TimeGrid{4, 1.0}, opt, LossOptions{},
              pole_vmf_sampler(), uniform_sampler(), dir);
      FAIL("expected a non-finite gradient error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::NonFiniteGradient);
      CHECK(std::string(e.what()).find("(round 0, phase b, step 1)") != std::string::npos);
    }
  }
}

TEST_CASE("configuration validation") {
  NetConfig net = tiny_net();
  auto run_with = [&](IpfConfig c, NetConfig nc, NoiseSchedule sched, TimeGrid grid) {
    return run_ipf(c, nc, sched, grid, OptimizerState{}, LossOptions{}, pole_vmf_sampler(),
                   uniform_sampler(), fresh_dir("sb_ipf_badcfg"));
  };
  IpfConfig cfg = tiny_ipf(1);
  IpfConfig bad = cfg;
  bad.rounds = -1;
  CHECK_THROWS_AS(run_with(bad, net, NoiseSchedule{}, TimeGrid{4, 1.0}), Error);
  bad = cfg;
  bad.batch = 0;
  CHECK_THROWS_AS(run_with(bad, net, NoiseSchedule{}, TimeGrid{4, 1.0}), Error);
  bad = cfg;
  bad.diag_samples = 1;
  CHECK_THROWS_AS(run_with(bad, net, NoiseSchedule{}, TimeGrid{4, 1.0}), Error);

  NetConfig wrong_horizon = net;
  wrong_horizon.horizon = 2.0;
  CHECK_THROWS_MATCHES(run_with(cfg, wrong_horizon, NoiseSchedule{}, TimeGrid{4, 1.0}), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == ErrorCode::ShapeMismatch;
                       }));
}
