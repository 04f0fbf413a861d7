#pragma once

// Alternating bridge trainer. Each round n fits a backward drift against the
// frozen forward dynamics (phase "b"), then a forward drift against the
// frozen backward ones (phase "f"); round 0's backward phase, run against the
// zero forward drift, is exactly the plain diffusion trainer, and
// skip_forward restricts every round to it.
//
// A run directory accumulates one checkpoint per completed phase
// (ipf_{n}_{b|f}.ckpt) plus metrics.csv with schema
//   wall_time,n,phase,inner_step,loss,grad_norm,mmd_prior,mmd_data
// carrying one row per optimizer step (mmd columns "nan") and one summary row
// per phase end (inner_step = steps run) with terminal-sample discrepancies
// against fresh prior/data draws. wall_time stays "0.000" unless log_walltime
// is set, so reruns and checkpoint resumes reproduce the file bitwise.
//
// Resume: phases whose checkpoint exists are treated as complete; their
// metrics rows are kept verbatim, partial rows of an interrupted phase are
// dropped, and training continues from the first missing checkpoint. All
// randomness is derived from (seed, round, phase, step), never from global
// counters, so a resumed run matches an uninterrupted one bitwise.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <limits>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "spherebridge/common.hpp"
#include "spherebridge/data.hpp"
#include "spherebridge/loss.hpp"
#include "spherebridge/net.hpp"
#include "spherebridge/sde.hpp"

namespace spherebridge {

struct IpfConfig {
  std::uint64_t seed = 0;
  int workers = 1;
  int rounds = 0;       // round indices run n = 0..rounds inclusive
  int inner_steps = 5000;
  int batch = 256;
  bool warm_start = true;    // start each phase from the previous same-side model
  bool skip_forward = false; // train only backward phases (plain diffusion)
  int halt_after_phases = 0; // > 0: stop once the run holds this many phases
  int diag_samples = 1024;   // paths per phase-end discrepancy estimate
  int diag_bootstrap = 64;   // bootstrap reps for the diagnostic SE (0 skips)
  bool log_walltime = false;
  // Early stopping: stop a phase when the stop_window-step moving average of
  // the loss has not improved by a relative stop_tol within stop_patience
  // steps.
  int stop_window = 200;
  int stop_patience = 500;
  double stop_tol = 1e-3;

  void validate() const {
    if (rounds < 0) raise(ErrorCode::ConfigError, "rounds must be >= 0");
    if (inner_steps < 0) raise(ErrorCode::ConfigError, "inner_steps must be >= 0");
    if (batch < 1) raise(ErrorCode::ConfigError, "batch must be >= 1");
    if (workers < 1) raise(ErrorCode::ConfigError, "workers must be >= 1");
    if (diag_samples < 2) raise(ErrorCode::ConfigError, "diag_samples must be >= 2");
    if (diag_bootstrap < 0) raise(ErrorCode::ConfigError, "diag_bootstrap must be >= 0");
    if (stop_window < 1 || stop_patience < 1 || !(stop_tol >= 0.0))
      raise(ErrorCode::ConfigError, "early-stop settings must be positive");
  }
};

struct PhaseSummary {
  int n = 0;
  char side = 'b';
  int steps_run = 0;
  bool early_stopped = false;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  double grad_norm = std::numeric_limits<double>::quiet_NaN();
  double mmd_prior = std::numeric_limits<double>::quiet_NaN();
  double mmd_prior_se = std::numeric_limits<double>::quiet_NaN();
  double mmd_data = std::numeric_limits<double>::quiet_NaN();
  double mmd_data_se = std::numeric_limits<double>::quiet_NaN();
  std::string checkpoint;
};

struct IpfResult {
  std::vector<PhaseSummary> phases;  // phases run by this invocation
  int completed_phases = 0;          // total completed phases in the run dir
  bool halted = false;               // stopped by halt_after_phases
  std::string metrics_path;
  std::optional<DriftModel> backward_model;
  std::optional<DriftModel> forward_model;
};

inline std::string checkpoint_name(int n, char side) {
  return "ipf_" + std::to_string(n) + "_" + std::string(1, side) + ".ckpt";
}

// Highest-round checkpoint for one side, scanning from round 0 upward.
inline std::optional<std::string> latest_checkpoint(const std::string& run_dir, char side) {
  std::optional<std::string> found;
  for (int n = 0;; ++n) {
    const std::filesystem::path p = std::filesystem::path(run_dir) / checkpoint_name(n, side);
    if (!std::filesystem::exists(p)) break;
    found = p.string();
  }
  return found;
}

// Adapts a model to the batched drift interface of the simulators.
inline auto model_batch_drift(const DriftModel& model) {
  return [&model](double t, const Points3& X) -> Points3 {
    ForwardTape tape;
    return model.forward_batch(Eigen::VectorXd::Constant(X.cols(), t), X, tape);
  };
}

namespace detail {

struct PhasePlanEntry {
  int n;
  char side;
};

inline std::vector<PhasePlanEntry> phase_plan(const IpfConfig& cfg) {
  std::vector<PhasePlanEntry> plan;
  for (int n = 0; n <= cfg.rounds; ++n) {
    plan.push_back({n, 'b'});
    if (!cfg.skip_forward) plan.push_back({n, 'f'});
  }
  return plan;
}

inline std::uint64_t side_tag(char side) { return side == 'b' ? 0u : 1u; }

// Keeps the header plus rows belonging to completed phases, byte-for-byte.
inline void filter_metrics_to_phases(const std::string& path,
                                     const std::vector<PhasePlanEntry>& done) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> kept;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      kept.push_back(line);
      first = false;
      continue;
    }
    // Row layout: wall_time,n,phase,inner_step,...
    const std::size_t c1 = line.find(',');
    const std::size_t c2 = c1 == std::string::npos ? c1 : line.find(',', c1 + 1);
    const std::size_t c3 = c2 == std::string::npos ? c2 : line.find(',', c2 + 1);
    if (c3 == std::string::npos) continue;
    const std::string n_str = line.substr(c1 + 1, c2 - c1 - 1);
    const std::string side_str = line.substr(c2 + 1, c3 - c2 - 1);
    for (const PhasePlanEntry& p : done) {
      if (side_str.size() == 1 && side_str[0] == p.side && n_str == std::to_string(p.n)) {
        kept.push_back(line);
        break;
      }
    }
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const std::string& k : kept) out << k << "\n";
}

struct DiagPair {
  double value = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
};

inline DiagPair diag_mmd(const Points3& generated, const Points3& reference, int bootstrap,
                         Rng& rng) {
  DiagPair out;
  const double bw = median_heuristic_bandwidth(generated, reference);
  MmdEvaluator eval(generated, reference, bw);
  out.value = eval.mmd2();
  if (bootstrap > 1) out.se = eval.bootstrap_se(bootstrap, rng);
  return out;
}

}  // namespace detail

inline IpfResult run_ipf(const IpfConfig& cfg, const NetConfig& net_cfg,
                         const NoiseSchedule& sched, const TimeGrid& grid,
                         const OptimizerState& opt_proto, const LossOptions& loss_proto,
                         const BatchSampler& data_sampler, const BatchSampler& prior_sampler,
                         const std::string& run_dir) {
  cfg.validate();
  net_cfg.validate();
  sched.validate();
  grid.validate();
  if (std::abs(net_cfg.horizon - sched.horizon) > 1e-12 ||
      std::abs(grid.horizon - sched.horizon) > 1e-12)
    raise(ErrorCode::ShapeMismatch, "net, schedule, and grid horizons disagree");

  namespace fs = std::filesystem;
  fs::create_directories(run_dir);
  const std::vector<detail::PhasePlanEntry> plan = detail::phase_plan(cfg);

  // A phase is complete iff its checkpoint exists; completion is contiguous
  // by construction, so scan the plan prefix.
  int done = 0;
  while (done < static_cast<int>(plan.size()) &&
         fs::exists(fs::path(run_dir) / checkpoint_name(plan[done].n, plan[done].side)))
    ++done;

  IpfResult result;
  result.metrics_path = (fs::path(run_dir) / "metrics.csv").string();

  std::optional<DriftModel> bwd, fwd;
  for (int i = 0; i < done; ++i) {
    const std::string path =
        (fs::path(run_dir) / checkpoint_name(plan[i].n, plan[i].side)).string();
    DriftModel m = DriftModel::load(path, &net_cfg);
    if (plan[i].side == 'b')
      bwd.emplace(std::move(m));
    else
      fwd.emplace(std::move(m));
  }

  std::ofstream metrics;
  if (done == 0) {
    metrics.open(result.metrics_path, std::ios::trunc);
    if (!metrics) raise(ErrorCode::IoError, "cannot write '" + result.metrics_path + "'");
    metrics << "wall_time,n,phase,inner_step,loss,grad_norm,mmd_prior,mmd_data\n";
  } else {
    detail::filter_metrics_to_phases(
        result.metrics_path,
        std::vector<detail::PhasePlanEntry>(plan.begin(), plan.begin() + done));
    metrics.open(result.metrics_path, std::ios::app);
    if (!metrics) raise(ErrorCode::IoError, "cannot append '" + result.metrics_path + "'");
  }

  const auto t0 = std::chrono::steady_clock::now();
  auto wall = [&]() -> double {
    if (!cfg.log_walltime) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  char row[256];

  int completed = done;
  for (int i = done; i < static_cast<int>(plan.size()); ++i) {
    if (cfg.halt_after_phases > 0 && completed >= cfg.halt_after_phases) {
      result.halted = true;
      break;
    }
    const int n = plan[i].n;
    const char side = plan[i].side;
    const std::uint64_t nn = static_cast<std::uint64_t>(n);
    const std::uint64_t ss = detail::side_tag(side);

    // Trainee: warm-start from the previous same-side model when available.
    const std::optional<DriftModel>& prev = side == 'b' ? bwd : fwd;
    DriftModel trainee =
        (cfg.warm_start && prev)
            ? *prev
            : DriftModel(net_cfg, mix_seed(cfg.seed, {stream_tag("phase-init"), nn, ss}));
    OptimizerState opt = opt_proto;
    opt.step_count = 0;
    opt.m.resize(0);
    opt.v.resize(0);

    const FrozenDrift frozen = side == 'b'
                                   ? (fwd ? FrozenDrift::of_model(&*fwd) : FrozenDrift::zero())
                                   : FrozenDrift::of_model(&*bwd);

    Rng draw_rng(mix_seed(cfg.seed, {stream_tag("ipf-draw"), nn, ss}));
    Rng pick_rng(mix_seed(cfg.seed, {stream_tag("ipf-pick"), nn, ss}));

    PhaseSummary summary;
    summary.n = n;
    summary.side = side;
    std::deque<double> window;
    double wsum = 0.0;
    double best_ma = std::numeric_limits<double>::infinity();
    int best_step = 0;

    for (int step = 0; step < cfg.inner_steps; ++step) {
      const std::uint64_t noise_seed =
          mix_seed(cfg.seed, {stream_tag("ipf-noise"), nn, ss, static_cast<std::uint64_t>(step)});
      double loss, gnorm;
      try {
        TrajectoryBatch traj;
        if (side == 'b') {
          if (fwd)
            traj = simulate_forward(model_batch_drift(*fwd), data_sampler, cfg.batch, sched,
                                    grid, draw_rng, noise_seed, cfg.workers);
          else
            traj = simulate_forward(ZeroDrift{}, data_sampler, cfg.batch, sched, grid, draw_rng,
                                    noise_seed, cfg.workers);
        } else {
          traj = simulate_backward(model_batch_drift(*bwd), prior_sampler, cfg.batch, sched,
                                   grid, draw_rng, noise_seed, cfg.workers);
        }
        const LossBatch batch = sample_loss_batch(traj, pick_rng);

        LossOptions opts = loss_proto;
        opts.workers = cfg.workers;
        opts.probe_seed = mix_seed(
            cfg.seed, {stream_tag("ipf-probe"), nn, ss, static_cast<std::uint64_t>(step)});

        loss = implicit_drift_loss(trainee, frozen, batch, sched, opts);
        gnorm = optimizer_step(trainee, opt);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::NonFiniteGradient || e.code() == ErrorCode::NonFiniteState)
          raise(e.code(), std::string(e.what()) + " (round " + std::to_string(n) + ", phase " +
                              std::string(1, side) + ", step " + std::to_string(step) + ")");
        throw;
      }

      std::snprintf(row, sizeof row, "%.3f,%d,%c,%d,%.17g,%.17g,nan,nan\n", wall(), n, side,
                    step, loss, gnorm);
      metrics << row;
      summary.steps_run = step + 1;
      summary.grad_norm = gnorm;

      window.push_back(loss);
      wsum += loss;
      if (static_cast<int>(window.size()) > cfg.stop_window) {
        wsum -= window.front();
        window.pop_front();
      }
      if (static_cast<int>(window.size()) == cfg.stop_window) {
        const double ma = wsum / cfg.stop_window;
        if (!std::isfinite(best_ma) ||
            ma < best_ma - cfg.stop_tol * std::max(std::abs(best_ma), 1e-12)) {
          best_ma = ma;
          best_step = step;
        } else if (step - best_step >= cfg.stop_patience) {
          summary.early_stopped = true;
          break;
        }
      }
    }
    if (!window.empty()) summary.final_loss = wsum / static_cast<double>(window.size());

    // Publish the freshly trained side before running diagnostics.
    if (side == 'b')
      bwd.emplace(std::move(trainee));
    else
      fwd.emplace(std::move(trainee));

    {
      Rng diag_rng(mix_seed(cfg.seed, {stream_tag("ipf-diag"), nn, ss}));
      TrajectoryBatch gen = simulate_backward(
          model_batch_drift(*bwd), prior_sampler, cfg.diag_samples, sched, grid, diag_rng,
          mix_seed(cfg.seed, {stream_tag("ipf-diag-noise"), nn, ss, 0}), cfg.workers);
      const Points3 data_ref = data_sampler(cfg.diag_samples, diag_rng);
      detail::DiagPair dd =
          detail::diag_mmd(gen.data_side(), data_ref, cfg.diag_bootstrap, diag_rng);
      summary.mmd_data = dd.value;
      summary.mmd_data_se = dd.se;

      TrajectoryBatch noised;
      if (fwd)
        noised = simulate_forward(
            model_batch_drift(*fwd), data_sampler, cfg.diag_samples, sched, grid, diag_rng,
            mix_seed(cfg.seed, {stream_tag("ipf-diag-noise"), nn, ss, 1}), cfg.workers);
      else
        noised = simulate_forward(
            ZeroDrift{}, data_sampler, cfg.diag_samples, sched, grid, diag_rng,
            mix_seed(cfg.seed, {stream_tag("ipf-diag-noise"), nn, ss, 1}), cfg.workers);
      const Points3 prior_ref = prior_sampler(cfg.diag_samples, diag_rng);
      detail::DiagPair dp =
          detail::diag_mmd(noised.prior_side(), prior_ref, cfg.diag_bootstrap, diag_rng);
      summary.mmd_prior = dp.value;
      summary.mmd_prior_se = dp.se;
    }

    std::snprintf(row, sizeof row, "%.3f,%d,%c,%d,%.17g,%.17g,%.17g,%.17g\n", wall(), n, side,
                  summary.steps_run, summary.final_loss, summary.grad_norm, summary.mmd_prior,
                  summary.mmd_data);
    metrics << row;
    metrics.flush();

    const std::string ckpt = (fs::path(run_dir) / checkpoint_name(n, side)).string();
    (side == 'b' ? *bwd : *fwd).save(ckpt);
    summary.checkpoint = ckpt;
    result.phases.push_back(summary);
    ++completed;
  }

  result.completed_phases = completed;
  result.backward_model = std::move(bwd);
  result.forward_model = std::move(fwd);
  return result;
}

}  // namespace spherebridge
