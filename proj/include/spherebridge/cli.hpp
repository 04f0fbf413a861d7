#pragma once

// Command-line entry points. Each cmd_* function is callable in-process (the
// tests drive them directly); run_cli parses flags, merges run-directory
// configs, dispatches, and maps any Error to a single machine-parsable
// stderr line `error[CodeName]: message` with a nonzero exit status.
//
// Flag grammar: `<subcommand> [--key value | --key=value ...]` where dotted
// keys are config keys. `--config FILE` splices a key=value file in place;
// later flags override earlier ones. Run-consuming subcommands (sample,
// likelihood, eval) start from the run directory's resolved config so that
// checkpoints are always read with the settings that produced them.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "spherebridge/config.hpp"
#include "spherebridge/data.hpp"
#include "spherebridge/ipf.hpp"
#include "spherebridge/manifold.hpp"
#include "spherebridge/net.hpp"
#include "spherebridge/ode.hpp"
#include "spherebridge/sde.hpp"

namespace spherebridge {

inline BatchSampler uniform_prior_sampler() {
  return [](int n, Rng& rng) { return uniform_batch(n, rng); };
}

// A dataset spec made concrete: a sampler for training batches plus a way to
// get reference points for evaluation (held-out rows for CSV data, fresh
// draws for synthetic specs).
struct DataRealization {
  DatasetSpec spec;
  BatchSampler sampler;
  Points3 heldout{3, 0};  // CSV only; rows arrive pre-shuffled by the split
};

inline DataRealization realize_dataset(const std::string& text, std::uint64_t split_seed,
                                       double held_fraction) {
  DataRealization out;
  out.spec = parse_dataset_spec(text);
  if (out.spec.synthetic()) {
    out.sampler = make_synthetic_sampler(out.spec);
    return out;
  }
  GeoDataset ds = load_latlon_csv(out.spec.csv_path);
  auto [train, held] = ds.split(split_seed, held_fraction);
  out.sampler = make_empirical_sampler(train.points);
  out.heldout = std::move(held.points);
  return out;
}

inline Points3 reference_points(const DataRealization& d, int n, Rng& rng) {
  if (d.spec.synthetic()) return d.sampler(n, rng);
  if (d.heldout.cols() == 0)
    raise(ErrorCode::EmptyDataset,
          "dataset '" + d.spec.text + "' has no held-out rows; raise data.held_fraction");
  if (n >= d.heldout.cols()) return d.heldout;
  return d.heldout.leftCols(n);
}

inline BatchSampler prior_sampler_from(const RunConfig& cfg) {
  if (cfg.data_b.empty()) return uniform_prior_sampler();
  return realize_dataset(cfg.data_b, cfg.split_seed, cfg.held_fraction).sampler;
}

namespace detail {

inline void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) raise(ErrorCode::IoError, "cannot write '" + path + "'");
  f << body;
  if (!f) raise(ErrorCode::IoError, "short write to '" + path + "'");
}

inline void write_manifest(const std::string& run_dir, const RunConfig& cfg,
                           const std::string& command) {
  nlohmann::json j;
  j["version"] = kVersion;
  j["command"] = command;
  j["seed"] = cfg.seed;
  j["workers"] = cfg.workers;
  write_text_file(run_dir + "/manifest.json", j.dump(2) + "\n");
}

inline std::optional<DriftModel> load_side(const std::string& run_dir, char side,
                                           const NetConfig& net) {
  std::optional<std::string> path = latest_checkpoint(run_dir, side);
  if (!path) return std::nullopt;
  return DriftModel::load(*path, &net);
}

inline DriftModel require_backward(const std::string& run_dir, const NetConfig& net) {
  std::optional<DriftModel> m = load_side(run_dir, 'b', net);
  if (!m)
    raise(ErrorCode::MissingCheckpoint, "no backward drift checkpoint in '" + run_dir + "'");
  return std::move(*m);
}

inline std::string sample_extension(ExportFormat f) {
  return f == ExportFormat::csv ? "csv" : "geojson";
}

inline void print_phase(const PhaseSummary& p) {
  std::printf("phase n=%d side=%c steps=%d%s loss=%.6g", p.n, p.side, p.steps_run,
              p.early_stopped ? " (early stop)" : "", p.final_loss);
  if (std::isfinite(p.mmd_data)) std::printf(" mmd_data=%.4g", p.mmd_data);
  if (std::isfinite(p.mmd_prior)) std::printf(" mmd_prior=%.4g", p.mmd_prior);
  std::printf("\n");
}

// Shared by train and interpolate: resolve the run directory, persist the
// self-describing metadata, and run the bridge trainer.
inline IpfResult train_run(RunConfig& cfg, const std::string& command, std::string& run_dir) {
  run_dir = resolve_run_dir(cfg);
  std::filesystem::create_directories(run_dir);
  cfg.dir = run_dir;
  write_text_file(run_dir + "/config.resolved", serialize_config(cfg));
  write_manifest(run_dir, cfg, command);

  const NetConfig net = make_net_config(cfg);
  const NoiseSchedule sched = make_schedule(cfg);
  const TimeGrid grid = make_grid(cfg);
  const OptimizerState opt = make_optimizer(cfg);
  const LossOptions loss = make_loss_options(cfg);
  const IpfConfig ipf = make_ipf_config(cfg);

  const DataRealization data = realize_dataset(cfg.data_a, cfg.split_seed, cfg.held_fraction);
  const BatchSampler prior = prior_sampler_from(cfg);

  IpfResult result = run_ipf(ipf, net, sched, grid, opt, loss, data.sampler, prior, run_dir);
  for (const PhaseSummary& p : result.phases) print_phase(p);
  if (result.halted)
    std::printf("halted after %d completed phase(s); rerun to resume\n", result.completed_phases);
  return result;
}

}  // namespace detail

inline int cmd_train(RunConfig cfg) {
  std::string run_dir;
  detail::train_run(cfg, "train", run_dir);
  std::printf("run directory: %s\n", run_dir.c_str());
  return 0;
}

// Bridge between data.a and data.b, then marginal snapshots of the trained
// forward dynamics at t/T in {0, 1/4, 1/2, 3/4, 1} (indices snap to the
// simulation grid). Needs the forward drift, so skip_forward is rejected.
inline int cmd_interpolate(RunConfig cfg) {
  if (cfg.data_b.empty())
    raise(ErrorCode::ConfigError, "interpolation needs data.b (the far-end dataset)");
  if (cfg.skip_forward)
    raise(ErrorCode::ConfigError, "interpolation trains both directions; unset ipf.skip_forward");
  std::string run_dir;
  IpfResult result = detail::train_run(cfg, "interpolate", run_dir);
  if (result.halted) {
    std::printf("frames deferred until the full schedule completes\n");
    std::printf("run directory: %s\n", run_dir.c_str());
    return 0;
  }

  const NetConfig net = make_net_config(cfg);
  std::optional<DriftModel> fwd =
      result.forward_model ? std::move(result.forward_model) : detail::load_side(run_dir, 'f', net);
  if (!fwd)
    raise(ErrorCode::MissingCheckpoint, "no forward drift checkpoint in '" + run_dir + "'");

  const NoiseSchedule sched = make_schedule(cfg);
  const TimeGrid grid = make_grid(cfg);
  const DataRealization data = realize_dataset(cfg.data_a, cfg.split_seed, cfg.held_fraction);
  Rng draw(mix_seed(cfg.seed, {stream_tag("cli-frames")}));
  TrajectoryBatch traj =
      simulate_forward(model_batch_drift(*fwd), data.sampler, cfg.count, sched, grid, draw,
                       mix_seed(cfg.seed, {stream_tag("cli-frames-noise")}), cfg.workers);

  const ExportFormat fmt = export_format_from_name(cfg.format);
  const double fracs[5] = {0.0, 0.25, 0.5, 0.75, 1.0};
  for (int j = 0; j < 5; ++j) {
    const int k = static_cast<int>(std::lround(fracs[j] * grid.steps));
    const std::string path = run_dir + "/frame_" + std::to_string(j) + "." +
                             detail::sample_extension(fmt);
    export_samples(traj.step_block(k), path, fmt);
    std::printf("frame t=%.3g: %s\n", fracs[j] * grid.horizon, path.c_str());
  }
  std::printf("run directory: %s\n", run_dir.c_str());
  return 0;
}

inline int cmd_sample(const RunConfig& cfg) {
  const std::string run_dir = resolve_run_dir(cfg);
  const NetConfig net = make_net_config(cfg);
  const NoiseSchedule sched = make_schedule(cfg);
  const TimeGrid grid = make_grid(cfg);
  const DriftModel bwd = detail::require_backward(run_dir, net);
  const ExportFormat fmt = export_format_from_name(cfg.format);

  Points3 pts(3, 0);
  if (cfg.count > 0) {
    const BatchSampler prior = prior_sampler_from(cfg);
    Rng draw(mix_seed(cfg.seed, {stream_tag("cli-sample")}));
    if (cfg.mode == "sde") {
      TrajectoryBatch traj =
          simulate_backward(model_batch_drift(bwd), prior, cfg.count, sched, grid, draw,
                            mix_seed(cfg.seed, {stream_tag("cli-sample-noise")}), cfg.workers);
      pts = traj.data_side();
    } else if (cfg.mode == "ode") {
      std::optional<DriftModel> fwd = detail::load_side(run_dir, 'f', net);
      FlowField field(fwd ? &*fwd : nullptr, &bwd);
      FlowOptions opts;
      opts.steps = cfg.ode_steps;
      Points3 x0 = prior(cfg.count, draw);
      pts = integrate_flow(field, x0, sched.horizon, FlowDirection::generating, opts).endpoints;
    } else {
      raise(ErrorCode::ConfigError, "sample.mode must be 'sde' or 'ode', got '" + cfg.mode + "'");
    }
  }
  const std::string path = cfg.sample_output.empty()
                               ? run_dir + "/samples." + detail::sample_extension(fmt)
                               : cfg.sample_output;
  export_samples(pts, path, fmt);
  std::printf("%d sample(s): %s\n", static_cast<int>(pts.cols()), path.c_str());
  return 0;
}

// Per-point log-likelihood via the noising-direction flow. CSV datasets are
// scored row for row; synthetic specs are scored on eval.samples fresh draws.
inline int cmd_likelihood(const RunConfig& cfg) {
  const std::string run_dir = resolve_run_dir(cfg);
  const NetConfig net = make_net_config(cfg);
  const NoiseSchedule sched = make_schedule(cfg);
  const DriftModel bwd = detail::require_backward(run_dir, net);
  std::optional<DriftModel> fwd = detail::load_side(run_dir, 'f', net);
  FlowField field(fwd ? &*fwd : nullptr, &bwd);

  const DatasetSpec spec = parse_dataset_spec(cfg.data_a);
  Points3 pts;
  if (spec.synthetic()) {
    Rng rng(mix_seed(cfg.seed, {stream_tag("cli-likelihood")}));
    pts = make_synthetic_sampler(spec)(cfg.eval_samples, rng);
  } else {
    pts = load_latlon_csv(spec.csv_path).points;
  }

  const LikelihoodResult lik = log_likelihood(field, pts, sched.horizon, cfg.likelihood_steps);

  std::string body = "lat_deg,lon_deg,loglik_surface,loglik_uniform_base\n";
  char buf[160];
  for (Eigen::Index i = 0; i < pts.cols(); ++i) {
    auto [lat, lon] = sphere_to_latlon(pts.col(i));
    const double ls = lik.log_density[i];
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", lat, lon, ls,
                  ls - kLogUniformSphereDensity);
    body += buf;
  }
  const std::string path = run_dir + "/likelihood.csv";
  detail::write_text_file(path, body);

  const Eigen::Index n = lik.log_density.size();
  const double mean = lik.log_density.mean();
  const double sd = n > 1 ? std::sqrt((lik.log_density.array() - mean).square().sum() / (n - 1))
                          : 0.0;
  std::printf("mean log-likelihood %.6f +/- %.6f (n=%lld): %s\n", mean,
              n > 0 ? sd / std::sqrt(static_cast<double>(n)) : 0.0,
              static_cast<long long>(n), path.c_str());
  return 0;
}

// Sample-quality report: discrepancy of generated points to held-out data,
// of forward terminals to the prior, and outlier fractions at three radii.
inline int cmd_eval(const RunConfig& cfg) {
  const std::string run_dir = resolve_run_dir(cfg);
  const NetConfig net = make_net_config(cfg);
  const NoiseSchedule sched = make_schedule(cfg);
  const TimeGrid grid = make_grid(cfg);
  const DriftModel bwd = detail::require_backward(run_dir, net);
  std::optional<DriftModel> fwd = detail::load_side(run_dir, 'f', net);
  const DataRealization data = realize_dataset(cfg.data_a, cfg.split_seed, cfg.held_fraction);
  const BatchSampler prior = prior_sampler_from(cfg);
  const int n = cfg.eval_samples;

  Rng ref_rng(mix_seed(cfg.seed, {stream_tag("cli-eval-ref")}));
  const Points3 reference = reference_points(data, n, ref_rng);

  Rng gen_rng(mix_seed(cfg.seed, {stream_tag("cli-eval-gen")}));
  const Points3 generated =
      simulate_backward(model_batch_drift(bwd), prior, n, sched, grid, gen_rng,
                        mix_seed(cfg.seed, {stream_tag("cli-eval-gen-noise")}), cfg.workers)
          .data_side();

  Rng fwd_rng(mix_seed(cfg.seed, {stream_tag("cli-eval-fwd")}));
  const std::uint64_t fwd_noise = mix_seed(cfg.seed, {stream_tag("cli-eval-fwd-noise")});
  const Points3 terminals =
      fwd ? simulate_forward(model_batch_drift(*fwd), data.sampler, n, sched, grid, fwd_rng,
                             fwd_noise, cfg.workers)
                .prior_side()
          : simulate_forward(ZeroDrift{}, data.sampler, n, sched, grid, fwd_rng, fwd_noise,
                             cfg.workers)
                .prior_side();
  Rng prior_rng(mix_seed(cfg.seed, {stream_tag("cli-eval-prior")}));
  const Points3 prior_draw = prior(n, prior_rng);

  Rng null_rng(mix_seed(cfg.seed, {stream_tag("cli-eval-null")}));
  const double bw_data = median_heuristic_bandwidth(generated, reference);
  MmdEvaluator ev_data(generated, reference, bw_data);
  const double bw_prior = median_heuristic_bandwidth(terminals, prior_draw);
  MmdEvaluator ev_prior(terminals, prior_draw, bw_prior);

  nlohmann::json j;
  j["samples"] = n;
  j["data"]["bandwidth"] = bw_data;
  j["data"]["mmd2"] = ev_data.mmd2();
  j["data"]["null99"] = ev_data.null_quantile(200, 0.99, null_rng);
  j["prior"]["bandwidth"] = bw_prior;
  j["prior"]["mmd2"] = ev_prior.mmd2();
  j["prior"]["null99"] = ev_prior.null_quantile(200, 0.99, null_rng);
  for (double r : {0.1, 0.2, 0.3}) {
    char key[8];
    std::snprintf(key, sizeof key, "%.1f", r);
    j["outlier_fraction"][key] = outlier_fraction(generated, reference, r);
  }
  j["outlier_radius"] = cfg.outlier_radius;
  j["outlier_fraction_at_radius"] = outlier_fraction(generated, reference, cfg.outlier_radius);

  const std::string body = j.dump(2) + "\n";
  detail::write_text_file(run_dir + "/report.json", body);
  std::fputs(body.c_str(), stdout);
  return 0;
}

// Raw noising walk for debugging: zero drift from data.a, full trajectory
// dump plus the terminal cloud.
inline int cmd_simulate(RunConfig cfg) {
  const std::string run_dir = resolve_run_dir(cfg);
  std::filesystem::create_directories(run_dir);
  const NoiseSchedule sched = make_schedule(cfg);
  const TimeGrid grid = make_grid(cfg);
  const DataRealization data = realize_dataset(cfg.data_a, cfg.split_seed, cfg.held_fraction);
  Rng draw(mix_seed(cfg.seed, {stream_tag("cli-simulate")}));
  TrajectoryBatch traj =
      simulate_forward(ZeroDrift{}, data.sampler, cfg.count, sched, grid, draw,
                       mix_seed(cfg.seed, {stream_tag("cli-simulate-noise")}), cfg.workers);
  const std::string traj_path = run_dir + "/trajectory.csv";
  dump_trajectory_csv(traj, traj_path);
  const ExportFormat fmt = export_format_from_name(cfg.format);
  const std::string term_path = run_dir + "/terminal." + detail::sample_extension(fmt);
  export_samples(traj.prior_side(), term_path, fmt);
  std::printf("trajectories: %s\nterminal cloud: %s\n", traj_path.c_str(), term_path.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// Flag parsing.

namespace detail {

struct FlagAlias {
  const char* flag;
  const char* key;
  const char* value;  // nullptr: takes a value argument
};

inline const std::vector<FlagAlias>& flag_aliases() {
  static const std::vector<FlagAlias> aliases = {
      {"dataset", "data.a", nullptr},
      {"prior", "data.b", nullptr},
      {"run", "run.dir", nullptr},
      {"out", "run.out", nullptr},
      {"name", "run.name", nullptr},
      {"seed", "run.seed", nullptr},
      {"workers", "run.workers", nullptr},
      {"count", "sample.count", nullptr},
      {"mode", "sample.mode", nullptr},
      {"format", "sample.format", nullptr},
      {"skip-forward-phase", "ipf.skip_forward", "true"},
      {"warm-start", "ipf.warm_start", "true"},
      {"no-warm-start", "ipf.warm_start", "false"},
      {"log-walltime", "run.log_walltime", "true"},
  };
  return aliases;
}

// Flags in command-line order, config files spliced in place. The list is
// applied twice for run-consuming commands (once to locate the run directory,
// once on top of its resolved config), so it must stay side-effect free.
inline std::vector<std::pair<std::string, std::string>> collect_pairs(
    const std::vector<std::string>& args, std::size_t begin) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (std::size_t i = begin; i < args.size(); ++i) {
    const std::string& tok = args[i];
    if (tok.rfind("--", 0) != 0)
      raise(ErrorCode::ConfigError, "expected a --flag, got '" + tok + "'");
    std::string key = tok.substr(2);
    std::string value;
    bool have_value = false;
    if (const std::size_t eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
      have_value = true;
    }
    auto next_value = [&]() -> std::string {
      if (have_value) return value;
      if (i + 1 >= args.size())
        raise(ErrorCode::ConfigError, "flag '--" + key + "' needs a value");
      return args[++i];
    };
    if (key == "config") {
      for (auto& p : read_config_pairs(next_value())) pairs.push_back(std::move(p));
      continue;
    }
    if (key == "full-scale") {  // preset: wide network, long inner loop
      if (have_value) raise(ErrorCode::ConfigError, "flag '--full-scale' takes no value");
      pairs.emplace_back("net.width", "512");
      pairs.emplace_back("ipf.inner_steps", "5000");
      continue;
    }
    bool matched = false;
    for (const FlagAlias& a : flag_aliases()) {
      if (key != a.flag) continue;
      if (a.value) {
        if (have_value)
          raise(ErrorCode::ConfigError, "flag '--" + key + "' takes no value");
        pairs.emplace_back(a.key, a.value);
      } else {
        pairs.emplace_back(a.key, next_value());
      }
      matched = true;
      break;
    }
    if (matched) continue;
    if (key.find('.') == std::string::npos)
      raise(ErrorCode::ConfigError, "unknown flag '--" + key + "'");
    pairs.emplace_back(key, next_value());  // dotted config key
  }
  return pairs;
}

inline RunConfig merged_run_config(const std::vector<std::pair<std::string, std::string>>& pairs,
                                   bool from_run_dir) {
  RunConfig cfg;
  for (const auto& [k, v] : pairs) apply_config_pair(cfg, k, v);
  if (!from_run_dir) return cfg;
  const std::string run_dir = resolve_run_dir(cfg);
  const std::string resolved = run_dir + "/config.resolved";
  if (!std::filesystem::exists(resolved))
    raise(ErrorCode::IoError, "'" + resolved + "' not found; is '" + run_dir +
                                  "' a run directory?");
  RunConfig base;
  load_config_file(base, resolved);
  for (const auto& [k, v] : pairs) apply_config_pair(base, k, v);
  base.dir = run_dir;
  return base;
}

inline void print_usage(std::FILE* to) {
  std::fputs(
      "usage: spherebridge <subcommand> [--key value | --key=value ...]\n"
      "\n"
      "subcommands:\n"
      "  train        fit the bridge (or the L=0 diffusion baseline) on data.a\n"
      "  sample       draw points from a trained run (--mode sde|ode)\n"
      "  interpolate  bridge data.a to data.b and emit five marginal frames\n"
      "  likelihood   per-point log-likelihood CSV via the flow\n"
      "  eval         discrepancy and outlier report against held-out data\n"
      "  simulate     raw zero-drift noising walk (debugging)\n"
      "\n"
      "flags are dotted config keys (see README); common aliases:\n"
      "  --dataset SPEC    data.a: CSV path, 'uniform', 'vmf:...', 'harmonic:l,m'\n"
      "  --prior SPEC      data.b (default: uniform prior)\n"
      "  --run DIR         run directory (sample/likelihood/eval read its config)\n"
      "  --config FILE     splice a key=value file into the flag list\n"
      "  --seed N --workers N --count N --mode M --format csv|geojson\n"
      "  --skip-forward-phase --no-warm-start --log-walltime --full-scale\n",
      to);
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv) {
  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    if (args.empty()) {
      detail::print_usage(stderr);
      return 1;
    }
    const std::string cmd = args[0];
    if (cmd == "--help" || cmd == "-h" || cmd == "help") {
      detail::print_usage(stdout);
      return 0;
    }
    if (cmd == "--version") {
      std::printf("%s\n", kVersion);
      return 0;
    }
    const auto pairs = detail::collect_pairs(args, 1);
    const bool from_run_dir = cmd == "sample" || cmd == "likelihood" || cmd == "eval";
    const RunConfig cfg = detail::merged_run_config(pairs, from_run_dir);
    if (cmd == "train") return cmd_train(cfg);
    if (cmd == "interpolate") return cmd_interpolate(cfg);
    if (cmd == "sample") return cmd_sample(cfg);
    if (cmd == "likelihood") return cmd_likelihood(cfg);
    if (cmd == "eval") return cmd_eval(cfg);
    if (cmd == "simulate") return cmd_simulate(cfg);
    raise(ErrorCode::ConfigError, "unknown subcommand '" + cmd + "'");
  } catch (const Error& e) {
    std::fprintf(stderr, "error[%s]: %s\n", error_code_name(e.code()), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error[Internal]: %s\n", e.what());
    return 1;
  }
}

}  // namespace spherebridge
