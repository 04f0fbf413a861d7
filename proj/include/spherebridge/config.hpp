#pragma once

// Flat key=value run configuration shared by every CLI entry point.
//
// Files hold one `section.key=value` pair per line ('#' comments allowed);
// command-line flags use the same dotted names and override file values. A
// resolved config lists every key, so re-feeding it as a file reproduces the
// run. The schedule horizon is the single source of the time horizon: the
// network's time embedding and the simulation grid always inherit it.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "spherebridge/common.hpp"
#include "spherebridge/data.hpp"
#include "spherebridge/ipf.hpp"
#include "spherebridge/loss.hpp"
#include "spherebridge/net.hpp"
#include "spherebridge/sde.hpp"

namespace spherebridge {

struct RunConfig {
  // run.*
  std::uint64_t seed = 0;
  int workers = 1;
  std::string out;         // output root; empty = $SPHEREBRIDGE_OUT or "runs"
  std::string name = "run";
  std::string dir;         // full run directory; empty = <root>/<name>
  bool log_walltime = false;

  // schedule.*
  double horizon = 1.0;
  double g2_peak = 0.05;
  double g2_floor = 0.001;

  // grid.*
  int grid_steps = 10;

  // net.*
  int width = 128;
  int time_features = 8;
  std::string activation = "silu";

  // opt.*
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 10.0;

  // ipf.*
  int ipf_rounds = 0;  // key ipf.L
  int inner_steps = 5000;
  int batch = 256;
  bool warm_start = true;
  bool skip_forward = false;
  int halt_after_phases = 0;
  int diag_samples = 1024;
  int diag_bootstrap = 64;
  int stop_window = 200;
  int stop_patience = 500;
  double stop_tol = 1e-3;

  // loss.*
  std::string divergence = "exact";  // exact | hutchinson | fd
  int probes = 8;
  double fd_step = 1e-4;
  bool normalize = true;

  // data.*
  std::string data_a = "uniform";
  std::string data_b;  // prior side; empty = uniform prior
  std::uint64_t split_seed = 1;
  double held_fraction = 0.2;

  // sample.*
  int count = 1000;
  std::string mode = "sde";  // sde | ode
  std::string format = "csv";
  int ode_steps = 200;
  std::string sample_output;  // empty = <run dir>/samples.<ext>

  // likelihood.*
  int likelihood_steps = 200;

  // eval.*
  int eval_samples = 2000;
  double outlier_radius = 0.2;
};

namespace detail {

struct ConfigField {
  const char* key;
  std::string (*get)(const RunConfig&);
  void (*set)(RunConfig&, const std::string&, const std::string& key);
};

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_config_double(const std::string& s, const std::string& key) {
  double v;
  if (!parse_double(s, v))
    raise(ErrorCode::ConfigError, "config key '" + key + "': expected a number, got '" + s + "'");
  return v;
}

inline long long parse_config_int(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    long long v = std::stoll(s, &pos);
    if (pos == s.size()) return v;
  } catch (...) {
  }
  raise(ErrorCode::ConfigError, "config key '" + key + "': expected an integer, got '" + s + "'");
}

inline std::uint64_t parse_config_u64(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    std::uint64_t v = std::stoull(s, &pos);
    if (pos == s.size()) return v;
  } catch (...) {
  }
  raise(ErrorCode::ConfigError,
        "config key '" + key + "': expected an unsigned integer, got '" + s + "'");
}

inline bool parse_config_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1" || s == "on" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "off" || s == "no") return false;
  raise(ErrorCode::ConfigError, "config key '" + key + "': expected a boolean, got '" + s + "'");
}

#define SB_FIELD_STR(KEY, MEMBER)                                            \
  ConfigField {                                                              \
    KEY, [](const RunConfig& c) { return c.MEMBER; },                        \
        [](RunConfig& c, const std::string& s, const std::string&) { c.MEMBER = s; } \
  }
#define SB_FIELD_DOUBLE(KEY, MEMBER)                                          \
  ConfigField {                                                               \
    KEY, [](const RunConfig& c) { return format_double(c.MEMBER); },          \
        [](RunConfig& c, const std::string& s, const std::string& k) {        \
          c.MEMBER = parse_config_double(s, k);                               \
        }                                                                     \
  }
#define SB_FIELD_INT(KEY, MEMBER)                                             \
  ConfigField {                                                               \
    KEY, [](const RunConfig& c) { return std::to_string(c.MEMBER); },         \
        [](RunConfig& c, const std::string& s, const std::string& k) {        \
          c.MEMBER = static_cast<int>(parse_config_int(s, k));                \
        }                                                                     \
  }
#define SB_FIELD_U64(KEY, MEMBER)                                             \
  ConfigField {                                                               \
    KEY, [](const RunConfig& c) { return std::to_string(c.MEMBER); },         \
        [](RunConfig& c, const std::string& s, const std::string& k) {        \
          c.MEMBER = parse_config_u64(s, k);                                  \
        }                                                                     \
  }
#define SB_FIELD_BOOL(KEY, MEMBER)                                            \
  ConfigField {                                                               \
    KEY, [](const RunConfig& c) { return std::string(c.MEMBER ? "true" : "false"); }, \
        [](RunConfig& c, const std::string& s, const std::string& k) {        \
          c.MEMBER = parse_config_bool(s, k);                                 \
        }                                                                     \
  }

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      SB_FIELD_U64("run.seed", seed),
      SB_FIELD_INT("run.workers", workers),
      SB_FIELD_STR("run.out", out),
      SB_FIELD_STR("run.name", name),
      SB_FIELD_STR("run.dir", dir),
      SB_FIELD_BOOL("run.log_walltime", log_walltime),
      SB_FIELD_DOUBLE("schedule.T", horizon),
      SB_FIELD_DOUBLE("schedule.g2_peak", g2_peak),
      SB_FIELD_DOUBLE("schedule.g2_floor", g2_floor),
      SB_FIELD_INT("grid.N", grid_steps),
      SB_FIELD_INT("net.width", width),
      SB_FIELD_INT("net.time_features", time_features),
      SB_FIELD_STR("net.activation", activation),
      SB_FIELD_DOUBLE("opt.lr", lr),
      SB_FIELD_DOUBLE("opt.beta1", beta1),
      SB_FIELD_DOUBLE("opt.beta2", beta2),
      SB_FIELD_DOUBLE("opt.eps", eps),
      SB_FIELD_DOUBLE("opt.clip", clip),
      SB_FIELD_INT("ipf.L", ipf_rounds),
      SB_FIELD_INT("ipf.inner_steps", inner_steps),
      SB_FIELD_INT("ipf.batch", batch),
      SB_FIELD_BOOL("ipf.warm_start", warm_start),
      SB_FIELD_BOOL("ipf.skip_forward", skip_forward),
      SB_FIELD_INT("ipf.halt_after_phases", halt_after_phases),
      SB_FIELD_INT("ipf.diag_samples", diag_samples),
      SB_FIELD_INT("ipf.diag_bootstrap", diag_bootstrap),
      SB_FIELD_INT("ipf.stop_window", stop_window),
      SB_FIELD_INT("ipf.stop_patience", stop_patience),
      SB_FIELD_DOUBLE("ipf.stop_tol", stop_tol),
      SB_FIELD_STR("loss.divergence", divergence),
      SB_FIELD_INT("loss.probes", probes),
      SB_FIELD_DOUBLE("loss.fd_step", fd_step),
      SB_FIELD_BOOL("loss.normalize", normalize),
      SB_FIELD_STR("data.a", data_a),
      SB_FIELD_STR("data.b", data_b),
      SB_FIELD_U64("data.split_seed", split_seed),
      SB_FIELD_DOUBLE("data.held_fraction", held_fraction),
      SB_FIELD_INT("sample.count", count),
      SB_FIELD_STR("sample.mode", mode),
      SB_FIELD_STR("sample.format", format),
      SB_FIELD_INT("sample.ode_steps", ode_steps),
      SB_FIELD_STR("sample.output", sample_output),
      SB_FIELD_INT("likelihood.steps", likelihood_steps),
      SB_FIELD_INT("eval.samples", eval_samples),
      SB_FIELD_DOUBLE("eval.radius", outlier_radius),
  };
  return fields;
}

#undef SB_FIELD_STR
#undef SB_FIELD_DOUBLE
#undef SB_FIELD_INT
#undef SB_FIELD_U64
#undef SB_FIELD_BOOL

}  // namespace detail

inline void apply_config_pair(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const detail::ConfigField& f : detail::config_fields()) {
    if (key == f.key) {
      f.set(cfg, value, key);
      return;
    }
  }
  raise(ErrorCode::ConfigError, "unknown config key '" + key + "'");
}

inline std::vector<std::pair<std::string, std::string>> read_config_pairs(
    const std::string& path) {
  std::ifstream f(path);
  if (!f) raise(ErrorCode::IoError, "cannot open config file '" + path + "'");
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      raise(ErrorCode::ConfigError,
            path + ":" + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
    pairs.emplace_back(detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
  return pairs;
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  for (const auto& [k, v] : read_config_pairs(path)) apply_config_pair(cfg, k, v);
}

// Every key, sorted, one per line; parses back to an identical config.
inline std::string serialize_config(const RunConfig& cfg) {
  std::map<std::string, std::string> kv;
  for (const detail::ConfigField& f : detail::config_fields()) kv[f.key] = f.get(cfg);
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Assembly into module-level settings.

inline NetConfig make_net_config(const RunConfig& cfg) {
  NetConfig net;
  net.width = cfg.width;
  net.time_features = cfg.time_features;
  net.horizon = cfg.horizon;
  net.activation = activation_from_name(cfg.activation);
  net.validate();
  return net;
}

inline NoiseSchedule make_schedule(const RunConfig& cfg) {
  NoiseSchedule sched{cfg.horizon, cfg.g2_peak, cfg.g2_floor};
  sched.validate();
  return sched;
}

inline TimeGrid make_grid(const RunConfig& cfg) {
  TimeGrid grid{cfg.grid_steps, cfg.horizon};
  grid.validate();
  return grid;
}

inline OptimizerState make_optimizer(const RunConfig& cfg) {
  OptimizerState opt;
  opt.lr = cfg.lr;
  opt.beta1 = cfg.beta1;
  opt.beta2 = cfg.beta2;
  opt.eps = cfg.eps;
  opt.clip = cfg.clip;
  return opt;
}

inline LossOptions make_loss_options(const RunConfig& cfg) {
  LossOptions opts;
  if (cfg.divergence == "exact")
    opts.divergence = DivergenceEstimator::Exact();
  else if (cfg.divergence == "hutchinson")
    opts.divergence = DivergenceEstimator::Hutchinson(cfg.probes);
  else if (cfg.divergence == "fd")
    opts.divergence = DivergenceEstimator::FiniteDifference(cfg.fd_step);
  else
    raise(ErrorCode::ConfigError,
          "loss.divergence must be 'exact', 'hutchinson', or 'fd', got '" + cfg.divergence + "'");
  opts.normalize_by_batch = cfg.normalize;
  opts.workers = cfg.workers;
  return opts;
}

inline IpfConfig make_ipf_config(const RunConfig& cfg) {
  IpfConfig ipf;
  ipf.seed = cfg.seed;
  ipf.workers = cfg.workers;
  ipf.rounds = cfg.ipf_rounds;
  ipf.inner_steps = cfg.inner_steps;
  ipf.batch = cfg.batch;
  ipf.warm_start = cfg.warm_start;
  ipf.skip_forward = cfg.skip_forward;
  ipf.halt_after_phases = cfg.halt_after_phases;
  ipf.diag_samples = cfg.diag_samples;
  ipf.diag_bootstrap = cfg.diag_bootstrap;
  ipf.log_walltime = cfg.log_walltime;
  ipf.stop_window = cfg.stop_window;
  ipf.stop_patience = cfg.stop_patience;
  ipf.stop_tol = cfg.stop_tol;
  ipf.validate();
  return ipf;
}

// Output root: run.out, else $SPHEREBRIDGE_OUT, else "runs".
inline std::string resolve_output_root(const RunConfig& cfg) {
  if (!cfg.out.empty()) return cfg.out;
  if (const char* env = std::getenv("SPHEREBRIDGE_OUT"); env && *env) return env;
  return "runs";
}

inline std::string resolve_run_dir(const RunConfig& cfg) {
  if (!cfg.dir.empty()) return cfg.dir;
  return resolve_output_root(cfg) + "/" + cfg.name;
}

}  // namespace spherebridge
