// End-to-end CLI checks that require real (minutes-scale) training runs.
// Kept out of test_cli so the fast suite stays fast.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "spherebridge/cli.hpp"

using namespace spherebridge;

namespace {

std::string fresh_dir(const std::string& stem) {
  const std::string path = (std::filesystem::temp_directory_path() / stem).string();
  std::filesystem::remove_all(path);
  return path;
}

int cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"spherebridge"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

Points3 load_sample_csv(const std::string& path) {
  GeoDataset ds = load_latlon_csv(path);
  return ds.points;
}

// A run recipe whose forward noising actually reaches the uniform prior, so a
// single backward pass is enough for generation (no bridge iterations needed).
// Fine-featured datasets need a finer time grid and a gentler learning rate
// than the smooth synthetic targets.
std::vector<std::string> mixing_train_flags(const std::string& dataset, const std::string& dir,
                                            int width, int inner, const std::string& seed,
                                            const std::string& grid_n = "10",
                                            const std::string& lr = "1e-3") {
  return {"train",
          "--dataset",          dataset,
          "--run",              dir,
          "--seed",             seed,
          "--ipf.L",            "0",
          "--skip-forward-phase",
          "--ipf.inner_steps",  std::to_string(inner),
          "--ipf.batch",        "256",
          "--ipf.diag_samples", "512",
          "--ipf.diag_bootstrap", "16",
          "--net.width",        std::to_string(width),
          "--net.time_features", "8",
          "--schedule.T",       "1.5",
          "--schedule.g2_peak", "3",
          "--schedule.g2_floor", "0.05",
          "--grid.N",           grid_n,
          "--opt.lr",           lr,
          "--ipf.stop_patience", std::to_string(inner + 1)};
}

// Equal-area histogram over 3 latitude bands x 4 longitude quadrants.
Eigen::VectorXd bin_histogram(const Points3& pts) {
  Eigen::VectorXd h = Eigen::VectorXd::Zero(12);
  for (int i = 0; i < pts.cols(); ++i) {
    const double z = pts(2, i);
    const int band = z < -1.0 / 3.0 ? 0 : (z < 1.0 / 3.0 ? 1 : 2);
    const double phi = std::atan2(pts(1, i), pts(0, i));  // [-pi, pi]
    int sector = static_cast<int>(std::floor((phi + kPi) / (kPi / 2.0)));
    if (sector > 3) sector = 3;
    if (sector < 0) sector = 0;
    h[band * 4 + sector] += 1.0;
  }
  return h / static_cast<double>(pts.cols());
}

double tv_distance(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  return 0.5 * (p - q).cwiseAbs().sum();
}

}  // namespace

TEST_CASE("sde and ode sampling modes agree on binned marginals") {
  const std::string dir = fresh_dir("sb_slow_modes");
  REQUIRE(cli(mixing_train_flags("vmf:0,0,1,5,1", dir, 64, 1500, "41")) == 0);

  const std::string sde_path = dir + "/sde.csv";
  const std::string ode_path = dir + "/ode.csv";
  REQUIRE(cli({"sample", "--run", dir, "--count", "10000", "--mode", "sde", "--sample.output",
               sde_path, "--seed", "42"}) == 0);
  REQUIRE(cli({"sample", "--run", dir, "--count", "10000", "--mode", "ode", "--sample.ode_steps",
               "100", "--sample.output", ode_path, "--seed", "42"}) == 0);

  const Points3 sde_pts = load_sample_csv(sde_path);
  const Points3 ode_pts = load_sample_csv(ode_path);
  REQUIRE(sde_pts.cols() == 10000);
  REQUIRE(ode_pts.cols() == 10000);
  const double tv = tv_distance(bin_histogram(sde_pts), bin_histogram(ode_pts));
  INFO("binned TV distance " << tv);
  CHECK(tv < 0.1);
}

TEST_CASE("run trained on the earthquake fixture concentrates on its support") {
  const std::string dir = fresh_dir("sb_slow_quakes");
  const std::string fixture = std::string(SB_FIXTURE_DIR) + "/quakes.csv";
  REQUIRE(cli(mixing_train_flags(fixture, dir, 128, 4000, "43", "25", "5e-4")) == 0);

  const std::string gen_path = dir + "/gen.csv";
  REQUIRE(cli({"sample", "--run", dir, "--count", "3000", "--mode", "sde", "--sample.output",
               gen_path, "--seed", "44"}) == 0);
  const Points3 gen = load_sample_csv(gen_path);

  // Same held-out split the run itself used (default split seed and fraction).
  GeoDataset full = load_latlon_csv(fixture);
  auto [train_part, held_part] = full.split(1, 0.2);
  const Points3& held = held_part.points;
  REQUIRE(held.cols() > 100);

  Rng urng(45);
  const Points3 unif = uniform_batch(3000, urng);
  const double bw = median_heuristic_bandwidth(held, held);
  const double m_model = mmd2(gen, held, bw);
  const double m_unif = mmd2(unif, held, bw);
  INFO("MMD^2 model " << m_model << " uniform " << m_unif);
  CHECK(m_model * 5.0 <= m_unif);
}

TEST_CASE("interpolation endpoint frames match their datasets") {
  const std::string dir = fresh_dir("sb_slow_interp");
  REQUIRE(cli({"interpolate", "--dataset", "harmonic:3,2", "--prior", "harmonic:5,3", "--run", dir,
               "--seed", "46", "--ipf.L", "2", "--ipf.inner_steps", "700", "--ipf.batch", "256",
               "--ipf.diag_samples", "256", "--ipf.diag_bootstrap", "8", "--net.width", "48",
               "--net.time_features", "8", "--grid.N", "10", "--opt.lr", "1e-3",
               "--ipf.stop_patience", "701", "--sample.count", "1200"}) == 0);

  const Points3 frame0 = load_sample_csv(dir + "/frame_0.csv");
  const Points3 frame4 = load_sample_csv(dir + "/frame_4.csv");
  REQUIRE(frame0.cols() == 1200);
  REQUIRE(frame4.cols() == 1200);

  Rng rng(47);
  const Points3 a_ref = make_synthetic_sampler(parse_dataset_spec("harmonic:3,2"))(1200, rng);
  const Points3 b_ref = make_synthetic_sampler(parse_dataset_spec("harmonic:5,3"))(1200, rng);

  Rng null_rng(48);
  struct End {
    const char* name;
    const Points3* frame;
    const Points3* ref;
  };
  for (const End& e : {End{"t=0 vs A", &frame0, &a_ref}, End{"t=T vs B", &frame4, &b_ref}}) {
    const double bw = median_heuristic_bandwidth(*e.frame, *e.ref);
    MmdEvaluator ev(*e.frame, *e.ref, bw);
    const double m2 = ev.mmd2();
    const double thr = 3.0 * ev.null_quantile(200, 0.99, null_rng);
    INFO(e.name << ": MMD^2 " << m2 << " threshold " << thr);
    CHECK(m2 < thr);
  }
}

TEST_CASE("interpolating a dataset with itself keeps every frame close to it") {
  const std::string dir = fresh_dir("sb_slow_self");
  const std::string spec = "vmf:0,0,1,8,1";
  REQUIRE(cli({"interpolate", "--dataset", spec, "--prior", spec, "--run", dir, "--seed", "49",
               "--ipf.L", "1", "--ipf.inner_steps", "700", "--ipf.batch", "256",
               "--ipf.diag_samples", "256", "--ipf.diag_bootstrap", "8", "--net.width", "48",
               "--net.time_features", "8", "--grid.N", "10", "--opt.lr", "1e-3",
               "--ipf.stop_patience", "701", "--sample.count", "1200"}) == 0);

  Rng rng(50);
  const Points3 ref = make_synthetic_sampler(parse_dataset_spec(spec))(1200, rng);

  // Threshold calibrated on the endpoint frames; interior frames may wander by
  // at most a factor of two (the bridge adds diffusion at interior times).
  Rng null_rng(51);
  double endpoint_thr = 0.0;
  std::vector<Points3> frames;
  for (int k = 0; k < 5; ++k) frames.push_back(load_sample_csv(dir + "/frame_" + std::to_string(k) + ".csv"));
  for (int k : {0, 4}) {
    const double bw = median_heuristic_bandwidth(frames[k], ref);
    MmdEvaluator ev(frames[k], ref, bw);
    const double thr = 3.0 * ev.null_quantile(200, 0.99, null_rng);
    endpoint_thr = std::max(endpoint_thr, thr);
    INFO("endpoint frame " << k << " MMD^2 " << ev.mmd2() << " threshold " << thr);
    CHECK(ev.mmd2() < thr);
  }
  for (int k : {1, 2, 3}) {
    const double bw = median_heuristic_bandwidth(frames[k], ref);
    const double m2 = mmd2(frames[k], ref, bw);
    INFO("interior frame " << k << " MMD^2 " << m2 << " limit " << 2.0 * endpoint_thr);
    CHECK(m2 < 2.0 * endpoint_thr);
  }
}

TEST_CASE("trained model's held-out log-likelihood beats the uniform baseline") {
  const std::string dir = fresh_dir("sb_slow_lik");
  REQUIRE(cli(mixing_train_flags("vmf:0,0,1,10,1", dir, 64, 1500, "52")) == 0);

  REQUIRE(cli({"likelihood", "--run", dir, "--eval.samples", "400", "--likelihood.steps", "100",
               "--seed", "53"}) == 0);

  std::ifstream in(dir + "/likelihood.csv");
  REQUIRE(in.good());
  std::string line;
  std::getline(in, line);  // header
  double sum = 0.0;
  int n = 0;
  while (std::getline(in, line)) {
    const auto last_comma = line.find_last_of(',');
    REQUIRE(last_comma != std::string::npos);
    sum += std::stod(line.substr(last_comma + 1));
    ++n;
  }
  REQUIRE(n == 400);
  const double mean_vs_uniform = sum / n;
  INFO("mean log-likelihood ratio to uniform " << mean_vs_uniform);
  CHECK(mean_vs_uniform > 0.0);
}

TEST_CASE("bridge iterations reduce outlier fraction against the one-pass baseline") {
  // Deliberately short noise schedule: the single-pass baseline is handicapped
  // by the prior gap and the bridge iterations must make up the difference.
  const std::string fixture = std::string(SB_FIXTURE_DIR) + "/quakes.csv";
  auto flags = [&](const std::string& dir, const std::string& rounds, bool skip,
                   const std::string& seed) {
    std::vector<std::string> v{"train",
                               "--dataset",           fixture,
                               "--run",               dir,
                               "--seed",              seed,
                               "--ipf.L",             rounds,
                               "--ipf.inner_steps",   "800",
                               "--ipf.batch",         "256",
                               "--ipf.diag_samples",  "256",
                               "--ipf.diag_bootstrap", "8",
                               "--net.width",         "64",
                               "--net.time_features", "8",
                               "--grid.N",            "10",
                               "--opt.lr",            "1e-3"};
    if (skip) v.push_back("--skip-forward-phase");
    return v;
  };
  const std::string base_dir = fresh_dir("sb_slow_out_base");
  const std::string bridge_dir = fresh_dir("sb_slow_out_bridge");
  REQUIRE(cli(flags(base_dir, "0", true, "54")) == 0);
  REQUIRE(cli(flags(bridge_dir, "4", false, "54")) == 0);

  auto eval_fraction = [](const std::string& dir) {
    REQUIRE(cli({"eval", "--run", dir, "--eval.samples", "1500", "--seed", "55"}) == 0);
    std::ifstream in(dir + "/report.json");
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    const std::string key = "\"outlier_fraction_at_radius\":";
    const auto pos = text.find(key);
    REQUIRE(pos != std::string::npos);
    return std::stod(text.substr(pos + key.size()));
  };
  const double frac_base = eval_fraction(base_dir);
  const double frac_bridge = eval_fraction(bridge_dir);
  INFO("outlier fraction baseline " << frac_base << " bridge " << frac_bridge);
  CHECK(frac_bridge <= frac_base);
}
