#pragma once
// Noising dynamics: triangular noise schedule, uniform time grid, and the
// geodesic random walk discretization
//
//   Z ~ N(0, I_3) projected to the tangent space at X_k,
//   W = gamma * drift(t_k, X_k) + sqrt(gamma) * g(t_k) * Z,
//   X_{k+1} = exp_{X_k}(W),        gamma = T / N,  t_k = k * gamma.
//
// Time conventions: a forward trajectory's simulation index k sits at
// physical process time t_k. A backward trajectory is simulated in its own
// time (prior side first) and its index k sits at physical time T - t_k; the
// backward drift is evaluated at the physical time, i.e. at T - t_k.

#include <cstdint>
#include <functional>
#include <utility>

#include "spherebridge/common.hpp"
#include "spherebridge/manifold.hpp"

namespace spherebridge {

// Piecewise-linear triangle: g2_floor at t = 0 and t = T, g2_peak at t = T/2.
struct NoiseSchedule {
  double horizon = 1.0;
  double g2_peak = 0.05;
  double g2_floor = 0.001;

  void validate() const {
    if (!std::isfinite(horizon) || !(horizon > 0.0))
      raise(ErrorCode::ConfigError, "schedule horizon must be positive");
    if (!std::isfinite(g2_floor) || !(g2_floor > 0.0))
      raise(ErrorCode::ConfigError, "schedule g2_floor must be positive");
    if (!std::isfinite(g2_peak) || !(g2_peak >= g2_floor))
      raise(ErrorCode::ConfigError, "schedule g2_peak must be >= g2_floor");
  }

  double g_squared(double t) const {
    if (t < -1e-12 || t > horizon + 1e-12)
      raise(ErrorCode::OutOfHorizon, "time outside [0, horizon]");
    double u = std::clamp(t / horizon, 0.0, 1.0);
    double w = u <= 0.5 ? 2.0 * u : 2.0 * (1.0 - u);
    return g2_floor + (g2_peak - g2_floor) * w;
  }

  double g(double t) const { return std::sqrt(g_squared(t)); }
};

struct TimeGrid {
  int steps = 10;
  double horizon = 1.0;

  void validate() const {
    if (steps < 1) raise(ErrorCode::ConfigError, "grid needs at least one step");
    if (!std::isfinite(horizon) || !(horizon > 0.0))
      raise(ErrorCode::ConfigError, "grid horizon must be positive");
  }

  double dt() const { return horizon / steps; }
  // time(steps) == horizon exactly.
  double time(int k) const { return horizon * (static_cast<double>(k) / steps); }
};

enum class TrajectoryDirection { forward, backward };

struct TrajectoryBatch {
  TimeGrid grid;
  TrajectoryDirection direction = TrajectoryDirection::forward;
  int paths = 0;
  // Column k * paths + b is path b at simulation index k, so each simulation
  // step is a contiguous block of columns.
  Points3 states;

  Eigen::Ref<const Points3> step_block(int k) const {
    return states.middleCols(static_cast<Eigen::Index>(k) * paths, paths);
  }
  Eigen::Vector3d state(int b, int k) const {
    return states.col(static_cast<Eigen::Index>(k) * paths + b);
  }
  double simulation_time(int k) const { return grid.time(k); }
  // Physical process time of simulation index k (forward: t_k; backward
  // trajectories start on the prior side, which lives at physical time T).
  double physical_time(int k) const {
    return direction == TrajectoryDirection::forward ? grid.time(k)
                                                     : grid.horizon - grid.time(k);
  }
  Points3 terminal() const { return step_block(grid.steps); }
  Points3 data_side() const {
    return direction == TrajectoryDirection::forward ? Points3(step_block(0))
                                                     : Points3(step_block(grid.steps));
  }
  Points3 prior_side() const {
    return direction == TrajectoryDirection::forward ? Points3(step_block(grid.steps))
                                                     : Points3(step_block(0));
  }
};

// Batched drift: maps (simulation time, 3 x m states) to (3 x m tangent
// columns). Outputs are assumed tangent at the matching state columns.
template <typename F>
concept BatchDrift = requires(const F& f, double t, const Points3& X) {
  { f(t, X) } -> std::convertible_to<Points3>;
};

struct ZeroDrift {
  Points3 operator()(double, const Points3& X) const { return Points3::Zero(3, X.cols()); }
};

// Draws fresh starting points given (count, rng).
using BatchSampler = std::function<Points3(int, Rng&)>;

namespace detail {

template <typename DriftFn>
void walk_chunk(const DriftFn& drift, const NoiseSchedule& sched, const TimeGrid& grid,
                int paths, Points3& states, int b0, int b1, Rng& rng) {
  const int m = b1 - b0;
  const double gamma = grid.dt();
  Points3 Z(3, m);
  for (int k = 0; k < grid.steps; ++k) {
    const double t = grid.time(k);
    const double noise_scale = std::sqrt(gamma * sched.g_squared(t));
    const Points3 Xk = states.middleCols(static_cast<Eigen::Index>(k) * paths + b0, m);
    for (int j = 0; j < m; ++j) Z.col(j) = rng.normal3();
    project_batch_inplace(Xk, Z);
    Points3 W;
    if constexpr (std::is_same_v<std::decay_t<DriftFn>, ZeroDrift>) {
      W = noise_scale * Z;
    } else {
      W = gamma * drift(t, Xk) + noise_scale * Z;
    }
    states.middleCols(static_cast<Eigen::Index>(k + 1) * paths + b0, m) = exp_batch(Xk, W);
  }
}

}  // namespace detail

// Deterministic per (noise_seed, workers): worker w owns the contiguous path
// chunk assigned by parallel_for and a private stream derived from its index.
template <BatchDrift DriftFn>
TrajectoryBatch geodesic_random_walk(const DriftFn& drift, const NoiseSchedule& sched,
                                     const TimeGrid& grid, const Points3& x0,
                                     std::uint64_t noise_seed, int workers = 1,
                                     TrajectoryDirection dir = TrajectoryDirection::forward) {
  sched.validate();
  grid.validate();
  if (std::abs(sched.horizon - grid.horizon) > 1e-12)
    raise(ErrorCode::ShapeMismatch, "schedule and grid horizons disagree");
  const int B = static_cast<int>(x0.cols());
  if (B == 0) raise(ErrorCode::EmptyDataset, "no starting points to simulate from");

  TrajectoryBatch out{grid, dir, B, Points3(3, static_cast<Eigen::Index>(B) * (grid.steps + 1))};
  out.states.leftCols(B) = x0;
  parallel_for(workers, B, [&](std::int64_t b0, std::int64_t b1, int w) {
    Rng rng(mix_seed(noise_seed, {stream_tag("walk-chunk"), static_cast<std::uint64_t>(w)}));
    detail::walk_chunk(drift, sched, grid, B, out.states, static_cast<int>(b0),
                       static_cast<int>(b1), rng);
  });
  if (!out.states.allFinite())
    raise(ErrorCode::NonFiniteState, "random walk produced non-finite states");
  return out;
}

// Single-stream overload consuming the caller's rng.
template <BatchDrift DriftFn>
TrajectoryBatch geodesic_random_walk(const DriftFn& drift, const NoiseSchedule& sched,
                                     const TimeGrid& grid, const Points3& x0, Rng& rng,
                                     TrajectoryDirection dir = TrajectoryDirection::forward) {
  sched.validate();
  grid.validate();
  if (std::abs(sched.horizon - grid.horizon) > 1e-12)
    raise(ErrorCode::ShapeMismatch, "schedule and grid horizons disagree");
  const int B = static_cast<int>(x0.cols());
  if (B == 0) raise(ErrorCode::EmptyDataset, "no starting points to simulate from");

  TrajectoryBatch out{grid, dir, B, Points3(3, static_cast<Eigen::Index>(B) * (grid.steps + 1))};
  out.states.leftCols(B) = x0;
  detail::walk_chunk(drift, sched, grid, B, out.states, 0, B, rng);
  if (!out.states.allFinite())
    raise(ErrorCode::NonFiniteState, "random walk produced non-finite states");
  return out;
}

// Forward simulation: start at data samples, drift evaluated at simulation
// time (= physical time).
template <BatchDrift DriftFn>
TrajectoryBatch simulate_forward(const DriftFn& drift, const BatchSampler& data_sampler,
                                 int batch, const NoiseSchedule& sched, const TimeGrid& grid,
                                 Rng& init_rng, std::uint64_t noise_seed, int workers = 1) {
  Points3 x0 = data_sampler(batch, init_rng);
  if (x0.cols() == 0) raise(ErrorCode::EmptyDataset, "data sampler returned no points");
  return geodesic_random_walk(drift, sched, grid, x0, noise_seed, workers,
                              TrajectoryDirection::forward);
}

// Backward simulation: start at prior samples; the caller's drift takes the
// physical time argument, so step k evaluates it at T - t_k.
template <BatchDrift DriftFn>
TrajectoryBatch simulate_backward(const DriftFn& drift_physical, const BatchSampler& prior_sampler,
                                  int batch, const NoiseSchedule& sched, const TimeGrid& grid,
                                  Rng& init_rng, std::uint64_t noise_seed, int workers = 1) {
  Points3 x0 = prior_sampler(batch, init_rng);
  if (x0.cols() == 0) raise(ErrorCode::EmptyDataset, "prior sampler returned no points");
  const double T = grid.horizon;
  auto flipped = [&drift_physical, T](double t, const Points3& X) -> Points3 {
    return drift_physical(T - t, X);
  };
  return geodesic_random_walk(flipped, sched, grid, x0, noise_seed, workers,
                              TrajectoryDirection::backward);
}

}  // namespace spherebridge
