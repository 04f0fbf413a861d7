#pragma once

// Implicit drift-matching objectives. A training phase minimizes, over the
// trainee network r, the batch objective
//
//   sum_i w [ 1/2 |frozen(t_i, x_i) + r(t_i, x_i)|^2
//             + g^2(t_i) div(r(t_i, .))(x_i) ]
//
// where (t_i, x_i) are grid-time states of trajectories simulated under the
// frozen drift, div is the spatial divergence at fixed time, and w is 1/B by
// default (a flag restores the plain sum). Only the trainee is ever
// differentiated. The divergence and its parameter gradient support three
// estimators: exact basis contraction, Hutchinson probes, and central finite
// differences on the sphere.

#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "spherebridge/common.hpp"
#include "spherebridge/manifold.hpp"
#include "spherebridge/net.hpp"
#include "spherebridge/sde.hpp"

namespace spherebridge {

// The non-differentiated side of a phase: the zero drift, a fixed model, or
// an arbitrary function of (times, points). Times are physical.
class FrozenDrift {
 public:
  using Fn = std::function<Points3(const Eigen::VectorXd&, const Points3&)>;

  static FrozenDrift zero() { return FrozenDrift(); }
  static FrozenDrift of_model(const DriftModel* model) {
    FrozenDrift f;
    f.model_ = model;
    return f;
  }
  static FrozenDrift of_function(Fn fn) {
    FrozenDrift f;
    f.fn_ = std::move(fn);
    return f;
  }

  bool is_zero() const { return model_ == nullptr && !fn_; }

  Points3 evaluate(const Eigen::VectorXd& times, const Points3& X) const {
    if (model_) {
      ForwardTape scratch;
      return model_->forward_batch(times, X, scratch);
    }
    if (fn_) return fn_(times, X);
    return Points3::Zero(3, X.cols());
  }

  Points3 evaluate_at(double t, const Points3& X) const {
    if (is_zero()) return Points3::Zero(3, X.cols());
    return evaluate(Eigen::VectorXd::Constant(X.cols(), t), X);
  }

  // Adapter for the trajectory simulators, which pass one time per step.
  auto as_batch_drift() const {
    return [this](double t, const Points3& X) { return evaluate_at(t, X); };
  }

 private:
  const DriftModel* model_ = nullptr;
  Fn fn_;
};

// Training pairs (t_i, x_i). Times are physical regardless of the direction
// the source trajectory was simulated in; `source` records that direction.
struct LossBatch {
  Eigen::VectorXd times;
  Points3 points;
  TrajectoryDirection source = TrajectoryDirection::forward;

  Eigen::Index size() const { return points.cols(); }
};

// One uniformly drawn grid index per trajectory, from {1..N} of the
// generating run: exactly the times at which the net being trained is later
// evaluated by its own simulator, and a discretization of t ~ U([0,T]).
inline LossBatch sample_loss_batch(const TrajectoryBatch& traj, Rng& rng) {
  if (traj.paths == 0) raise(ErrorCode::EmptyDataset, "cannot sample from an empty trajectory");
  LossBatch out;
  out.source = traj.direction;
  out.times.resize(traj.paths);
  out.points.resize(3, traj.paths);
  for (int b = 0; b < traj.paths; ++b) {
    const int k = 1 + static_cast<int>(rng.index(traj.grid.steps));
    out.times[b] = traj.physical_time(k);
    out.points.col(b) = traj.state(b, k);
  }
  return out;
}

struct DivergenceEstimator {
  enum class Kind { exact, hutchinson, finite_difference };
  Kind kind = Kind::exact;
  int probes = 8;
  double step = 1e-4;

  static DivergenceEstimator Exact() { return {}; }
  static DivergenceEstimator Hutchinson(int m) {
    if (m < 1) raise(ErrorCode::ConfigError, "hutchinson needs at least one probe");
    return {Kind::hutchinson, m, 0.0};
  }
  static DivergenceEstimator FiniteDifference(double h = 1e-4) {
    if (!(h > 0.0)) raise(ErrorCode::ConfigError, "finite-difference step must be > 0");
    return {Kind::finite_difference, 0, h};
  }
};

struct LossOptions {
  DivergenceEstimator divergence = DivergenceEstimator::Exact();
  bool normalize_by_batch = true;  // w = 1/B; false restores the plain sum
  int workers = 1;
  std::uint64_t probe_seed = 0;  // Hutchinson probe stream
};

namespace detail {

inline Points3 tangent_bases(const Points3& X, int which) {
  Points3 out(3, X.cols());
  for (Eigen::Index b = 0; b < X.cols(); ++b) {
    TangentBasis basis = tangent_basis(SpherePoint{Eigen::Vector3d(X.col(b))});
    out.col(b) = which == 0 ? basis.e1 : basis.e2;
  }
  return out;
}

// Loss and trainee gradient for one contiguous chunk of the batch.
// Returns the chunk loss; accumulates into grad.
inline double loss_chunk(const DriftModel& trainee, const FrozenDrift& frozen,
                         const Eigen::VectorXd& times, const Points3& X,
                         const Eigen::VectorXd& g2, double w, const DivergenceEstimator& div,
                         Rng& probe_rng, Eigen::VectorXd& grad) {
  const Eigen::Index B = X.cols();
  ForwardTape tape;
  Points3 out = trainee.forward_batch(times, X, tape);
  Points3 fro = frozen.evaluate(times, X);
  Points3 resid = fro + out;

  double loss = 0.5 * w * resid.squaredNorm();

  // Quadratic-term adjoint, with the projection head folded in. resid is
  // tangent whenever the frozen field is, but fold exactly regardless.
  Eigen::VectorXd rx = resid.cwiseProduct(X).colwise().sum().transpose();
  Eigen::Matrix3Xd y_bar = w * (resid - X * rx.asDiagonal());

  switch (div.kind) {
    case DivergenceEstimator::Kind::exact: {
      Points3 e1 = tangent_bases(X, 0), e2 = tangent_bases(X, 1);
      JvpTape j1, j2;
      Points3 o1 = trainee.jvp_batch(tape, e1, j1);
      Points3 o2 = trainee.jvp_batch(tape, e2, j2);
      Eigen::VectorXd div_vals = (o1.cwiseProduct(e1) + o2.cwiseProduct(e2))
                                     .colwise()
                                     .sum()
                                     .transpose();
      loss += w * g2.dot(div_vals);
      // d(div)/d(dy_j) = e_j; d(div)/dy = -2x (head terms of both contractions).
      Eigen::VectorXd wg2 = w * g2;
      y_bar -= 2.0 * (X * wg2.asDiagonal());
      std::vector<Eigen::Matrix3Xd> dy_bar = {e1 * wg2.asDiagonal(), e2 * wg2.asDiagonal()};
      trainee.backward_batch(tape, y_bar, {&j1, &j2}, dy_bar, grad);
      return loss;
    }
    case DivergenceEstimator::Kind::hutchinson: {
      // Probes z = P(x) zeta, zeta ~ N(0, I_3): E[z z^T] is the tangent
      // projector, so <jvp(z), z> is unbiased for the divergence without
      // any rescaling. Each probe's tape is consumed immediately to keep
      // memory flat in the probe count.
      const double m = static_cast<double>(div.probes);
      Eigen::VectorXd div_vals = Eigen::VectorXd::Zero(B);
      for (int p = 0; p < div.probes; ++p) {
        Points3 Z(3, B);
        for (Eigen::Index b = 0; b < B; ++b) Z.col(b) = probe_rng.normal3();
        project_batch_inplace(X, Z);
        JvpTape jt;
        Points3 o = trainee.jvp_batch(tape, Z, jt);
        Eigen::VectorXd contr = o.cwiseProduct(Z).colwise().sum().transpose();
        div_vals += contr / m;
        // <jvp(z), z> = <dy, z> - <y, x> |z|^2; adjoint of y handled below.
        Eigen::VectorXd wg2m = (w / m) * g2;
        std::vector<Eigen::Matrix3Xd> dy_bar = {Z * wg2m.asDiagonal()};
        Eigen::VectorXd znorm2 = Z.colwise().squaredNorm().transpose();
        Eigen::Matrix3Xd probe_y_bar =
            -(X * (wg2m.cwiseProduct(znorm2)).asDiagonal());
        trainee.backward_batch(tape, probe_y_bar, {&jt}, dy_bar, grad);
      }
      loss += w * g2.dot(div_vals);
      trainee.backward_batch(tape, y_bar, {}, {}, grad);
      return loss;
    }
    case DivergenceEstimator::Kind::finite_difference: {
      const double h = div.step;
      Eigen::VectorXd div_vals = Eigen::VectorXd::Zero(B);
      trainee.backward_batch(tape, y_bar, {}, {}, grad);
      for (int which = 0; which < 2; ++which) {
        Points3 e = tangent_bases(X, which);
        for (double sign : {1.0, -1.0}) {
          Points3 Xs(3, B);
          Eigen::Matrix3Xd tau(3, B);
          for (Eigen::Index b = 0; b < B; ++b) {
            SpherePoint x{Eigen::Vector3d(X.col(b))};
            Xs.col(b) = exp_map(x, (sign * h) * Eigen::Vector3d(e.col(b))).coords;
            tau.col(b) = -sign * std::sin(h) * X.col(b) + std::cos(h) * e.col(b);
          }
          ForwardTape st;
          Points3 os = trainee.forward_batch(times, Xs, st);
          Eigen::VectorXd contr = os.cwiseProduct(tau).colwise().sum().transpose();
          div_vals += (sign / (2.0 * h)) * contr;
          // Adjoint of the shifted trunk output: fold the head at the
          // shifted point into tau.
          Eigen::VectorXd tx = tau.cwiseProduct(Xs).colwise().sum().transpose();
          Eigen::Matrix3Xd ptau = tau - Xs * tx.asDiagonal();
          Eigen::VectorXd scale = (sign / (2.0 * h)) * w * g2;
          Eigen::Matrix3Xd sy_bar = ptau * scale.asDiagonal();
          trainee.backward_batch(st, sy_bar, {}, {}, grad);
        }
      }
      loss += w * g2.dot(div_vals);
      return loss;
    }
  }
  raise(ErrorCode::DivergenceModeUnsupported, "unknown divergence estimator");
}

}  // namespace detail

// Evaluates the batch objective and populates the trainee's gradient buffer
// (zeroing it first). The frozen drift is never differentiated.
inline double implicit_drift_loss(DriftModel& trainee, const FrozenDrift& frozen,
                                  const LossBatch& batch, const NoiseSchedule& sched,
                                  const LossOptions& opts = {}) {
  const Eigen::Index B = batch.size();
  if (B == 0) raise(ErrorCode::EmptyDataset, "loss batch is empty");
  if (batch.times.size() != B) raise(ErrorCode::ShapeMismatch, "loss batch times vs points");
  const double w = opts.normalize_by_batch ? 1.0 / static_cast<double>(B) : 1.0;
  Eigen::VectorXd g2(B);
  for (Eigen::Index i = 0; i < B; ++i) g2[i] = sched.g_squared(batch.times[i]);

  trainee.zero_grad();
  const int workers = std::max(1, opts.workers);
  std::vector<Eigen::VectorXd> grads(workers, Eigen::VectorXd::Zero(trainee.param_count()));
  std::vector<double> losses(workers, 0.0);
  parallel_for(workers, static_cast<int>(B), [&](int lo, int hi, int wk) {
    if (lo >= hi) return;
    const Eigen::Index n = hi - lo;
    Eigen::VectorXd times = batch.times.segment(lo, n);
    Points3 X = batch.points.middleCols(lo, n);
    Eigen::VectorXd g2c = g2.segment(lo, n);
    Rng probe_rng(mix_seed(opts.probe_seed, {stream_tag("hutchinson"), static_cast<std::uint64_t>(wk)}));
    losses[wk] = detail::loss_chunk(trainee, frozen, times, X, g2c, w, opts.divergence,
                                    probe_rng, grads[wk]);
  });
  double loss = 0.0;
  for (int wk = 0; wk < workers; ++wk) {
    loss += losses[wk];
    trainee.mutable_grad() += grads[wk];
  }
  return loss;
}

// Pointwise divergence of the model's drift at (t, x) under the chosen
// estimator. Hutchinson needs an rng for its probes.
inline double divergence_estimate(const DriftModel& model, double t, const SpherePoint& x,
                                  const DivergenceEstimator& est, Rng* rng = nullptr) {
  switch (est.kind) {
    case DivergenceEstimator::Kind::exact:
      return divergence(DriftFieldAt{&model, t}, x, DivergenceMode::Exact());
    case DivergenceEstimator::Kind::finite_difference:
      return divergence(DriftFieldAt{&model, t}, x, DivergenceMode::FiniteDifference(est.step));
    case DivergenceEstimator::Kind::hutchinson: {
      if (!rng)
        raise(ErrorCode::ConfigError, "hutchinson divergence estimation needs an rng");
      ForwardTape tape;
      Eigen::VectorXd tt = Eigen::VectorXd::Constant(1, t);
      Points3 X(3, 1);
      X.col(0) = x.coords;
      model.forward_batch(tt, X, tape);
      double acc = 0.0;
      for (int p = 0; p < est.probes; ++p) {
        Points3 Z(3, 1);
        Z.col(0) = project_to_tangent(x, rng->normal3()).vec;
        JvpTape jt;
        acc += model.jvp_batch(tape, Z, jt).col(0).dot(Z.col(0));
      }
      return acc / static_cast<double>(est.probes);
    }
  }
  raise(ErrorCode::DivergenceModeUnsupported, "unknown divergence estimator");
}

}  // namespace spherebridge
