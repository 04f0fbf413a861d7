#pragma once
// Geometry of the embedded unit sphere S^2 in R^3.
//
// Conventions used throughout the project:
//   * points are unit vectors in R^3, renormalized after every construction;
//   * tangent vectors at x are ambient vectors v with <v, x> = 0;
//   * exp_x(v) = cos(|v|) x + sin(|v|) v / |v|;
//   * log_x(y) has direction proportional to y - <x,y> x and length d(x, y);
//   * the Riemannian divergence of a tangent field r at x is
//       div(r)(x) = sum_i <D_{e_i} r, e_i>
//     over an orthonormal tangent basis {e1, e2}, where D is the ambient
//     directional derivative of any smooth extension that stays tangent on
//     the sphere. The contraction is extension-independent because only
//     derivatives along tangent directions enter.

#include <algorithm>
#include <concepts>

#include "spherebridge/common.hpp"

namespace spherebridge {

struct SpherePoint {
  Eigen::Vector3d coords{0.0, 0.0, 1.0};

  SpherePoint() = default;
  explicit SpherePoint(const Eigen::Vector3d& v) {
    double n = v.norm();
    if (!std::isfinite(n) || n <= 1e-12)
      raise(ErrorCode::NonFiniteState,
            "cannot normalize a near-zero or non-finite vector onto the sphere");
    coords = v / n;
  }
};

// Ambient vector tied to a base point; kept tangent (<vec, base> = 0) by the
// ops below. Build from raw ambient vectors via project_to_tangent.
struct TangentVector {
  SpherePoint base;
  Eigen::Vector3d vec{0.0, 0.0, 0.0};
};

struct TangentBasis {
  SpherePoint base;
  Eigen::Vector3d e1, e2;
};

inline TangentVector project_to_tangent(const SpherePoint& x, const Eigen::Vector3d& v) {
  return {x, v - v.dot(x.coords) * x.coords};
}

inline SpherePoint exp_map(const SpherePoint& x, const Eigen::Vector3d& v) {
  double th = v.norm();
  if (th < 1e-12) return SpherePoint(x.coords + v);
  return SpherePoint(std::cos(th) * x.coords + (std::sin(th) / th) * v);
}

inline SpherePoint exp_map(const TangentVector& v) { return exp_map(v.base, v.vec); }

// atan2 form is stable near both coincident and antipodal pairs; range [0, pi].
inline double geodesic_distance(const SpherePoint& x, const SpherePoint& y) {
  double c = x.coords.dot(y.coords);
  double s = x.coords.cross(y.coords).norm();
  return std::atan2(s, c);
}

inline TangentVector log_map(const SpherePoint& x, const SpherePoint& y) {
  double c = x.coords.dot(y.coords);
  if (c <= -1.0 + 1e-9)
    raise(ErrorCode::AntipodalPoints, "log map undefined for (nearly) antipodal points");
  Eigen::Vector3d perp = y.coords - c * x.coords;
  double s = perp.norm();
  if (s < 1e-14) return {x, Eigen::Vector3d::Zero()};
  double th = std::atan2(s, c);
  return {x, (th / s) * perp};
}

// Parallel transport of a tangent vector w from x to y along the connecting
// geodesic (rotation in the span of x and y; everything orthogonal is fixed).
inline Eigen::Vector3d parallel_transport(const SpherePoint& x, const SpherePoint& y,
                                          const Eigen::Vector3d& w) {
  double c = x.coords.dot(y.coords);
  if (c <= -1.0 + 1e-9)
    raise(ErrorCode::AntipodalPoints, "transport undefined for (nearly) antipodal points");
  return w - (w.dot(y.coords) / (1.0 + c)) * (x.coords + y.coords);
}

// Deterministic basis: seed axis is the coordinate axis with the smallest
// |component| (lowest index wins ties); e2 = x cross e1, so (e1, e2, x) is a
// right-handed orthonormal frame. Same input bits, same basis bits.
inline TangentBasis tangent_basis(const SpherePoint& x) {
  int axis = 0;
  double best = std::abs(x.coords[0]);
  for (int i = 1; i < 3; ++i) {
    double a = std::abs(x.coords[i]);
    if (a < best) {
      best = a;
      axis = i;
    }
  }
  Eigen::Vector3d e1 = Eigen::Vector3d::Unit(axis);
  e1 -= e1.dot(x.coords) * x.coords;
  e1.normalize();
  Eigen::Vector3d e2 = x.coords.cross(e1);
  return {x, e1, e2};
}

inline SpherePoint sample_uniform(Rng& rng) {
  for (;;) {
    Eigen::Vector3d g = rng.normal3();
    if (g.norm() > 1e-12) return SpherePoint(g);
  }
}

// ---------------------------------------------------------------------------
// Batched kernels. Columns of a Points3 are points (or ambient/tangent
// vectors) so the hot paths can run as dense matrix ops.

using Points3 = Eigen::Matrix3Xd;

inline Points3 uniform_batch(int n, Rng& rng) {
  Points3 out(3, n);
  for (int j = 0; j < n; ++j) out.col(j) = sample_uniform(rng).coords;
  return out;
}

// V <- V - X diag(colwise <X, V>): projects each column of V to the tangent
// space at the matching column of X.
inline void project_batch_inplace(const Points3& X, Points3& V) {
  Eigen::RowVectorXd d = (X.array() * V.array()).colwise().sum().matrix();
  V.noalias() -= X * d.asDiagonal();
}

inline Points3 exp_batch(const Points3& X, const Points3& W) {
  Points3 out(3, X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    Eigen::Vector3d w = W.col(j);
    double th = w.norm();
    Eigen::Vector3d y;
    if (th < 1e-12) {
      y = X.col(j) + w;
    } else {
      y = std::cos(th) * X.col(j) + (std::sin(th) / th) * w;
    }
    out.col(j) = y / y.norm();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Divergence of tangent fields.

template <typename F>
concept TangentFieldFn = requires(const F& f, const SpherePoint& x) {
  { f(x) } -> std::convertible_to<TangentVector>;
};

// A differentiable field also exposes the ambient directional derivative of
// its (tangent-valued) output map along a tangent direction d at x.
template <typename F>
concept DifferentiableTangentField =
    TangentFieldFn<F> && requires(const F& f, const SpherePoint& x, const Eigen::Vector3d& d) {
      { f.jvp(x, d) } -> std::convertible_to<Eigen::Vector3d>;
    };

struct DivergenceMode {
  enum class Kind { exact, finite_difference };
  Kind kind = Kind::exact;
  double step = 1e-4;

  static DivergenceMode Exact() { return {Kind::exact, 0.0}; }
  static DivergenceMode FiniteDifference(double h = 1e-4) {
    return {Kind::finite_difference, h};
  }
};

// Exact mode contracts the field's directional derivatives with a tangent
// basis. Finite differences use central steps along basis geodesics and
// compare against the parallel-transported basis vector, which converges to
// the covariant contraction at O(h^2).
template <TangentFieldFn F>
double divergence(const F& field, const SpherePoint& x, DivergenceMode mode) {
  TangentBasis B = tangent_basis(x);
  if (mode.kind == DivergenceMode::Kind::exact) {
    if constexpr (DifferentiableTangentField<F>) {
      return field.jvp(x, B.e1).dot(B.e1) + field.jvp(x, B.e2).dot(B.e2);
    } else {
      raise(ErrorCode::DivergenceModeUnsupported,
            "exact divergence needs a field exposing directional derivatives");
    }
  }
  double h = mode.step;
  double acc = 0.0;
  const Eigen::Vector3d dirs[2] = {B.e1, B.e2};
  for (const Eigen::Vector3d& e : dirs) {
    SpherePoint xp = exp_map(x, h * e);
    SpherePoint xm = exp_map(x, (-h) * e);
    Eigen::Vector3d tp = -std::sin(h) * x.coords + std::cos(h) * e;  // e moved to xp
    Eigen::Vector3d tm = std::sin(h) * x.coords + std::cos(h) * e;   // e moved to xm
    acc += (field(xp).vec.dot(tp) - field(xm).vec.dot(tm)) / (2.0 * h);
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Manifold boundary. Downstream templates only touch this surface, so another
// compact manifold can slot in later; S^2 is the only one shipped.

struct Sphere2 {
  using Point = SpherePoint;
  using Tangent = TangentVector;
  static constexpr int ambient_dim = 3;
  static constexpr int intrinsic_dim = 2;

  static Point exp(const Point& x, const Eigen::Vector3d& v) { return exp_map(x, v); }
  static Tangent log(const Point& x, const Point& y) { return log_map(x, y); }
  static Tangent project(const Point& x, const Eigen::Vector3d& v) {
    return project_to_tangent(x, v);
  }
  static double distance(const Point& x, const Point& y) { return geodesic_distance(x, y); }
  static Point random_uniform(Rng& rng) { return sample_uniform(rng); }
  static TangentBasis basis(const Point& x) { return tangent_basis(x); }
};

}  // namespace spherebridge
