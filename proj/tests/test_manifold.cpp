#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "spherebridge/manifold.hpp"
#include "support/fields.hpp"

using namespace spherebridge;

namespace {

TangentVector random_tangent(const SpherePoint& x, double max_len, Rng& rng) {
  TangentBasis B = tangent_basis(x);
  double th = max_len * rng.uniform();
  double a = 2.0 * kPi * rng.uniform();
  return {x, th * (std::cos(a) * B.e1 + std::sin(a) * B.e2)};
}

}  // namespace

TEST_CASE("exp map moves along great circles") {
  SpherePoint north(Eigen::Vector3d(0, 0, 1));

  SpherePoint y = exp_map(north, Eigen::Vector3d(kPi, 0, 0));
  REQUIRE((y.coords - Eigen::Vector3d(0, 0, -1)).norm() < 1e-12);

  SpherePoint q = exp_map(north, Eigen::Vector3d(kPi / 2, 0, 0));
  REQUIRE((q.coords - Eigen::Vector3d(1, 0, 0)).norm() < 1e-12);

  // Zero vector is the identity.
  SpherePoint z = exp_map(north, Eigen::Vector3d::Zero());
  REQUIRE((z.coords - north.coords).norm() == 0.0);
}

TEST_CASE("exp/log round trips and unit-norm preservation") {
  Rng rng(20240601);
  double max_defect = 0.0, max_norm_drift = 0.0, max_tangency = 0.0;
  for (int i = 0; i < 10000; ++i) {
    SpherePoint x = sample_uniform(rng);
    TangentVector v = random_tangent(x, kPi - 1e-3, rng);
    SpherePoint y = exp_map(v);
    max_norm_drift = std::max(max_norm_drift, std::abs(y.coords.norm() - 1.0));
    TangentVector back = log_map(x, y);
    max_defect = std::max(max_defect, (back.vec - v.vec).norm());
    max_tangency = std::max(max_tangency, std::abs(back.vec.dot(x.coords)));
  }
  REQUIRE(max_defect < 1e-9);
  REQUIRE(max_norm_drift < 1e-12);
  REQUIRE(max_tangency < 1e-10);
}

TEST_CASE("log map rejects antipodal pairs") {
  SpherePoint x(Eigen::Vector3d(0, 0, 1));
  SpherePoint y(Eigen::Vector3d(0, 0, -1));
  REQUIRE_THROWS_AS(log_map(x, y), Error);
  try {
    log_map(x, y);
  } catch (const Error& e) {
    REQUIRE(e.code() == ErrorCode::AntipodalPoints);
  }
}

TEST_CASE("projection is idempotent and kills the normal component") {
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    SpherePoint x = sample_uniform(rng);
    Eigen::Vector3d v = 3.0 * rng.normal3();
    TangentVector p = project_to_tangent(x, v);
    REQUIRE(std::abs(p.vec.dot(x.coords)) < 1e-14);
    TangentVector pp = project_to_tangent(x, p.vec);
    REQUIRE((pp.vec - p.vec).norm() < 1e-14);
  }
}

TEST_CASE("geodesic distance: known values, symmetry, triangle inequality") {
  SpherePoint n(Eigen::Vector3d(0, 0, 1)), s(Eigen::Vector3d(0, 0, -1)),
      e(Eigen::Vector3d(1, 0, 0));
  REQUIRE(std::abs(geodesic_distance(n, s) - kPi) < 1e-12);
  REQUIRE(std::abs(geodesic_distance(n, e) - kPi / 2) < 1e-12);
  REQUIRE(geodesic_distance(n, n) == 0.0);

  Rng rng(99);
  for (int i = 0; i < 1000; ++i) {
    SpherePoint a = sample_uniform(rng), b = sample_uniform(rng), c = sample_uniform(rng);
    double ab = geodesic_distance(a, b);
    // FMA contraction breaks bitwise antisymmetry of the cross product.
    REQUIRE(std::abs(ab - geodesic_distance(b, a)) < 1e-15);
    REQUIRE(ab <= geodesic_distance(a, c) + geodesic_distance(c, b) + 1e-12);
    REQUIRE(ab <= kPi + 1e-12);
  }
}

TEST_CASE("tangent basis is orthonormal, right-handed, deterministic") {
  Rng rng(123);
  for (int i = 0; i < 1000; ++i) {
    SpherePoint x = sample_uniform(rng);
    TangentBasis B = tangent_basis(x);
    REQUIRE(std::abs(B.e1.norm() - 1.0) < 1e-12);
    REQUIRE(std::abs(B.e2.norm() - 1.0) < 1e-12);
    REQUIRE(std::abs(B.e1.dot(B.e2)) < 1e-12);
    REQUIRE(std::abs(B.e1.dot(x.coords)) < 1e-12);
    REQUIRE(std::abs(B.e2.dot(x.coords)) < 1e-12);
    REQUIRE((B.e1.cross(B.e2) - x.coords).norm() < 1e-12);

    TangentBasis B2 = tangent_basis(x);
    REQUIRE(B.e1 == B2.e1);
    REQUIRE(B.e2 == B2.e2);
  }
}

TEST_CASE("parallel transport preserves norm and tangency") {
  Rng rng(2024);
  for (int i = 0; i < 1000; ++i) {
    SpherePoint x = sample_uniform(rng);
    SpherePoint y = sample_uniform(rng);
    if (x.coords.dot(y.coords) <= -1.0 + 1e-6) continue;
    TangentVector w = random_tangent(x, 2.0, rng);
    Eigen::Vector3d t = parallel_transport(x, y, w.vec);
    REQUIRE(std::abs(t.dot(y.coords)) < 1e-12);
    REQUIRE(std::abs(t.norm() - w.vec.norm()) < 1e-12);
  }
  // Transporting to the same point is the identity.
  SpherePoint x = sample_uniform(rng);
  TangentVector w = random_tangent(x, 1.0, rng);
  REQUIRE((parallel_transport(x, x, w.vec) - w.vec).norm() < 1e-14);
}

TEST_CASE("transport along a basis geodesic matches the closed-form rotation") {
  Rng rng(5150);
  for (int i = 0; i < 200; ++i) {
    SpherePoint x = sample_uniform(rng);
    TangentBasis B = tangent_basis(x);
    double h = 0.3 + rng.uniform();
    SpherePoint y = exp_map(x, h * B.e1);
    // e1 rotates in the (x, e1) plane; e2 stays fixed.
    Eigen::Vector3d expected = -std::sin(h) * x.coords + std::cos(h) * B.e1;
    REQUIRE((parallel_transport(x, y, B.e1) - expected).norm() < 1e-12);
    REQUIRE((parallel_transport(x, y, B.e2) - B.e2).norm() < 1e-12);
  }
}

TEST_CASE("uniform sampler has the moments of the uniform law") {
  Rng rng(314159);
  const int n = 100000;
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  Eigen::Vector3d second = Eigen::Vector3d::Zero();
  for (int i = 0; i < n; ++i) {
    SpherePoint x = sample_uniform(rng);
    mean += x.coords;
    second += x.coords.cwiseProduct(x.coords);
  }
  mean /= n;
  second /= n;
  // SE of each coordinate mean is ~ sqrt(1/3/n) = 0.0018.
  REQUIRE(mean.norm() < 0.01);
  for (int k = 0; k < 3; ++k) REQUIRE(std::abs(second[k] - 1.0 / 3.0) < 0.01);
}

TEST_CASE("exact divergence of a projected constant field is -2<c,x>") {
  Rng rng(42);
  sbtest::ProjectedConstantField f{Eigen::Vector3d(0.7, -1.3, 0.4)};
  for (int i = 0; i < 1000; ++i) {
    SpherePoint x = sample_uniform(rng);
    double d = divergence(f, x, DivergenceMode::Exact());
    REQUIRE(std::abs(d - (-2.0 * f.c.dot(x.coords))) < 1e-12);
  }
}

TEST_CASE("finite-difference divergence converges at O(h^2) to the exact value") {
  Rng rng(4242);
  Eigen::Matrix3d M;
  M << 0.3, -1.1, 0.2, 0.8, 0.1, -0.4, -0.5, 0.6, 0.9;
  sbtest::ProjectedLinearField f{M};
  double worst_ratio = 0.0;
  for (int i = 0; i < 50; ++i) {
    SpherePoint x = sample_uniform(rng);
    double exact = divergence(f, x, DivergenceMode::Exact());
    double e3 = std::abs(divergence(f, x, DivergenceMode::FiniteDifference(1e-3)) - exact);
    double e4 = std::abs(divergence(f, x, DivergenceMode::FiniteDifference(1e-4)) - exact);
    REQUIRE(e3 < 1e-3);
    REQUIRE(e4 < 1e-3);
    // Shrinking h by 10 should shrink the error by ~100 until roundoff bites.
    if (e3 > 1e-9) worst_ratio = std::max(worst_ratio, e4 / e3);
  }
  REQUIRE(worst_ratio < 0.05);
}

TEST_CASE("exact divergence requires a differentiable field") {
  sbtest::OpaqueConstantField f{Eigen::Vector3d(1, 0, 0)};
  SpherePoint x(Eigen::Vector3d(0, 1, 0));
  try {
    divergence(f, x, DivergenceMode::Exact());
    FAIL("expected DivergenceModeUnsupported");
  } catch (const Error& e) {
    REQUIRE(e.code() == ErrorCode::DivergenceModeUnsupported);
  }
  // Finite differences still work on the same field.
  double d = divergence(f, x, DivergenceMode::FiniteDifference(1e-4));
  REQUIRE(std::abs(d - (-2.0 * f.c.dot(x.coords))) < 1e-6);
}

TEST_CASE("divergence integrates to zero over the uniform law") {
  Rng rng(20240915);
  Eigen::Matrix3d M;
  M << 1.2, 0.3, -0.7, -0.2, 0.5, 0.9, 0.4, -1.0, 0.1;
  sbtest::ProjectedLinearField lin{M};
  sbtest::CrossWaveField wave{Eigen::Vector3d(1.5, -0.4, 0.8), Eigen::Vector3d(0.2, 1.1, -0.6)};

  const int n = 10000;
  auto run = [&](auto& field) {
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
      SpherePoint x = sample_uniform(rng);
      double d = divergence(field, x, DivergenceMode::Exact());
      sum += d;
      sumsq += d * d;
    }
    double mean = sum / n;
    double var = std::max(sumsq / n - mean * mean, 1e-30);
    double se = std::sqrt(var / n);
    REQUIRE(std::abs(mean) < 3.0 * se);
  };
  run(lin);
  run(wave);
}

TEST_CASE("batched projection and exp agree with the scalar path") {
  Rng rng(777);
  const int n = 256;
  Points3 X(3, n), V(3, n);
  for (int j = 0; j < n; ++j) {
    SpherePoint x = sample_uniform(rng);
    X.col(j) = x.coords;
    V.col(j) = rng.normal3();
  }
  Points3 P = V;
  project_batch_inplace(X, P);
  Points3 Y = exp_batch(X, P);
  for (int j = 0; j < n; ++j) {
    SpherePoint x(Eigen::Vector3d(X.col(j)));
    TangentVector t = project_to_tangent(x, V.col(j));
    REQUIRE((P.col(j) - t.vec).norm() < 2e-15);
    SpherePoint y = exp_map(x, Eigen::Vector3d(P.col(j)));
    REQUIRE((Y.col(j) - y.coords).norm() < 2e-15);
    REQUIRE(std::abs(Y.col(j).norm() - 1.0) < 1e-12);
  }
}

TEST_CASE("runtime: geometry micro-benchmark stays under one second") {
  auto t0 = std::chrono::steady_clock::now();
  Rng rng(1);
  double acc = 0.0;
  for (int i = 0; i < 10000; ++i) {
    SpherePoint x = sample_uniform(rng);
    TangentVector v = random_tangent(x, 3.0, rng);
    SpherePoint y = exp_map(v);
    acc += log_map(x, y).vec.norm();
  }
  auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  REQUIRE(acc > 0.0);
  REQUIRE(dt < 1.0);
}
