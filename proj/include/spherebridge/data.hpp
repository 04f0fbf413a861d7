#pragma once

// Dataset ingestion, synthetic samplers, evaluation metrics, and export.
//
// Conventions: latitude lambda and longitude phi in degrees map to
// x = (cos l cos p, cos l sin p, sin l). Input CSVs need a header naming a
// latitude and a longitude column (lat/lat_deg/latitude, lon/lon_deg/
// longitude/lng, any case); other columns are ignored, malformed rows are
// counted and skipped. Exports write lat_deg,lon_deg CSV or GeoJSON
// FeatureCollections with [lon, lat] coordinates.
//
// The harmonic densities are proportional to |Re Y_l^m| by default.
// "Proportional to the real component" is ambiguous where Re Y changes
// sign; the absolute value keeps every lobe, and a flag selects the clamped
// positive part max(Re Y, 0) instead.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "spherebridge/common.hpp"
#include "spherebridge/manifold.hpp"
#include "spherebridge/sde.hpp"

namespace spherebridge {

// ---------------------------------------------------------------------------
// Coordinate conversions.

inline Eigen::Vector3d latlon_to_sphere(double lat_deg, double lon_deg) {
  const double la = lat_deg * kPi / 180.0;
  const double lo = lon_deg * kPi / 180.0;
  return {std::cos(la) * std::cos(lo), std::cos(la) * std::sin(lo), std::sin(la)};
}

// Longitude is reported as 0 at the poles.
inline std::pair<double, double> sphere_to_latlon(const Eigen::Vector3d& x) {
  const double z = std::clamp(x.z(), -1.0, 1.0);
  const double lat = std::asin(z) * 180.0 / kPi;
  double lon = 0.0;
  if (std::abs(x.x()) > 1e-14 || std::abs(x.y()) > 1e-14)
    lon = std::atan2(x.y(), x.x()) * 180.0 / kPi;
  return {lat, lon};
}

// ---------------------------------------------------------------------------
// Datasets.

struct GeoDataset {
  std::string name;
  std::string source_path;
  Points3 points;
  int skipped_rows = 0;

  int size() const { return static_cast<int>(points.cols()); }

  // Seed-reproducible disjoint partition; the two parts cover the input.
  std::pair<GeoDataset, GeoDataset> split(std::uint64_t seed, double held_fraction) const {
    if (!(held_fraction >= 0.0 && held_fraction < 1.0))
      raise(ErrorCode::ConfigError, "held-out fraction must be in [0, 1)");
    const int n = size();
    if (n == 0) raise(ErrorCode::EmptyDataset, "cannot split an empty dataset");
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    Rng rng(mix_seed(seed, {stream_tag("dataset-split")}));
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.index(i + 1));
      std::swap(idx[i], idx[j]);
    }
    const int held = static_cast<int>(std::lround(held_fraction * n));
    GeoDataset train{name + "-train", source_path, Points3(3, n - held), 0};
    GeoDataset heldout{name + "-heldout", source_path, Points3(3, held), 0};
    for (int i = 0; i < held; ++i) heldout.points.col(i) = points.col(idx[i]);
    for (int i = held; i < n; ++i) train.points.col(i - held) = points.col(idx[i]);
    if (train.size() == 0) raise(ErrorCode::EmptyDataset, "split left no training points");
    return {std::move(train), std::move(heldout)};
  }
};

namespace detail {

inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

inline bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  try {
    std::size_t pos = 0;
    out = std::stod(s, &pos);
    return pos == s.size() && std::isfinite(out);
  } catch (...) {
    return false;
  }
}

}  // namespace detail

inline GeoDataset load_latlon_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) raise(ErrorCode::IoError, "cannot open '" + path + "'");
  std::string line;
  if (!std::getline(f, line))
    raise(ErrorCode::MissingColumns, "'" + path + "' has no header row");
  std::vector<std::string> header = detail::split_csv_line(line);
  int lat_col = -1, lon_col = -1;
  for (int i = 0; i < static_cast<int>(header.size()); ++i) {
    const std::string h = detail::lower(header[i]);
    if (h == "lat" || h == "lat_deg" || h == "latitude") lat_col = i;
    if (h == "lon" || h == "lon_deg" || h == "longitude" || h == "lng") lon_col = i;
  }
  if (lat_col < 0 || lon_col < 0)
    raise(ErrorCode::MissingColumns,
          "'" + path + "' header lacks lat/lon columns (got: " + line + ")");

  std::vector<Eigen::Vector3d> pts;
  int skipped = 0;
  while (std::getline(f, line)) {
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> fields = detail::split_csv_line(line);
    double lat = 0, lon = 0;
    const bool ok = static_cast<int>(fields.size()) > std::max(lat_col, lon_col) &&
                    detail::parse_double(fields[lat_col], lat) &&
                    detail::parse_double(fields[lon_col], lon) && std::abs(lat) <= 90.0 &&
                    std::abs(lon) <= 180.0;
    if (!ok) {
      ++skipped;
      continue;
    }
    pts.push_back(latlon_to_sphere(lat, lon).normalized());
  }
  if (pts.empty())
    raise(ErrorCode::EmptyAfterFiltering,
          "'" + path + "' contains no usable rows (" + std::to_string(skipped) + " skipped)");
  GeoDataset ds;
  std::size_t slash = path.find_last_of('/');
  ds.name = slash == std::string::npos ? path : path.substr(slash + 1);
  ds.source_path = path;
  ds.points.resize(3, static_cast<Eigen::Index>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) ds.points.col(static_cast<Eigen::Index>(i)) = pts[i];
  ds.skipped_rows = skipped;
  return ds;
}

// With-replacement sampler over a fixed point set (owns a copy).
inline BatchSampler make_empirical_sampler(Points3 points) {
  if (points.cols() == 0) raise(ErrorCode::EmptyDataset, "empirical sampler needs points");
  return [pts = std::move(points)](int n, Rng& rng) {
    Points3 out(3, n);
    const int m = static_cast<int>(pts.cols());
    for (int i = 0; i < n; ++i) out.col(i) = pts.col(rng.index(m));
    return out;
  };
}

// ---------------------------------------------------------------------------
// von Mises-Fisher mixtures.

struct VmfComponent {
  Eigen::Vector3d mu;
  double kappa = 1.0;
  double weight = 1.0;
};

inline void validate_vmf(const std::vector<VmfComponent>& comps) {
  if (comps.empty()) raise(ErrorCode::BadWeights, "mixture needs at least one component");
  double total = 0;
  for (const VmfComponent& c : comps) {
    if (!(c.weight >= 0)) raise(ErrorCode::BadWeights, "mixture weights must be >= 0");
    if (!(c.kappa >= 0)) raise(ErrorCode::BadWeights, "vMF concentration must be >= 0");
    if (c.mu.norm() < 1e-12) raise(ErrorCode::BadWeights, "vMF mean direction must be nonzero");
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-9)
    raise(ErrorCode::BadWeights,
          "mixture weights sum to " + std::to_string(total) + ", expected 1");
}

// Inverse-CDF sampling of w = <x, mu>, then a uniform angle about mu.
// kappa = 0 degenerates to the uniform law.
inline Points3 sample_vmf_mixture(const std::vector<VmfComponent>& comps, int n, Rng& rng) {
  validate_vmf(comps);
  Points3 out(3, n);
  for (int i = 0; i < n; ++i) {
    double pick = rng.uniform();
    const VmfComponent* c = &comps.back();
    for (const VmfComponent& comp : comps) {
      if (pick < comp.weight) {
        c = &comp;
        break;
      }
      pick -= comp.weight;
    }
    const Eigen::Vector3d mu = c->mu.normalized();
    double w;
    if (c->kappa < 1e-12) {
      w = 2.0 * rng.uniform() - 1.0;
    } else {
      const double u = 1.0 - rng.uniform();  // (0, 1]
      w = 1.0 + std::log(u + (1.0 - u) * std::exp(-2.0 * c->kappa)) / c->kappa;
      w = std::clamp(w, -1.0, 1.0);
    }
    TangentBasis basis = tangent_basis(SpherePoint{mu});
    const double psi = 2.0 * kPi * rng.uniform();
    const double r = std::sqrt(std::max(0.0, 1.0 - w * w));
    out.col(i) = w * mu + r * (std::cos(psi) * basis.e1 + std::sin(psi) * basis.e2);
    out.col(i).normalize();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Spherical-harmonic densities.

namespace detail {

// Associated Legendre P_l^m(u) with Condon-Shortley phase, standard upward
// recurrence. Requires 0 <= m <= l.
inline double assoc_legendre(int l, int m, double u) {
  double pmm = 1.0;
  if (m > 0) {
    const double s = std::sqrt(std::max(0.0, (1.0 - u) * (1.0 + u)));
    double fact = 1.0;
    for (int i = 1; i <= m; ++i) {
      pmm *= -fact * s;
      fact += 2.0;
    }
  }
  if (l == m) return pmm;
  double pm1 = u * (2.0 * m + 1.0) * pmm;
  if (l == m + 1) return pm1;
  double pl = 0.0;
  for (int ll = m + 2; ll <= l; ++ll) {
    pl = ((2.0 * ll - 1.0) * u * pm1 - (ll + m - 1.0) * pmm) / (ll - m);
    pmm = pm1;
    pm1 = pl;
  }
  return pl;
}

}  // namespace detail

// Re Y_l^m with full (orthonormal) normalization. m may be negative; the
// real part depends on |m| up to sign, and the densities below take
// magnitudes anyway.
inline double real_harmonic(int l, int m, const Eigen::Vector3d& x) {
  const int am = std::abs(m);
  if (am > l) raise(ErrorCode::ConfigError, "harmonic order |m| must be <= degree l");
  const double ct = std::clamp(x.z(), -1.0, 1.0);
  const double phi = std::atan2(x.y(), x.x());
  double lognorm = 0.0;
  for (int k = l - am + 1; k <= l + am; ++k) lognorm -= std::log(static_cast<double>(k));
  const double norm = std::sqrt((2.0 * l + 1.0) / (4.0 * kPi) * std::exp(lognorm));
  double v = norm * detail::assoc_legendre(l, am, ct) * std::cos(am * phi);
  if (m < 0 && (am % 2) == 1) v = -v;
  return v;
}

class HarmonicDensity {
 public:
  // bound_override > 0 replaces the precomputed envelope bound; useful for
  // exercising the bound-inflation path.
  HarmonicDensity(int l, int m, bool positive_part = false, double bound_override = 0.0)
      : l_(l), m_(m), positive_part_(positive_part) {
    if (l < 0 || std::abs(m) > l)
      raise(ErrorCode::ConfigError,
            "harmonic density needs degree l >= 0 and |m| <= l, got l=" + std::to_string(l) +
                " m=" + std::to_string(m));
    if (bound_override > 0.0) {
      bound_ = bound_override;
      return;
    }
    // The density factorizes as |P(cos theta)| * |cos(m phi)| up to the
    // normalization constant, so a fine 1-d polar grid bounds it.
    const int grid = 20000;
    double peak = 0.0;
    for (int i = 0; i <= grid; ++i) {
      const double theta = kPi * i / grid;
      Eigen::Vector3d x(std::sin(theta), 0.0, std::cos(theta));  // cos(m phi) = 1 here
      peak = std::max(peak, unnormalized(x));
    }
    bound_ = peak;
  }

  int degree() const { return l_; }
  int order() const { return m_; }
  double bound() const { return bound_; }
  int bound_inflations() const { return inflations_; }

  double unnormalized(const Eigen::Vector3d& x) const {
    const double v = real_harmonic(l_, m_, x);
    return positive_part_ ? std::max(v, 0.0) : std::abs(v);
  }

  // Called by the rejection sampler when a proposal exceeds the bound.
  void inflate_bound(double observed) {
    bound_ = std::max(bound_, observed) * 1.05;
    ++inflations_;
  }

 private:
  int l_;
  int m_;
  bool positive_part_;
  double bound_ = 0.0;
  int inflations_ = 0;
};

struct HarmonicSample {
  Points3 points;
  long proposals = 0;
  int bound_inflations = 0;

  double acceptance_rate() const {
    return proposals == 0 ? 0.0 : static_cast<double>(points.cols()) / proposals;
  }
};

// Uniform proposals accepted with probability density/bound. A proposal
// whose density exceeds the bound inflates it (self-healing envelope); the
// event count is reported so callers can log it.
inline HarmonicSample sample_harmonic(HarmonicDensity& density, int n, Rng& rng) {
  HarmonicSample out;
  out.points.resize(3, n);
  int got = 0;
  while (got < n) {
    SpherePoint x = sample_uniform(rng);
    ++out.proposals;
    const double d = density.unnormalized(x.coords);
    if (d > density.bound()) {
      density.inflate_bound(d);
      ++out.bound_inflations;
    }
    if (rng.uniform() * density.bound() < d) out.points.col(got++) = x.coords;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Maximum mean discrepancy with the geodesic-Gaussian kernel
// k(x,y) = exp(-d(x,y)^2 / (2 bw^2)).

namespace detail {

inline Eigen::MatrixXd geodesic_distance_matrix(const Points3& a, const Points3& b) {
  Eigen::MatrixXd C = a.transpose() * b;
  return C.array().min(1.0).max(-1.0).acos();
}

inline double block_kernel_mean(const Eigen::MatrixXd& K, int r0, int nr, int c0, int nc) {
  return K.block(r0, c0, nr, nc).sum() / (static_cast<double>(nr) * static_cast<double>(nc));
}

}  // namespace detail

// Lower median of all pooled pairwise geodesic distances.
inline double median_heuristic_bandwidth(const Points3& a, const Points3& b) {
  const int n = static_cast<int>(a.cols()), m = static_cast<int>(b.cols());
  Points3 pooled(3, n + m);
  pooled.leftCols(n) = a;
  pooled.rightCols(m) = b;
  Eigen::MatrixXd D = detail::geodesic_distance_matrix(pooled, pooled);
  std::vector<double> dist;
  dist.reserve(static_cast<std::size_t>(n + m) * (n + m - 1) / 2);
  for (int i = 0; i < n + m; ++i)
    for (int j = i + 1; j < n + m; ++j) dist.push_back(D(i, j));
  if (dist.empty()) raise(ErrorCode::EmptyDataset, "bandwidth heuristic needs >= 2 points");
  std::size_t mid = (dist.size() - 1) / 2;
  std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid), dist.end());
  const double med = dist[mid];
  if (!(med > 1e-12))
    raise(ErrorCode::ConfigError, "median pairwise distance is zero; pass a bandwidth");
  return med;
}

// Precomputes the pooled kernel matrix once; the observed statistic,
// permutation nulls, and bootstrap resamples all reuse it.
class MmdEvaluator {
 public:
  MmdEvaluator(const Points3& a, const Points3& b, double bandwidth)
      : na_(static_cast<int>(a.cols())), nb_(static_cast<int>(b.cols())), bw_(bandwidth) {
    if (na_ == 0 || nb_ == 0) raise(ErrorCode::EmptyDataset, "mmd needs nonempty samples");
    if (!(bw_ > 0.0)) raise(ErrorCode::ConfigError, "mmd bandwidth must be > 0");
    Points3 pooled(3, na_ + nb_);
    pooled.leftCols(na_) = a;
    pooled.rightCols(nb_) = b;
    K_ = detail::geodesic_distance_matrix(pooled, pooled);
    K_ = (-K_.array().square() / (2.0 * bw_ * bw_)).exp();
  }

  double bandwidth() const { return bw_; }

  double mmd2() const {
    const double saa = detail::block_kernel_mean(K_, 0, na_, 0, na_);
    const double sbb = detail::block_kernel_mean(K_, na_, nb_, na_, nb_);
    const double sab = detail::block_kernel_mean(K_, 0, na_, na_, nb_);
    return saa + sbb - 2.0 * sab;
  }

  // V-statistic under random relabelings of the pooled sample.
  std::vector<double> permutation_null(int reps, Rng& rng) const {
    const int n = na_ + nb_;
    std::vector<int> idx(n);
    std::vector<double> null(reps);
    for (int r = 0; r < reps; ++r) {
      for (int i = 0; i < n; ++i) idx[i] = i;
      for (int i = n - 1; i > 0; --i) std::swap(idx[i], idx[static_cast<int>(rng.index(i + 1))]);
      null[r] = relabeled_mmd2(idx);
    }
    return null;
  }

  double null_quantile(int reps, double q, Rng& rng) const {
    std::vector<double> null = permutation_null(reps, rng);
    std::sort(null.begin(), null.end());
    const double pos = q * (null.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, null.size() - 1);
    return null[lo] + (pos - lo) * (null[hi] - null[lo]);
  }

  // Standard deviation of the statistic under with-replacement resampling
  // of both sides.
  double bootstrap_se(int reps, Rng& rng) const {
    std::vector<double> vals(reps);
    std::vector<int> ia(na_), ib(nb_);
    for (int r = 0; r < reps; ++r) {
      for (int i = 0; i < na_; ++i) ia[i] = static_cast<int>(rng.index(na_));
      for (int i = 0; i < nb_; ++i) ib[i] = na_ + static_cast<int>(rng.index(nb_));
      double saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < na_; ++i)
        for (int j = 0; j < na_; ++j) saa += K_(ia[i], ia[j]);
      for (int i = 0; i < nb_; ++i)
        for (int j = 0; j < nb_; ++j) sbb += K_(ib[i], ib[j]);
      for (int i = 0; i < na_; ++i)
        for (int j = 0; j < nb_; ++j) sab += K_(ia[i], ib[j]);
      vals[r] = saa / (static_cast<double>(na_) * na_) + sbb / (static_cast<double>(nb_) * nb_) -
                2.0 * sab / (static_cast<double>(na_) * nb_);
    }
    double mean = 0;
    for (double v : vals) mean += v;
    mean /= reps;
    double var = 0;
    for (double v : vals) var += (v - mean) * (v - mean);
    return std::sqrt(var / (reps - 1));
  }

 private:
  double relabeled_mmd2(const std::vector<int>& idx) const {
    double saa = 0, sbb = 0, sab = 0;
    for (int i = 0; i < na_; ++i)
      for (int j = 0; j < na_; ++j) saa += K_(idx[i], idx[j]);
    for (int i = 0; i < nb_; ++i)
      for (int j = 0; j < nb_; ++j) sbb += K_(idx[na_ + i], idx[na_ + j]);
    for (int i = 0; i < na_; ++i)
      for (int j = 0; j < nb_; ++j) sab += K_(idx[i], idx[na_ + j]);
    return saa / (static_cast<double>(na_) * na_) + sbb / (static_cast<double>(nb_) * nb_) -
           2.0 * sab / (static_cast<double>(na_) * nb_);
  }

  int na_;
  int nb_;
  double bw_;
  Eigen::MatrixXd K_;
};

// One-shot V-statistic without retaining the kernel matrix.
inline double mmd2(const Points3& a, const Points3& b, double bandwidth) {
  if (a.cols() == 0 || b.cols() == 0) raise(ErrorCode::EmptyDataset, "mmd needs nonempty samples");
  if (!(bandwidth > 0.0)) raise(ErrorCode::ConfigError, "mmd bandwidth must be > 0");
  const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  auto block_mean = [inv](const Points3& u, const Points3& v) {
    Eigen::MatrixXd D = detail::geodesic_distance_matrix(u, v);
    return (-D.array().square() * inv).exp().sum() /
           (static_cast<double>(u.cols()) * static_cast<double>(v.cols()));
  };
  const double saa = block_mean(a, a);
  const double sbb = block_mean(b, b);
  const double sab = block_mean(a, b);
  return saa + sbb - 2.0 * sab;
}

// Fraction of `generated` columns farther than `radius` (radians) from every
// reference column.
inline double outlier_fraction(const Points3& generated, const Points3& reference,
                               double radius) {
  if (generated.cols() == 0 || reference.cols() == 0)
    raise(ErrorCode::EmptyDataset, "outlier fraction needs nonempty samples");
  const double c = std::cos(radius);
  Eigen::MatrixXd dots = reference.transpose() * generated;
  int outliers = 0;
  for (Eigen::Index j = 0; j < dots.cols(); ++j)
    if (dots.col(j).maxCoeff() < c) ++outliers;
  return static_cast<double>(outliers) / static_cast<double>(generated.cols());
}

// ---------------------------------------------------------------------------
// Export.

enum class ExportFormat { csv, geojson };

inline ExportFormat export_format_from_name(const std::string& s) {
  if (s == "csv") return ExportFormat::csv;
  if (s == "geojson") return ExportFormat::geojson;
  raise(ErrorCode::ConfigError, "unknown export format '" + s + "' (csv|geojson)");
}

inline void export_samples(const Points3& points, const std::string& path, ExportFormat format) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) raise(ErrorCode::IoError, "cannot open '" + path + "' for writing");
  char buf[200];
  if (format == ExportFormat::csv) {
    f << "lat_deg,lon_deg\n";
    for (Eigen::Index i = 0; i < points.cols(); ++i) {
      auto [lat, lon] = sphere_to_latlon(points.col(i));
      std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", lat, lon);
      f << buf;
    }
  } else {
    f << "{\"type\":\"FeatureCollection\",\"features\":[";
    for (Eigen::Index i = 0; i < points.cols(); ++i) {
      auto [lat, lon] = sphere_to_latlon(points.col(i));
      std::snprintf(buf, sizeof buf,
                    "{\"type\":\"Feature\",\"geometry\":{\"type\":\"Point\",\"coordinates\":[%"
                    ".17g,%.17g]},\"properties\":{}}",
                    lon, lat);
      f << (i ? "," : "") << buf;
    }
    f << "]}\n";
  }
  if (!f) raise(ErrorCode::IoError, "short write to '" + path + "'");
}

// Debug dump of a trajectory batch: one row per (path, step).
inline void dump_trajectory_csv(const TrajectoryBatch& traj, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) raise(ErrorCode::IoError, "cannot open '" + path + "' for writing");
  f << "path,step,sim_time,lat_deg,lon_deg\n";
  char buf[128];
  for (int b = 0; b < traj.paths; ++b) {
    for (int k = 0; k <= traj.grid.steps; ++k) {
      auto [lat, lon] = sphere_to_latlon(traj.state(b, k));
      std::snprintf(buf, sizeof buf, "%d,%d,%.17g,%.17g,%.17g\n", b, k,
                    traj.simulation_time(k), lat, lon);
      f << buf;
    }
  }
  if (!f) raise(ErrorCode::IoError, "short write to '" + path + "'");
}

// ---------------------------------------------------------------------------
// Dataset specs: "uniform", "vmf:mx,my,mz,kappa,weight[;...]", "harmonic:l,m"
// (optionally "harmonic:l,m,positive"), or a CSV path.

struct DatasetSpec {
  enum class Kind { csv, uniform, vmf, harmonic };
  Kind kind = Kind::uniform;
  std::string csv_path;
  std::vector<VmfComponent> vmf;
  int l = 0, m = 0;
  bool positive_part = false;
  std::string text;

  bool synthetic() const { return kind != Kind::csv; }
};

inline DatasetSpec parse_dataset_spec(const std::string& spec) {
  DatasetSpec out;
  out.text = spec;
  if (spec.empty()) raise(ErrorCode::ConfigError, "empty dataset spec");
  if (spec == "uniform") {
    out.kind = DatasetSpec::Kind::uniform;
    return out;
  }
  if (spec.rfind("vmf:", 0) == 0) {
    out.kind = DatasetSpec::Kind::vmf;
    std::stringstream ss(spec.substr(4));
    std::string comp;
    while (std::getline(ss, comp, ';')) {
      std::vector<std::string> parts = detail::split_csv_line(comp);
      double v[5];
      if (parts.size() != 5 || !detail::parse_double(parts[0], v[0]) ||
          !detail::parse_double(parts[1], v[1]) || !detail::parse_double(parts[2], v[2]) ||
          !detail::parse_double(parts[3], v[3]) || !detail::parse_double(parts[4], v[4]))
        raise(ErrorCode::ConfigError,
              "vmf spec component must be 'mx,my,mz,kappa,weight', got '" + comp + "'");
      out.vmf.push_back({Eigen::Vector3d(v[0], v[1], v[2]), v[3], v[4]});
    }
    validate_vmf(out.vmf);
    return out;
  }
  if (spec.rfind("harmonic:", 0) == 0) {
    out.kind = DatasetSpec::Kind::harmonic;
    std::vector<std::string> parts = detail::split_csv_line(spec.substr(9));
    double l = 0, m = 0;
    if (parts.size() < 2 || parts.size() > 3 || !detail::parse_double(parts[0], l) ||
        !detail::parse_double(parts[1], m) || l != std::floor(l) || m != std::floor(m))
      raise(ErrorCode::ConfigError, "harmonic spec must be 'harmonic:l,m[,positive]'");
    if (parts.size() == 3) {
      if (parts[2] != "positive")
        raise(ErrorCode::ConfigError, "harmonic spec flag must be 'positive'");
      out.positive_part = true;
    }
    out.l = static_cast<int>(l);
    out.m = static_cast<int>(m);
    if (out.l < 0 || std::abs(out.m) > out.l)
      raise(ErrorCode::ConfigError, "harmonic spec needs l >= 0 and |m| <= l");
    return out;
  }
  out.kind = DatasetSpec::Kind::csv;
  out.csv_path = spec;
  return out;
}

// Sampler for a synthetic spec. CSV specs are realized by the caller, which
// owns loading and splitting.
inline BatchSampler make_synthetic_sampler(const DatasetSpec& spec) {
  switch (spec.kind) {
    case DatasetSpec::Kind::uniform:
      return [](int n, Rng& rng) { return uniform_batch(n, rng); };
    case DatasetSpec::Kind::vmf:
      return [comps = spec.vmf](int n, Rng& rng) { return sample_vmf_mixture(comps, n, rng); };
    case DatasetSpec::Kind::harmonic:
      return [density = std::make_shared<HarmonicDensity>(spec.l, spec.m, spec.positive_part)](
                 int n, Rng& rng) { return sample_harmonic(*density, n, rng).points; };
    case DatasetSpec::Kind::csv:
      raise(ErrorCode::ConfigError, "CSV specs need a loaded dataset, not a synthetic sampler");
  }
  raise(ErrorCode::ConfigError, "unknown dataset spec kind");
}

}  // namespace spherebridge
