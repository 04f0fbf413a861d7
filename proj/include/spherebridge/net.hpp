#pragma once

// Drift networks (t, x) -> tangent vector at x.
//
// Architecture: the input features are the 3 ambient coordinates of x
// concatenated with K sinusoidal time pairs {sin(2^j pi t / T),
// cos(2^j pi t / T)}, j = 0..K-1. The trunk is an input affine map to width
// W, four hidden affine+activation blocks of width W, and an output affine
// map to R^3. A projection head makes the output tangent by construction:
// out = y - <y, x> x. The final affine map is zero-initialized, so a fresh
// model is exactly the zero drift.
//
// Gradients are hand-written. Losses that include exact divergence terms
// differentiate directional derivatives of the network, so the backward pass
// is reverse-over-forward: it propagates adjoints of both the primal
// activations and the per-direction tangent activations recorded by
// jvp_batch. Tapes are owned by the caller; parallel workers keep private
// tapes and gradient buffers and reduce serially.
//
// All math is in doubles. A revision counter on the parameters invalidates
// tapes recorded before any parameter mutation.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "spherebridge/common.hpp"
#include "spherebridge/manifold.hpp"

namespace spherebridge {

enum class Activation { silu, identity };

inline const char* activation_name(Activation a) {
  return a == Activation::silu ? "silu" : "identity";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "silu") return Activation::silu;
  if (s == "identity") return Activation::identity;
  raise(ErrorCode::ConfigError, "unknown activation '" + s + "' (silu|identity)");
}

struct NetConfig {
  int width = 128;
  int time_features = 8;  // K sinusoid pairs; feature dimension is 3 + 2K
  double horizon = 1.0;
  Activation activation = Activation::silu;

  int feature_dim() const { return 3 + 2 * time_features; }

  Eigen::Index param_count() const {
    const Eigen::Index w = width, f = feature_dim();
    return w * f + w + 4 * (w * w + w) + 3 * w + 3;
  }

  void validate() const {
    if (width < 1) raise(ErrorCode::ConfigError, "net.width must be >= 1");
    if (time_features < 0) raise(ErrorCode::ConfigError, "net.time_features must be >= 0");
    if (!(horizon > 0.0)) raise(ErrorCode::ConfigError, "net.horizon must be > 0");
  }
};

constexpr std::uint64_t kNoTape = ~std::uint64_t{0};

// Activations recorded by forward_batch. u[0] is the input affine output
// (no activation); v[i-1]/u[i] are the pre/post-activation states of hidden
// block i; sig[i-1] caches the logistic factors the derivatives reuse.
struct ForwardTape {
  Eigen::MatrixXd feats;
  std::array<Eigen::MatrixXd, 5> u;
  std::array<Eigen::MatrixXd, 4> v;
  std::array<Eigen::MatrixXd, 4> sig;
  Points3 x;
  Points3 y;             // trunk output, before the projection head
  Eigen::VectorXd yx;    // <y, x> per column
  std::uint64_t revision = kNoTape;

  Eigen::Index batch() const { return x.cols(); }
};

// Tangent activations for one direction batch, recorded by jvp_batch.
struct JvpTape {
  Points3 dir;
  std::array<Eigen::MatrixXd, 5> du;
  std::array<Eigen::MatrixXd, 4> dv;
  Points3 dy;            // trunk directional derivative, before head terms
  std::uint64_t revision = kNoTape;
};

class DriftModel {
 public:
  DriftModel(NetConfig cfg, std::uint64_t init_seed) : DriftModel(std::move(cfg)) {
    Rng rng(mix_seed(init_seed, {stream_tag("net-init")}));
    const double in_std = 1.0 / std::sqrt(static_cast<double>(cfg_.feature_dim()));
    const double hid_std = 1.0 / std::sqrt(static_cast<double>(cfg_.width));
    fill_normal(weight(params_, 0), in_std, rng);
    for (int i = 1; i <= 4; ++i) fill_normal(weight(params_, i), hid_std, rng);
    // weight(5), all biases stay zero: a fresh model is the zero drift.
  }

  const NetConfig& config() const { return cfg_; }
  Eigen::Index param_count() const { return params_.size(); }
  std::uint64_t revision() const { return revision_; }

  const Eigen::VectorXd& params() const { return params_; }
  Eigen::VectorXd& mutable_params() {
    ++revision_;
    return params_;
  }
  void set_params(const Eigen::VectorXd& p) {
    if (p.size() != params_.size()) raise(ErrorCode::ShapeMismatch, "parameter vector size");
    mutable_params() = p;
  }

  const Eigen::VectorXd& grad() const { return grad_; }
  Eigen::VectorXd& mutable_grad() { return grad_; }
  void zero_grad() { grad_.setZero(); }

  // Block views into any flat vector laid out like the parameters
  // (A0,b0,...,A5,b5). Shared by the model, gradient buffers, and tests.
  Eigen::Map<const Eigen::MatrixXd> weight(const Eigen::VectorXd& flat, int i) const {
    return {flat.data() + offs_[2 * i], rows_of(i), cols_of(i)};
  }
  Eigen::Map<Eigen::MatrixXd> weight(Eigen::VectorXd& flat, int i) const {
    return {flat.data() + offs_[2 * i], rows_of(i), cols_of(i)};
  }
  Eigen::Map<const Eigen::VectorXd> bias(const Eigen::VectorXd& flat, int i) const {
    return {flat.data() + offs_[2 * i + 1], rows_of(i)};
  }
  Eigen::Map<Eigen::VectorXd> bias(Eigen::VectorXd& flat, int i) const {
    return {flat.data() + offs_[2 * i + 1], rows_of(i)};
  }

  void features(const Eigen::VectorXd& times, const Points3& X, Eigen::MatrixXd& out) const {
    const Eigen::Index B = X.cols();
    out.resize(cfg_.feature_dim(), B);
    out.topRows(3) = X;
    for (int j = 0; j < cfg_.time_features; ++j) {
      const double freq = std::ldexp(1.0, j) * kPi / cfg_.horizon;
      out.row(3 + 2 * j) = (times.array() * freq).sin().transpose();
      out.row(4 + 2 * j) = (times.array() * freq).cos().transpose();
    }
  }

  Points3 forward_batch(const Eigen::VectorXd& times, const Points3& X, ForwardTape& tape) const {
    if (times.size() != X.cols()) raise(ErrorCode::ShapeMismatch, "times vs points batch size");
    features(times, X, tape.feats);
    tape.x = X;
    tape.u[0].noalias() = weight(params_, 0) * tape.feats;
    tape.u[0].colwise() += bias(params_, 0);
    for (int i = 1; i <= 4; ++i) {
      tape.v[i - 1].noalias() = weight(params_, i) * tape.u[i - 1];
      tape.v[i - 1].colwise() += bias(params_, i);
      activate(tape.v[i - 1], tape.sig[i - 1], tape.u[i]);
    }
    tape.y.noalias() = weight(params_, 5) * tape.u[4];
    tape.y.colwise() += bias(params_, 5);
    tape.yx = tape.y.cwiseProduct(X).colwise().sum().transpose();
    tape.revision = revision_;
    return tape.y - X * tape.yx.asDiagonal();
  }

  // Directional derivative of the output map along tangent directions `dirs`
  // (time held fixed), including the derivative of the projection head:
  //   D_d out = dy - <dy,x> x - <y,d> x - <y,x> d.
  Points3 jvp_batch(const ForwardTape& tape, const Points3& dirs, JvpTape& jt) const {
    require_fresh(tape.revision, "jvp");
    if (dirs.cols() != tape.batch()) raise(ErrorCode::ShapeMismatch, "jvp direction batch size");
    jt.dir = dirs;
    jt.du[0].noalias() = weight(params_, 0).leftCols(3) * dirs;
    for (int i = 1; i <= 4; ++i) {
      jt.dv[i - 1].noalias() = weight(params_, i) * jt.du[i - 1];
      jt.du[i] = act_prime(i - 1, tape).cwiseProduct(jt.dv[i - 1]);
    }
    jt.dy.noalias() = weight(params_, 5) * jt.du[4];
    jt.revision = revision_;
    Eigen::VectorXd dyx = jt.dy.cwiseProduct(tape.x).colwise().sum().transpose();
    Eigen::VectorXd yd = tape.y.cwiseProduct(dirs).colwise().sum().transpose();
    return jt.dy - tape.x * (dyx + yd).asDiagonal() - dirs * tape.yx.asDiagonal();
  }

  // Accumulates d(objective)/d(theta) into grad_out, given the adjoints of
  // the trunk output y (y_bar) and of each recorded trunk tangent dy
  // (dy_bar[j], paired with jvp_tapes[j]). Projection-head terms must
  // already be folded into these adjoints by the caller.
  void backward_batch(const ForwardTape& tape, const Eigen::Matrix3Xd& y_bar,
                      const std::vector<const JvpTape*>& jvp_tapes,
                      const std::vector<Eigen::Matrix3Xd>& dy_bar,
                      Eigen::VectorXd& grad_out) const {
    require_fresh(tape.revision, "backward");
    if (jvp_tapes.size() != dy_bar.size())
      raise(ErrorCode::ShapeMismatch, "one dy adjoint per jvp tape required");
    for (const JvpTape* jt : jvp_tapes) require_fresh(jt->revision, "backward");
    if (y_bar.cols() != tape.batch()) raise(ErrorCode::ShapeMismatch, "y adjoint batch size");
    if (grad_out.size() != params_.size())
      raise(ErrorCode::ShapeMismatch, "gradient buffer size");
    const std::size_t J = jvp_tapes.size();

    weight(grad_out, 5).noalias() += y_bar * tape.u[4].transpose();
    bias(grad_out, 5) += y_bar.rowwise().sum();
    Eigen::MatrixXd ubar = weight(params_, 5).transpose() * y_bar;
    std::vector<Eigen::MatrixXd> uhat(J);
    for (std::size_t j = 0; j < J; ++j) {
      weight(grad_out, 5).noalias() += dy_bar[j] * jvp_tapes[j]->du[4].transpose();
      uhat[j].noalias() = weight(params_, 5).transpose() * dy_bar[j];
    }

    Eigen::MatrixXd vbar, vhat;
    for (int i = 4; i >= 1; --i) {
      const Eigen::MatrixXd ap = act_prime(i - 1, tape);
      vbar = ap.cwiseProduct(ubar);
      if (J > 0 && cfg_.activation == Activation::silu) {
        const Eigen::MatrixXd app = act_second(i - 1, tape);
        for (std::size_t j = 0; j < J; ++j)
          vbar += app.cwiseProduct(jvp_tapes[j]->dv[i - 1]).cwiseProduct(uhat[j]);
      }
      weight(grad_out, i).noalias() += vbar * tape.u[i - 1].transpose();
      bias(grad_out, i) += vbar.rowwise().sum();
      for (std::size_t j = 0; j < J; ++j) {
        vhat = ap.cwiseProduct(uhat[j]);
        weight(grad_out, i).noalias() += vhat * jvp_tapes[j]->du[i - 1].transpose();
        uhat[j].noalias() = weight(params_, i).transpose() * vhat;
      }
      ubar = weight(params_, i).transpose() * vbar;
    }

    weight(grad_out, 0).noalias() += ubar * tape.feats.transpose();
    bias(grad_out, 0) += ubar.rowwise().sum();
    for (std::size_t j = 0; j < J; ++j)
      weight(grad_out, 0).leftCols(3).noalias() += uhat[j] * jvp_tapes[j]->dir.transpose();
  }

  TangentVector forward(double t, const SpherePoint& x) const {
    ForwardTape tape;
    Eigen::VectorXd tt(1);
    tt << t;
    Points3 X(3, 1);
    X.col(0) = x.coords;
    Points3 out = forward_batch(tt, X, tape);
    return {x, out.col(0)};
  }

  // Returns (forward value, ambient directional derivative along dir).
  std::pair<TangentVector, Eigen::Vector3d> forward_jvp(double t, const SpherePoint& x,
                                                        const TangentVector& dir) const {
    ForwardTape tape;
    JvpTape jt;
    Eigen::VectorXd tt(1);
    tt << t;
    Points3 X(3, 1), D(3, 1);
    X.col(0) = x.coords;
    D.col(0) = dir.vec;
    Points3 out = forward_batch(tt, X, tape);
    Points3 dout = jvp_batch(tape, D, jt);
    return {TangentVector{x, out.col(0)}, dout.col(0)};
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) raise(ErrorCode::IoError, "cannot open '" + path + "' for writing");
    f.write(kMagic, 8);
    write_u32(f, kFormatVersion);
    write_u32(f, static_cast<std::uint32_t>(cfg_.width));
    write_u32(f, static_cast<std::uint32_t>(cfg_.time_features));
    write_u32(f, cfg_.activation == Activation::silu ? 0u : 1u);
    write_f64(f, cfg_.horizon);
    write_u64(f, static_cast<std::uint64_t>(params_.size()));
    f.write(reinterpret_cast<const char*>(params_.data()),
            static_cast<std::streamsize>(sizeof(double)) * params_.size());
    if (!f) raise(ErrorCode::IoError, "short write to '" + path + "'");
  }

  static DriftModel load(const std::string& path, const NetConfig* expect = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) raise(ErrorCode::IoError, "cannot open '" + path + "' for reading");
    char magic[8] = {};
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
      raise(ErrorCode::FormatMismatch, "'" + path + "' is not a drift checkpoint");
    const std::uint32_t version = read_u32(f, path);
    if (version != kFormatVersion)
      raise(ErrorCode::FormatMismatch,
            "'" + path + "' has format version " + std::to_string(version) + ", expected " +
                std::to_string(kFormatVersion));
    NetConfig cfg;
    cfg.width = static_cast<int>(read_u32(f, path));
    cfg.time_features = static_cast<int>(read_u32(f, path));
    const std::uint32_t act = read_u32(f, path);
    if (act > 1) raise(ErrorCode::CorruptFile, "'" + path + "': unknown activation id");
    cfg.activation = act == 0 ? Activation::silu : Activation::identity;
    cfg.horizon = read_f64(f, path);
    cfg.validate();
    const std::uint64_t count = read_u64(f, path);
    if (count != static_cast<std::uint64_t>(cfg.param_count()))
      raise(ErrorCode::CorruptFile, "'" + path + "': parameter count disagrees with header");
    if (expect) {
      if (cfg.width != expect->width || cfg.time_features != expect->time_features ||
          cfg.activation != expect->activation || cfg.horizon != expect->horizon)
        raise(ErrorCode::FormatMismatch,
              "'" + path + "' holds a W=" + std::to_string(cfg.width) +
                  " K=" + std::to_string(cfg.time_features) +
                  " model, which does not match the requested configuration");
    }
    DriftModel model(cfg);
    f.read(reinterpret_cast<char*>(model.params_.data()),
           static_cast<std::streamsize>(sizeof(double)) * model.params_.size());
    if (f.gcount() != static_cast<std::streamsize>(sizeof(double)) * model.params_.size())
      raise(ErrorCode::CorruptFile, "'" + path + "' is truncated");
    f.peek();
    if (!f.eof()) raise(ErrorCode::CorruptFile, "'" + path + "' has trailing bytes");
    return model;
  }

 private:
  explicit DriftModel(NetConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Eigen::Index off = 0;
    for (int i = 0; i <= 5; ++i) {
      offs_[2 * i] = off;
      off += rows_of(i) * cols_of(i);
      offs_[2 * i + 1] = off;
      off += rows_of(i);
    }
    params_ = Eigen::VectorXd::Zero(off);
    grad_ = Eigen::VectorXd::Zero(off);
  }

  Eigen::Index rows_of(int i) const { return i == 5 ? 3 : cfg_.width; }
  Eigen::Index cols_of(int i) const {
    return i == 0 ? cfg_.feature_dim() : static_cast<Eigen::Index>(cfg_.width);
  }

  static void fill_normal(Eigen::Map<Eigen::MatrixXd> m, double std, Rng& rng) {
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = std * rng.normal();
  }

  void require_fresh(std::uint64_t tape_revision, const char* what) const {
    if (tape_revision != revision_)
      raise(ErrorCode::StaleTape,
            std::string(what) + " needs a tape recorded at the current parameters");
  }

  void activate(const Eigen::MatrixXd& v, Eigen::MatrixXd& sig, Eigen::MatrixXd& u) const {
    if (cfg_.activation == Activation::identity) {
      u = v;
      return;
    }
    sig = ((-v.array()).exp() + 1.0).inverse();
    u = v.cwiseProduct(sig);
  }

  // act(v) = v * sigmoid(v); with s = sigmoid(v):
  //   act'(v)  = s (1 + v (1 - s))
  //   act''(v) = s (1 - s) (2 + v (1 - 2 s))
  Eigen::MatrixXd act_prime(int block, const ForwardTape& tape) const {
    if (cfg_.activation == Activation::identity)
      return Eigen::MatrixXd::Ones(tape.v[block].rows(), tape.v[block].cols());
    const auto& s = tape.sig[block].array();
    const auto& v = tape.v[block].array();
    return s * (1.0 + v * (1.0 - s));
  }
  Eigen::MatrixXd act_second(int block, const ForwardTape& tape) const {
    const auto& s = tape.sig[block].array();
    const auto& v = tape.v[block].array();
    return s * (1.0 - s) * (2.0 + v * (1.0 - 2.0 * s));
  }

  static constexpr const char kMagic[9] = "SBDRIFT1";
  static constexpr std::uint32_t kFormatVersion = 1;

  static void write_u32(std::ofstream& f, std::uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  static void write_u64(std::ofstream& f, std::uint64_t v) {
    f.write(reinterpret_cast<const char*>(&v), 8);
  }
  static void write_f64(std::ofstream& f, double v) {
    f.write(reinterpret_cast<const char*>(&v), 8);
  }
  static std::uint32_t read_u32(std::ifstream& f, const std::string& path) {
    std::uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (!f) raise(ErrorCode::CorruptFile, "'" + path + "' is truncated");
    return v;
  }
  static std::uint64_t read_u64(std::ifstream& f, const std::string& path) {
    std::uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    if (!f) raise(ErrorCode::CorruptFile, "'" + path + "' is truncated");
    return v;
  }
  static double read_f64(std::ifstream& f, const std::string& path) {
    double v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    if (!f) raise(ErrorCode::CorruptFile, "'" + path + "' is truncated");
    return v;
  }

  NetConfig cfg_;
  std::array<Eigen::Index, 12> offs_{};
  Eigen::VectorXd params_;
  Eigen::VectorXd grad_;
  std::uint64_t revision_ = 1;
};

// Binds a time to a model so it satisfies the differentiable tangent field
// concept used by the divergence helpers.
struct DriftFieldAt {
  const DriftModel* model;
  double t;

  TangentVector operator()(const SpherePoint& x) const { return model->forward(t, x); }
  Eigen::Vector3d jvp(const SpherePoint& x, const Eigen::Vector3d& d) const {
    return model->forward_jvp(t, x, TangentVector{x, d}).second;
  }
};

// Adaptive-moment descent with bias correction and global gradient-norm
// clipping. Moment buffers are allocated on first use so one state can serve
// any parameter vector of fixed size.
struct OptimizerState {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 10.0;
  std::int64_t step_count = 0;
  Eigen::VectorXd m;
  Eigen::VectorXd v;

  // Applies one update in place. Returns the pre-clip gradient norm.
  double apply(Eigen::VectorXd& params, Eigen::VectorXd& grad) {
    if (!grad.allFinite())
      raise(ErrorCode::NonFiniteGradient,
            "gradient contains NaN/Inf at step " + std::to_string(step_count + 1));
    if (m.size() == 0) {
      m = Eigen::VectorXd::Zero(params.size());
      v = Eigen::VectorXd::Zero(params.size());
    }
    if (m.size() != params.size() || grad.size() != params.size())
      raise(ErrorCode::ShapeMismatch, "optimizer buffers do not match the parameter vector");
    const double norm = grad.norm();
    const double scale = (clip > 0.0 && norm > clip) ? clip / norm : 1.0;
    ++step_count;
    m = beta1 * m + ((1.0 - beta1) * scale) * grad;
    v.array() = beta2 * v.array() + (1.0 - beta2) * scale * scale * grad.array().square();
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    params.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
    return norm;
  }
};

// One training step: update parameters from the model's gradient buffer,
// clear the buffer, invalidate outstanding tapes. Returns the pre-clip
// gradient norm.
inline double optimizer_step(DriftModel& model, OptimizerState& opt) {
  const double norm = opt.apply(model.mutable_params(), model.mutable_grad());
  model.zero_grad();
  return norm;
}

}  // namespace spherebridge
