#pragma once

// Linear adapter f_theta: R^d0 -> R^d and reverter f_phi: R^d -> R^d0.
//
// Adapted features are always re-normalized after the linear map:
//   Plain:    z = normalize(W x)
//   Residual: z = normalize(x + W x)
// and the reverter consumes that normalized z. Neither map has a bias.

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "cvadapt/detail/binary_io.hpp"
#include "cvadapt/error.hpp"
#include "cvadapt/featstore.hpp"

namespace cvadapt {

enum class Arch : std::uint32_t { Plain = 0, Residual = 1 };

inline std::string to_string(Arch arch) { return arch == Arch::Plain ? "plain" : "residual"; }

inline Arch parse_arch(std::string_view s) {
  if (s == "plain") return Arch::Plain;
  if (s == "residual") return Arch::Residual;
  throw Error("unknown adapter architecture '" + std::string(s) + "' (expected plain or residual)");
}

struct AdapterParams {
  Eigen::MatrixXd weight;  // d x d0
  Arch arch = Arch::Plain;

  std::size_t d0() const { return static_cast<std::size_t>(weight.cols()); }
  std::size_t d() const { return static_cast<std::size_t>(weight.rows()); }

  void validate() const {
    if (weight.size() == 0) throw Error("adapter has empty weight matrix");
    if (!weight.allFinite()) throw Error("adapter weight is not finite");
    if (arch == Arch::Residual && d() != d0()) throw Error("residual requires equal dims");
  }
};

struct ReverterParams {
  Eigen::MatrixXd weight;  // d0 x d

  std::size_t d0() const { return static_cast<std::size_t>(weight.rows()); }
  std::size_t d() const { return static_cast<std::size_t>(weight.cols()); }
};

/// Forward result kept for the backward pass: normalized rows and the norms
/// of the pre-normalization rows.
struct AdaptedRows {
  Eigen::MatrixXd z;      // n x d, unit rows
  Eigen::VectorXd norms;  // ||W x_i|| (or ||x_i + W x_i||)
};

inline AdaptedRows adapt_rows(const AdapterParams& params, const Eigen::MatrixXd& x) {
  params.validate();
  if (static_cast<std::size_t>(x.cols()) != params.d0()) throw Error("adapter/input dim mismatch");
  AdaptedRows out;
  out.z = x * params.weight.transpose();
  if (params.arch == Arch::Residual) out.z += x;
  out.norms.resize(out.z.rows());
  for (Eigen::Index i = 0; i < out.z.rows(); ++i) {
    double n = out.z.row(i).norm();
    if (!(n > kDegenerateNorm)) throw Error("degenerate adapted vector");
    out.norms(i) = n;
    out.z.row(i) /= n;
  }
  return out;
}

/// Gradient of a scalar loss w.r.t. the adapter weight, given dL/dz for the
/// rows produced by `adapt_rows(params, x)`. Both architectures share
/// dy/dW = x^T since y = W x (+ x).
inline Eigen::MatrixXd adapt_backward(const Eigen::MatrixXd& x, const AdaptedRows& fwd,
                                      const Eigen::MatrixXd& grad_z) {
  // dL/dy_i = (g_i - (g_i . z_i) z_i) / ||y_i||
  Eigen::VectorXd radial = (grad_z.array() * fwd.z.array()).rowwise().sum();
  Eigen::MatrixXd grad_y = grad_z - fwd.z.cwiseProduct(radial.replicate(1, fwd.z.cols()));
  grad_y.array().colwise() /= fwd.norms.array();
  return grad_y.transpose() * x;
}

inline FeatureSet adapt(const AdapterParams& params, const FeatureSet& x) {
  if (x.dim() != params.d0()) throw Error("adapter/input dim mismatch");
  if (!x.normalized) throw Error("adapter input must be normalized");
  FeatureSet out;
  out.view = x.view;
  out.ids = x.ids;
  out.data = adapt_rows(params, x.data).z;
  out.normalized = true;
  return out;
}

inline Eigen::MatrixXd revert_rows(const ReverterParams& params, const Eigen::MatrixXd& z) {
  if (static_cast<std::size_t>(z.cols()) != params.d()) throw Error("reverter/input dim mismatch");
  return z * params.weight.transpose();
}

/// Raw reconstruction x_hat = V z; the result is not normalized.
inline FeatureSet revert(const ReverterParams& params, const FeatureSet& z) {
  FeatureSet out;
  out.view = z.view;
  out.ids = z.ids;
  out.data = revert_rows(params, z.data);
  out.normalized = false;
  return out;
}

/// Identity-preserving initialization: W = [I | 0] (or its transpose shape)
/// plus N(0, noise_std^2) noise, V likewise in the reverse shape. The noise
/// draws come from one seeded stream, W first, row-major.
inline std::pair<AdapterParams, ReverterParams> init_params(std::size_t d0, std::size_t d, Arch arch,
                                                            std::uint64_t seed, double noise_std = 0.01) {
  if (d0 == 0 || d == 0) throw Error("adapter dimensions must be positive");
  if (arch == Arch::Residual && d != d0) throw Error("residual requires equal dims");
  if (!(noise_std >= 0.0)) throw Error("initialization noise must be nonnegative");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto ed0 = static_cast<Eigen::Index>(d0);
  auto ed = static_cast<Eigen::Index>(d);

  AdapterParams adapter{Eigen::MatrixXd::Identity(ed, ed0), arch};
  ReverterParams reverter{Eigen::MatrixXd::Identity(ed0, ed)};
  if (noise_std > 0.0) {
    for (Eigen::Index i = 0; i < ed; ++i)
      for (Eigen::Index j = 0; j < ed0; ++j) adapter.weight(i, j) += noise_std * normal(rng);
    for (Eigen::Index i = 0; i < ed0; ++i)
      for (Eigen::Index j = 0; j < ed; ++j) reverter.weight(i, j) += noise_std * normal(rng);
  }
  return {std::move(adapter), std::move(reverter)};
}

// ---------------------------------------------------------------------------
// CVAD v1: magic "CVAD", u32 version, u32 arch, u32 d0, u32 d, W (d x d0) then
// V (d0 x d) as float32 row-major, u64 training-iteration counter.

inline constexpr std::string_view kAdapterMagic = "CVAD";

struct AdapterCheckpoint {
  AdapterParams adapter;
  ReverterParams reverter;
  std::uint64_t iteration = 0;
};

inline std::vector<char> encode_adapter(const AdapterCheckpoint& ckpt) {
  ckpt.adapter.validate();
  const auto& w = ckpt.adapter.weight;
  const auto& v = ckpt.reverter.weight;
  if (v.rows() != w.cols() || v.cols() != w.rows()) throw Error("reverter shape does not match adapter");
  detail::ByteWriter out;
  out.bytes(kAdapterMagic);
  out.u32(kFormatVersion);
  out.u32(static_cast<std::uint32_t>(ckpt.adapter.arch));
  out.u32(static_cast<std::uint32_t>(w.cols()));
  out.u32(static_cast<std::uint32_t>(w.rows()));
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) out.f32(static_cast<float>(w(i, j)));
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (Eigen::Index j = 0; j < v.cols(); ++j) out.f32(static_cast<float>(v(i, j)));
  out.u64(ckpt.iteration);
  return out.buffer();
}

inline AdapterCheckpoint decode_adapter(std::vector<char> bytes) {
  detail::ByteReader r(std::move(bytes), "corrupt checkpoint");
  if (r.remaining() < 8) throw Error("unrecognized format");
  if (r.bytes(4) != kAdapterMagic) throw Error("unrecognized format");
  if (r.u32() != kFormatVersion) throw Error("unsupported checkpoint version");
  AdapterCheckpoint ckpt;
  std::uint32_t arch = r.u32();
  if (arch > 1) throw Error("corrupt checkpoint");
  ckpt.adapter.arch = static_cast<Arch>(arch);
  std::uint32_t d0 = r.u32();
  std::uint32_t d = r.u32();
  if (d0 == 0 || d == 0) throw Error("corrupt checkpoint");
  r.require_elements(2ull * d0 * d, 4);
  ckpt.adapter.weight.resize(d, d0);
  ckpt.reverter.weight.resize(d0, d);
  for (std::uint32_t i = 0; i < d; ++i)
    for (std::uint32_t j = 0; j < d0; ++j) ckpt.adapter.weight(i, j) = r.f32();
  for (std::uint32_t i = 0; i < d0; ++i)
    for (std::uint32_t j = 0; j < d; ++j) ckpt.reverter.weight(i, j) = r.f32();
  ckpt.iteration = r.u64();
  if (!r.at_end()) throw Error("corrupt checkpoint");
  ckpt.adapter.validate();
  return ckpt;
}

inline void save_adapter(const AdapterCheckpoint& ckpt, const std::string& path) {
  detail::write_file(path, encode_adapter(ckpt));
}

inline AdapterCheckpoint load_adapter(const std::string& path) {
  return decode_adapter(detail::ByteReader::slurp(path));
}

}  // namespace cvadapt
