#pragma once

// Adaptation information consistency: reconstruct the initial features from
// the adapted ones through the reverter and penalize the squared error.

#include <Eigen/Dense>

#include "cvadapt/adapter.hpp"
#include "cvadapt/error.hpp"
#include "cvadapt/featstore.hpp"

namespace cvadapt {

struct ReconLoss {
  double value = 0.0;
  Eigen::MatrixXd grad;  // dL/dx_hat = 2 (x_hat - x)
};

/// L_re(X, X_hat) = sum_i ||x_i - x_hat_i||^2, with rows aligned.
inline ReconLoss reconstruction_loss(const Eigen::MatrixXd& x, const Eigen::MatrixXd& x_hat) {
  if (x.rows() != x_hat.rows() || x.cols() != x_hat.cols()) throw Error("reconstruction shape mismatch");
  ReconLoss out;
  Eigen::MatrixXd diff = x_hat - x;
  out.value = diff.squaredNorm();
  out.grad = 2.0 * diff;
  return out;
}

inline ReconLoss reconstruction_loss(const FeatureSet& x, const FeatureSet& x_hat) {
  if (x.count() != x_hat.count() || x.dim() != x_hat.dim()) throw Error("reconstruction shape mismatch");
  return reconstruction_loss(x.data, x_hat.data);
}

struct AicGrads {
  double value = 0.0;
  Eigen::MatrixXd grad_reverter;  // dL/dV, d0 x d
  Eigen::MatrixXd grad_z;         // dL/dz, n x d
};

/// Reconstruction loss of x from already-adapted rows z, with gradients for
/// the reverter and for z. The adapter gradient follows from
/// `adapt_backward(x, fwd, grad_z)`.
inline AicGrads aic_grads(const Eigen::MatrixXd& x, const Eigen::MatrixXd& z, const ReverterParams& reverter) {
  if (reverter.d0() != static_cast<std::size_t>(x.cols())) throw Error("reconstruction shape mismatch");
  if (x.rows() != z.rows()) throw Error("reconstruction shape mismatch");
  auto recon = reconstruction_loss(x, revert_rows(reverter, z));
  AicGrads out;
  out.value = recon.value;
  out.grad_reverter = recon.grad.transpose() * z;
  out.grad_z = recon.grad * reverter.weight;
  return out;
}

struct AicFullGrads {
  double value = 0.0;
  Eigen::MatrixXd grad_adapter;   // dL/dW, d x d0
  Eigen::MatrixXd grad_reverter;  // dL/dV, d0 x d
};

/// L_re(X, f_phi(f_theta(X))) with gradients for both maps; the adapter
/// gradient flows through the output normalization.
inline AicFullGrads aic_grads(const Eigen::MatrixXd& x, const AdapterParams& adapter, const ReverterParams& reverter) {
  if (reverter.d0() != adapter.d0() || reverter.d() != adapter.d()) throw Error("reconstruction shape mismatch");
  auto fwd = adapt_rows(adapter, x);
  auto g = aic_grads(x, fwd.z, reverter);
  return {g.value, adapt_backward(x, fwd, g.grad_z), std::move(g.grad_reverter)};
}

}  // namespace cvadapt
