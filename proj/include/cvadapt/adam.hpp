#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "cvadapt/error.hpp"

namespace cvadapt {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment accumulators for one parameter block.
struct AdamState {
  Eigen::MatrixXd m;
  Eigen::MatrixXd v;
  std::uint64_t step = 0;

  AdamState() = default;
  AdamState(Eigen::Index rows, Eigen::Index cols)
      : m(Eigen::MatrixXd::Zero(rows, cols)), v(Eigen::MatrixXd::Zero(rows, cols)) {}
};

/// One bias-corrected Adam update of `param` in place.
inline void adam_step(Eigen::MatrixXd& param, const Eigen::MatrixXd& grad, AdamState& state, const AdamOptions& opt,
                      std::string_view block = "parameters") {
  if (grad.rows() != param.rows() || grad.cols() != param.cols() || state.m.rows() != param.rows() ||
      state.m.cols() != param.cols() || state.v.rows() != param.rows() || state.v.cols() != param.cols()) {
    throw Error("Adam shape mismatch for " + std::string(block));
  }
  if (!grad.allFinite()) throw Error("gradient blow-up in " + std::string(block));

  ++state.step;
  const double t = static_cast<double>(state.step);
  state.m = opt.beta1 * state.m + (1.0 - opt.beta1) * grad;
  state.v = opt.beta2 * state.v + (1.0 - opt.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  param.array() -= opt.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + opt.eps);

  if (!state.m.allFinite() || !state.v.allFinite()) throw Error("Adam moments not finite for " + std::string(block));
}

}  // namespace cvadapt
