#pragma once

#include <iosfwd>

#include "fewtune/matrix.hpp"

namespace fewtune {

// Distribution calibration state: class-agnostic support statistics (mu,
// sigma) plus the learnable element-wise scale vector s. Statistics come
// from support features only, never from the query set.
struct DcmState {
    Vec mu;
    Vec sigma;   // per-dimension standard deviation, floored at epsilon
    Vec scale;   // s, initialized to all ones
    double epsilon = 1e-6;
    bool fitted = false;
};

// mu = per-dimension mean, sigma = sqrt of the per-dimension mean squared
// deviation (population std), floored at epsilon. scale is reset to ones.
DcmState fit_stats(const Matrix& support_features, double epsilon = 1e-6);

// Refit mu/sigma in place, keeping the current scale vector.
void refit_stats(DcmState& state, const Matrix& support_features);

// out(i,k) = (f(i,k) - mu(k)) / sigma(k) * s(k)
Matrix calibrate(const Matrix& features, const DcmState& state);

// (f - mu) / sigma, the pre-scale normalized features.
Matrix normalized(const Matrix& features, const DcmState& state);

// dLoss/ds(k) = sum_i upstream(i,k) * normalized(i,k), the exact chain rule
// through the element-wise multiplication.
Vec scale_gradient(const Matrix& upstream, const Matrix& normalized_features);

// Gradient of calibrate with respect to its input features, mu and sigma
// treated as constants of the current step: upstream * s / sigma.
Matrix stats_gradient_passthrough(const Matrix& upstream, const DcmState& state);

// mu, sigma, s as three comma-separated lines, for per-epoch inspection.
void dump_state(const DcmState& state, std::ostream& os);

} // namespace fewtune
