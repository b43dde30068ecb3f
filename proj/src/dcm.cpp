#include "fewtune/dcm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "fewtune/errors.hpp"

namespace fewtune {

DcmState fit_stats(const Matrix& support_features, double epsilon) {
    if (support_features.rows() == 0)
        throw contract_error("fit_stats: empty support feature batch");
    if (epsilon <= 0.0) throw config_error("fit_stats: epsilon must be positive");
    DcmState st;
    st.epsilon = epsilon;
    st.scale.assign(support_features.cols(), 1.0);
    refit_stats(st, support_features);
    return st;
}

void refit_stats(DcmState& state, const Matrix& support_features) {
    std::size_t n = support_features.rows(), d = support_features.cols();
    if (n == 0) throw contract_error("refit_stats: empty support feature batch");
    state.mu.assign(d, 0.0);
    state.sigma.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) state.mu[k] += support_features(i, k);
    for (std::size_t k = 0; k < d; ++k) state.mu[k] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) {
            double dev = support_features(i, k) - state.mu[k];
            state.sigma[k] += dev * dev;
        }
    for (std::size_t k = 0; k < d; ++k)
        state.sigma[k] = std::max(std::sqrt(state.sigma[k] / static_cast<double>(n)),
                                  state.epsilon);
    if (state.scale.size() != d) state.scale.assign(d, 1.0);
    state.fitted = true;
}

namespace {
void require_fitted(const DcmState& state, const Matrix& features, const char* op) {
    if (!state.fitted) throw contract_error(std::string(op) + ": state not fitted");
    if (features.cols() != state.mu.size())
        throw shape_error(std::string(op) + ": feature dimension does not match state");
}
} // namespace

Matrix calibrate(const Matrix& features, const DcmState& state) {
    require_fitted(state, features, "calibrate");
    Matrix out(features.rows(), features.cols());
    for (std::size_t i = 0; i < features.rows(); ++i)
        for (std::size_t k = 0; k < features.cols(); ++k)
            out(i, k) = (features(i, k) - state.mu[k]) / state.sigma[k] * state.scale[k];
    return out;
}

Matrix normalized(const Matrix& features, const DcmState& state) {
    require_fitted(state, features, "normalized");
    Matrix out(features.rows(), features.cols());
    for (std::size_t i = 0; i < features.rows(); ++i)
        for (std::size_t k = 0; k < features.cols(); ++k)
            out(i, k) = (features(i, k) - state.mu[k]) / state.sigma[k];
    return out;
}

Vec scale_gradient(const Matrix& upstream, const Matrix& normalized_features) {
    if (upstream.rows() != normalized_features.rows() ||
        upstream.cols() != normalized_features.cols())
        throw shape_error("scale_gradient: shape mismatch");
    Vec g(upstream.cols(), 0.0);
    for (std::size_t i = 0; i < upstream.rows(); ++i)
        for (std::size_t k = 0; k < upstream.cols(); ++k)
            g[k] += upstream(i, k) * normalized_features(i, k);
    return g;
}

Matrix stats_gradient_passthrough(const Matrix& upstream, const DcmState& state) {
    require_fitted(state, upstream, "stats_gradient_passthrough");
    Matrix out(upstream.rows(), upstream.cols());
    for (std::size_t i = 0; i < upstream.rows(); ++i)
        for (std::size_t k = 0; k < upstream.cols(); ++k)
            out(i, k) = upstream(i, k) * state.scale[k] / state.sigma[k];
    return out;
}

void dump_state(const DcmState& state, std::ostream& os) {
    char buf[32];
    auto line = [&](const char* name, const Vec& v) {
        os << name;
        for (double x : v) {
            std::snprintf(buf, sizeof buf, "%.17g", x);
            os << ',' << buf;
        }
        os << '\n';
    };
    line("mu", state.mu);
    line("sigma", state.sigma);
    line("scale", state.scale);
}

} // namespace fewtune
