#include "fewtune/matrix.hpp"

#include <cmath>
#include <stdexcept>

namespace fewtune {

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_rows(const std::vector<Vec>& rows) {
    if (rows.empty()) return {};
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != m.cols())
            throw std::invalid_argument("from_rows: ragged row lengths");
        for (std::size_t c = 0; c < m.cols(); ++c) m(r, c) = rows[r][c];
    }
    return m;
}

Vec Matrix::row_copy(std::size_t r) const {
    auto s = row(r);
    return Vec(s.begin(), s.end());
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm(std::span<const double> a) {
    return std::sqrt(dot(a, a));
}

bool all_finite(std::span<const double> a) {
    for (double v : a)
        if (!std::isfinite(v)) return false;
    return true;
}

bool all_finite(const Matrix& m) {
    return all_finite(std::span<const double>(m.data(), m.size()));
}

std::size_t argmax_tie_low(std::span<const double> a) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < a.size(); ++i)
        if (a[i] > a[best]) best = i;
    return best;
}

} // namespace fewtune
