#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowlab {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    out += "]";
    return out;
}

// Precondition violations (bad shapes, ranges, malformed files).
struct ValidationError : std::invalid_argument {
    explicit ValidationError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Numeric failures at run time (non-finite values, solver blow-ups).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Plain row-major matrix for the non-differentiable paths (oracles, solvers,
// metrics). Keeps those hot loops free of autodiff overhead.
struct Matrix {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<double> a;

    Matrix() = default;
    Matrix(int64_t r, int64_t c, double fill = 0.0) : rows(r), cols(c), a(static_cast<size_t>(r * c), fill) {}

    double& operator()(int64_t r, int64_t c) { return a[static_cast<size_t>(r * cols + c)]; }
    double operator()(int64_t r, int64_t c) const { return a[static_cast<size_t>(r * cols + c)]; }

    std::span<double> row(int64_t r) { return {a.data() + r * cols, static_cast<size_t>(cols)}; }
    std::span<const double> row(int64_t r) const { return {a.data() + r * cols, static_cast<size_t>(cols)}; }

    int64_t numel() const { return rows * cols; }
};

inline double sqr(double x) { return x * x; }

// Squared Euclidean distance between two equal-length vectors.
inline double sq_dist(std::span<const double> a, std::span<const double> b) {
    double d = 0.0;
    for (size_t i = 0; i < a.size(); ++i) d += sqr(a[i] - b[i]);
    return d;
}

}  // namespace flowlab
