#pragma once

#include <optional>
#include <span>
#include <string>

#include "flowlab/common.hpp"

namespace flowlab {

// Forward-flow families. Every family writes the interpolant as
//   X_t = a(t) * X_0 + s(t) * xi,   xi ~ N(0, I)
// so the conditional X_t | X_0 is Gaussian with mean a(t) x_0 and std s(t),
// and the path velocity is a'(t) x_0 + s'(t) xi.
enum class FlowFamily { VP, VE, LinearEDM, RectifiedFlow };

std::string flow_family_name(FlowFamily f);
FlowFamily flow_family_from_name(const std::string& name);

struct FlowSpec {
    FlowFamily family = FlowFamily::RectifiedFlow;
    double t_min = 0.0;
    double t_max = 1.0;
    double sigma_data = 0.5;  // EDM preconditioning scale

    // VP uses the cosine schedule alpha(t) = cos(pi t / 2) on [0,1].
    static FlowSpec vp();
    static FlowSpec ve(double t_min = 1e-4, double t_max = 100.0);
    static FlowSpec edm(double t_min = 0.002, double t_max = 80.0, double sigma_data = 0.5);
    static FlowSpec rectified(double t_min = 0.0, double t_max = 1.0);

    double a(double t) const;
    double s(double t) const;
    double da(double t) const;
    double ds(double t) const;

    // std of the declared prior for X_T (VP/RF: 1, VE: sqrt(T), EDM: T).
    double prior_std() const;

    // Oracle conditional expectations are undefined by policy below this
    // floor: the posterior covariance s(t)^2 degenerates as t -> 0.
    double oracle_t_floor() const { return 1e-3 * t_max; }

    void check_time(double t) const;
    void check_oracle_time(double t) const;
};

// Empirical data distribution: N points sharing one shape (flattened rows),
// optionally carrying per-point integer condition codes. Point weights are
// uniform 1/N.
struct FiniteDataset {
    int64_t dim = 0;
    Matrix points;                // [N, dim]
    std::vector<int64_t> codes;   // empty, or one code index per point

    int64_t size() const { return points.rows; }
    bool has_codes() const { return !codes.empty(); }
    void validate() const;

    // Plain-text table: header "# points dim=<d> codes=<0|1>", then one
    // point per row, comma-separated coordinates, optional trailing integer
    // code column.
    void save(const std::string& path) const;
    static FiniteDataset load(const std::string& path);
};

// X_t for a single (x0, noise) pair at time t, per the family formula.
void interpolate(const FlowSpec& flow, std::span<const double> x0, std::span<const double> noise, double t,
                 std::span<double> out);

// Analytic d/dt of the interpolant along the same path.
void flow_velocity(const FlowSpec& flow, std::span<const double> x0, std::span<const double> noise, double t,
                   std::span<double> out);

// Exact E[Xdot_t | X_t = x_t] over the finite dataset: softmax of Gaussian
// log-posteriors (log-sum-exp stabilized) weighting the per-point path
// velocities. `code` restricts the posterior to points carrying that code.
void oracle_velocity(const FlowSpec& flow, const FiniteDataset& data, std::span<const double> x_t, double t,
                     std::span<double> out, std::optional<int64_t> code = std::nullopt);

// Batched convenience wrapper over rows of x_t.
Matrix oracle_velocity_batch(const FlowSpec& flow, const FiniteDataset& data, const Matrix& x_t, double t,
                             std::optional<int64_t> code = std::nullopt);

}  // namespace flowlab
