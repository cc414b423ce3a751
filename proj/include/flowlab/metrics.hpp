#pragma once

#include "flowlab/samplers.hpp"
#include "flowlab/training.hpp"

namespace flowlab {

// Minimum-cost perfect matching (Kuhn-Munkres with potentials, O(n^3)).
// Returns the column assigned to each row.
std::vector<int64_t> min_cost_assignment(const Matrix& cost, double* total_cost = nullptr);

// Exact 2-Wasserstein between equal-size empirical measures: matching on
// squared-Euclidean costs, then sqrt of the mean matched cost. Exact mode is
// capped at 1024 points.
double wasserstein2(const Matrix& a, const Matrix& b);

// Mean squared deviation of the local velocity from the endpoint chord,
// averaged over interior grid points that carry a recorded velocity.
struct CurvatureReport {
    std::vector<double> per_trajectory;
    double mean = 0.0;
    std::string solver;
    int64_t nfe = 0;
};

CurvatureReport curvature(const BatchTrajectory& traj);
CurvatureReport curvature(const SolverRun& run);

// l_CFM(t) = sqrt(E || Xdot_t - v_theta(X_t, t, Y) ||^2) on a time grid,
// plus the density- and w_t-weighted trapezoidal quadrature of its square,
// which reconciles with the training module's L_CFM estimate.
struct ProfileReport {
    std::vector<double> times;
    std::vector<double> l_values;
    std::vector<double> se_sq;  // standard error of the mean of squares
    double quadrature_l_cfm = 0.0;
};

ProfileReport l_cfm_profile(const Model& model, const FiniteDataset& data, const std::vector<double>& grid,
                            const TimeDistribution& tdist, int64_t samples_per_time, uint64_t seed);

// Profile of an arbitrary velocity field (the oracle, a zero field). Pass
// codes to restrict the conditional expectation; field_codebook describes
// the digit tensor handed to the field (disabled when the field ignores it).
ProfileReport l_cfm_profile_field(const BatchVelocityFn& field, const CodebookConfig& field_codebook,
                                  const FlowSpec& flow, const std::string& weighting, const FiniteDataset& data,
                                  const std::vector<int64_t>* codes, const std::vector<double>& grid,
                                  const TimeDistribution& tdist, int64_t samples_per_time, uint64_t seed);

// Empirical check of the one-step Wasserstein recursion: advance simulated
// conditional samples one Euler step and compare the mixture distance
// against dt * l_CFM(t) + L_hat * [E_Y W^2(sim_t,Y, true_t,Y)]^(1/2).
// L_hat is a probe-pair lower bound on the true Lipschitz constant of the
// one-step map; estimation error terms come from matched null distances
// between independent ground-truth draws.
struct BoundCheckReport {
    double t = 0.0, dt = 0.0;
    double lhs = 0.0;        // W(sim_{t-dt}, true_{t-dt})
    double cond_w_t = 0.0;   // [E_Y W^2 at time t]^(1/2)
    double l_cfm_t = 0.0;
    double l_cfm_se = 0.0;
    double lipschitz_hat = 0.0;
    double rhs = 0.0;
    double est_error = 0.0;  // combined estimation error
    bool pass = false;
    bool valid = false;
};

struct BoundCheckConfig {
    int64_t per_condition = 64;   // conditional sample size (>= 32)
    int64_t mixture = 256;        // mixture-level sample size
    int64_t probe_pairs = 10000;  // Lipschitz probes
    int64_t lcfm_samples = 10000;
    double perturbation = 0.25;   // std of the simulated-distribution offset
};

BoundCheckReport check_theorem_bound(const Model& model, const FiniteDataset& data, double t, double dt,
                                     const BoundCheckConfig& cfg, uint64_t seed);

// ---- results table ----

struct MetricRow {
    std::string name;
    std::string config_hash;
    double value = 0.0;
    double error = 0.0;
    uint64_t seed = 0;
};

// Appends under an exclusive file lock so parallel sweep cells can share one
// results table.
void append_metric_row(const std::string& path, const MetricRow& row);
std::vector<MetricRow> read_metric_rows(const std::string& path);

}  // namespace flowlab
