#pragma once

#include <functional>

#include "flowlab/denoiser.hpp"
#include "flowlab/training.hpp"

namespace flowlab {

// Backward-integration grid, strictly decreasing from t_max to t_min.
// Polynomial kind follows t_i = (t_max^(1/rho) + (i/(N-1)) (t_min^(1/rho) -
// t_max^(1/rho)))^rho.
struct TimeSchedule {
    enum class Kind { Polynomial, Uniform };
    Kind kind = Kind::Polynomial;
    int64_t n = 8;  // grid points (intervals + 1)
    double rho = 7.0;
    double t_min = 0.002;
    double t_max = 80.0;

    std::vector<double> times() const;
    void validate() const;
};

// Velocity field over a batch of states at one shared time.
using BatchField = std::function<Matrix(const Matrix& x, double t)>;

struct BatchTrajectory {
    std::vector<double> times;
    std::vector<Matrix> states;      // one per grid point, [B, dim]
    std::vector<Matrix> velocities;  // recorded where the solver evaluated
    std::vector<uint8_t> has_velocity;

    int64_t batch() const { return states.empty() ? 0 : states.front().rows; }
    int64_t dim() const { return states.empty() ? 0 : states.front().cols; }
    int64_t grid_points() const { return static_cast<int64_t>(states.size()); }
};

struct SolverRun {
    std::string solver;
    int64_t nfe = 0;  // network velocity evaluations per sample
    bool afs = false;
    uint64_t seed = 0;
    BatchTrajectory traj;

    const Matrix& terminal() const { return traj.states.back(); }
};

// x_{i+1} = x_i + (t_{i+1} - t_i) v(x_i, t_i); NFE = N-1.
SolverRun euler_solve(const BatchField& field, const TimeSchedule& sched, const Matrix& x_init);

// EDM-style Heun: Euler predictor, trapezoidal corrector. Default convention
// drops the corrector on the final step into the terminal time, giving
// NFE = 2(N-1) - 1; corrector_on_final=true keeps the full trapezoid
// (NFE = 2(N-1)), exact on fields linear in t.
SolverRun heun_solve(const BatchField& field, const TimeSchedule& sched, const Matrix& x_init,
                     bool corrector_on_final = false);

// Improved pseudo-numerical linear multistep, Adams-Bashforth coefficient
// ladder warm-started at orders 1,2,3 then the requested order (<= 4). With
// afs the first velocity is the analytic prior direction (zero NFE), so
// NFE = N-1 - (afs ? 1 : 0).
SolverRun ipndm_solve(const BatchField& field, const TimeSchedule& sched, const Matrix& x_init, int order = 4,
                      bool afs = false, const BatchField* prior_velocity = nullptr);

// Dormand-Prince 5(4) adaptive pair with FSAL, integrating one trajectory
// from t_begin to t_end (backward when t_end < t_begin). Records accepted
// steps; NFE counts exact field invocations.
SolverRun rk45_solve(const BatchField& field, double t_begin, double t_end, const Matrix& x_init, double rtol,
                     double atol);

// Analytic velocity of the pure-prior limit (data treated as a point mass at
// the origin): v = (s'(t)/s(t)) x. The AFS first-step direction.
Matrix prior_velocity_matrix(const FlowSpec& flow, const Matrix& x, double t);

// ---- model-backed sampling ----

struct SamplerConfig {
    std::string solver = "euler";  // euler | heun | ipndm | rk45
    int64_t nfe = 4;
    int order = 4;     // ipndm
    bool afs = false;  // ipndm
    std::string schedule = "auto";  // auto | uniform | polynomial
    double rho = 7.0;
    double rtol = 1e-5, atol = 1e-6;  // rk45

    TimeSchedule make_schedule(const FlowSpec& flow) const;
};

struct SampleResult {
    Matrix samples;
    std::vector<int64_t> codes;  // drawn code index per sample (empty if unconditional)
    int64_t nfe = 0;             // per sample
    uint64_t seed = 0;
};

// The four-step conditional procedure: draw a code index per sample from the
// collected weights, draw x_init from the flow prior, simulate the backward
// ODE with the code held fixed. Deterministic given the seed; samples with
// the same code share one batched solve.
SampleResult conditional_sample(const Model& model, const SamplingWeights& weights, const SamplerConfig& cfg,
                                int64_t count, uint64_t seed);

// Unconditional counterpart for baseline models.
SampleResult sample_model(const Model& model, const SamplerConfig& cfg, int64_t count, uint64_t seed);

// Euler backward simulation that keeps the full per-sample trajectories
// (curvature reports). Weights may be null for unconditional models.
struct TrajectorySampleResult {
    BatchTrajectory traj;
    std::vector<int64_t> codes;
};
TrajectorySampleResult sample_trajectories(const Model& model, const SamplingWeights* weights,
                                           const TimeSchedule& sched, int64_t count, uint64_t seed);

// One stochastic renoising step: perturb with variance t^2 noise, then apply
// the conditional denoiser's clean estimate.
std::vector<double> sde_renoise_step(const DenoiserNet& den, const FlowSpec& flow, std::span<const double> x,
                                     double t, const std::vector<int64_t>& digits, Rng& rng);

// One trajectory (row of a batched run) as CSV: header, then t,coords per row.
void save_trajectory_csv(const BatchTrajectory& traj, int64_t row, const std::string& path);

}  // namespace flowlab
