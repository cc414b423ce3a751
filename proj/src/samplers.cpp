#include "flowlab/samplers.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

namespace flowlab {

std::vector<double> TimeSchedule::times() const {
    validate();
    std::vector<double> t(static_cast<size_t>(n));
    if (kind == Kind::Uniform) {
        for (int64_t i = 0; i < n; ++i)
            t[static_cast<size_t>(i)] =
                t_max + (t_min - t_max) * static_cast<double>(i) / static_cast<double>(n - 1);
    } else {
        double inv_rho = 1.0 / rho;
        double a = std::pow(t_max, inv_rho), b = std::pow(t_min, inv_rho);
        for (int64_t i = 0; i < n; ++i) {
            double u = static_cast<double>(i) / static_cast<double>(n - 1);
            t[static_cast<size_t>(i)] = std::pow(a + u * (b - a), rho);
        }
    }
    t.front() = t_max;
    t.back() = t_min;
    return t;
}

void TimeSchedule::validate() const {
    if (n < 2) throw ValidationError("schedule: need at least 2 grid points");
    if (!(t_min < t_max)) throw ValidationError("schedule: t_min must be below t_max");
    if (!(t_min >= 0.0)) throw ValidationError("schedule: negative t_min");
    if (kind == Kind::Polynomial) {
        if (!(rho > 0.0)) throw ValidationError("schedule: rho must be positive");
        if (t_min <= 0.0) throw ValidationError("schedule: polynomial kind needs t_min > 0");
    }
}

namespace {

void check_finite_state(const Matrix& x, const char* solver, int64_t step) {
    for (double v : x.a)
        if (!std::isfinite(v))
            throw NumericError(std::string(solver) + ": non-finite state at step " + std::to_string(step));
}

Matrix axpy(const Matrix& x, double h, const Matrix& v) {
    Matrix out = x;
    for (int64_t i = 0; i < out.numel(); ++i) out.a[static_cast<size_t>(i)] += h * v.a[static_cast<size_t>(i)];
    return out;
}

}  // namespace

SolverRun euler_solve(const BatchField& field, const TimeSchedule& sched, const Matrix& x_init) {
    auto t = sched.times();
    const int64_t n = sched.n;
    SolverRun run;
    run.solver = "euler";
    run.traj.times = t;
    run.traj.states.reserve(static_cast<size_t>(n));
    run.traj.states.push_back(x_init);
    run.traj.velocities.resize(static_cast<size_t>(n));
    run.traj.has_velocity.assign(static_cast<size_t>(n), 0);
    for (int64_t i = 0; i + 1 < n; ++i) {
        const Matrix& x = run.traj.states.back();
        Matrix v = field(x, t[static_cast<size_t>(i)]);
        ++run.nfe;
        run.traj.velocities[static_cast<size_t>(i)] = v;
        run.traj.has_velocity[static_cast<size_t>(i)] = 1;
        Matrix next = axpy(x, t[static_cast<size_t>(i + 1)] - t[static_cast<size_t>(i)], v);
        check_finite_state(next, "euler", i);
        run.traj.states.push_back(std::move(next));
    }
    return run;
}

SolverRun heun_solve(const BatchField& field, const TimeSchedule& sched, const Matrix& x_init,
                     bool corrector_on_final) {
    auto t = sched.times();
    const int64_t n = sched.n;
    SolverRun run;
    run.solver = "heun";
    run.traj.times = t;
    run.traj.states.push_back(x_init);
    run.traj.velocities.resize(static_cast<size_t>(n));
    run.traj.has_velocity.assign(static_cast<size_t>(n), 0);
    for (int64_t i = 0; i + 1 < n; ++i) {
        const Matrix& x = run.traj.states.back();
        double h = t[static_cast<size_t>(i + 1)] - t[static_cast<size_t>(i)];
        Matrix v1 = field(x, t[static_cast<size_t>(i)]);
        ++run.nfe;
        run.traj.velocities[static_cast<size_t>(i)] = v1;
        run.traj.has_velocity[static_cast<size_t>(i)] = 1;
        Matrix pred = axpy(x, h, v1);
        bool final_step = (i + 2 == n);
        Matrix next;
        if (final_step && !corrector_on_final) {
            next = std::move(pred);
        } else {
            Matrix v2 = field(pred, t[static_cast<size_t>(i + 1)]);
            ++run.nfe;
            next = x;
            for (int64_t k = 0; k < next.numel(); ++k)
                next.a[static_cast<size_t>(k)] +=
                    0.5 * h * (v1.a[static_cast<size_t>(k)] + v2.a[static_cast<size_t>(k)]);
        }
        check_finite_state(next, "heun", i);
        run.traj.states.push_back(std::move(next));
    }
    return run;
}

SolverRun ipndm_solve(const BatchField& field, const TimeSchedule& sched, const Matrix& x_init, int order,
                      bool afs, const BatchField* prior_velocity) {
    if (order < 1 || order > 4)
        throw ValidationError("ipndm: order must lie in {1,2,3,4}, got " + std::to_string(order));
    if (afs && !prior_velocity)
        throw ValidationError("ipndm: afs requested without an analytic prior velocity");
    static const double kCoef[4][4] = {
        {1.0, 0.0, 0.0, 0.0},
        {3.0 / 2.0, -1.0 / 2.0, 0.0, 0.0},
        {23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0, 0.0},
        {55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0},
    };
    auto t = sched.times();
    const int64_t n = sched.n;
    SolverRun run;
    run.solver = "ipndm";
    run.afs = afs;
    run.traj.times = t;
    run.traj.states.push_back(x_init);
    run.traj.velocities.resize(static_cast<size_t>(n));
    run.traj.has_velocity.assign(static_cast<size_t>(n), 0);
    std::vector<Matrix> buffer;  // most recent last
    for (int64_t i = 0; i + 1 < n; ++i) {
        const Matrix& x = run.traj.states.back();
        double h = t[static_cast<size_t>(i + 1)] - t[static_cast<size_t>(i)];
        Matrix v;
        if (i == 0 && afs) {
            v = (*prior_velocity)(x, t[0]);  // analytic: costs no NFE
        } else {
            v = field(x, t[static_cast<size_t>(i)]);
            ++run.nfe;
        }
        run.traj.velocities[static_cast<size_t>(i)] = v;
        run.traj.has_velocity[static_cast<size_t>(i)] = 1;
        int k = static_cast<int>(std::min<int64_t>(order, i + 1));
        Matrix next = x;
        if (k == 1) {
            for (int64_t m = 0; m < next.numel(); ++m)
                next.a[static_cast<size_t>(m)] += h * v.a[static_cast<size_t>(m)];
        } else {
            for (int64_t m = 0; m < next.numel(); ++m) {
                double acc = kCoef[k - 1][0] * v.a[static_cast<size_t>(m)];
                for (int j = 1; j < k; ++j)
                    acc += kCoef[k - 1][j] * buffer[buffer.size() - static_cast<size_t>(j)].a[static_cast<size_t>(m)];
                next.a[static_cast<size_t>(m)] += h * acc;
            }
        }
        check_finite_state(next, "ipndm", i);
        buffer.push_back(std::move(v));
        if (buffer.size() > 3) buffer.erase(buffer.begin());
        run.traj.states.push_back(std::move(next));
    }
    return run;
}

SolverRun rk45_solve(const BatchField& field, double t_begin, double t_end, const Matrix& x_init, double rtol,
                     double atol) {
    if (!(rtol > 0.0) || !(atol > 0.0)) throw ValidationError("rk45: tolerances must be positive");
    if (t_begin == t_end) throw ValidationError("rk45: empty integration interval");

    static const double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
    static const double a21 = 1.0 / 5;
    static const double a31 = 3.0 / 40, a32 = 9.0 / 40;
    static const double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    static const double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
    static const double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                        a65 = -5103.0 / 18656;
    static const double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
    static const double e1 = 35.0 / 384 - 5179.0 / 57600, e3 = 500.0 / 1113 - 7571.0 / 16695,
                        e4 = 125.0 / 192 - 393.0 / 640, e5 = -2187.0 / 6784 + 92097.0 / 339200,
                        e6 = 11.0 / 84 - 187.0 / 2100, e7 = -1.0 / 40;

    SolverRun run;
    run.solver = "rk45";
    const int64_t m = x_init.numel();
    Matrix x = x_init;
    double t = t_begin;
    double h = t_end - t_begin;  // try the whole span first
    run.traj.times.push_back(t);
    run.traj.states.push_back(x);
    run.traj.velocities.resize(1);
    run.traj.has_velocity.assign(1, 0);

    auto eval = [&](const Matrix& y, double tt) {
        ++run.nfe;
        return field(y, tt);
    };

    Matrix k1 = eval(x, t);
    bool have_k1 = true;
    const double min_h = 1e-14 * std::abs(t_end - t_begin);
    int64_t accepted = 0;
    while ((t_end > t_begin) ? (t < t_end) : (t > t_end)) {
        if (std::abs(t_end - t) <= min_h) break;  // landed within rounding of the endpoint
        if ((t_end > t_begin) ? (t + h > t_end) : (t + h < t_end)) h = t_end - t;
        if (std::abs(h) < min_h)
            throw NumericError("rk45: step size underflow at t=" + std::to_string(t) + " after " +
                               std::to_string(accepted) + " accepted steps");
        if (!have_k1) {
            k1 = eval(x, t);
            have_k1 = true;
        }
        Matrix y2 = axpy(x, h * a21, k1);
        Matrix k2 = eval(y2, t + c2 * h);
        Matrix y3 = x;
        for (int64_t i = 0; i < m; ++i)
            y3.a[static_cast<size_t>(i)] += h * (a31 * k1.a[static_cast<size_t>(i)] + a32 * k2.a[static_cast<size_t>(i)]);
        Matrix k3 = eval(y3, t + c3 * h);
        Matrix y4 = x;
        for (int64_t i = 0; i < m; ++i)
            y4.a[static_cast<size_t>(i)] += h * (a41 * k1.a[static_cast<size_t>(i)] + a42 * k2.a[static_cast<size_t>(i)] +
                                                 a43 * k3.a[static_cast<size_t>(i)]);
        Matrix k4 = eval(y4, t + c4 * h);
        Matrix y5 = x;
        for (int64_t i = 0; i < m; ++i)
            y5.a[static_cast<size_t>(i)] += h * (a51 * k1.a[static_cast<size_t>(i)] + a52 * k2.a[static_cast<size_t>(i)] +
                                                 a53 * k3.a[static_cast<size_t>(i)] + a54 * k4.a[static_cast<size_t>(i)]);
        Matrix k5 = eval(y5, t + c5 * h);
        Matrix y6 = x;
        for (int64_t i = 0; i < m; ++i)
            y6.a[static_cast<size_t>(i)] += h * (a61 * k1.a[static_cast<size_t>(i)] + a62 * k2.a[static_cast<size_t>(i)] +
                                                 a63 * k3.a[static_cast<size_t>(i)] + a64 * k4.a[static_cast<size_t>(i)] +
                                                 a65 * k5.a[static_cast<size_t>(i)]);
        Matrix k6 = eval(y6, t + h);
        Matrix ynew = x;
        for (int64_t i = 0; i < m; ++i)
            ynew.a[static_cast<size_t>(i)] += h * (b1 * k1.a[static_cast<size_t>(i)] + b3 * k3.a[static_cast<size_t>(i)] +
                                                   b4 * k4.a[static_cast<size_t>(i)] + b5 * k5.a[static_cast<size_t>(i)] +
                                                   b6 * k6.a[static_cast<size_t>(i)]);
        Matrix k7 = eval(ynew, t + h);  // FSAL stage
        double err = 0.0;
        for (int64_t i = 0; i < m; ++i) {
            double e = h * (e1 * k1.a[static_cast<size_t>(i)] + e3 * k3.a[static_cast<size_t>(i)] +
                            e4 * k4.a[static_cast<size_t>(i)] + e5 * k5.a[static_cast<size_t>(i)] +
                            e6 * k6.a[static_cast<size_t>(i)] + e7 * k7.a[static_cast<size_t>(i)]);
            double sc = atol + rtol * std::max(std::abs(x.a[static_cast<size_t>(i)]),
                                               std::abs(ynew.a[static_cast<size_t>(i)]));
            err += sqr(e / sc);
        }
        err = std::sqrt(err / static_cast<double>(m));
        if (err <= 1.0) {
            t += h;
            x = std::move(ynew);
            check_finite_state(x, "rk45", accepted);
            ++accepted;
            run.traj.times.push_back(t);
            run.traj.states.push_back(x);
            run.traj.velocities.back() = k1;  // velocity at the step start
            run.traj.has_velocity.back() = 1;
            run.traj.velocities.emplace_back();
            run.traj.has_velocity.push_back(0);
            k1 = std::move(k7);  // FSAL
            have_k1 = true;
        }
        double factor = err > 0.0 ? 0.9 * std::pow(err, -0.2) : 5.0;
        factor = std::clamp(factor, 0.2, 5.0);
        h *= factor;
    }
    return run;
}

Matrix prior_velocity_matrix(const FlowSpec& flow, const Matrix& x, double t) {
    double r = flow.ds(t) / flow.s(t);
    Matrix out = x;
    for (double& v : out.a) v *= r;
    return out;
}

TimeSchedule SamplerConfig::make_schedule(const FlowSpec& flow) const {
    TimeSchedule sch;
    sch.rho = rho;
    sch.t_min = std::max(flow.t_min, flow.family == FlowFamily::RectifiedFlow ? 1e-3 : flow.t_min);
    sch.t_max = flow.t_max;
    std::string kind = schedule;
    if (kind == "auto")
        kind = (flow.family == FlowFamily::LinearEDM || flow.family == FlowFamily::VE) ? "polynomial" : "uniform";
    sch.kind = kind == "polynomial" ? TimeSchedule::Kind::Polynomial : TimeSchedule::Kind::Uniform;

    int64_t intervals;
    if (solver == "euler") {
        intervals = nfe;
    } else if (solver == "heun") {
        if (nfe % 2 == 0)
            throw ValidationError("heun: NFE must be odd under the no-final-corrector convention, got " +
                                  std::to_string(nfe));
        intervals = (nfe + 1) / 2;
    } else if (solver == "ipndm") {
        intervals = nfe + (afs ? 1 : 0);
    } else if (solver == "rk45") {
        intervals = 2;  // placeholder grid; rk45 adapts internally
    } else {
        throw ValidationError("unknown solver '" + solver + "' (euler|heun|ipndm|rk45)");
    }
    if (intervals < 1) throw ValidationError("sampler: NFE budget too small for solver " + solver);
    sch.n = intervals + 1;
    return sch;
}

namespace {

SampleResult sample_impl(const Model& model, const SamplingWeights* weights, const SamplerConfig& cfg,
                         int64_t count, uint64_t seed) {
    if (count < 1) throw ValidationError("sample: count must be positive");
    const FlowSpec flow = model.flow;
    const int64_t dim = model.denoiser.data_dim;
    TimeSchedule sched = cfg.make_schedule(flow);

    Rng master(seed);
    std::vector<int64_t> codes;
    if (model.conditional()) {
        if (!weights) throw ValidationError("sample: conditional model needs sampling weights");
        codes = weights->sample_many(master, count);
    }

    // per-sample prior draws from derived seeds, independent of grouping
    Matrix init(count, dim);
    const double pstd = flow.prior_std();
    for (int64_t r = 0; r < count; ++r) {
        Rng rs(Rng::derive(seed, static_cast<uint64_t>(r)));
        for (int64_t j = 0; j < dim; ++j) init(r, j) = pstd * rs.normal();
    }

    SampleResult res;
    res.samples = Matrix(count, dim);
    res.codes = codes;
    res.seed = seed;

    // group rows by code so each group runs one batched solve
    std::map<int64_t, std::vector<int64_t>> groups;
    if (model.conditional())
        for (int64_t r = 0; r < count; ++r) groups[codes[static_cast<size_t>(r)]].push_back(r);
    else
        for (int64_t r = 0; r < count; ++r) groups[0].push_back(r);

    for (const auto& [code, rows] : groups) {
        std::vector<int64_t> digits;
        if (model.conditional()) digits = code_digits(code, model.denoiser.codebook);
        BatchField field = [&](const Matrix& x, double t) {
            return velocity_matrix(model.denoiser, flow, x, t, digits);
        };
        Matrix x0(static_cast<int64_t>(rows.size()), dim);
        for (size_t k = 0; k < rows.size(); ++k)
            std::copy_n(init.row(rows[k]).begin(), dim, x0.row(static_cast<int64_t>(k)).begin());

        Matrix terminal;
        int64_t nfe = 0;
        if (cfg.solver == "rk45") {
            terminal = Matrix(x0.rows, dim);
            for (int64_t k = 0; k < x0.rows; ++k) {
                Matrix one(1, dim);
                std::copy_n(x0.row(k).begin(), dim, one.a.begin());
                SolverRun run = rk45_solve(field, sched.t_max, sched.t_min, one, cfg.rtol, cfg.atol);
                std::copy_n(run.terminal().a.begin(), dim, terminal.row(k).begin());
                nfe = std::max(nfe, run.nfe);
            }
        } else {
            SolverRun run;
            if (cfg.solver == "euler") {
                run = euler_solve(field, sched, x0);
            } else if (cfg.solver == "heun") {
                run = heun_solve(field, sched, x0);
            } else {
                BatchField prior = [&](const Matrix& x, double t) { return prior_velocity_matrix(flow, x, t); };
                run = ipndm_solve(field, sched, x0, cfg.order, cfg.afs, &prior);
            }
            terminal = run.terminal();
            nfe = run.nfe;
        }
        res.nfe = std::max(res.nfe, nfe);
        for (size_t k = 0; k < rows.size(); ++k)
            std::copy_n(terminal.row(static_cast<int64_t>(k)).begin(), dim, res.samples.row(rows[k]).begin());
    }
    return res;
}

}  // namespace

SampleResult conditional_sample(const Model& model, const SamplingWeights& weights, const SamplerConfig& cfg,
                                int64_t count, uint64_t seed) {
    if (!model.conditional())
        throw ValidationError("conditional_sample: model is unconditional; use sample_model");
    return sample_impl(model, &weights, cfg, count, seed);
}

SampleResult sample_model(const Model& model, const SamplerConfig& cfg, int64_t count, uint64_t seed) {
    if (model.conditional())
        throw ValidationError("sample_model: conditional model needs weights; use conditional_sample");
    return sample_impl(model, nullptr, cfg, count, seed);
}

TrajectorySampleResult sample_trajectories(const Model& model, const SamplingWeights* weights,
                                           const TimeSchedule& sched, int64_t count, uint64_t seed) {
    if (count < 1) throw ValidationError("sample_trajectories: count must be positive");
    if (model.conditional() && !weights)
        throw ValidationError("sample_trajectories: conditional model needs sampling weights");
    const FlowSpec flow = model.flow;
    const int64_t dim = model.denoiser.data_dim;
    auto times = sched.times();

    Rng master(seed);
    std::vector<int64_t> codes;
    if (model.conditional()) codes = weights->sample_many(master, count);

    Matrix init(count, dim);
    const double pstd = flow.prior_std();
    for (int64_t r = 0; r < count; ++r) {
        Rng rs(Rng::derive(seed, static_cast<uint64_t>(r)));
        for (int64_t j = 0; j < dim; ++j) init(r, j) = pstd * rs.normal();
    }

    std::map<int64_t, std::vector<int64_t>> groups;
    for (int64_t r = 0; r < count; ++r) groups[model.conditional() ? codes[static_cast<size_t>(r)] : 0].push_back(r);

    TrajectorySampleResult res;
    res.codes = codes;
    res.traj.times = times;
    const int64_t n = sched.n;
    for (int64_t i = 0; i < n; ++i) {
        res.traj.states.emplace_back(count, dim);
        res.traj.velocities.emplace_back(count, dim);
    }
    res.traj.has_velocity.assign(static_cast<size_t>(n), 1);
    res.traj.has_velocity.back() = 0;

    for (const auto& [code, rows] : groups) {
        std::vector<int64_t> digits;
        if (model.conditional()) digits = code_digits(code, model.denoiser.codebook);
        BatchField field = [&](const Matrix& x, double t) {
            return velocity_matrix(model.denoiser, flow, x, t, digits);
        };
        Matrix x0(static_cast<int64_t>(rows.size()), dim);
        for (size_t k = 0; k < rows.size(); ++k)
            std::copy_n(init.row(rows[k]).begin(), dim, x0.row(static_cast<int64_t>(k)).begin());
        SolverRun run = euler_solve(field, sched, x0);
        for (int64_t i = 0; i < n; ++i)
            for (size_t k = 0; k < rows.size(); ++k) {
                std::copy_n(run.traj.states[static_cast<size_t>(i)].row(static_cast<int64_t>(k)).begin(), dim,
                            res.traj.states[static_cast<size_t>(i)].row(rows[k]).begin());
                if (run.traj.has_velocity[static_cast<size_t>(i)])
                    std::copy_n(run.traj.velocities[static_cast<size_t>(i)].row(static_cast<int64_t>(k)).begin(),
                                dim, res.traj.velocities[static_cast<size_t>(i)].row(rows[k]).begin());
            }
    }
    return res;
}

std::vector<double> sde_renoise_step(const DenoiserNet& den, const FlowSpec& flow, std::span<const double> x,
                                     double t, const std::vector<int64_t>& digits, Rng& rng) {
    flow.check_time(t);
    Matrix xm(1, static_cast<int64_t>(x.size()));
    for (size_t i = 0; i < x.size(); ++i) xm(0, static_cast<int64_t>(i)) = x[i] + t * rng.normal();
    Matrix d = denoise_matrix(den, flow, xm, t, digits);
    return d.a;
}

void save_trajectory_csv(const BatchTrajectory& traj, int64_t row, const std::string& path) {
    if (row < 0 || row >= traj.batch())
        throw ValidationError("trajectory csv: row " + std::to_string(row) + " outside batch of " +
                              std::to_string(traj.batch()));
    std::ofstream os(path);
    if (!os) throw ValidationError("trajectory csv: cannot open '" + path + "'");
    os.precision(17);
    os << "t";
    for (int64_t j = 0; j < traj.dim(); ++j) os << ",x" << j;
    os << "\n";
    for (size_t i = 0; i < traj.states.size(); ++i) {
        os << traj.times[i];
        for (int64_t j = 0; j < traj.dim(); ++j) os << "," << traj.states[i](row, j);
        os << "\n";
    }
}

}  // namespace flowlab
