#include "flowlab/metrics.hpp"

#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace flowlab {

std::vector<int64_t> min_cost_assignment(const Matrix& cost, double* total_cost) {
    if (cost.rows != cost.cols) throw ValidationError("assignment: cost matrix must be square");
    const int64_t n = cost.rows;
    const double inf = std::numeric_limits<double>::infinity();
    // potentials formulation over 1-based arrays
    std::vector<double> u(static_cast<size_t>(n + 1), 0.0), v(static_cast<size_t>(n + 1), 0.0);
    std::vector<int64_t> p(static_cast<size_t>(n + 1), 0), way(static_cast<size_t>(n + 1), 0);
    for (int64_t i = 1; i <= n; ++i) {
        p[0] = i;
        int64_t j0 = 0;
        std::vector<double> minv(static_cast<size_t>(n + 1), inf);
        std::vector<char> used(static_cast<size_t>(n + 1), false);
        do {
            used[static_cast<size_t>(j0)] = true;
            int64_t i0 = p[static_cast<size_t>(j0)], j1 = 0;
            double delta = inf;
            for (int64_t j = 1; j <= n; ++j)
                if (!used[static_cast<size_t>(j)]) {
                    double cur = cost(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
                    if (cur < minv[static_cast<size_t>(j)]) {
                        minv[static_cast<size_t>(j)] = cur;
                        way[static_cast<size_t>(j)] = j0;
                    }
                    if (minv[static_cast<size_t>(j)] < delta) {
                        delta = minv[static_cast<size_t>(j)];
                        j1 = j;
                    }
                }
            for (int64_t j = 0; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            int64_t j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    std::vector<int64_t> row_to_col(static_cast<size_t>(n), -1);
    double total = 0.0;
    for (int64_t j = 1; j <= n; ++j)
        if (p[static_cast<size_t>(j)]) {
            row_to_col[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
            total += cost(p[static_cast<size_t>(j)] - 1, j - 1);
        }
    if (total_cost) *total_cost = total;
    return row_to_col;
}

double wasserstein2(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows)
        throw ValidationError("wasserstein2: exact mode needs equal sizes, got " + std::to_string(a.rows) +
                              " vs " + std::to_string(b.rows));
    if (a.cols != b.cols) throw ValidationError("wasserstein2: dimensionality mismatch");
    if (a.rows < 1 || a.rows > 1024)
        throw ValidationError("wasserstein2: exact mode supports 1..1024 points, got " + std::to_string(a.rows));
    const int64_t n = a.rows;
    Matrix cost(n, n);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) cost(i, j) = sq_dist(a.row(i), b.row(j));
    double total = 0.0;
    min_cost_assignment(cost, &total);
    return std::sqrt(total / static_cast<double>(n));
}

CurvatureReport curvature(const BatchTrajectory& traj) {
    const int64_t n = traj.grid_points();
    if (n < 3) throw ValidationError("curvature: need at least 3 grid points, got " + std::to_string(n));
    const double t0 = traj.times.front(), t1 = traj.times.back();
    if (t0 == t1) throw ValidationError("curvature: degenerate time span");
    const int64_t b = traj.batch(), dim = traj.dim();

    CurvatureReport rep;
    rep.per_trajectory.assign(static_cast<size_t>(b), 0.0);
    std::vector<int64_t> counted(static_cast<size_t>(b), 0);
    for (int64_t i = 1; i + 1 < n; ++i) {
        if (!traj.has_velocity[static_cast<size_t>(i)]) continue;
        const Matrix& v = traj.velocities[static_cast<size_t>(i)];
        for (int64_t r = 0; r < b; ++r) {
            double dev = 0.0;
            for (int64_t j = 0; j < dim; ++j) {
                double chord = (traj.states.back()(r, j) - traj.states.front()(r, j)) / (t1 - t0);
                dev += sqr(v(r, j) - chord);
            }
            rep.per_trajectory[static_cast<size_t>(r)] += dev;
            counted[static_cast<size_t>(r)] += 1;
        }
    }
    for (int64_t r = 0; r < b; ++r) {
        if (counted[static_cast<size_t>(r)] == 0)
            throw ValidationError("curvature: no interior velocity records");
        rep.per_trajectory[static_cast<size_t>(r)] /= static_cast<double>(counted[static_cast<size_t>(r)]);
        rep.mean += rep.per_trajectory[static_cast<size_t>(r)];
    }
    rep.mean /= static_cast<double>(b);
    return rep;
}

CurvatureReport curvature(const SolverRun& run) {
    CurvatureReport rep = curvature(run.traj);
    rep.solver = run.solver;
    rep.nfe = run.nfe;
    return rep;
}

ProfileReport l_cfm_profile_field(const BatchVelocityFn& field, const CodebookConfig& field_codebook,
                                  const FlowSpec& flow, const std::string& weighting, const FiniteDataset& data,
                                  const std::vector<int64_t>* codes, const std::vector<double>& grid,
                                  const TimeDistribution& tdist, int64_t samples_per_time, uint64_t seed) {
    if (samples_per_time < 1000)
        throw ValidationError("l_cfm_profile: needs at least 1e3 samples per time point");
    data.validate();
    if (field_codebook.enabled() && !codes)
        throw ValidationError("l_cfm_profile: conditional net needs dataset codes");
    const int64_t dim = data.dim;
    const int64_t d_ch = field_codebook.channels;

    ProfileReport rep;
    rep.times = grid;
    Rng rng(seed);
    for (double tau : grid) {
        flow.check_time(tau);
        double at = flow.a(tau), s = flow.s(tau), dat = flow.da(tau), dst = flow.ds(tau);
        double sum = 0.0, sumsq = 0.0;
        const int64_t chunk = 1024;
        int64_t doneN = 0;
        while (doneN < samples_per_time) {
            int64_t nb = std::min(chunk, samples_per_time - doneN);
            Matrix xc(nb, dim), vt(nb, dim), dc(field_codebook.enabled() ? nb : 0, d_ch);
            for (int64_t r = 0; r < nb; ++r) {
                int64_t i = rng.uniform_int(data.size());
                auto p = data.points.row(i);
                for (int64_t j = 0; j < dim; ++j) {
                    double zj = rng.normal();
                    xc(r, j) = at * p[static_cast<size_t>(j)] + s * zj;
                    vt(r, j) = dat * p[static_cast<size_t>(j)] + dst * zj;
                }
                if (field_codebook.enabled()) {
                    auto dg = code_digits((*codes)[static_cast<size_t>(i)], field_codebook);
                    for (int64_t j = 0; j < d_ch; ++j) dc(r, j) = static_cast<double>(dg[static_cast<size_t>(j)]);
                }
            }
            std::vector<double> tc(static_cast<size_t>(nb), tau);
            Matrix vn = field(xc, tc, field_codebook.enabled() ? &dc : nullptr);
            for (int64_t r = 0; r < nb; ++r) {
                double e = 0.0;
                for (int64_t j = 0; j < dim; ++j) e += sqr(vt(r, j) - vn(r, j));
                sum += e;
                sumsq += e * e;
            }
            doneN += nb;
        }
        double n = static_cast<double>(samples_per_time);
        double mean_sq = sum / n;
        double var = std::max(0.0, sumsq / n - mean_sq * mean_sq);
        rep.l_values.push_back(std::sqrt(mean_sq));
        rep.se_sq.push_back(std::sqrt(var / n));
    }
    // trapezoid of p(t) w_t l(t)^2, matching the training-side expectation
    for (size_t k = 0; k + 1 < grid.size(); ++k) {
        double ta = grid[k], tb = grid[k + 1];
        double fa = tdist.density(ta) * weight_velocity(flow, weighting, ta) * sqr(rep.l_values[k]);
        double fb = tdist.density(tb) * weight_velocity(flow, weighting, tb) * sqr(rep.l_values[k + 1]);
        rep.quadrature_l_cfm += 0.5 * (fa + fb) * (tb - ta);
    }
    return rep;
}

ProfileReport l_cfm_profile(const Model& model, const FiniteDataset& data, const std::vector<double>& grid,
                            const TimeDistribution& tdist, int64_t samples_per_time, uint64_t seed) {
    BatchVelocityFn field = [&model](const Matrix& x_t, const std::vector<double>& t, const Matrix* digits) {
        return batch_velocity(model.denoiser, model.flow, x_t, t, digits);
    };
    if (model.conditional()) {
        auto codes = dataset_codes(model.encoder, data);
        return l_cfm_profile_field(field, model.denoiser.codebook, model.flow, model.weighting, data, &codes,
                                   grid, tdist, samples_per_time, seed);
    }
    return l_cfm_profile_field(field, model.denoiser.codebook, model.flow, model.weighting, data, nullptr, grid,
                               tdist, samples_per_time, seed);
}

namespace {

struct ClassDraws {
    // draw |rows| conditional samples of X_t for one code slice
    static Matrix gt(const FiniteDataset& data, const std::vector<int64_t>& slice, const FlowSpec& flow, double t,
                     int64_t count, Rng& rng) {
        Matrix out(count, data.dim);
        double at = flow.a(t), s = flow.s(t);
        for (int64_t r = 0; r < count; ++r) {
            int64_t pick = slice[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(slice.size())))];
            auto p = data.points.row(pick);
            for (int64_t j = 0; j < data.dim; ++j) out(r, j) = at * p[static_cast<size_t>(j)] + s * rng.normal();
        }
        return out;
    }
};

Matrix perturb(const Matrix& x, double eps, Rng& rng) {
    Matrix out = x;
    for (double& v : out.a) v += eps * rng.normal();
    return out;
}

}  // namespace

BoundCheckReport check_theorem_bound(const Model& model, const FiniteDataset& data, double t, double dt,
                                     const BoundCheckConfig& cfg, uint64_t seed) {
    BoundCheckReport rep;
    rep.t = t;
    rep.dt = dt;
    try {
        if (cfg.per_condition < 32)
            throw ValidationError("bound check: per-condition sample size must be >= 32");
        model.flow.check_time(t);
        model.flow.check_time(t - dt);
        if (!(dt > 0.0)) throw ValidationError("bound check: dt must be positive");
        data.validate();

        Rng rng(seed);
        const int64_t dim = data.dim;
        const FlowSpec& flow = model.flow;

        // code slices (a single implicit class when unconditional)
        std::vector<int64_t> codes(static_cast<size_t>(data.size()), 0);
        if (model.conditional()) codes = dataset_codes(model.encoder, data);
        std::map<int64_t, std::vector<int64_t>> slices;
        for (int64_t i = 0; i < data.size(); ++i) slices[codes[static_cast<size_t>(i)]].push_back(i);

        // per-condition Wasserstein terms at time t, with matched null draws
        double cond_sq = 0.0, null_sq = 0.0;
        for (const auto& [code, slice] : slices) {
            double q = static_cast<double>(slice.size()) / static_cast<double>(data.size());
            Matrix base = ClassDraws::gt(data, slice, flow, t, cfg.per_condition, rng);
            Matrix sim = perturb(base, cfg.perturbation, rng);
            Matrix ref = ClassDraws::gt(data, slice, flow, t, cfg.per_condition, rng);
            double w = wasserstein2(sim, ref);
            cond_sq += q * w * w;
            Matrix nullA = ClassDraws::gt(data, slice, flow, t, cfg.per_condition, rng);
            Matrix nullB = ClassDraws::gt(data, slice, flow, t, cfg.per_condition, rng);
            double wn = wasserstein2(nullA, nullB);
            null_sq += q * wn * wn;
        }
        rep.cond_w_t = std::sqrt(cond_sq);
        double null_cond = std::sqrt(null_sq);

        // mixture LHS: advance perturbed conditional samples one Euler step
        std::vector<int64_t> all(static_cast<size_t>(data.size()));
        for (int64_t i = 0; i < data.size(); ++i) all[static_cast<size_t>(i)] = i;
        Matrix mix_x(cfg.mixture, dim);
        Matrix mix_digits(model.conditional() ? cfg.mixture : 0, model.denoiser.codebook.channels);
        {
            double at = flow.a(t), s = flow.s(t);
            for (int64_t r = 0; r < cfg.mixture; ++r) {
                int64_t i = rng.uniform_int(data.size());
                auto p = data.points.row(i);
                for (int64_t j = 0; j < dim; ++j)
                    mix_x(r, j) = at * p[static_cast<size_t>(j)] + s * rng.normal() +
                                  cfg.perturbation * rng.normal();
                if (model.conditional()) {
                    auto dg = code_digits(codes[static_cast<size_t>(i)], model.denoiser.codebook);
                    for (int64_t j = 0; j < model.denoiser.codebook.channels; ++j)
                        mix_digits(r, j) = static_cast<double>(dg[static_cast<size_t>(j)]);
                }
            }
        }
        std::vector<double> t_vec(static_cast<size_t>(cfg.mixture), t);
        Matrix v = batch_velocity(model.denoiser, flow, mix_x, t_vec, model.conditional() ? &mix_digits : nullptr);
        Matrix advanced = mix_x;
        for (int64_t i = 0; i < advanced.numel(); ++i)
            advanced.a[static_cast<size_t>(i)] -= dt * v.a[static_cast<size_t>(i)];

        Matrix ref_next = ClassDraws::gt(data, all, flow, t - dt, cfg.mixture, rng);
        rep.lhs = wasserstein2(advanced, ref_next);
        Matrix nullA = ClassDraws::gt(data, all, flow, t - dt, cfg.mixture, rng);
        Matrix nullB = ClassDraws::gt(data, all, flow, t - dt, cfg.mixture, rng);
        double null_lhs = wasserstein2(nullA, nullB);

        // l_CFM(t) via MC
        {
            double sum = 0.0, sumsq = 0.0;
            const int64_t chunk = 1024;
            int64_t doneN = 0;
            while (doneN < cfg.lcfm_samples) {
                int64_t nb = std::min(chunk, cfg.lcfm_samples - doneN);
                Matrix xs(nb, dim), vt(nb, dim), dg(model.conditional() ? nb : 0, model.denoiser.codebook.channels);
                double at = flow.a(t), s = flow.s(t), dat = flow.da(t), dst = flow.ds(t);
                for (int64_t r = 0; r < nb; ++r) {
                    int64_t i = rng.uniform_int(data.size());
                    auto p = data.points.row(i);
                    for (int64_t j = 0; j < dim; ++j) {
                        double zj = rng.normal();
                        xs(r, j) = at * p[static_cast<size_t>(j)] + s * zj;
                        vt(r, j) = dat * p[static_cast<size_t>(j)] + dst * zj;
                    }
                    if (model.conditional()) {
                        auto dgs = code_digits(codes[static_cast<size_t>(i)], model.denoiser.codebook);
                        for (int64_t j = 0; j < model.denoiser.codebook.channels; ++j)
                            dg(r, j) = static_cast<double>(dgs[static_cast<size_t>(j)]);
                    }
                }
                std::vector<double> ts(static_cast<size_t>(nb), t);
                Matrix vn = batch_velocity(model.denoiser, flow, xs, ts, model.conditional() ? &dg : nullptr);
                for (int64_t r = 0; r < nb; ++r) {
                    double e = 0.0;
                    for (int64_t j = 0; j < dim; ++j) e += sqr(vt(r, j) - vn(r, j));
                    sum += e;
                    sumsq += e * e;
                }
                doneN += nb;
            }
            double n = static_cast<double>(cfg.lcfm_samples);
            double mean_sq = sum / n;
            double var = std::max(0.0, sumsq / n - mean_sq * mean_sq);
            rep.l_cfm_t = std::sqrt(mean_sq);
            double se_sq = std::sqrt(var / n);
            rep.l_cfm_se = rep.l_cfm_t > 0 ? se_sq / (2.0 * rep.l_cfm_t) : se_sq;
        }

        // Lipschitz probe: max ratio of the one-step map over random pairs
        {
            double lmax = 0.0;
            const int64_t chunk = 1024;
            int64_t doneN = 0;
            while (doneN < cfg.probe_pairs) {
                int64_t nb = std::min(chunk, cfg.probe_pairs - doneN);
                Matrix xa(nb, dim), xb(nb, dim), dg(model.conditional() ? nb : 0, model.denoiser.codebook.channels);
                double at = flow.a(t), s = flow.s(t);
                for (int64_t r = 0; r < nb; ++r) {
                    int64_t i = rng.uniform_int(data.size());
                    auto p = data.points.row(i);
                    for (int64_t j = 0; j < dim; ++j) {
                        double base = at * p[static_cast<size_t>(j)] + s * rng.normal();
                        xa(r, j) = base + cfg.perturbation * rng.normal();
                        xb(r, j) = base + cfg.perturbation * rng.normal();
                    }
                    if (model.conditional()) {
                        auto dgs = code_digits(codes[static_cast<size_t>(i)], model.denoiser.codebook);
                        for (int64_t j = 0; j < model.denoiser.codebook.channels; ++j)
                            dg(r, j) = static_cast<double>(dgs[static_cast<size_t>(j)]);
                    }
                }
                std::vector<double> ts(static_cast<size_t>(nb), t);
                Matrix va = batch_velocity(model.denoiser, flow, xa, ts, model.conditional() ? &dg : nullptr);
                Matrix vb = batch_velocity(model.denoiser, flow, xb, ts, model.conditional() ? &dg : nullptr);
                for (int64_t r = 0; r < nb; ++r) {
                    double num = 0.0, den = 0.0;
                    for (int64_t j = 0; j < dim; ++j) {
                        double da = (xa(r, j) - dt * va(r, j)) - (xb(r, j) - dt * vb(r, j));
                        num += da * da;
                        den += sqr(xa(r, j) - xb(r, j));
                    }
                    if (den > 1e-20) lmax = std::max(lmax, std::sqrt(num / den));
                }
                doneN += nb;
            }
            rep.lipschitz_hat = lmax;
        }

        rep.rhs = dt * rep.l_cfm_t + rep.lipschitz_hat * rep.cond_w_t;
        rep.est_error = null_lhs + rep.lipschitz_hat * null_cond + dt * rep.l_cfm_se;
        rep.pass = rep.lhs <= rep.rhs + 3.0 * rep.est_error;
        rep.valid = true;
    } catch (const std::exception&) {
        rep.valid = false;  // marked invalid, not failed
    }
    return rep;
}

void append_metric_row(const std::string& path, const MetricRow& row) {
    FILE* f = std::fopen(path.c_str(), "a");
    if (!f) throw ValidationError("metrics: cannot open '" + path + "' for appending");
    flock(fileno(f), LOCK_EX);
    std::fseek(f, 0, SEEK_END);
    if (std::ftell(f) == 0) std::fprintf(f, "metric,config_hash,value,error,seed\n");
    std::fprintf(f, "%s,%s,%.17g,%.17g,%llu\n", row.name.c_str(), row.config_hash.c_str(), row.value, row.error,
                 static_cast<unsigned long long>(row.seed));
    std::fflush(f);
    flock(fileno(f), LOCK_UN);
    std::fclose(f);
}

std::vector<MetricRow> read_metric_rows(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("metrics: cannot open '" + path + "'");
    std::vector<MetricRow> rows;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (lineno == 1 && line.rfind("metric,", 0) == 0) continue;
        std::istringstream ls(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (cells.size() != 5)
            throw ValidationError("metrics: malformed row at line " + std::to_string(lineno) + " of '" + path +
                                  "'");
        MetricRow r;
        r.name = cells[0];
        r.config_hash = cells[1];
        r.value = std::stod(cells[2]);
        r.error = std::stod(cells[3]);
        r.seed = std::stoull(cells[4]);
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace flowlab
