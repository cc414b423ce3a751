#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "flowlab/metrics.hpp"

using namespace flowlab;

namespace {

Matrix random_points(int64_t n, int64_t dim, uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Matrix m(n, dim);
    for (double& v : m.a) v = scale * rng.normal();
    return m;
}

// brute-force exact W2 by enumerating all permutations (n <= 8)
double w2_bruteforce(const Matrix& a, const Matrix& b) {
    std::vector<int64_t> perm(static_cast<size_t>(a.rows));
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double cost = 0.0;
        for (int64_t i = 0; i < a.rows; ++i) cost += sq_dist(a.row(i), b.row(perm[static_cast<size_t>(i)]));
        best = std::min(best, cost);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return std::sqrt(best / static_cast<double>(a.rows));
}

FiniteDataset ring_dataset(int64_t n, uint64_t seed) {
    Rng rng(seed);
    FiniteDataset ds;
    ds.dim = 2;
    ds.points = Matrix(n, 2);
    for (int64_t i = 0; i < n; ++i) {
        int64_t mode = rng.uniform_int(8);
        double th = 2.0 * 3.14159265358979323846 * static_cast<double>(mode) / 8.0;
        ds.points(i, 0) = 2.0 * std::cos(th) + 0.1 * rng.normal();
        ds.points(i, 1) = 2.0 * std::sin(th) + 0.1 * rng.normal();
    }
    return ds;
}

}  // namespace

TEST_CASE("wasserstein2 basics") {
    Matrix a = random_points(16, 2, 3);
    CHECK(wasserstein2(a, a) == doctest::Approx(0.0).epsilon(1e-12));

    Matrix p(1, 2), q(1, 2);
    p(0, 0) = 0.0;
    p(0, 1) = 0.0;
    q(0, 0) = 3.0;
    q(0, 1) = 4.0;
    CHECK(wasserstein2(p, q) == doctest::Approx(5.0));

    Matrix b = random_points(15, 2, 4);
    CHECK_THROWS_AS(wasserstein2(a, b), ValidationError);
    Matrix c = random_points(16, 3, 5);
    CHECK_THROWS_AS(wasserstein2(a, c), ValidationError);
}

TEST_CASE("matching equals permutation enumeration for n <= 7 (50 instances)") {
    Rng rng(11);
    for (int inst = 0; inst < 50; ++inst) {
        int64_t n = 2 + rng.uniform_int(6);  // 2..7
        Matrix a = random_points(n, 2, 100 + static_cast<uint64_t>(inst));
        Matrix b = random_points(n, 2, 200 + static_cast<uint64_t>(inst));
        CHECK(wasserstein2(a, b) == doctest::Approx(w2_bruteforce(a, b)).epsilon(1e-9));
    }
}

TEST_CASE("matching result lower-bounds every random permutation at n = 32") {
    Matrix a = random_points(32, 2, 7);
    Matrix b = random_points(32, 2, 8);
    double w = wasserstein2(a, b);
    Rng rng(9);
    std::vector<int64_t> perm(32);
    std::iota(perm.begin(), perm.end(), 0);
    for (int trial = 0; trial < 200; ++trial) {
        for (int64_t i = 31; i > 0; --i) std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(rng.uniform_int(i + 1))]);
        double cost = 0.0;
        for (int64_t i = 0; i < 32; ++i) cost += sq_dist(a.row(i), b.row(perm[static_cast<size_t>(i)]));
        CHECK(w <= std::sqrt(cost / 32.0) + 1e-12);
    }
}

TEST_CASE("metric axioms: symmetry, identity, triangle inequality on random triples") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Matrix a = random_points(12, 2, 300 + seed);
        Matrix b = random_points(12, 2, 400 + seed);
        Matrix c = random_points(12, 2, 500 + seed);
        double ab = wasserstein2(a, b), ba = wasserstein2(b, a);
        CHECK(ab == doctest::Approx(ba).epsilon(1e-12));  // symmetry
        double ac = wasserstein2(a, c), cb = wasserstein2(c, b);
        CHECK(ab <= ac + cb + 1e-9);  // triangle
    }
}

TEST_CASE("curvature: straight trajectories have zero curvature") {
    Matrix c(2, 2);
    c(0, 0) = 1.0;
    c(0, 1) = -2.0;
    c(1, 0) = 0.5;
    c(1, 1) = 0.0;
    BatchField constant = [&](const Matrix&, double) { return c; };
    TimeSchedule s;
    s.kind = TimeSchedule::Kind::Uniform;
    s.n = 9;
    s.t_min = 0.0;
    s.t_max = 1.0;
    Matrix x0(2, 2, 0.3);
    SolverRun run = euler_solve(constant, s, x0);
    CurvatureReport rep = curvature(run);
    CHECK(rep.mean == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(rep.solver == "euler");
}

TEST_CASE("curvature of a circular arc approaches the analytic arc-vs-chord value") {
    // Z_t = (cos t, sin t) on [0, 1]; velocity (-sin t, cos t)
    auto make_traj = [](int64_t n) {
        BatchTrajectory traj;
        for (int64_t i = 0; i < n; ++i) {
            double t = static_cast<double>(i) / static_cast<double>(n - 1);
            traj.times.push_back(1.0 - t);  // decreasing times, span 1 -> 0
            Matrix st(1, 2);
            double u = 1.0 - t;
            st(0, 0) = std::cos(u);
            st(0, 1) = std::sin(u);
            traj.states.push_back(st);
            Matrix v(1, 2);
            v(0, 0) = -std::sin(u);
            v(0, 1) = std::cos(u);
            traj.velocities.push_back(v);
            traj.has_velocity.push_back(1);
        }
        return traj;
    };
    // analytic: mean over u of ||v(u) - chord||^2 with chord = (Z(0)-Z(1))/(0-1)
    double cx = (std::cos(0.0) - std::cos(1.0)) / (0.0 - 1.0);
    double cy = (std::sin(0.0) - std::sin(1.0)) / (0.0 - 1.0);
    auto dev = [&](double u) { return sqr(-std::sin(u) - cx) + sqr(std::cos(u) - cy); };
    // fine Riemann reference over the interior of the grid refines toward the integral
    double coarse = curvature(make_traj(9)).mean;
    double fine = curvature(make_traj(129)).mean;
    double integral = 0.0;
    int64_t nq = 200000;
    for (int64_t k = 0; k < nq; ++k) integral += dev((static_cast<double>(k) + 0.5) / nq) / nq;
    CHECK(coarse > 0.0);
    CHECK(std::abs(fine - integral) < std::abs(coarse - integral) + 1e-12);
    CHECK(fine == doctest::Approx(integral).epsilon(0.02));
}

TEST_CASE("curvature is invariant to interior re-gridding that keeps states and velocities") {
    auto base = [] {
        BatchTrajectory traj;
        Rng rng(21);
        for (int i = 0; i < 7; ++i) {
            traj.times.push_back(1.0 - 0.15 * i);
            Matrix st(1, 2);
            st(0, 0) = rng.normal();
            st(0, 1) = rng.normal();
            traj.states.push_back(st);
            Matrix v(1, 2);
            v(0, 0) = rng.normal();
            v(0, 1) = rng.normal();
            traj.velocities.push_back(v);
            traj.has_velocity.push_back(1);
        }
        return traj;
    }();
    BatchTrajectory regridded = base;
    // move interior time stamps arbitrarily; endpoints, states, velocities fixed
    regridded.times[2] = 0.83;
    regridded.times[4] = 0.31;
    CHECK(curvature(base).mean == doctest::Approx(curvature(regridded).mean).epsilon(1e-15));

    BatchTrajectory degenerate = base;
    for (auto& t : degenerate.times) t = 0.5;
    CHECK_THROWS_AS(curvature(degenerate), ValidationError);
}

TEST_CASE("l_cfm_profile: oracle field gives zero on a one-point dataset") {
    FiniteDataset ds;
    ds.dim = 2;
    ds.points = Matrix(1, 2);
    ds.points(0, 0) = 0.4;
    ds.points(0, 1) = -1.0;
    FlowSpec rf = FlowSpec::rectified(0.001, 1.0);
    BatchVelocityFn oracle_field = [&](const Matrix& x_t, const std::vector<double>& t, const Matrix*) {
        Matrix out(x_t.rows, x_t.cols);
        for (int64_t r = 0; r < x_t.rows; ++r)
            oracle_velocity(rf, ds, x_t.row(r), t[static_cast<size_t>(r)], out.row(r));
        return out;
    };
    TimeDistribution tdist{TimeDistribution::Kind::Uniform, 0.001, 1.0, -1.2, 1.2};
    ProfileReport rep = l_cfm_profile_field(oracle_field, CodebookConfig{2, 0}, rf, "uniform", ds, nullptr,
                                            {0.1, 0.5, 0.9}, tdist, 2000, 3);
    for (double l : rep.l_values) CHECK(l == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("l_cfm_profile: zero net on RF flow is time-independent E||X1 - X0||^2") {
    FiniteDataset ds = ring_dataset(256, 5);
    TrainConfig cfg;
    cfg.flow = "rf";
    cfg.hidden = 16;
    cfg.hidden_layers = 1;
    cfg.emb_dim = 8;
    cfg.seed = 9;
    Rng rng(cfg.seed);
    Model model = build_model(cfg, rng);  // zero-initialized head: v = 0 everywhere
    TimeDistribution tdist{TimeDistribution::Kind::Uniform, 0.001, 1.0, -1.2, 1.2};
    ProfileReport rep = l_cfm_profile(model, ds, {0.2, 0.5, 0.8}, tdist, 20000, 7);
    // E||X1 - X0||^2 = dim + E||x0||^2 for standard normal X1 independent of data
    double e2 = 0.0;
    for (int64_t i = 0; i < ds.size(); ++i) e2 += sq_dist(ds.points.row(i), std::vector<double>{0.0, 0.0});
    e2 = 2.0 + e2 / static_cast<double>(ds.size());
    for (size_t k = 0; k < rep.l_values.size(); ++k)
        CHECK(sqr(rep.l_values[k]) == doctest::Approx(e2).epsilon(0.05));
}

TEST_CASE("profile quadrature reconciles with the direct MC L_CFM estimate") {
    FiniteDataset ds = ring_dataset(128, 15);
    TrainConfig cfg;
    cfg.flow = "rf";
    cfg.hidden = 32;
    cfg.hidden_layers = 2;
    cfg.emb_dim = 16;
    cfg.seed = 17;
    cfg.steps = 150;
    cfg.batch = 64;
    TrainState st = init_training(cfg);
    while (st.step < cfg.steps) train_step(st, ds);

    TimeDistribution tdist = cfg.time_dist();
    std::vector<double> grid;
    for (int k = 0; k <= 48; ++k) grid.push_back(0.001 + (1.0 - 0.001) * k / 48.0);
    ProfileReport prof = l_cfm_profile(st.ema, ds, grid, tdist, 4000, 21);
    Decomposition dec = decompose_loss(st.ema, ds, tdist, McConfig{100000, 23});
    // quadrature + MC errors: generous 3-sigma-ish band
    double tol = 3.0 * (dec.se_cfm + 0.02 * dec.l_cfm) + 0.02;
    CHECK(std::abs(prof.quadrature_l_cfm - dec.l_cfm) < tol);
}

TEST_CASE("bound check: untrained model still satisfies the upper bound") {
    FiniteDataset ds = ring_dataset(96, 25);
    TrainConfig cfg;
    cfg.flow = "rf";
    cfg.hidden = 32;
    cfg.hidden_layers = 2;
    cfg.emb_dim = 16;
    cfg.seed = 29;
    Rng rng(cfg.seed);
    Model model = build_model(cfg, rng);
    BoundCheckConfig bc;
    bc.per_condition = 32;
    bc.mixture = 64;
    bc.probe_pairs = 2000;
    bc.lcfm_samples = 2000;
    int passes = 0, trials = 6;
    Rng trng(31);
    for (int k = 0; k < trials; ++k) {
        double t = 0.2 + 0.7 * trng.uniform();
        double dt = 0.05 + 0.5 * (t - 0.001) * trng.uniform();
        BoundCheckReport rep = check_theorem_bound(model, ds, t, dt, bc, 1000 + static_cast<uint64_t>(k));
        REQUIRE(rep.valid);
        CHECK(rep.lipschitz_hat > 0.0);
        passes += rep.pass;
    }
    CHECK(passes == trials);
}

TEST_CASE("bound check marks impossible configurations invalid") {
    FiniteDataset ds = ring_dataset(64, 33);
    TrainConfig cfg;
    cfg.flow = "rf";
    cfg.hidden = 16;
    cfg.hidden_layers = 1;
    cfg.emb_dim = 8;
    cfg.seed = 35;
    Rng rng(cfg.seed);
    Model model = build_model(cfg, rng);
    BoundCheckConfig bc;
    BoundCheckReport rep = check_theorem_bound(model, ds, 0.5, -0.1, bc, 7);
    CHECK(!rep.valid);
    BoundCheckReport rep2 = check_theorem_bound(model, ds, 0.5, 0.9, bc, 7);  // t - dt < 0
    CHECK(!rep2.valid);
}

TEST_CASE("metric rows round trip through the results table") {
    std::string path = "metrics_test.csv";
    std::remove(path.c_str());
    append_metric_row(path, {"w2|solver=euler|nfe=4", "deadbeef", 1.25, 0.05, 42});
    append_metric_row(path, {"curvature|model=cond", "deadbeef", 0.33, 0.0, 43});
    auto rows = read_metric_rows(path);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].name == "w2|solver=euler|nfe=4");
    CHECK(rows[0].value == 1.25);
    CHECK(rows[1].seed == 43);
    std::remove(path.c_str());
    CHECK_THROWS_AS(read_metric_rows("missing.csv"), ValidationError);
}
