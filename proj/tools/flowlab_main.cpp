// flowlab - toy flow-matching lab with quantized adaptive conditions
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "flowlab/editing.hpp"
#include "flowlab/experiment.hpp"
#include "flowlab/plots.hpp"

using namespace flowlab;

namespace {

ExperimentConfig load_experiment_config(const std::string& path, const std::vector<std::string>& overrides) {
    KvMap kv = path.empty() ? KvMap{} : kv_load_file(path);
    for (const auto& ov : overrides) {
        size_t eq = ov.find('=');
        if (eq == std::string::npos)
            throw ValidationError("override '" + ov + "' is not key=value");
        kv[ov.substr(0, eq)] = ov.substr(eq + 1);
    }
    return ExperimentConfig::from_kv(kv);
}

SamplingWeights sampling_weights_for(const TrainState& st, const std::string& collection,
                                     const std::string& data_path) {
    if (!st.live.conditional()) return st.weights;
    if (collection == "online") return st.weights;
    if (collection != "offline") throw ValidationError("collection must be online|offline");
    if (data_path.empty()) throw ValidationError("offline collection needs --data <training points>");
    FiniteDataset ds = FiniteDataset::load(data_path);
    return collect_weights_offline(st.ema.encoder, ds, st.cfg.ema_decay);
}

int run(int argc, char** argv) {
    CLI::App app{"flow-matching toy lab: quantized adaptive conditions, solvers, metrics, editing"};
    app.require_subcommand(1);

    // ---- generate ----
    auto* gen = app.add_subcommand("generate", "emit a toy dataset as a plain-text point table");
    std::string g_config, g_out = "points.txt";
    std::vector<std::string> g_set;
    gen->add_option("--config", g_config, "experiment config file (data.* keys used)");
    gen->add_option("--set", g_set, "override config entries, key=value");
    gen->add_option("--out", g_out, "output point table");
    gen->callback([&] {
        KvMap kv = g_config.empty() ? KvMap{} : kv_load_file(g_config);
        for (const auto& ov : g_set) {
            size_t eq = ov.find('=');
            if (eq == std::string::npos) throw ValidationError("override '" + ov + "' is not key=value");
            kv[ov.substr(0, eq)] = ov.substr(eq + 1);
        }
        ToySpec spec = ToySpec::from_kv(kv, "data.");
        FiniteDataset ds = generate(spec);
        ds.save(g_out);
        std::printf("wrote %lld points (dim %lld) to %s\n", static_cast<long long>(ds.size()),
                    static_cast<long long>(ds.dim), g_out.c_str());
    });

    // ---- train ----
    auto* tr = app.add_subcommand("train", "train a model per the config; writes checkpoint + metrics log");
    std::string t_config, t_out;
    std::vector<std::string> t_set;
    tr->add_option("--config", t_config, "experiment config file")->required();
    tr->add_option("--set", t_set, "override config entries, key=value");
    tr->add_option("--out", t_out, "output directory (default $FLOWLAB_OUT or .)");
    tr->callback([&] {
        ExperimentConfig cfg = load_experiment_config(t_config, t_set);
        std::string outdir = output_root(t_out);
        std::filesystem::create_directories(outdir);
        FiniteDataset ds = generate(cfg.data);
        ds.save(outdir + "/dataset.txt");
        TrainState st = init_training(cfg.train);
        train(st, ds, outdir + "/train_log.csv");
        save_state(st, outdir + "/model.ckpt");
        std::printf("trained %lld steps; checkpoint at %s/model.ckpt\n", static_cast<long long>(st.step),
                    outdir.c_str());
    });

    // ---- sample ----
    auto* sm = app.add_subcommand("sample", "draw samples from a trained checkpoint");
    std::string s_ckpt, s_out = "samples.txt", s_solver = "euler", s_collection = "online", s_data, s_traj;
    int64_t s_nfe = 4, s_count = 512, s_traj_count = 0;
    uint64_t s_seed = 1;
    int s_order = 4;
    bool s_afs = false;
    sm->add_option("--checkpoint", s_ckpt, "trained checkpoint")->required();
    sm->add_option("--solver", s_solver, "euler|heun|ipndm|rk45");
    sm->add_option("--nfe", s_nfe, "network evaluation budget per sample");
    sm->add_option("--order", s_order, "ipndm order (1..4)");
    sm->add_flag("--afs", s_afs, "analytic first step (ipndm)");
    sm->add_option("--count", s_count, "number of samples");
    sm->add_option("--seed", s_seed, "sampling seed");
    sm->add_option("--collection", s_collection, "sampling-weight source: online|offline");
    sm->add_option("--data", s_data, "training point table (for offline collection)");
    sm->add_option("--out", s_out, "output point table");
    sm->add_option("--traj", s_traj, "also dump this many trajectories as CSV next to the samples");
    sm->add_option("--traj-count", s_traj_count, "trajectory count for --traj");
    sm->callback([&] {
        TrainState st = load_state(s_ckpt);
        SamplerConfig sc;
        sc.solver = s_solver;
        sc.nfe = s_nfe;
        sc.order = s_order;
        sc.afs = s_afs;
        SamplingWeights w = sampling_weights_for(st, s_collection, s_data);
        SampleResult res = st.live.conditional() ? conditional_sample(st.ema, w, sc, s_count, s_seed)
                                                 : sample_model(st.ema, sc, s_count, s_seed);
        FiniteDataset out;
        out.dim = res.samples.cols;
        out.points = res.samples;
        if (!res.codes.empty()) out.codes = res.codes;
        out.save(s_out);
        // run manifest beside the samples
        KvMap manifest;
        manifest["solver"] = s_solver;
        manifest["nfe"] = std::to_string(res.nfe);
        manifest["afs"] = s_afs ? "1" : "0";
        manifest["seed"] = std::to_string(s_seed);
        manifest["count"] = std::to_string(s_count);
        manifest["schedule_kind"] =
            sc.make_schedule(st.ema.flow).kind == TimeSchedule::Kind::Polynomial ? "polynomial" : "uniform";
        manifest["collection"] = s_collection;
        kv_save_file(s_out + ".manifest", manifest);
        if (s_traj_count > 0 && !s_traj.empty()) {
            TimeSchedule sched = sc.make_schedule(st.ema.flow);
            TrajectorySampleResult tr =
                sample_trajectories(st.ema, st.live.conditional() ? &w : nullptr, sched, s_traj_count, s_seed);
            for (int64_t r = 0; r < s_traj_count; ++r)
                save_trajectory_csv(tr.traj, r, s_traj + "." + std::to_string(r) + ".csv");
        }
        std::printf("wrote %lld samples (nfe %lld) to %s\n", static_cast<long long>(s_count),
                    static_cast<long long>(res.nfe), s_out.c_str());
    });

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "compute metrics for a checkpoint and append results rows");
    std::string e_ckpt, e_data, e_metric = "w2", e_results = "results.csv", e_collection = "online";
    std::string e_solver = "euler";
    int64_t e_nfe = 4, e_samples = 512;
    uint64_t e_seed = 99;
    double e_t = 0.5, e_dt = 0.1;
    ev->add_option("--checkpoint", e_ckpt)->required();
    ev->add_option("--data", e_data, "point table: held-out for w2, training for the rest")->required();
    ev->add_option("--metric", e_metric, "w2|curvature|decompose|lcfm|bound");
    ev->add_option("--solver", e_solver, "sampling solver for w2/curvature");
    ev->add_option("--nfe", e_nfe);
    ev->add_option("--samples", e_samples);
    ev->add_option("--seed", e_seed);
    ev->add_option("--collection", e_collection, "online|offline weight source");
    ev->add_option("--t", e_t, "time for the bound check");
    ev->add_option("--dt", e_dt, "step for the bound check");
    ev->add_option("--results", e_results, "results csv to append to");
    ev->callback([&] {
        TrainState st = load_state(e_ckpt);
        FiniteDataset ds = FiniteDataset::load(e_data);
        std::string hash = hex_u64(st.cfg.config_hash());
        std::string suffix = "|model=d" + std::to_string(st.cfg.codebook_channels) + "|collection=" + e_collection;
        SamplingWeights w = sampling_weights_for(st, e_collection, e_data);
        if (e_metric == "w2") {
            SamplerConfig sc;
            sc.solver = e_solver;
            sc.nfe = e_nfe;
            SampleResult res = st.live.conditional() ? conditional_sample(st.ema, w, sc, e_samples, e_seed)
                                                     : sample_model(st.ema, sc, e_samples, e_seed);
            int64_t n = std::min<int64_t>(res.samples.rows, ds.size());
            Matrix a(n, res.samples.cols), b(n, ds.points.cols);
            std::copy_n(res.samples.a.begin(), n * res.samples.cols, a.a.begin());
            std::copy_n(ds.points.a.begin(), n * ds.points.cols, b.a.begin());
            double val = wasserstein2(a, b);
            append_metric_row(e_results,
                              {"w2|solver=" + e_solver + "|nfe=" + std::to_string(e_nfe) + suffix, hash, val, 0.0,
                               e_seed});
            std::printf("w2 = %.6f\n", val);
        } else if (e_metric == "curvature") {
            SamplerConfig sc;
            sc.solver = "euler";
            sc.nfe = e_nfe;
            TimeSchedule sched = sc.make_schedule(st.ema.flow);
            TrajectorySampleResult tr =
                sample_trajectories(st.ema, st.live.conditional() ? &w : nullptr, sched, e_samples, e_seed);
            CurvatureReport rep = curvature(tr.traj);
            append_metric_row(e_results,
                              {"curvature|solver=euler|nfe=" + std::to_string(e_nfe) + suffix, hash, rep.mean, 0.0,
                               e_seed});
            std::printf("curvature = %.6f\n", rep.mean);
        } else if (e_metric == "decompose") {
            Decomposition dec = decompose_loss(st.ema, ds, st.cfg.time_dist(), McConfig{e_samples * 100, e_seed});
            append_metric_row(e_results, {"l_cfm" + suffix, hash, dec.l_cfm, dec.se_cfm, e_seed});
            append_metric_row(e_results, {"l_fm" + suffix, hash, dec.l_fm, dec.se_fm, e_seed});
            append_metric_row(e_results, {"v" + suffix, hash, dec.v, dec.se_v, e_seed});
            std::printf("l_cfm = %.6f, l_fm = %.6f, v = %.6f, residual = %.3g (se %.3g)\n", dec.l_cfm, dec.l_fm,
                        dec.v, dec.residual, dec.residual_se);
        } else if (e_metric == "lcfm") {
            std::vector<double> grid;
            double lo = std::max(st.ema.flow.oracle_t_floor(), st.ema.flow.t_min);
            for (int k = 0; k <= 24; ++k) grid.push_back(lo + (st.ema.flow.t_max - lo) * k / 24.0);
            ProfileReport rep = l_cfm_profile(st.ema, ds, grid, st.cfg.time_dist(), 2000, e_seed);
            for (size_t k = 0; k < grid.size(); ++k)
                append_metric_row(e_results, {"lcfm_t|t=" + std::to_string(grid[k]) + suffix, hash,
                                              rep.l_values[k], rep.se_sq[k], e_seed});
            std::printf("quadrature L_CFM = %.6f over %zu grid points\n", rep.quadrature_l_cfm, grid.size());
        } else if (e_metric == "bound") {
            BoundCheckConfig bc;
            BoundCheckReport rep = check_theorem_bound(st.ema, ds, e_t, e_dt, bc, e_seed);
            if (!rep.valid) throw NumericError("bound check invalid for the requested (t, dt)");
            append_metric_row(e_results, {"bound_lhs|t=" + std::to_string(e_t) + "|dt=" + std::to_string(e_dt) +
                                          suffix, hash, rep.lhs, rep.est_error, e_seed});
            append_metric_row(e_results, {"bound_rhs|t=" + std::to_string(e_t) + "|dt=" + std::to_string(e_dt) +
                                          suffix, hash, rep.rhs, rep.est_error, e_seed});
            std::printf("lhs = %.6f <= rhs = %.6f (L_hat %.3f, pass %d)\n", rep.lhs, rep.rhs, rep.lipschitz_hat,
                        rep.pass ? 1 : 0);
        } else {
            throw ValidationError("unknown metric '" + e_metric + "'");
        }
    });

    // ---- edit ----
    auto* ed = app.add_subcommand("edit", "zero-shot editing via conditional renoising");
    std::string d_ckpt, d_image, d_mask, d_op = "inpaint", d_out = "edited.txt", d_trace = "trace.csv";
    int64_t d_steps = 40;
    uint64_t d_seed = 1;
    ed->add_option("--checkpoint", d_ckpt)->required();
    ed->add_option("--image", d_image, "reference image grid")->required();
    ed->add_option("--op", d_op, "inpaint|sr|colorize");
    ed->add_option("--mask", d_mask, "0/1 grid over the degraded domain (1 = synthesize)")->required();
    ed->add_option("--steps", d_steps, "schedule length N");
    ed->add_option("--seed", d_seed);
    ed->add_option("--out", d_out, "edited image grid");
    ed->add_option("--trace", d_trace, "per-step code-index CSV");
    ed->callback([&] {
        TrainState st = load_state(d_ckpt);
        if (!st.live.conditional()) throw ValidationError("edit: checkpoint is unconditional");
        auto [img, shape] = load_image_txt(d_image);
        EditTask task;
        task.reference = img;
        task.shape = shape;
        task.op.kind = degradation_from_name(d_op);
        task.op.in = shape;
        task.op.omega = load_mask_txt(d_mask, [&] {
            DegradationOp probe;
            probe.kind = task.op.kind;
            probe.in = shape;
            ImageShape deg = probe.degraded_shape();
            return deg;
        }());
        TimeSchedule sched;
        sched.kind = TimeSchedule::Kind::Polynomial;
        sched.n = d_steps;
        sched.t_min = std::max(st.ema.flow.t_min, 1e-3 * st.ema.flow.t_max);
        sched.t_max = st.ema.flow.t_max;
        task.times = sched.times();
        task.seed = d_seed;
        EditResult res = zero_shot_edit(st.ema.denoiser, st.ema.encoder, st.ema.flow, task);
        save_image_txt(d_out, res.image, shape);
        std::ofstream trace(d_trace);
        trace << "step,t,code\n";
        for (size_t k = 0; k < res.code_trace.size(); ++k)
            trace << k << "," << task.times[k] << "," << res.code_trace[k] << "\n";
        std::printf("edited image written to %s (%zu steps)\n", d_out.c_str(), res.code_trace.size());
    });

    // ---- sweep ----
    auto* sw = app.add_subcommand("sweep", "run an experiment grid over one config axis");
    std::string w_config, w_axis, w_values, w_out;
    std::vector<std::string> w_set;
    sw->add_option("--config", w_config, "base experiment config")->required();
    sw->add_option("--set", w_set, "override config entries, key=value");
    sw->add_option("--axis", w_axis, "config key to sweep")->required();
    sw->add_option("--values", w_values, "comma-separated axis values")->required();
    sw->add_option("--out", w_out, "output root (default $FLOWLAB_OUT or .)");
    sw->callback([&] {
        ExperimentConfig base = load_experiment_config(w_config, w_set);
        std::vector<std::string> values;
        size_t pos = 0;
        while (pos < w_values.size()) {
            size_t comma = w_values.find(',', pos);
            if (comma == std::string::npos) comma = w_values.size();
            values.push_back(w_values.substr(pos, comma - pos));
            pos = comma + 1;
        }
        std::string root = output_root(w_out);
        auto results = run_sweep(base, w_axis, values, root);
        int64_t rows = 0;
        for (const auto& r : results) rows += static_cast<int64_t>(r.rows.size());
        std::printf("swept %zu cells, %lld result rows under %s\n", results.size(), static_cast<long long>(rows),
                    root.c_str());
    });

    // ---- run (single experiment cell) ----
    auto* rn = app.add_subcommand("run", "run one experiment cell: train, sample, evaluate");
    std::string r_config, r_out;
    std::vector<std::string> r_set;
    rn->add_option("--config", r_config, "experiment config")->required();
    rn->add_option("--set", r_set, "override config entries, key=value");
    rn->add_option("--out", r_out, "output directory (default $FLOWLAB_OUT or .)");
    rn->callback([&] {
        ExperimentConfig cfg = load_experiment_config(r_config, r_set);
        ExperimentResult res = run_experiment(cfg, output_root(r_out));
        for (const auto& row : res.rows) std::printf("%s = %.6f\n", row.name.c_str(), row.value);
    });

    // ---- plot ----
    auto* pl = app.add_subcommand("plot", "render SVG plots from the results table");
    std::string p_results, p_kind = "line", p_metric = "w2", p_x = "nfe", p_group = "model", p_out = "plot.svg";
    std::string p_traj, p_data;
    pl->add_option("--results", p_results, "results csv");
    pl->add_option("--kind", p_kind, "line|bar|traj");
    pl->add_option("--metric", p_metric, "metric name to select");
    pl->add_option("--x", p_x, "name segment for the x axis (line)");
    pl->add_option("--group", p_group, "name segment for series/bars");
    pl->add_option("--traj", p_traj, "comma-separated trajectory CSVs (kind traj)");
    pl->add_option("--data", p_data, "point table underlay (kind traj)");
    pl->add_option("--out", p_out, "output SVG");
    pl->callback([&] {
        if (p_kind == "traj") {
            std::vector<std::string> files;
            size_t pos = 0;
            while (pos < p_traj.size()) {
                size_t comma = p_traj.find(',', pos);
                if (comma == std::string::npos) comma = p_traj.size();
                files.push_back(p_traj.substr(pos, comma - pos));
                pos = comma + 1;
            }
            if (files.empty()) throw ValidationError("plot traj: no trajectory files given");
            emit_traj_plot(files, p_data, p_out);
            std::printf("wrote %s\n", p_out.c_str());
            return;
        }
        if (p_results.empty()) throw ValidationError("plot: --results required for line/bar plots");
        auto rows = read_metric_rows(p_results);
        PlotSpec spec;
        spec.kind = p_kind;
        spec.metric = p_metric;
        spec.x_key = p_x;
        spec.group_key = p_group;
        int series = emit_plot(rows, spec, p_out);
        if (series == 0)
            std::fprintf(stderr, "warning: no rows matched metric '%s'; no file written\n", p_metric.c_str());
        else
            std::printf("wrote %s (%d series)\n", p_out.c_str(), series);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;  // bad flags are validation failures
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime error: %s\n", e.what());
        return 2;
    }
}
