#include "flowlab/experiment.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace flowlab {

namespace fs = std::filesystem;

void ExperimentConfig::validate() const {
    data.validate();
    train.validate();
    if (eval_solver != "euler" && eval_solver != "heun" && eval_solver != "ipndm" && eval_solver != "rk45")
        throw ValidationError("experiment: eval_solver '" + eval_solver + "' unknown");
    if (collection != "online" && collection != "offline")
        throw ValidationError("experiment: collection must be online|offline");
    if (eval_nfe.empty()) throw ValidationError("experiment: eval_nfe list is empty");
    if (eval_samples < 1 || holdout < 1) throw ValidationError("experiment: sample counts must be positive");
    bool image_data = data.kind == "tiny-shapes";
    if (image_data != train.image)
        throw ValidationError("experiment: data kind and train.image disagree");
}

KvMap ExperimentConfig::to_kv() const {
    KvMap kv = data.to_kv("data.");
    for (const auto& [k, v] : train.to_kv()) kv["train." + k] = v;
    std::string nfes;
    for (size_t i = 0; i < eval_nfe.size(); ++i) {
        if (i) nfes += ",";
        nfes += std::to_string(eval_nfe[i]);
    }
    kv["eval.nfe"] = nfes;
    kv["eval.solver"] = eval_solver;
    kv["eval.afs"] = eval_afs ? "1" : "0";
    kv["eval.samples"] = std::to_string(eval_samples);
    kv["eval.seed"] = std::to_string(eval_seed);
    kv["eval.holdout"] = std::to_string(holdout);
    kv["eval.collection"] = collection;
    kv["eval.mc_samples"] = std::to_string(mc_samples);
    kv["eval.curvature_nfe"] = std::to_string(curvature_nfe);
    kv["eval.curvature_samples"] = std::to_string(curvature_samples);
    return kv;
}

ExperimentConfig ExperimentConfig::from_kv(const KvMap& kv) {
    ExperimentConfig c;
    c.data = ToySpec::from_kv(kv, "data.");
    KvMap train_kv;
    for (const auto& [k, v] : kv)
        if (k.rfind("train.", 0) == 0) train_kv[k.substr(6)] = v;
    c.train = TrainConfig::from_kv(train_kv);
    std::string nfes = kv_get(kv, "eval.nfe", "2,4");
    c.eval_nfe.clear();
    size_t pos = 0;
    while (pos < nfes.size()) {
        size_t comma = nfes.find(',', pos);
        if (comma == std::string::npos) comma = nfes.size();
        c.eval_nfe.push_back(std::stoll(nfes.substr(pos, comma - pos)));
        pos = comma + 1;
    }
    c.eval_solver = kv_get(kv, "eval.solver", c.eval_solver);
    c.eval_afs = kv_get_i64(kv, "eval.afs", 0) != 0;
    c.eval_samples = kv_get_i64(kv, "eval.samples", c.eval_samples);
    c.eval_seed = kv_get_u64(kv, "eval.seed", c.eval_seed);
    c.holdout = kv_get_i64(kv, "eval.holdout", c.holdout);
    c.collection = kv_get(kv, "eval.collection", c.collection);
    c.mc_samples = kv_get_i64(kv, "eval.mc_samples", c.mc_samples);
    c.curvature_nfe = kv_get_i64(kv, "eval.curvature_nfe", c.curvature_nfe);
    c.curvature_samples = kv_get_i64(kv, "eval.curvature_samples", c.curvature_samples);
    c.validate();
    return c;
}

std::string ExperimentConfig::model_label() const {
    return "d" + std::to_string(train.codebook_channels);
}

uint64_t file_hash(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("file_hash: cannot open '" + path + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    return fnv1a64(ss.str());
}

void ExperimentManifest::save(const std::string& path) const {
    KvMap kv;
    kv["config_hash"] = config_hash;
    kv["dataset_path"] = dataset_path;
    kv["dataset_hash"] = dataset_hash;
    kv["checkpoint_path"] = checkpoint_path;
    kv["checkpoint_hash"] = checkpoint_hash;
    kv["results_csv"] = results_csv;
    std::string rows;
    for (size_t i = 0; i < eval_rows.size(); ++i) {
        if (i) rows += ";";
        rows += eval_rows[i];
    }
    kv["eval_rows"] = rows;
    kv_save_file(path, kv);
}

ExperimentManifest ExperimentManifest::load(const std::string& path) {
    KvMap kv = kv_load_file(path);
    ExperimentManifest m;
    m.config_hash = kv_get(kv, "config_hash", "");
    m.dataset_path = kv_get(kv, "dataset_path", "");
    m.dataset_hash = kv_get(kv, "dataset_hash", "");
    m.checkpoint_path = kv_get(kv, "checkpoint_path", "");
    m.checkpoint_hash = kv_get(kv, "checkpoint_hash", "");
    m.results_csv = kv_get(kv, "results_csv", "");
    std::string rows = kv_get(kv, "eval_rows", "");
    size_t pos = 0;
    while (pos < rows.size()) {
        size_t semi = rows.find(';', pos);
        if (semi == std::string::npos) semi = rows.size();
        m.eval_rows.push_back(rows.substr(pos, semi - pos));
        pos = semi + 1;
    }
    // integrity: referenced files must exist and hash as recorded
    for (const auto& [p, h] : {std::pair{m.dataset_path, m.dataset_hash},
                               std::pair{m.checkpoint_path, m.checkpoint_hash}}) {
        if (p.empty()) continue;
        if (!fs::exists(p)) throw ValidationError("manifest: referenced file '" + p + "' is missing");
        if (hex_u64(file_hash(p)) != h)
            throw ValidationError("manifest: file '" + p + "' does not match its recorded hash");
    }
    return m;
}

std::string output_root(const std::string& explicit_dir) {
    if (!explicit_dir.empty()) return explicit_dir;
    if (const char* env = std::getenv("FLOWLAB_OUT")) return env;
    return ".";
}

namespace {

std::string row_prefix(const ExperimentConfig& cfg) {
    return "|kind=" + cfg.data.kind + "|flow=" + cfg.train.flow + "|" + "model=" + cfg.model_label() +
           "|collection=" + cfg.collection;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& outdir) {
    cfg.validate();
    fs::create_directories(outdir);
    const std::string hash = hex_u64(cfg.config_hash());
    const std::string dataset_path = outdir + "/dataset.txt";
    const std::string checkpoint_path = outdir + "/model.ckpt";
    const std::string manifest_path = outdir + "/manifest.txt";
    const std::string results_csv = outdir + "/results.csv";

    FiniteDataset train_ds = generate(cfg.data);
    train_ds.save(dataset_path);

    ToySpec holdout_spec = cfg.data;
    holdout_spec.seed = Rng::derive(cfg.data.seed, 0x401d);
    holdout_spec.count = cfg.holdout;
    FiniteDataset holdout = generate(holdout_spec);

    ExperimentResult result;
    result.checkpoint_path = checkpoint_path;
    result.results_csv = results_csv;

    TrainState st;
    bool trained = false;
    if (fs::exists(manifest_path)) {
        ExperimentManifest prev = ExperimentManifest::load(manifest_path);  // verifies file hashes
        if (prev.config_hash == hash) {
            st = load_state(checkpoint_path);
            if (st.step >= cfg.train.steps) {
                trained = true;
                result.reused_checkpoint = true;
            }
        }
        // differing hash: the recorded checkpoint belongs to another config; retrain
    }
    if (!trained) {
        st = init_training(cfg.train);
        train(st, train_ds, outdir + "/train_log.csv");
        save_state(st, checkpoint_path);
    }

    // sampling weights per the collection strategy (EMA nets do the sampling)
    SamplingWeights weights = st.weights;
    if (st.live.conditional() && cfg.collection == "offline")
        weights = collect_weights_offline(st.ema.encoder, train_ds, cfg.train.ema_decay);

    auto emit = [&](const std::string& name, double value, double error, uint64_t seed) {
        MetricRow row{name, hash, value, error, seed};
        append_metric_row(results_csv, row);
        result.rows.push_back(row);
    };

    // Wasserstein rows per NFE
    for (int64_t nfe : cfg.eval_nfe) {
        SamplerConfig sc;
        sc.solver = cfg.eval_solver;
        sc.nfe = nfe;
        sc.afs = cfg.eval_afs;
        uint64_t seed = Rng::derive(cfg.eval_seed, static_cast<uint64_t>(nfe));
        SampleResult sr = st.live.conditional() ? conditional_sample(st.ema, weights, sc, cfg.eval_samples, seed)
                                                : sample_model(st.ema, sc, cfg.eval_samples, seed);
        int64_t n = std::min<int64_t>(sr.samples.rows, holdout.size());
        Matrix a(n, sr.samples.cols), b(n, holdout.points.cols);
        std::copy_n(sr.samples.a.begin(), n * sr.samples.cols, a.a.begin());
        std::copy_n(holdout.points.a.begin(), n * holdout.points.cols, b.a.begin());
        double w2 = wasserstein2(a, b);
        emit("w2|solver=" + cfg.eval_solver + (cfg.eval_afs ? "+afs" : "") + "|nfe=" + std::to_string(nfe) +
                 row_prefix(cfg),
             w2, 0.0, seed);
    }

    // curvature row from Euler trajectories
    {
        SamplerConfig sc;
        sc.solver = "euler";
        sc.nfe = cfg.curvature_nfe;
        TimeSchedule sched = sc.make_schedule(st.ema.flow);
        uint64_t seed = Rng::derive(cfg.eval_seed, 0xc0c0);
        TrajectorySampleResult tr =
            sample_trajectories(st.ema, st.live.conditional() ? &weights : nullptr, sched, cfg.curvature_samples,
                                seed);
        CurvatureReport rep = curvature(tr.traj);
        emit("curvature|solver=euler|nfe=" + std::to_string(cfg.curvature_nfe) + row_prefix(cfg), rep.mean, 0.0,
             seed);
    }

    // decomposition rows
    {
        McConfig mc{cfg.mc_samples, Rng::derive(cfg.eval_seed, 0xdec0)};
        Decomposition dec = decompose_loss(st.ema, train_ds, cfg.train.time_dist(), mc);
        emit("l_cfm" + row_prefix(cfg), dec.l_cfm, dec.se_cfm, mc.seed);
        emit("l_fm" + row_prefix(cfg), dec.l_fm, dec.se_fm, mc.seed);
        emit("v" + row_prefix(cfg), dec.v, dec.se_v, mc.seed);
    }

    ExperimentManifest manifest;
    manifest.config_hash = hash;
    manifest.dataset_path = dataset_path;
    manifest.dataset_hash = hex_u64(file_hash(dataset_path));
    manifest.checkpoint_path = checkpoint_path;
    manifest.checkpoint_hash = hex_u64(file_hash(checkpoint_path));
    manifest.results_csv = results_csv;
    for (const auto& r : result.rows) manifest.eval_rows.push_back(r.name);
    manifest.save(manifest_path);
    return result;
}

std::vector<ExperimentResult> run_sweep(const ExperimentConfig& base, const std::string& axis_key,
                                        const std::vector<std::string>& values, const std::string& outroot) {
    if (values.empty()) throw ValidationError("sweep: no axis values");
    KvMap base_kv = base.to_kv();
    if (!base_kv.count(axis_key))
        throw ValidationError("sweep: axis key '" + axis_key + "' is not an experiment config key");
    std::vector<ExperimentResult> results;
    for (const auto& v : values) {
        KvMap cell_kv = base_kv;
        cell_kv[axis_key] = v;
        ExperimentConfig cell = ExperimentConfig::from_kv(cell_kv);
        std::string subdir = outroot + "/cell_" + axis_key + "_" + v;
        for (auto& ch : subdir)
            if (ch == '.') ch = '_';
        results.push_back(run_experiment(cell, subdir));
    }
    return results;
}

}  // namespace flowlab
