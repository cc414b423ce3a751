#pragma once

#include "flowlab/datasets.hpp"
#include "flowlab/metrics.hpp"
#include "flowlab/samplers.hpp"

namespace flowlab {

// One experiment cell: dataset, training, and evaluation settings, all
// serializable as a flat key=value file ("data.", "train.", "eval." keys).
struct ExperimentConfig {
    ToySpec data;
    TrainConfig train;

    std::vector<int64_t> eval_nfe = {2, 4};
    std::string eval_solver = "euler";
    bool eval_afs = false;
    int64_t eval_samples = 512;
    uint64_t eval_seed = 99;
    int64_t holdout = 512;               // held-out points for the Wasserstein rows
    std::string collection = "online";   // online | offline sampling-weight source
    int64_t mc_samples = 50000;          // decomposition rows
    int64_t curvature_nfe = 16;          // Euler grid for the curvature row
    int64_t curvature_samples = 128;

    void validate() const;
    KvMap to_kv() const;
    static ExperimentConfig from_kv(const KvMap& kv);
    uint64_t config_hash() const { return fnv1a64(kv_serialize(to_kv())); }
    std::string model_label() const;  // "d0", "d12", ... for metric row names
};

uint64_t file_hash(const std::string& path);

// Kept beside the outputs; load() re-verifies that every referenced file
// still exists and hashes match, so stale checkpoints are refused.
struct ExperimentManifest {
    std::string config_hash;
    std::string dataset_path;
    std::string dataset_hash;
    std::string checkpoint_path;
    std::string checkpoint_hash;
    std::string results_csv;
    std::vector<std::string> eval_rows;

    void save(const std::string& path) const;
    static ExperimentManifest load(const std::string& path);  // validates referenced files
};

struct ExperimentResult {
    std::vector<MetricRow> rows;
    std::string checkpoint_path;
    std::string results_csv;
    bool reused_checkpoint = false;
};

// train -> sample -> evaluate, appending one row per metric to
// <outdir>/results.csv. Re-running with an unchanged config resumes from the
// manifest (training skipped); a changed config invalidates the old
// checkpoint and retrains.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& outdir);

// Sweep a single config key over several values; each cell runs in its own
// subdirectory and appends to the shared results table under a file lock.
std::vector<ExperimentResult> run_sweep(const ExperimentConfig& base, const std::string& axis_key,
                                        const std::vector<std::string>& values, const std::string& outroot);

// Output root resolution: explicit argument, else $FLOWLAB_OUT, else ".".
std::string output_root(const std::string& explicit_dir);

}  // namespace flowlab
