#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "flowlab/experiment.hpp"
#include "flowlab/plots.hpp"

using namespace flowlab;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
    std::string cmd = std::string(FLOWLAB_CLI_PATH) + " " + args;
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

ExperimentConfig tiny_experiment(uint64_t seed, int64_t d_channels) {
    ExperimentConfig cfg;
    cfg.data.kind = "gaussian-ring";
    cfg.data.count = 192;
    cfg.data.seed = seed;
    cfg.train.flow = "rf";
    cfg.train.codebook_channels = d_channels;
    cfg.train.hidden = d_channels > 0 ? 64 : 32;
    cfg.train.hidden_layers = 2;
    cfg.train.emb_dim = 16;
    cfg.train.enc_hidden = {6};
    cfg.train.batch = 48;
    cfg.train.steps = 40;
    cfg.train.seed = seed;
    cfg.eval_nfe = {2, 4};
    cfg.eval_samples = 96;
    cfg.holdout = 96;
    cfg.mc_samples = 2000;
    cfg.curvature_samples = 16;
    cfg.curvature_nfe = 8;
    return cfg;
}

// minimal XML well-formedness scan: every opened tag closes, properly nested
bool svg_well_formed(const std::string& path) {
    std::ifstream is(path);
    if (!is) return false;
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    std::vector<std::string> stack;
    size_t pos = 0;
    while ((pos = text.find('<', pos)) != std::string::npos) {
        size_t end = text.find('>', pos);
        if (end == std::string::npos) return false;
        std::string tag = text.substr(pos + 1, end - pos - 1);
        if (!tag.empty() && tag[0] == '?') {
            pos = end + 1;
            continue;
        }
        if (!tag.empty() && tag[0] == '/') {
            std::string name = tag.substr(1);
            if (stack.empty() || stack.back() != name) return false;
            stack.pop_back();
        } else if (!tag.empty() && tag.back() != '/') {
            std::string name = tag.substr(0, tag.find_first_of(" \t"));
            stack.push_back(name);
        }
        pos = end + 1;
    }
    return stack.empty();
}

}  // namespace

TEST_CASE("ring generation: determinism, mode balance, degenerate cases") {
    ToySpec spec;
    spec.kind = "gaussian-ring";
    spec.count = 10000;
    spec.seed = 5;
    FiniteDataset a = generate(spec);
    FiniteDataset b = generate(spec);
    for (int64_t i = 0; i < a.points.numel(); ++i) CHECK(a.points.a[static_cast<size_t>(i)] == b.points.a[static_cast<size_t>(i)]);

    // mode assignment balance: 1/8 +- 3 sigma each
    std::vector<int64_t> counts(8, 0);
    for (int64_t i = 0; i < a.size(); ++i) {
        double th = std::atan2(a.points(i, 1), a.points(i, 0));
        int64_t mode = static_cast<int64_t>(std::llround(th / (2.0 * 3.14159265358979323846 / 8.0)));
        counts[static_cast<size_t>(((mode % 8) + 8) % 8)]++;
    }
    double expect = 10000.0 / 8.0;
    double sigma = std::sqrt(10000.0 * (1.0 / 8.0) * (7.0 / 8.0));
    for (int64_t c : counts) CHECK(std::abs(static_cast<double>(c) - expect) < 3.0 * sigma);

    // single mode, zero noise: every point identical at (radius, 0)
    ToySpec degen;
    degen.kind = "gaussian-ring";
    degen.count = 16;
    degen.modes = 1;
    degen.noise_std = 0.0;
    degen.radius = 2.0;
    FiniteDataset d = generate(degen);
    for (int64_t i = 0; i < d.size(); ++i) {
        CHECK(d.points(i, 0) == 2.0);
        CHECK(d.points(i, 1) == 0.0);
    }
    ToySpec bad;
    bad.kind = "nope";
    CHECK_THROWS_AS(generate(bad), ValidationError);
}

TEST_CASE("checkerboard and two-moons generate in-range 2-D data") {
    ToySpec cb;
    cb.kind = "checkerboard";
    cb.count = 500;
    cb.seed = 9;
    FiniteDataset a = generate(cb);
    for (int64_t i = 0; i < a.size(); ++i) {
        int64_t px = static_cast<int64_t>(std::floor(a.points(i, 0)));
        int64_t py = static_cast<int64_t>(std::floor(a.points(i, 1)));
        CHECK(((px + py) % 2 + 2) % 2 == 0);
    }
    ToySpec tm;
    tm.kind = "two-moons";
    tm.count = 100;
    FiniteDataset b = generate(tm);
    CHECK(b.dim == 2);
}

TEST_CASE("tiny-shapes are deterministic 8x8 images within [0, 1]") {
    ToySpec spec;
    spec.kind = "tiny-shapes";
    spec.count = 64;
    spec.seed = 3;
    spec.img_channels = 2;
    FiniteDataset ds = generate(spec);
    CHECK(ds.dim == 128);
    double mx = 0.0;
    bool any_on = false;
    for (double v : ds.points.a) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        mx = std::max(mx, v);
        any_on |= v > 0.0;
    }
    CHECK(any_on);
    CHECK(mx > 0.4);
}

TEST_CASE("experiment config round trip and labels") {
    ExperimentConfig cfg = tiny_experiment(7, 4);
    KvMap kv = cfg.to_kv();
    ExperimentConfig back = ExperimentConfig::from_kv(kv);
    CHECK(back.to_kv() == kv);
    CHECK(back.config_hash() == cfg.config_hash());
    CHECK(cfg.model_label() == "d4");
}

TEST_CASE("run_experiment produces rows, manifest, and is idempotent on re-run") {
    fs::remove_all("exp_test");
    ExperimentConfig cfg = tiny_experiment(11, 0);
    ExperimentResult r1 = run_experiment(cfg, "exp_test");
    CHECK(!r1.reused_checkpoint);
    REQUIRE(r1.rows.size() >= 5);  // 2 w2 + curvature + 3 decomposition
    CHECK(fs::exists("exp_test/manifest.txt"));
    CHECK(fs::exists("exp_test/model.ckpt"));
    CHECK(fs::exists("exp_test/results.csv"));

    ExperimentResult r2 = run_experiment(cfg, "exp_test");
    CHECK(r2.reused_checkpoint);  // config hash matched: training skipped
    // identical values on the re-run (criterion-style reproducibility)
    REQUIRE(r1.rows.size() == r2.rows.size());
    for (size_t i = 0; i < r1.rows.size(); ++i) {
        CHECK(r1.rows[i].name == r2.rows[i].name);
        CHECK(std::abs(r1.rows[i].value - r2.rows[i].value) <= 1e-12);
    }

    // a changed config refuses the stale checkpoint and retrains
    ExperimentConfig changed = cfg;
    changed.train.lr *= 0.5;
    ExperimentResult r3 = run_experiment(changed, "exp_test");
    CHECK(!r3.reused_checkpoint);
}

TEST_CASE("manifest load rejects touched files") {
    fs::remove_all("exp_tamper");
    ExperimentConfig cfg = tiny_experiment(13, 0);
    cfg.train.steps = 10;
    run_experiment(cfg, "exp_tamper");
    // corrupt the checkpoint, the manifest must notice
    {
        std::ofstream f("exp_tamper/model.ckpt", std::ios::app);
        f << "tamper";
    }
    CHECK_THROWS_AS(ExperimentManifest::load("exp_tamper/manifest.txt"), ValidationError);
}

TEST_CASE("sweep runs cells and emits rows per cell") {
    fs::remove_all("sweep_test");
    ExperimentConfig base = tiny_experiment(17, 0);
    base.train.steps = 10;
    base.eval_nfe = {2};
    base.mc_samples = 1000;
    auto results = run_sweep(base, "train.seed", {"1", "2"}, "sweep_test");
    CHECK(results.size() == 2);
    CHECK(fs::exists("sweep_test/cell_train_seed_1/results.csv"));
    CHECK_THROWS_AS(run_sweep(base, "not.a.key", {"1"}, "sweep_test"), ValidationError);
}

TEST_CASE("plots: line, bar, empty filter, traj; all well-formed SVG") {
    std::vector<MetricRow> rows{
        {"w2|solver=euler|nfe=2|model=d0", "h", 1.4, 0.0, 1},
        {"w2|solver=euler|nfe=4|model=d0", "h", 0.9, 0.0, 1},
        {"w2|solver=euler|nfe=2|model=d12", "h", 0.8, 0.0, 1},
        {"w2|solver=euler|nfe=4|model=d12", "h", 0.5, 0.0, 1},
        {"v|model=d0", "h", 4.0, 0.1, 1},
        {"v|model=d12", "h", 2.5, 0.1, 1},
    };
    PlotSpec line;
    line.kind = "line";
    line.metric = "w2";
    CHECK(emit_plot(rows, line, "plot_line.svg") == 2);
    CHECK(svg_well_formed("plot_line.svg"));

    PlotSpec bar;
    bar.kind = "bar";
    bar.metric = "v";
    CHECK(emit_plot(rows, bar, "plot_bar.svg") == 2);
    CHECK(svg_well_formed("plot_bar.svg"));

    PlotSpec none;
    none.metric = "does_not_exist";
    CHECK(emit_plot(rows, none, "plot_none.svg") == 0);  // warning path: no file
    CHECK(!fs::exists("plot_none.svg"));

    // single-row csv -> single-point plot, still valid svg
    PlotSpec single;
    single.kind = "line";
    single.metric = "v";
    single.x_key = "model";  // non-numeric: skipped -> falls back to no rows
    CHECK(emit_plot({rows[4]}, bar, "plot_single.svg") == 1);
    CHECK(svg_well_formed("plot_single.svg"));

    {
        std::ofstream t1("pt1.csv");
        t1 << "t,x0,x1\n1,0.0,0.0\n0.5,1.0,0.5\n0,2.0,1.0\n";
        std::ofstream t2("pt2.csv");
        t2 << "t,x0,x1\n1,0.5,0.5\n0,1.5,-0.5\n";
    }
    emit_traj_plot({"pt1.csv", "pt2.csv"}, "", "plot_traj.svg");
    CHECK(svg_well_formed("plot_traj.svg"));
}

TEST_CASE("metric name parsing") {
    auto segs = parse_metric_name("w2|solver=euler|nfe=4|model=d12");
    CHECK(segs["metric"] == "w2");
    CHECK(segs["solver"] == "euler");
    CHECK(segs["nfe"] == "4");
    CHECK(segs["model"] == "d12");
}

TEST_CASE("cli: generate, train, sample, eval, plot round trip") {
    fs::remove_all("cli_test");
    fs::create_directories("cli_test");
    // config file
    {
        ExperimentConfig cfg = tiny_experiment(19, 0);
        cfg.train.steps = 12;
        kv_save_file("cli_test/exp.cfg", cfg.to_kv());
    }
    CHECK(run_cli("generate --config cli_test/exp.cfg --set data.count=64 --out cli_test/pts.txt") == 0);
    CHECK(fs::exists("cli_test/pts.txt"));
    FiniteDataset pts = FiniteDataset::load("cli_test/pts.txt");
    CHECK(pts.size() == 64);

    CHECK(run_cli("train --config cli_test/exp.cfg --out cli_test") == 0);
    CHECK(fs::exists("cli_test/model.ckpt"));
    CHECK(fs::exists("cli_test/train_log.csv"));

    CHECK(run_cli("sample --checkpoint cli_test/model.ckpt --solver euler --nfe 2 --count 32 --seed 4 "
                  "--out cli_test/samples.txt") == 0);
    FiniteDataset samples = FiniteDataset::load("cli_test/samples.txt");
    CHECK(samples.size() == 32);
    CHECK(fs::exists("cli_test/samples.txt.manifest"));

    CHECK(run_cli("eval --checkpoint cli_test/model.ckpt --data cli_test/pts.txt --metric w2 --nfe 2 "
                  "--samples 32 --results cli_test/results.csv") == 0);
    auto rows = read_metric_rows("cli_test/results.csv");
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].name.rfind("w2|", 0) == 0);

    CHECK(run_cli("plot --results cli_test/results.csv --kind line --metric w2 --x nfe --group model "
                  "--out cli_test/plot.svg") == 0);
    CHECK(svg_well_formed("cli_test/plot.svg"));

    // exit codes: unknown flag -> 1; missing file -> 1
    CHECK(run_cli("sample --does-not-exist 2>/dev/null") == 1);
    CHECK(run_cli("train --config cli_test/missing.cfg 2>/dev/null") == 1);
}

TEST_CASE("cli: full pipeline determinism across reruns") {
    fs::remove_all("cli_repro_a");
    fs::remove_all("cli_repro_b");
    ExperimentConfig cfg = tiny_experiment(23, 4);
    cfg.train.steps = 15;
    cfg.eval_nfe = {2};
    cfg.mc_samples = 1000;
    kv_save_file("cli_repro.cfg", cfg.to_kv());
    CHECK(run_cli("run --config cli_repro.cfg --out cli_repro_a > /dev/null") == 0);
    CHECK(run_cli("run --config cli_repro.cfg --out cli_repro_b > /dev/null") == 0);
    auto ra = read_metric_rows("cli_repro_a/results.csv");
    auto rb = read_metric_rows("cli_repro_b/results.csv");
    REQUIRE(ra.size() == rb.size());
    for (size_t i = 0; i < ra.size(); ++i) {
        CHECK(ra[i].name == rb[i].name);
        CHECK(std::abs(ra[i].value - rb[i].value) <= 1e-12);
    }
}
