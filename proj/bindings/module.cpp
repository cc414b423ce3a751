#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>

#include "flowlab/experiment.hpp"
#include "flowlab/metrics.hpp"
#include "flowlab/plots.hpp"

namespace py = pybind11;
using namespace flowlab;

namespace {

Matrix to_matrix(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
    if (arr.ndim() != 2) throw ValidationError("expected a 2-D array");
    Matrix m(arr.shape(0), arr.shape(1));
    std::copy_n(arr.data(), m.numel(), m.a.begin());
    return m;
}

py::array_t<double> from_matrix(const Matrix& m) {
    py::array_t<double> arr({m.rows, m.cols});
    std::copy_n(m.a.begin(), m.numel(), arr.mutable_data());
    return arr;
}

FlowSpec flow_by_name(const std::string& name) {
    switch (flow_family_from_name(name)) {
        case FlowFamily::VP: return FlowSpec::vp();
        case FlowFamily::VE: return FlowSpec::ve();
        case FlowFamily::LinearEDM: return FlowSpec::edm();
        case FlowFamily::RectifiedFlow: return FlowSpec::rectified(0.001, 1.0);
    }
    return FlowSpec::rectified(0.001, 1.0);
}

KvMap dict_to_kv(const py::dict& d) {
    KvMap kv;
    for (auto item : d) kv[py::cast<std::string>(item.first)] = py::cast<std::string>(py::str(item.second));
    return kv;
}

}  // namespace

PYBIND11_MODULE(_flowlab, m) {
    m.doc() = "flow-matching toy lab: quantized adaptive conditions, solvers, exact transport metrics";

    py::register_exception<ValidationError>(m, "FlowlabValidationError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "FlowlabNumericError", PyExc_ArithmeticError);

    m.def(
        "generate_dataset",
        [](const py::dict& spec) {
            ToySpec s = ToySpec::from_kv(dict_to_kv(spec), "");
            FiniteDataset ds = generate(s);
            return from_matrix(ds.points);
        },
        py::arg("spec"),
        "Toy dataset points for a spec dict (kind, count, seed, modes, radius, noise_std, img_channels)");

    m.def(
        "quantize",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& y, int64_t levels) {
            CodebookConfig cfg{levels, static_cast<int64_t>(y.size())};
            return quantize(std::span<const double>(y.data(), static_cast<size_t>(y.size())), cfg);
        },
        py::arg("y"), py::arg("levels"), "Finite scalar quantization digits of a real vector");

    m.def(
        "code_index",
        [](const std::vector<int64_t>& digits, int64_t levels) {
            CodebookConfig cfg{levels, static_cast<int64_t>(digits.size())};
            return code_index(digits, cfg);
        },
        py::arg("digits"), py::arg("levels"));

    m.def(
        "code_digits",
        [](int64_t index, int64_t levels, int64_t channels) {
            CodebookConfig cfg{levels, channels};
            return code_digits(index, cfg);
        },
        py::arg("index"), py::arg("levels"), py::arg("channels"));

    m.def(
        "wasserstein2",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& b) {
            return wasserstein2(to_matrix(a), to_matrix(b));
        },
        py::arg("a"), py::arg("b"), "Exact 2-Wasserstein between equal-size point sets");

    m.def(
        "oracle_velocity",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& points,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& x_t, double t,
           const std::string& flow) {
            FiniteDataset ds;
            ds.points = to_matrix(points);
            ds.dim = ds.points.cols;
            return from_matrix(oracle_velocity_batch(flow_by_name(flow), ds, to_matrix(x_t), t));
        },
        py::arg("points"), py::arg("x_t"), py::arg("t"), py::arg("flow") = "rf",
        "Exact E[Xdot | X_t] over a finite dataset, row-wise");

    m.def(
        "euler_solve",
        [](const std::function<py::array_t<double>(py::array_t<double>, double)>& field,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& x_init, double t_max,
           double t_min, int64_t n) {
            TimeSchedule sched;
            sched.kind = TimeSchedule::Kind::Uniform;
            sched.n = n;
            sched.t_min = t_min;
            sched.t_max = t_max;
            BatchField f = [&](const Matrix& x, double t) { return to_matrix(field(from_matrix(x), t)); };
            SolverRun run = euler_solve(f, sched, to_matrix(x_init));
            return py::make_tuple(from_matrix(run.terminal()), run.nfe);
        },
        py::arg("field"), py::arg("x_init"), py::arg("t_max") = 1.0, py::arg("t_min") = 0.0, py::arg("n") = 9,
        "Backward Euler simulation of a python velocity field; returns (terminal, nfe)");

    m.def(
        "train",
        [](const py::dict& config, const std::string& outdir) {
            ExperimentConfig cfg = ExperimentConfig::from_kv(dict_to_kv(config));
            std::filesystem::create_directories(outdir);
            FiniteDataset ds = generate(cfg.data);
            ds.save(outdir + "/dataset.txt");
            TrainState st = init_training(cfg.train);
            train(st, ds, outdir + "/train_log.csv");
            save_state(st, outdir + "/model.ckpt");
            py::dict out;
            out["checkpoint"] = outdir + "/model.ckpt";
            out["steps"] = st.step;
            return out;
        },
        py::arg("config"), py::arg("outdir"), "Train per an experiment-config dict; writes a checkpoint");

    m.def(
        "sample",
        [](const std::string& checkpoint, const std::string& solver, int64_t nfe, int64_t count, uint64_t seed) {
            TrainState st = load_state(checkpoint);
            SamplerConfig sc;
            sc.solver = solver;
            sc.nfe = nfe;
            SampleResult res = st.live.conditional()
                                   ? conditional_sample(st.ema, st.weights, sc, count, seed)
                                   : sample_model(st.ema, sc, count, seed);
            return from_matrix(res.samples);
        },
        py::arg("checkpoint"), py::arg("solver") = "euler", py::arg("nfe") = 4, py::arg("count") = 256,
        py::arg("seed") = 1, "Draw samples from a trained checkpoint");

    m.def(
        "decompose_loss",
        [](const std::string& checkpoint, int64_t samples, uint64_t seed) {
            TrainState st = load_state(checkpoint);
            std::string ckpt_dir = std::filesystem::path(checkpoint).parent_path().string();
            FiniteDataset ds = FiniteDataset::load(ckpt_dir + "/dataset.txt");
            Decomposition d = decompose_loss(st.ema, ds, st.cfg.time_dist(), McConfig{samples, seed});
            py::dict out;
            out["l_cfm"] = d.l_cfm;
            out["l_fm"] = d.l_fm;
            out["v"] = d.v;
            out["residual"] = d.residual;
            out["residual_se"] = d.residual_se;
            return out;
        },
        py::arg("checkpoint"), py::arg("samples") = 20000, py::arg("seed") = 7,
        "L_CFM = L_FM + V decomposition for a trained checkpoint (dataset.txt beside it)");
}
