#include "flowlab/flows.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace flowlab {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

std::string flow_family_name(FlowFamily f) {
    switch (f) {
        case FlowFamily::VP: return "vp";
        case FlowFamily::VE: return "ve";
        case FlowFamily::LinearEDM: return "edm";
        case FlowFamily::RectifiedFlow: return "rf";
    }
    return "?";
}

FlowFamily flow_family_from_name(const std::string& name) {
    if (name == "vp") return FlowFamily::VP;
    if (name == "ve") return FlowFamily::VE;
    if (name == "edm") return FlowFamily::LinearEDM;
    if (name == "rf") return FlowFamily::RectifiedFlow;
    throw ValidationError("unknown flow family '" + name + "' (vp|ve|edm|rf)");
}

FlowSpec FlowSpec::vp() { return {FlowFamily::VP, 0.0, 1.0, 0.5}; }
FlowSpec FlowSpec::ve(double t_min, double t_max) { return {FlowFamily::VE, t_min, t_max, 0.5}; }
FlowSpec FlowSpec::edm(double t_min, double t_max, double sigma_data) {
    return {FlowFamily::LinearEDM, t_min, t_max, sigma_data};
}
FlowSpec FlowSpec::rectified(double t_min, double t_max) { return {FlowFamily::RectifiedFlow, t_min, t_max, 0.5}; }

double FlowSpec::a(double t) const {
    switch (family) {
        case FlowFamily::VP: return std::cos(kPi * t / 2.0);
        case FlowFamily::VE: return 1.0;
        case FlowFamily::LinearEDM: return 1.0;
        case FlowFamily::RectifiedFlow: return 1.0 - t;
    }
    return 0.0;
}

double FlowSpec::s(double t) const {
    switch (family) {
        case FlowFamily::VP: return std::sin(kPi * t / 2.0);
        case FlowFamily::VE: return std::sqrt(t);
        case FlowFamily::LinearEDM: return t;
        case FlowFamily::RectifiedFlow: return t;
    }
    return 0.0;
}

double FlowSpec::da(double t) const {
    switch (family) {
        case FlowFamily::VP: return -kPi / 2.0 * std::sin(kPi * t / 2.0);
        case FlowFamily::VE: return 0.0;
        case FlowFamily::LinearEDM: return 0.0;
        case FlowFamily::RectifiedFlow: return -1.0;
    }
    return 0.0;
}

double FlowSpec::ds(double t) const {
    switch (family) {
        case FlowFamily::VP: return kPi / 2.0 * std::cos(kPi * t / 2.0);
        case FlowFamily::VE: return 0.5 / std::sqrt(t);
        case FlowFamily::LinearEDM: return 1.0;
        case FlowFamily::RectifiedFlow: return 1.0;
    }
    return 0.0;
}

double FlowSpec::prior_std() const {
    switch (family) {
        case FlowFamily::VP: return 1.0;
        case FlowFamily::VE: return std::sqrt(t_max);
        case FlowFamily::LinearEDM: return t_max;
        case FlowFamily::RectifiedFlow: return 1.0;
    }
    return 1.0;
}

void FlowSpec::check_time(double t) const {
    if (!(t >= t_min && t <= t_max))
        throw ValidationError("time " + std::to_string(t) + " outside [" + std::to_string(t_min) + ", " +
                              std::to_string(t_max) + "] for flow " + flow_family_name(family));
}

void FlowSpec::check_oracle_time(double t) const {
    check_time(t);
    if (t < oracle_t_floor())
        throw ValidationError("oracle velocity undefined below the t floor " + std::to_string(oracle_t_floor()) +
                              " (got t=" + std::to_string(t) + "): posterior covariance degenerates");
}

void FiniteDataset::validate() const {
    if (points.rows == 0) throw ValidationError("dataset: empty");
    if (points.cols != dim) throw ValidationError("dataset: dim field disagrees with point width");
    if (!codes.empty() && static_cast<int64_t>(codes.size()) != points.rows)
        throw ValidationError("dataset: code column length " + std::to_string(codes.size()) +
                              " vs " + std::to_string(points.rows) + " points");
}

void FiniteDataset::save(const std::string& path) const {
    validate();
    std::ofstream os(path);
    if (!os) throw ValidationError("dataset: cannot open '" + path + "' for writing");
    os << "# points dim=" << dim << " codes=" << (has_codes() ? 1 : 0) << "\n";
    os.precision(17);
    for (int64_t i = 0; i < points.rows; ++i) {
        for (int64_t j = 0; j < dim; ++j) {
            if (j) os << ",";
            os << points(i, j);
        }
        if (has_codes()) os << "," << codes[static_cast<size_t>(i)];
        os << "\n";
    }
}

FiniteDataset FiniteDataset::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("dataset: cannot open '" + path + "'");
    std::string header;
    std::getline(is, header);
    int64_t dim = -1;
    int has_codes = 0;
    {
        std::istringstream hs(header);
        std::string tok;
        while (hs >> tok) {
            if (tok.rfind("dim=", 0) == 0) dim = std::stoll(tok.substr(4));
            if (tok.rfind("codes=", 0) == 0) has_codes = std::stoi(tok.substr(6));
        }
    }
    if (dim <= 0) throw ValidationError("dataset: header of '" + path + "' carries no dim=<d>");
    FiniteDataset ds;
    ds.dim = dim;
    std::vector<double> vals;
    std::string line;
    int64_t rows = 0;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string cell;
        std::vector<double> row;
        while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
        if (static_cast<int64_t>(row.size()) != dim + (has_codes ? 1 : 0))
            throw ValidationError("dataset: row " + std::to_string(rows + 1) + " of '" + path + "' has " +
                                  std::to_string(row.size()) + " cells, expected " +
                                  std::to_string(dim + (has_codes ? 1 : 0)));
        for (int64_t j = 0; j < dim; ++j) vals.push_back(row[static_cast<size_t>(j)]);
        if (has_codes) ds.codes.push_back(static_cast<int64_t>(std::llround(row.back())));
        ++rows;
    }
    ds.points.rows = rows;
    ds.points.cols = dim;
    ds.points.a = std::move(vals);
    ds.validate();
    return ds;
}

void interpolate(const FlowSpec& flow, std::span<const double> x0, std::span<const double> noise, double t,
                 std::span<double> out) {
    flow.check_time(t);
    if (x0.size() != noise.size() || x0.size() != out.size())
        throw ValidationError("interpolate: x0/noise/out lengths disagree");
    const double at = flow.a(t), st = flow.s(t);
    for (size_t i = 0; i < out.size(); ++i) out[i] = at * x0[i] + st * noise[i];
}

void flow_velocity(const FlowSpec& flow, std::span<const double> x0, std::span<const double> noise, double t,
                   std::span<double> out) {
    flow.check_time(t);
    if (flow.family == FlowFamily::VE && t <= 0.0)
        throw ValidationError("flow_velocity: VE velocity is singular at t=0");
    if (x0.size() != noise.size() || x0.size() != out.size())
        throw ValidationError("flow_velocity: x0/noise/out lengths disagree");
    const double dat = flow.da(t), dst = flow.ds(t);
    for (size_t i = 0; i < out.size(); ++i) out[i] = dat * x0[i] + dst * noise[i];
}

void oracle_velocity(const FlowSpec& flow, const FiniteDataset& data, std::span<const double> x_t, double t,
                     std::span<double> out, std::optional<int64_t> code) {
    data.validate();
    flow.check_oracle_time(t);
    if (static_cast<int64_t>(x_t.size()) != data.dim)
        throw ValidationError("oracle_velocity: point width " + std::to_string(x_t.size()) + " vs dataset dim " +
                              std::to_string(data.dim));
    if (code && !data.has_codes())
        throw ValidationError("oracle_velocity: conditional query on a dataset without codes");

    const double at = flow.a(t), st = flow.s(t), dat = flow.da(t), dst = flow.ds(t);
    const double inv_2s2 = 1.0 / (2.0 * st * st);
    const int64_t n = data.size(), dim = data.dim;

    // Pass 1: Gaussian log-posteriors per admissible point.
    std::vector<double> logw(static_cast<size_t>(n), -std::numeric_limits<double>::infinity());
    double max_logw = -std::numeric_limits<double>::infinity();
    int64_t admissible = 0;
    for (int64_t i = 0; i < n; ++i) {
        if (code && data.codes[static_cast<size_t>(i)] != *code) continue;
        ++admissible;
        auto p = data.points.row(i);
        double d2 = 0.0;
        for (int64_t j = 0; j < dim; ++j) d2 += sqr(x_t[static_cast<size_t>(j)] - at * p[static_cast<size_t>(j)]);
        double lw = -d2 * inv_2s2;  // uniform p_data and shared Gaussian norm cancel
        logw[static_cast<size_t>(i)] = lw;
        max_logw = std::max(max_logw, lw);
    }
    if (admissible == 0)
        throw ValidationError("oracle_velocity: no dataset point carries code " +
                              std::to_string(code.value_or(-1)));

    // Pass 2: softmax-weighted average of per-point path velocities, where
    // the noise consistent with (x_0 = p, X_t = x_t) is (x_t - a p) / s.
    double wsum = 0.0;
    std::fill(out.begin(), out.end(), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        double lw = logw[static_cast<size_t>(i)];
        if (lw == -std::numeric_limits<double>::infinity()) continue;
        double w = std::exp(lw - max_logw);
        wsum += w;
        auto p = data.points.row(i);
        for (int64_t j = 0; j < dim; ++j) {
            double xi = (x_t[static_cast<size_t>(j)] - at * p[static_cast<size_t>(j)]) / st;
            out[static_cast<size_t>(j)] += w * (dat * p[static_cast<size_t>(j)] + dst * xi);
        }
    }
    for (double& v : out) v /= wsum;
}

Matrix oracle_velocity_batch(const FlowSpec& flow, const FiniteDataset& data, const Matrix& x_t, double t,
                             std::optional<int64_t> code) {
    Matrix out(x_t.rows, x_t.cols);
    for (int64_t r = 0; r < x_t.rows; ++r) oracle_velocity(flow, data, x_t.row(r), t, out.row(r), code);
    return out;
}

}  // namespace flowlab
