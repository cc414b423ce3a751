#include "flowlab/plots.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace flowlab {

std::map<std::string, std::string> parse_metric_name(const std::string& name) {
    std::map<std::string, std::string> out;
    size_t pos = 0;
    bool first = true;
    while (pos <= name.size()) {
        size_t bar = name.find('|', pos);
        if (bar == std::string::npos) bar = name.size();
        std::string seg = name.substr(pos, bar - pos);
        if (first) {
            out["metric"] = seg;
            first = false;
        } else if (!seg.empty()) {
            size_t eq = seg.find('=');
            if (eq != std::string::npos) out[seg.substr(0, eq)] = seg.substr(eq + 1);
        }
        pos = bar + 1;
        if (bar == name.size()) break;
    }
    return out;
}

namespace {

constexpr double kW = 640, kH = 480;
constexpr double kL = 70, kR = 20, kT = 30, kB = 50;  // margins

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

std::string fmt(double v) {
    char buf[48];
    snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

struct Canvas {
    std::ostringstream os;
    Canvas() {
        os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
           << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
        os << "<rect x=\"0\" y=\"0\" width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n";
    }
    void axes() {
        os << "<line x1=\"" << kL << "\" y1=\"" << kH - kB << "\" x2=\"" << kW - kR << "\" y2=\"" << kH - kB
           << "\" stroke=\"black\"/>\n";
        os << "<line x1=\"" << kL << "\" y1=\"" << kT << "\" x2=\"" << kL << "\" y2=\"" << kH - kB
           << "\" stroke=\"black\"/>\n";
    }
    void text(double x, double y, const std::string& s, const std::string& anchor = "middle") {
        os << "<text x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" font-size=\"12\" text-anchor=\"" << anchor
           << "\">" << s << "</text>\n";
    }
    void finish(const std::string& path) {
        os << "</svg>\n";
        std::ofstream f(path);
        if (!f) throw ValidationError("plot: cannot open '" + path + "' for writing");
        f << os.str();
    }
};

struct Range {
    double lo = 0, hi = 1;
    void expand(double v) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    static Range of(const std::vector<double>& vs) {
        Range r{vs.front(), vs.front()};
        for (double v : vs) {
            r.lo = std::min(r.lo, v);
            r.hi = std::max(r.hi, v);
        }
        if (r.lo == r.hi) {
            r.lo -= 1.0;
            r.hi += 1.0;
        }
        return r;
    }
    double px(double v, double a, double b) const { return a + (v - lo) / (hi - lo) * (b - a); }
};

}  // namespace

int emit_plot(const std::vector<MetricRow>& rows, const PlotSpec& spec, const std::string& out_path) {
    // series[group] = sorted (x, value) or (category index, value) for bars
    std::map<std::string, std::vector<std::pair<double, double>>> series;
    std::vector<std::string> bar_labels;
    for (const auto& row : rows) {
        auto segs = parse_metric_name(row.name);
        if (segs["metric"] != spec.metric) continue;
        std::string group = segs.count(spec.group_key) ? segs[spec.group_key] : "all";
        if (spec.kind == "line") {
            if (!segs.count(spec.x_key)) continue;
            series[group].emplace_back(std::stod(segs[spec.x_key]), row.value);
        } else {
            series[group].emplace_back(0.0, row.value);
        }
    }
    if (series.empty()) return 0;

    Canvas cv;
    cv.axes();
    cv.text(kW / 2, kH - 12, spec.kind == "line" ? spec.x_key : spec.group_key);
    cv.text(16, kH / 2, spec.metric, "middle");

    std::vector<double> all_y;
    for (auto& [g, pts] : series)
        for (auto& [x, y] : pts) all_y.push_back(y);
    Range ry = Range::of(all_y);
    ry.lo = std::min(ry.lo, 0.0);

    // y ticks
    for (int k = 0; k <= 4; ++k) {
        double v = ry.lo + (ry.hi - ry.lo) * k / 4.0;
        double y = kH - kB - (kH - kT - kB) * k / 4.0;
        cv.text(kL - 6, y + 4, fmt(v), "end");
        cv.os << "<line x1=\"" << kL - 3 << "\" y1=\"" << fmt(y) << "\" x2=\"" << kL << "\" y2=\"" << fmt(y)
              << "\" stroke=\"black\"/>\n";
    }

    int color_idx = 0;
    if (spec.kind == "line") {
        std::vector<double> all_x;
        for (auto& [g, pts] : series)
            for (auto& [x, y] : pts) all_x.push_back(x);
        Range rx = Range::of(all_x);
        for (int k = 0; k <= 4; ++k) {
            double v = rx.lo + (rx.hi - rx.lo) * k / 4.0;
            double x = kL + (kW - kL - kR) * k / 4.0;
            cv.text(x, kH - kB + 16, fmt(v));
        }
        for (auto& [group, pts] : series) {
            auto sorted = pts;
            std::sort(sorted.begin(), sorted.end());
            const char* color = kPalette[color_idx % 7];
            cv.os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
            for (auto& [x, y] : sorted)
                cv.os << fmt(rx.px(x, kL, kW - kR)) << "," << fmt(ry.px(y, kH - kB, kT)) << " ";
            cv.os << "\"/>\n";
            for (auto& [x, y] : sorted)
                cv.os << "<circle cx=\"" << fmt(rx.px(x, kL, kW - kR)) << "\" cy=\""
                      << fmt(ry.px(y, kH - kB, kT)) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
            cv.text(kW - kR - 4, kT + 14 + 14 * color_idx, group + " —", "end");
            cv.os << "<line x1=\"" << kW - kR - 40 << "\" y1=\"" << kT + 10 + 14 * color_idx << "\" x2=\""
                  << kW - kR - 24 << "\" y2=\"" << kT + 10 + 14 * color_idx << "\" stroke=\"" << color
                  << "\" stroke-width=\"2\"/>\n";
            ++color_idx;
        }
    } else {
        // bars: one per group, alphabetical
        double n = static_cast<double>(series.size());
        double slot = (kW - kL - kR) / n;
        int idx = 0;
        for (auto& [group, pts] : series) {
            double mean = 0;
            for (auto& [x, y] : pts) mean += y / static_cast<double>(pts.size());
            double x0 = kL + slot * idx + slot * 0.2;
            double y1 = ry.px(mean, kH - kB, kT);
            const char* color = kPalette[idx % 7];
            cv.os << "<rect x=\"" << fmt(x0) << "\" y=\"" << fmt(y1) << "\" width=\"" << fmt(slot * 0.6)
                  << "\" height=\"" << fmt(kH - kB - y1) << "\" fill=\"" << color << "\"/>\n";
            cv.text(x0 + slot * 0.3, kH - kB + 16, group);
            cv.text(x0 + slot * 0.3, y1 - 6, fmt(mean));
            ++idx;
        }
    }
    cv.finish(out_path);
    return static_cast<int>(series.size());
}

void emit_traj_plot(const std::vector<std::string>& traj_csvs, const std::string& dataset_path,
                    const std::string& out_path) {
    Canvas cv;
    Range rx{-3, 3}, ry{-3, 3};
    std::vector<std::vector<std::pair<double, double>>> paths;
    for (const auto& p : traj_csvs) {
        std::ifstream is(p);
        if (!is) throw ValidationError("traj plot: cannot open '" + p + "'");
        std::string line;
        std::getline(is, line);  // header
        std::vector<std::pair<double, double>> path;
        while (std::getline(is, line)) {
            std::istringstream ls(line);
            std::string cell;
            std::vector<double> vals;
            while (std::getline(ls, cell, ',')) vals.push_back(std::stod(cell));
            if (vals.size() < 3) throw ValidationError("traj plot: '" + p + "' rows need t,x0,x1");
            path.emplace_back(vals[1], vals[2]);
            rx.expand(vals[1]);
            ry.expand(vals[2]);
        }
        paths.push_back(std::move(path));
    }
    Matrix pts;
    if (!dataset_path.empty()) {
        FiniteDataset ds = FiniteDataset::load(dataset_path);
        if (ds.dim < 2) throw ValidationError("traj plot: dataset must be at least 2-D");
        pts = ds.points;
        for (int64_t i = 0; i < pts.rows; ++i) {
            rx.expand(pts(i, 0));
            ry.expand(pts(i, 1));
        }
    }
    for (int64_t i = 0; i < pts.rows; ++i)
        cv.os << "<circle cx=\"" << fmt(rx.px(pts(i, 0), kL, kW - kR)) << "\" cy=\""
              << fmt(ry.px(pts(i, 1), kH - kB, kT)) << "\" r=\"2\" fill=\"#bbbbbb\"/>\n";
    int color_idx = 0;
    for (const auto& path : paths) {
        const char* color = kPalette[color_idx % 7];
        cv.os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1\" points=\"";
        for (auto& [x, y] : path) cv.os << fmt(rx.px(x, kL, kW - kR)) << "," << fmt(ry.px(y, kH - kB, kT)) << " ";
        cv.os << "\"/>\n";
        ++color_idx;
    }
    cv.axes();
    cv.finish(out_path);
}

}  // namespace flowlab
