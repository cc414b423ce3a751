#pragma once

#include "flowlab/flows.hpp"
#include "flowlab/metrics.hpp"

namespace flowlab {

// Hand-assembled SVG plots over the results table. No charting dependency:
// fixed canvas, fixed number formatting, deterministic bytes for golden
// comparisons.
struct PlotSpec {
    std::string kind = "line";       // line | bar
    std::string metric = "w2";       // first name segment to select
    std::string x_key = "nfe";       // line: numeric x from this name segment
    std::string group_key = "model";  // one series/bar per value of this segment
};

// Returns the number of series written; 0 means no rows matched and no file
// was produced (callers warn and exit success).
int emit_plot(const std::vector<MetricRow>& rows, const PlotSpec& spec, const std::string& out_path);

// Scatter overlay of backward trajectories (CSV paths from the sampler) on
// top of a dataset's points.
void emit_traj_plot(const std::vector<std::string>& traj_csvs, const std::string& dataset_path,
                    const std::string& out_path);

// name segments: "w2|solver=euler|nfe=4" -> {"", "solver"->"euler", ...}
std::map<std::string, std::string> parse_metric_name(const std::string& name);

}  // namespace flowlab
