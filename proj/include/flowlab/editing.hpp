#pragma once

#include "flowlab/samplers.hpp"

namespace flowlab {

struct ImageShape {
    int64_t c = 1, h = 8, w = 8;
    int64_t numel() const { return c * h * w; }
};

// The three lossy forward maps with their pseudo-inverses. A compose A+ is
// exact on the range of A, so A A+ A = A holds bitwise (block means use
// pairwise sums).
enum class DegradationKind { Inpaint, DownsampleAvg, ChannelAvg };

struct DegradationOp {
    DegradationKind kind = DegradationKind::Inpaint;
    ImageShape in;
    // degraded-domain mask: 1 = region to synthesize, 0 = region to preserve
    std::vector<double> omega;

    ImageShape degraded_shape() const;
    void validate() const;

    std::vector<double> apply(std::span<const double> x) const;           // A
    std::vector<double> pseudo_invert(std::span<const double> y) const;   // A+
};

DegradationKind degradation_from_name(const std::string& name);
std::string degradation_name(DegradationKind k);

struct EditTask {
    std::vector<double> reference;  // z, flattened [c,h,w]
    ImageShape shape;
    DegradationOp op;
    std::vector<double> times;  // decreasing renoising schedule {t_n}
    uint64_t seed = 0;
};

struct EditResult {
    std::vector<double> image;
    std::vector<int64_t> code_trace;            // encoder code index per step
    std::vector<std::vector<double>> states;    // post-projection state per step
};

// Conditional renoising with data-consistency projection: per step, re-encode
// the current estimate, renoise with variance t^2, denoise conditionally,
// then project the preserved region back to the reference. The preserved
// degraded region equals A(z) bitwise after every step.
EditResult zero_shot_edit(const DenoiserNet& den, const EncoderNet& enc, const FlowSpec& flow,
                          const EditTask& task);

// Plain-text image grid: header "# image c=<c> h=<h> w=<w>", then h rows of w
// space-separated values per channel, channels as consecutive blocks.
void save_image_txt(const std::string& path, std::span<const double> img, const ImageShape& shape);
std::pair<std::vector<double>, ImageShape> load_image_txt(const std::string& path);

// Mask files reuse the image grid format with 0/1 entries.
std::vector<double> load_mask_txt(const std::string& path, const ImageShape& expected);

}  // namespace flowlab
