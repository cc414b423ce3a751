#include "flowlab/editing.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace flowlab {

DegradationKind degradation_from_name(const std::string& name) {
    if (name == "inpaint") return DegradationKind::Inpaint;
    if (name == "sr") return DegradationKind::DownsampleAvg;
    if (name == "colorize") return DegradationKind::ChannelAvg;
    throw ValidationError("unknown degradation '" + name + "' (inpaint|sr|colorize)");
}

std::string degradation_name(DegradationKind k) {
    switch (k) {
        case DegradationKind::Inpaint: return "inpaint";
        case DegradationKind::DownsampleAvg: return "sr";
        case DegradationKind::ChannelAvg: return "colorize";
    }
    return "?";
}

ImageShape DegradationOp::degraded_shape() const {
    switch (kind) {
        case DegradationKind::Inpaint: return in;
        case DegradationKind::DownsampleAvg: return {in.c, in.h / 2, in.w / 2};
        case DegradationKind::ChannelAvg: return {1, in.h, in.w};
    }
    return in;
}

void DegradationOp::validate() const {
    if (kind == DegradationKind::DownsampleAvg && (in.h % 2 != 0 || in.w % 2 != 0))
        throw ValidationError("degradation: downsample-average needs even spatial extents");
    if (kind == DegradationKind::ChannelAvg && in.c < 2)
        throw ValidationError("degradation: channel-average needs at least 2 channels");
    if (static_cast<int64_t>(omega.size()) != degraded_shape().numel())
        throw ValidationError("degradation: mask length " + std::to_string(omega.size()) +
                              " vs degraded domain size " + std::to_string(degraded_shape().numel()));
    for (double v : omega)
        if (v != 0.0 && v != 1.0) throw ValidationError("degradation: mask entries must be 0 or 1");
}

std::vector<double> DegradationOp::apply(std::span<const double> x) const {
    if (static_cast<int64_t>(x.size()) != in.numel())
        throw ValidationError("degradation: input length " + std::to_string(x.size()) + " vs image size " +
                              std::to_string(in.numel()));
    switch (kind) {
        case DegradationKind::Inpaint:
            return std::vector<double>(x.begin(), x.end());
        case DegradationKind::DownsampleAvg: {
            ImageShape out = degraded_shape();
            std::vector<double> y(static_cast<size_t>(out.numel()));
            for (int64_t c = 0; c < in.c; ++c)
                for (int64_t i = 0; i < out.h; ++i)
                    for (int64_t j = 0; j < out.w; ++j) {
                        size_t base = static_cast<size_t>((c * in.h + 2 * i) * in.w + 2 * j);
                        // pairwise sums keep constant blocks exact
                        double s = (x[base] + x[base + 1]) + (x[base + static_cast<size_t>(in.w)] +
                                                              x[base + static_cast<size_t>(in.w) + 1]);
                        y[static_cast<size_t>((c * out.h + i) * out.w + j)] = s * 0.25;
                    }
            return y;
        }
        case DegradationKind::ChannelAvg: {
            std::vector<double> y(static_cast<size_t>(in.h * in.w), 0.0);
            // pairwise channel reduction (c is 2 in the toy setup)
            for (int64_t p = 0; p < in.h * in.w; ++p) {
                double s = 0.0;
                for (int64_t c = 0; c < in.c; ++c) s += x[static_cast<size_t>(c * in.h * in.w + p)];
                y[static_cast<size_t>(p)] = s / static_cast<double>(in.c);
            }
            return y;
        }
    }
    throw ValidationError("degradation: unknown kind");
}

std::vector<double> DegradationOp::pseudo_invert(std::span<const double> y) const {
    ImageShape deg = degraded_shape();
    if (static_cast<int64_t>(y.size()) != deg.numel())
        throw ValidationError("degradation: degraded length " + std::to_string(y.size()) + " vs expected " +
                              std::to_string(deg.numel()));
    switch (kind) {
        case DegradationKind::Inpaint:
            return std::vector<double>(y.begin(), y.end());
        case DegradationKind::DownsampleAvg: {
            std::vector<double> x(static_cast<size_t>(in.numel()));
            for (int64_t c = 0; c < in.c; ++c)
                for (int64_t i = 0; i < in.h; ++i)
                    for (int64_t j = 0; j < in.w; ++j)
                        x[static_cast<size_t>((c * in.h + i) * in.w + j)] =
                            y[static_cast<size_t>((c * deg.h + i / 2) * deg.w + j / 2)];
            return x;
        }
        case DegradationKind::ChannelAvg: {
            std::vector<double> x(static_cast<size_t>(in.numel()));
            for (int64_t c = 0; c < in.c; ++c)
                for (int64_t p = 0; p < in.h * in.w; ++p)
                    x[static_cast<size_t>(c * in.h * in.w + p)] = y[static_cast<size_t>(p)];
            return x;
        }
    }
    throw ValidationError("degradation: unknown kind");
}

namespace {

// x <- A+[(A z) (1 - omega) + (A x) omega]
std::vector<double> project(const DegradationOp& op, std::span<const double> ref_degraded,
                            std::span<const double> x) {
    std::vector<double> ax = op.apply(x);
    for (size_t i = 0; i < ax.size(); ++i)
        ax[i] = ref_degraded[i] * (1.0 - op.omega[i]) + ax[i] * op.omega[i];
    return op.pseudo_invert(ax);
}

}  // namespace

EditResult zero_shot_edit(const DenoiserNet& den, const EncoderNet& enc, const FlowSpec& flow,
                          const EditTask& task) {
    task.op.validate();
    if (task.shape.numel() != task.op.in.numel() ||
        static_cast<int64_t>(task.reference.size()) != task.shape.numel())
        throw ValidationError("edit: reference image does not match the operator's input shape");
    if (task.times.empty()) throw ValidationError("edit: empty time schedule");
    for (size_t i = 0; i + 1 < task.times.size(); ++i)
        if (!(task.times[i] > task.times[i + 1])) throw ValidationError("edit: schedule must decrease");
    if (den.data_dim != task.shape.numel())
        throw ValidationError("edit: model data dim " + std::to_string(den.data_dim) + " vs image size " +
                              std::to_string(task.shape.numel()));

    NoGradGuard ng;
    Rng rng(task.seed);
    const int64_t dim = task.shape.numel();

    // line 1: zero the synthesis region of the reference in the degraded view
    std::vector<double> az = task.op.apply(task.reference);
    std::vector<double> az_masked = az;
    for (size_t i = 0; i < az_masked.size(); ++i) az_masked[i] *= (1.0 - task.op.omega[i]);
    std::vector<double> x = task.op.pseudo_invert(az_masked);

    EditResult res;
    for (double t : task.times) {
        flow.check_time(t);
        // y <- E(x) on the current estimate
        Matrix xm(1, dim);
        std::copy(x.begin(), x.end(), xm.a.begin());
        auto codes = encode_indices(enc, xm);
        res.code_trace.push_back(codes[0]);
        auto digits = code_digits(codes[0], enc.codebook);

        // renoise x ~ N(x, t^2 I), then conditional denoise
        x = sde_renoise_step(den, flow, x, t, digits, rng);
        for (double v : x)
            if (!std::isfinite(v))
                throw NumericError("edit: non-finite state at step " +
                                   std::to_string(res.code_trace.size() - 1));

        // data-consistency projection is the final operation of each step
        x = project(task.op, az, x);
        res.states.push_back(x);
    }
    res.image = std::move(x);
    return res;
}

void save_image_txt(const std::string& path, std::span<const double> img, const ImageShape& shape) {
    if (static_cast<int64_t>(img.size()) != shape.numel())
        throw ValidationError("image: data length " + std::to_string(img.size()) + " vs shape " +
                              std::to_string(shape.numel()));
    std::ofstream os(path);
    if (!os) throw ValidationError("image: cannot open '" + path + "' for writing");
    os << "# image c=" << shape.c << " h=" << shape.h << " w=" << shape.w << "\n";
    os.precision(17);
    for (int64_t c = 0; c < shape.c; ++c) {
        for (int64_t i = 0; i < shape.h; ++i) {
            for (int64_t j = 0; j < shape.w; ++j) {
                if (j) os << " ";
                os << img[static_cast<size_t>((c * shape.h + i) * shape.w + j)];
            }
            os << "\n";
        }
        if (c + 1 < shape.c) os << "\n";
    }
}

std::pair<std::vector<double>, ImageShape> load_image_txt(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("image: cannot open '" + path + "'");
    std::string header;
    std::getline(is, header);
    ImageShape shape{0, 0, 0};
    {
        std::istringstream hs(header);
        std::string tok;
        while (hs >> tok) {
            if (tok.rfind("c=", 0) == 0) shape.c = std::stoll(tok.substr(2));
            if (tok.rfind("h=", 0) == 0) shape.h = std::stoll(tok.substr(2));
            if (tok.rfind("w=", 0) == 0) shape.w = std::stoll(tok.substr(2));
        }
    }
    if (shape.c < 1 || shape.h < 1 || shape.w < 1)
        throw ValidationError("image: header of '" + path + "' is missing c=/h=/w=");
    std::vector<double> img;
    double v;
    while (is >> v) img.push_back(v);
    if (static_cast<int64_t>(img.size()) != shape.numel())
        throw ValidationError("image: '" + path + "' carries " + std::to_string(img.size()) + " values, header "
                              "promises " + std::to_string(shape.numel()));
    return {std::move(img), shape};
}

std::vector<double> load_mask_txt(const std::string& path, const ImageShape& expected) {
    auto [mask, shape] = load_image_txt(path);
    if (shape.numel() != expected.numel())
        throw ValidationError("mask: '" + path + "' has " + std::to_string(shape.numel()) +
                              " entries, expected " + std::to_string(expected.numel()));
    for (double v : mask)
        if (v != 0.0 && v != 1.0) throw ValidationError("mask: entries must be 0 or 1");
    return mask;
}

}  // namespace flowlab
