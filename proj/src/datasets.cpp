#include "flowlab/datasets.hpp"

#include <cmath>

namespace flowlab {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

int64_t ToySpec::dim() const { return kind == "tiny-shapes" ? img_channels * 64 : 2; }

void ToySpec::validate() const {
    if (kind != "gaussian-ring" && kind != "checkerboard" && kind != "two-moons" && kind != "tiny-shapes")
        throw ValidationError("dataset kind '" + kind + "' unknown (gaussian-ring|checkerboard|two-moons|tiny-shapes)");
    if (count < 1) throw ValidationError("dataset: count must be positive");
    if (kind == "gaussian-ring" && modes < 1) throw ValidationError("dataset: ring needs at least one mode");
    if (kind == "tiny-shapes" && (img_channels < 1 || img_channels > 4))
        throw ValidationError("dataset: tiny-shapes supports 1..4 channels");
}

KvMap ToySpec::to_kv(const std::string& prefix) const {
    KvMap kv;
    kv[prefix + "kind"] = kind;
    kv[prefix + "count"] = std::to_string(count);
    kv[prefix + "seed"] = std::to_string(seed);
    kv[prefix + "modes"] = std::to_string(modes);
    char buf[64];
    snprintf(buf, sizeof(buf), "%.17g", radius);
    kv[prefix + "radius"] = buf;
    snprintf(buf, sizeof(buf), "%.17g", noise_std);
    kv[prefix + "noise_std"] = buf;
    kv[prefix + "img_channels"] = std::to_string(img_channels);
    return kv;
}

ToySpec ToySpec::from_kv(const KvMap& kv, const std::string& prefix) {
    ToySpec s;
    s.kind = kv_get(kv, prefix + "kind", s.kind);
    s.count = kv_get_i64(kv, prefix + "count", s.count);
    s.seed = kv_get_u64(kv, prefix + "seed", s.seed);
    s.modes = kv_get_i64(kv, prefix + "modes", s.modes);
    s.radius = kv_get_f64(kv, prefix + "radius", s.radius);
    s.noise_std = kv_get_f64(kv, prefix + "noise_std", s.noise_std);
    s.img_channels = kv_get_i64(kv, prefix + "img_channels", s.img_channels);
    s.validate();
    return s;
}

namespace {

void gen_ring(const ToySpec& spec, Rng& rng, Matrix& out) {
    for (int64_t i = 0; i < spec.count; ++i) {
        int64_t mode = rng.uniform_int(spec.modes);
        double th = 2.0 * kPi * static_cast<double>(mode) / static_cast<double>(spec.modes);
        out(i, 0) = spec.radius * std::cos(th) + spec.noise_std * rng.normal();
        out(i, 1) = spec.radius * std::sin(th) + spec.noise_std * rng.normal();
    }
}

void gen_checkerboard(const ToySpec& spec, Rng& rng, Matrix& out) {
    for (int64_t i = 0; i < spec.count; ++i) {
        // rejection over [-2,2]^2, keep squares with even floor parity
        for (;;) {
            double x = rng.uniform(-2.0, 2.0), y = rng.uniform(-2.0, 2.0);
            int64_t px = static_cast<int64_t>(std::floor(x)), py = static_cast<int64_t>(std::floor(y));
            if (((px + py) % 2 + 2) % 2 == 0) {
                out(i, 0) = x;
                out(i, 1) = y;
                break;
            }
        }
    }
}

void gen_two_moons(const ToySpec& spec, Rng& rng, Matrix& out) {
    for (int64_t i = 0; i < spec.count; ++i) {
        double th = kPi * rng.uniform();
        if (rng.uniform() < 0.5) {
            out(i, 0) = std::cos(th) + spec.noise_std * rng.normal();
            out(i, 1) = std::sin(th) + spec.noise_std * rng.normal();
        } else {
            out(i, 0) = 1.0 - std::cos(th) + spec.noise_std * rng.normal();
            out(i, 1) = 0.5 - std::sin(th) + spec.noise_std * rng.normal();
        }
    }
}

void draw_shape(Rng& rng, double* img, int64_t channels) {
    const int64_t h = 8, w = 8;
    int64_t kind = rng.uniform_int(4);
    int64_t cx = 2 + rng.uniform_int(4), cy = 2 + rng.uniform_int(4);
    std::vector<double> mask(static_cast<size_t>(h * w), 0.0);
    switch (kind) {
        case 0: {  // filled disc
            double r = 1.5 + rng.uniform();
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < w; ++j)
                    if (sqr(static_cast<double>(i - cy)) + sqr(static_cast<double>(j - cx)) <= r * r)
                        mask[static_cast<size_t>(i * w + j)] = 1.0;
            break;
        }
        case 1: {  // square outline
            int64_t r = 1 + rng.uniform_int(2);
            for (int64_t i = std::max<int64_t>(0, cy - r); i <= std::min<int64_t>(h - 1, cy + r); ++i)
                for (int64_t j = std::max<int64_t>(0, cx - r); j <= std::min<int64_t>(w - 1, cx + r); ++j)
                    if (i == cy - r || i == cy + r || j == cx - r || j == cx + r)
                        mask[static_cast<size_t>(i * w + j)] = 1.0;
            break;
        }
        case 2: {  // cross
            for (int64_t i = 0; i < h; ++i) mask[static_cast<size_t>(i * w + cx)] = 1.0;
            for (int64_t j = 0; j < w; ++j) mask[static_cast<size_t>(cy * w + j)] = 1.0;
            break;
        }
        default: {  // horizontal bar
            int64_t thick = 1 + rng.uniform_int(2);
            for (int64_t i = cy; i < std::min<int64_t>(h, cy + thick); ++i)
                for (int64_t j = 0; j < w; ++j) mask[static_cast<size_t>(i * w + j)] = 1.0;
            break;
        }
    }
    for (int64_t c = 0; c < channels; ++c) {
        double v = 0.5 + 0.5 * rng.uniform();
        for (int64_t p = 0; p < h * w; ++p) img[c * h * w + p] = v * mask[static_cast<size_t>(p)];
    }
}

}  // namespace

FiniteDataset generate(const ToySpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    FiniteDataset ds;
    ds.dim = spec.dim();
    ds.points = Matrix(spec.count, ds.dim);
    if (spec.kind == "gaussian-ring") {
        gen_ring(spec, rng, ds.points);
    } else if (spec.kind == "checkerboard") {
        gen_checkerboard(spec, rng, ds.points);
    } else if (spec.kind == "two-moons") {
        gen_two_moons(spec, rng, ds.points);
    } else {
        for (int64_t i = 0; i < spec.count; ++i) draw_shape(rng, ds.points.row(i).data(), spec.img_channels);
    }
    return ds;
}

}  // namespace flowlab
