#include "flowlab/denoiser.hpp"

#include <cmath>

namespace flowlab {

std::string parameterization_name(Parameterization p) {
    return p == Parameterization::DenoiserX0 ? "denoiser_x0" : "velocity";
}

Parameterization parameterization_from_name(const std::string& s) {
    if (s == "denoiser_x0") return Parameterization::DenoiserX0;
    if (s == "velocity") return Parameterization::Velocity;
    throw ValidationError("unknown parameterization '" + s + "' (denoiser_x0|velocity)");
}

Preconditioning Preconditioning::identity() { return {Kind::Identity, 0.5}; }
Preconditioning Preconditioning::edm(double sigma_data) { return {Kind::Edm, sigma_data}; }

double Preconditioning::c_skip(double t) const {
    if (kind == Kind::Identity) return 0.0;
    return sigma_data * sigma_data / (t * t + sigma_data * sigma_data);
}

double Preconditioning::c_out(double t) const {
    if (kind == Kind::Identity) return 1.0;
    return t * sigma_data / std::sqrt(t * t + sigma_data * sigma_data);
}

double Preconditioning::c_in(double t) const {
    if (kind == Kind::Identity) return 1.0;
    return 1.0 / std::sqrt(t * t + sigma_data * sigma_data);
}

double Preconditioning::c_noise(double t) const {
    if (kind == Kind::Identity) return t;
    return 0.25 * std::log(t);
}

Matrix time_features(std::span<const double> u, int64_t feat_dim) {
    if (feat_dim % 2 != 0) throw ValidationError("time_features: feature count must be even");
    const int64_t half = feat_dim / 2;
    Matrix out(static_cast<int64_t>(u.size()), feat_dim);
    for (int64_t k = 0; k < half; ++k) {
        // log-spaced frequencies 1 .. 256
        double w = std::exp(std::log(256.0) * static_cast<double>(k) / static_cast<double>(std::max<int64_t>(half - 1, 1)));
        for (int64_t r = 0; r < static_cast<int64_t>(u.size()); ++r) {
            out(r, 2 * k) = std::sin(w * u[static_cast<size_t>(r)]);
            out(r, 2 * k + 1) = std::cos(w * u[static_cast<size_t>(r)]);
        }
    }
    return out;
}

Tensor center_digits(const Tensor& digits, const CodebookConfig& cfg) {
    double shift = static_cast<double>(cfg.levels - 1) / 2.0;
    return add(digits, Tensor::scalar(-shift));
}

Tensor code_to_tensor(const ConditionCode& code, int64_t batch) {
    const int64_t d = static_cast<int64_t>(code.digits.size());
    std::vector<double> vals(static_cast<size_t>(batch * d));
    for (int64_t r = 0; r < batch; ++r)
        for (int64_t j = 0; j < d; ++j)
            vals[static_cast<size_t>(r * d + j)] = static_cast<double>(code.digits[static_cast<size_t>(j)]);
    return Tensor::from_data({batch, d}, std::move(vals));
}

DenoiserNet DenoiserNet::make_mlp(Parameterization param, Preconditioning pre, const CodebookConfig& codebook,
                                  int64_t data_dim, const std::vector<int64_t>& hidden, int64_t emb_dim, Rng& rng) {
    DenoiserNet net;
    net.parameterization = param;
    net.precond = pre;
    net.codebook = codebook;
    net.data_dim = data_dim;
    net.emb_dim = emb_dim;
    net.time_embed = Linear(net.time_feat, emb_dim, rng);
    if (codebook.enabled()) {
        net.cond1 = Linear(codebook.channels, emb_dim, rng);
        net.cond2 = Linear(emb_dim, emb_dim, rng);
    }
    std::vector<int64_t> widths{data_dim + emb_dim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(data_dim);
    net.trunk = Mlp(widths, rng, /*zero_init_head=*/true);
    return net;
}

DenoiserNet DenoiserNet::make_conv(Parameterization param, Preconditioning pre, const CodebookConfig& codebook,
                                   int64_t c, int64_t h, int64_t w, int64_t conv_channels, int64_t emb_dim,
                                   Rng& rng) {
    DenoiserNet net;
    net.parameterization = param;
    net.precond = pre;
    net.codebook = codebook;
    net.data_dim = c * h * w;
    net.emb_dim = emb_dim;
    net.conv = true;
    net.img_c = c;
    net.img_h = h;
    net.img_w = w;
    net.time_embed = Linear(net.time_feat, emb_dim, rng);
    if (codebook.enabled()) {
        net.cond1 = Linear(codebook.channels, emb_dim, rng);
        net.cond2 = Linear(emb_dim, emb_dim, rng);
    }
    net.convA = Conv2dLayer(c, conv_channels, 3, rng);
    net.convB = Conv2dLayer(conv_channels, conv_channels, 3, rng);
    net.convC = Conv2dLayer(conv_channels, c, 3, rng, /*zero_init=*/true);
    net.embA = Linear(emb_dim, conv_channels, rng);
    net.embB = Linear(emb_dim, conv_channels, rng);
    return net;
}

ParamList DenoiserNet::params(const std::string& prefix) const {
    ParamList out;
    time_embed.collect(prefix + "/time_embed", out);
    if (codebook.enabled()) {
        cond1.collect(prefix + "/cond1", out);
        cond2.collect(prefix + "/cond2", out);
    }
    if (conv) {
        convA.collect(prefix + "/convA", out);
        convB.collect(prefix + "/convB", out);
        convC.collect(prefix + "/convC", out);
        embA.collect(prefix + "/embA", out);
        embB.collect(prefix + "/embB", out);
    } else {
        trunk.collect(prefix + "/trunk", out);
    }
    return out;
}

int64_t DenoiserNet::param_count() const {
    int64_t n = time_embed.param_count();
    if (codebook.enabled()) n += cond1.param_count() + cond2.param_count();
    if (conv) {
        n += convA.param_count() + convB.param_count() + convC.param_count();
        n += embA.param_count() + embB.param_count();
    } else {
        n += trunk.param_count();
    }
    return n;
}

Tensor DenoiserNet::net_forward(const Tensor& x_in, const std::vector<double>& t, const Tensor& cond) const {
    const int64_t b = x_in.shape()[0];
    if (static_cast<int64_t>(t.size()) != b)
        throw ValidationError("denoiser: " + std::to_string(t.size()) + " times for batch of " + std::to_string(b));
    if (codebook.enabled() != cond.defined())
        throw ValidationError(codebook.enabled() ? "denoiser: conditional net called without a condition tensor"
                                                 : "denoiser: unconditional net called with a condition tensor");
    if (cond.defined() && (cond.shape().size() != 2 || cond.shape()[0] != b || cond.shape()[1] != codebook.channels))
        throw ValidationError("denoiser: condition tensor shape " + shape_str(cond.shape()) + " vs batch " +
                              std::to_string(b) + " x d=" + std::to_string(codebook.channels));

    std::vector<double> cn(t.size());
    for (size_t i = 0; i < t.size(); ++i) cn[i] = precond.c_noise(t[i]);
    Tensor tf = Tensor::from_matrix(time_features(cn, time_feat));
    Tensor emb = time_embed.forward(tf);
    if (codebook.enabled()) {
        Tensor cemb = cond2.forward(tanh_op(cond1.forward(center_digits(cond, codebook))));
        emb = add(emb, cemb);
    }

    if (!conv) return trunk.forward(concat_cols(x_in, emb));

    Tensor img = reshape(x_in, {b, img_c, img_h, img_w});
    Tensor h1 = tanh_op(add(convA.forward(img), broadcast_spatial(embA.forward(emb), img_h, img_w)));
    Tensor h2 = tanh_op(add(convB.forward(h1), broadcast_spatial(embB.forward(emb), img_h, img_w)));
    return reshape(convC.forward(h2), {b, data_dim});
}

namespace {

// Per-row constant scaling tensor for schedules like c_in(t_i).
Tensor row_constant(const std::vector<double>& per_row, int64_t cols) {
    const int64_t b = static_cast<int64_t>(per_row.size());
    std::vector<double> vals(static_cast<size_t>(b * cols));
    for (int64_t r = 0; r < b; ++r)
        std::fill_n(vals.begin() + r * cols, cols, per_row[static_cast<size_t>(r)]);
    return Tensor::from_data({b, cols}, std::move(vals));
}

}  // namespace

Tensor DenoiserNet::denoise(const Tensor& x_t, const std::vector<double>& t, const Tensor& cond,
                            const FlowSpec& flow) const {
    const int64_t cols = x_t.shape()[1];
    if (parameterization == Parameterization::DenoiserX0) {
        std::vector<double> cin(t.size()), cskip(t.size()), cout(t.size());
        for (size_t i = 0; i < t.size(); ++i) {
            cin[i] = precond.c_in(t[i]);
            cskip[i] = precond.c_skip(t[i]);
            cout[i] = precond.c_out(t[i]);
        }
        Tensor f = net_forward(mul(x_t, row_constant(cin, cols)), t, cond);
        return add(mul(x_t, row_constant(cskip, cols)), mul(f, row_constant(cout, cols)));
    }
    // velocity net: x0 = (s' x - s v) / (s' a - a' s)
    for (double ti : t)
        if (!(ti > 0.0)) throw ValidationError("denoise: x0 view undefined at t=0 for a velocity net");
    Tensor v = net_forward(x_t, t, cond);
    std::vector<double> num_x(t.size()), num_v(t.size());
    for (size_t i = 0; i < t.size(); ++i) {
        double denom = x0_view_denominator(flow, t[i]);
        num_x[i] = flow.ds(t[i]) / denom;
        num_v[i] = -flow.s(t[i]) / denom;
    }
    return add(mul(x_t, row_constant(num_x, cols)), mul(v, row_constant(num_v, cols)));
}

Tensor DenoiserNet::velocity(const Tensor& x_t, const std::vector<double>& t, const Tensor& cond,
                             const FlowSpec& flow) const {
    if (parameterization == Parameterization::Velocity) return net_forward(x_t, t, cond);
    // denoiser net: v = a' D + s' (x - a D) / s, requires t > 0
    for (double ti : t)
        if (!(ti > 0.0))
            throw ValidationError("velocity: conversion from the x0 view undefined at t=0");
    const int64_t cols = x_t.shape()[1];
    Tensor d = denoise(x_t, t, cond, flow);
    std::vector<double> cd(t.size()), cx(t.size());
    for (size_t i = 0; i < t.size(); ++i) {
        double at = flow.a(t[i]), st = flow.s(t[i]);
        cd[i] = flow.da(t[i]) - flow.ds(t[i]) * at / st;
        cx[i] = flow.ds(t[i]) / st;
    }
    return add(mul(d, row_constant(cd, cols)), mul(x_t, row_constant(cx, cols)));
}

double x0_view_denominator(const FlowSpec& flow, double t) {
    double denom = flow.ds(t) * flow.a(t) - flow.da(t) * flow.s(t);
    if (denom == 0.0) throw NumericError("x0 view: interpolant algebra degenerate at t=" + std::to_string(t));
    return denom;
}

namespace {

std::vector<double> same_time(int64_t b, double t) { return std::vector<double>(static_cast<size_t>(b), t); }

Tensor digits_tensor(const std::vector<int64_t>& digits, int64_t batch, const CodebookConfig& cfg) {
    if (!cfg.enabled()) {
        if (!digits.empty())
            throw ValidationError("velocity_matrix: digits supplied to an unconditional net");
        return Tensor();
    }
    if (static_cast<int64_t>(digits.size()) != cfg.channels)
        throw ValidationError("velocity_matrix: digit count " + std::to_string(digits.size()) + " vs d=" +
                              std::to_string(cfg.channels));
    ConditionCode code;
    code.digits = digits;
    return code_to_tensor(code, batch);
}

}  // namespace

Matrix velocity_matrix(const DenoiserNet& net, const FlowSpec& flow, const Matrix& x, double t,
                       const std::vector<int64_t>& digits) {
    NoGradGuard ng;
    Tensor xt = Tensor::from_matrix(x);
    Tensor v = net.velocity(xt, same_time(x.rows, t), digits_tensor(digits, x.rows, net.codebook), flow);
    return v.to_matrix();
}

Matrix denoise_matrix(const DenoiserNet& net, const FlowSpec& flow, const Matrix& x, double t,
                      const std::vector<int64_t>& digits) {
    NoGradGuard ng;
    Tensor xt = Tensor::from_matrix(x);
    Tensor d = net.denoise(xt, same_time(x.rows, t), digits_tensor(digits, x.rows, net.codebook), flow);
    return d.to_matrix();
}

}  // namespace flowlab
