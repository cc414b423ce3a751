#include "flowlab/nn.hpp"

#include <cmath>

namespace flowlab {

namespace {

Tensor init_weight(const Shape& shape, int64_t fan_in, Rng& rng, bool zero_init) {
    std::vector<double> w(static_cast<size_t>(shape_numel(shape)), 0.0);
    if (!zero_init) {
        double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (double& v : w) v = s * rng.normal();
    }
    return Tensor::from_data(shape, std::move(w), true);
}

}  // namespace

Linear::Linear(int64_t in, int64_t out, Rng& rng, bool zero_init) {
    W = init_weight({in, out}, in, rng, zero_init);
    b = Tensor::zeros({1, out}, true);
}

Tensor Linear::forward(const Tensor& x) const {
    Tensor y = matmul(x, W);
    return add(y, broadcast_rows(b, y.shape()[0]));
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + "/W", W});
    out.push_back({prefix + "/b", b});
}

Mlp::Mlp(const std::vector<int64_t>& widths, Rng& rng, bool zero_init_head) {
    if (widths.size() < 2) throw ValidationError("Mlp: need at least input and output widths");
    for (size_t i = 0; i + 1 < widths.size(); ++i) {
        bool last = i + 2 == widths.size();
        layers.emplace_back(widths[i], widths[i + 1], rng, last && zero_init_head);
    }
}

Tensor Mlp::forward(const Tensor& x) const {
    Tensor h = x;
    for (size_t i = 0; i < layers.size(); ++i) {
        h = layers[i].forward(h);
        if (i + 1 < layers.size()) h = tanh_op(h);
    }
    return h;
}

void Mlp::collect(const std::string& prefix, ParamList& out) const {
    for (size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + "/l" + std::to_string(i), out);
}

int64_t Mlp::param_count() const {
    int64_t n = 0;
    for (const auto& l : layers) n += l.param_count();
    return n;
}

Conv2dLayer::Conv2dLayer(int64_t in_c, int64_t out_c, int64_t k, Rng& rng, bool zero_init) {
    W = init_weight({out_c, in_c, k, k}, in_c * k * k, rng, zero_init);
    b = Tensor::zeros({1, out_c}, true);
}

Tensor Conv2dLayer::forward(const Tensor& x) const {
    // conv2d wants the bias flat; reshape-free: pass as is, conv checks numel
    return conv2d(x, W, b);
}

void Conv2dLayer::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + "/W", W});
    out.push_back({prefix + "/b", b});
}

bool optimizer_step(ParamList& params, AdamState& state, const OptimConfig& cfg) {
    // scan first: a single bad gradient voids the whole step
    for (auto& p : params)
        for (double g : p.t.grad())
            if (!std::isfinite(g)) {
                zero_grads(params);
                return false;
            }

    if (cfg.kind == OptimizerKind::Sgd) {
        for (auto& p : params) {
            auto val = p.t.raw_data();
            auto g = p.t.grad();
            for (size_t i = 0; i < val.size(); ++i) val[i] -= cfg.lr * g[i];
        }
    } else {
        if (state.m.size() != params.size()) {
            state.m.assign(params.size(), {});
            state.v.assign(params.size(), {});
            for (size_t k = 0; k < params.size(); ++k) {
                state.m[k].assign(static_cast<size_t>(params[k].t.numel()), 0.0);
                state.v[k].assign(static_cast<size_t>(params[k].t.numel()), 0.0);
            }
        }
        state.step += 1;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
        for (size_t k = 0; k < params.size(); ++k) {
            auto val = params[k].t.raw_data();
            auto g = params[k].t.grad();
            auto& m = state.m[k];
            auto& v = state.v[k];
            for (size_t i = 0; i < val.size(); ++i) {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                val[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            }
        }
    }
    zero_grads(params);
    return true;
}

void ema_update(ParamList& shadow, const ParamList& live, double mu) {
    if (shadow.size() != live.size())
        throw ValidationError("ema_update: parameter lists have " + std::to_string(shadow.size()) + " vs " +
                              std::to_string(live.size()) + " entries");
    for (size_t k = 0; k < shadow.size(); ++k) {
        if (shadow[k].t.shape() != live[k].t.shape())
            throw ValidationError("ema_update: layout mismatch at '" + shadow[k].name + "': " +
                                  shape_str(shadow[k].t.shape()) + " vs " + shape_str(live[k].t.shape()));
        auto s = shadow[k].t.raw_data();
        auto l = live[k].t.data();
        for (size_t i = 0; i < s.size(); ++i) s[i] = mu * s[i] + (1.0 - mu) * l[i];
    }
}

void zero_grads(ParamList& params) {
    for (auto& p : params) p.t.zero_grad();
}

int64_t param_count(const ParamList& params) {
    int64_t n = 0;
    for (const auto& p : params) n += p.t.numel();
    return n;
}

}  // namespace flowlab
