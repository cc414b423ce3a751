#pragma once

#include <string>

#include "flowlab/rng.hpp"
#include "flowlab/tensor.hpp"

namespace flowlab {

struct NamedParam {
    std::string name;
    Tensor t;  // shared handle onto the live parameter node
};
using ParamList = std::vector<NamedParam>;

// x[B,in] @ W[in,out] + b
struct Linear {
    Tensor W, b;

    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng, bool zero_init = false);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
    int64_t param_count() const { return W.numel() + b.numel(); }
};

// Small MLP: Linear / tanh pairs, plain Linear head.
struct Mlp {
    std::vector<Linear> layers;

    Mlp() = default;
    Mlp(const std::vector<int64_t>& widths, Rng& rng, bool zero_init_head = false);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
    int64_t param_count() const;
};

struct Conv2dLayer {
    Tensor W;  // [out_c, in_c, kh, kw]
    Tensor b;  // [out_c] (stored [1,out_c])

    Conv2dLayer() = default;
    Conv2dLayer(int64_t in_c, int64_t out_c, int64_t k, Rng& rng, bool zero_init = false);
    Tensor forward(const Tensor& x) const;  // x [B,C,H,W]
    void collect(const std::string& prefix, ParamList& out) const;
    int64_t param_count() const { return W.numel() + b.numel(); }
};

// ---- optimization ----

enum class OptimizerKind { Sgd, Adam };

struct OptimConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<std::vector<double>> m, v;
    int64_t step = 0;
};

// One update over the parameter list from the accumulated gradients, then
// zeroes them. If any gradient entry is non-finite the whole step is skipped
// (grads still cleared) and false is returned.
bool optimizer_step(ParamList& params, AdamState& state, const OptimConfig& cfg);

// shadow <- mu * shadow + (1 - mu) * live, elementwise over matching layouts.
void ema_update(ParamList& shadow, const ParamList& live, double mu);

void zero_grads(ParamList& params);
int64_t param_count(const ParamList& params);

}  // namespace flowlab
