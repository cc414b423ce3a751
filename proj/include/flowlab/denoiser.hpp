#pragma once

#include "flowlab/flows.hpp"
#include "flowlab/fsq.hpp"
#include "flowlab/nn.hpp"

namespace flowlab {

// DenoiserX0 nets predict the clean datum (EDM style, trained with
// lambda(t) ||x - D||^2); Velocity nets predict the path velocity directly
// (rectified-flow style, trained with w_t ||Xdot - v||^2).
enum class Parameterization { DenoiserX0, Velocity };

std::string parameterization_name(Parameterization p);
Parameterization parameterization_from_name(const std::string& s);

// EDM-style scalings around the raw network F:
//   D(x, t) = c_skip(t) x + c_out(t) F(c_in(t) x, c_noise(t), emb)
// Identity reduces D to the raw network output.
struct Preconditioning {
    enum class Kind { Identity, Edm } kind = Kind::Identity;
    double sigma_data = 0.5;

    static Preconditioning identity();
    static Preconditioning edm(double sigma_data);

    double c_skip(double t) const;
    double c_out(double t) const;
    double c_in(double t) const;
    double c_noise(double t) const;
};

// Conditional network D_theta(x_t, t, y_q): a trunk (MLP for flat 2-D toys,
// a small conv net for tiny images), sinusoidal time features through one
// linear layer, and a two-layer MLP mapping the real-cast condition digits
// to the time-embedding dimension; the two embeddings are summed and
// injected wherever the trunk takes its embedding input.
struct DenoiserNet {
    Parameterization parameterization = Parameterization::Velocity;
    Preconditioning precond;
    CodebookConfig codebook;  // channels == 0: unconditional
    int64_t data_dim = 0;
    int64_t time_feat = 64;  // sinusoidal feature count (pairs of sin/cos)
    int64_t emb_dim = 0;

    Linear time_embed;
    Linear cond1, cond2;
    Mlp trunk;  // flat path

    // conv path (tiny images)
    bool conv = false;
    int64_t img_c = 0, img_h = 0, img_w = 0;
    Conv2dLayer convA, convB, convC;
    Linear embA, embB;  // embedding -> per-channel bias

    static DenoiserNet make_mlp(Parameterization param, Preconditioning pre, const CodebookConfig& codebook,
                                int64_t data_dim, const std::vector<int64_t>& hidden, int64_t emb_dim, Rng& rng);
    static DenoiserNet make_conv(Parameterization param, Preconditioning pre, const CodebookConfig& codebook,
                                 int64_t c, int64_t h, int64_t w, int64_t conv_channels, int64_t emb_dim, Rng& rng);

    ParamList params(const std::string& prefix = "denoiser") const;
    int64_t param_count() const;

    // Raw network output F. `t` carries one time per batch row; `cond` is
    // the [B, d] real-digit tensor (STE during training, constant at
    // sampling) and must be undefined iff the net is unconditional.
    Tensor net_forward(const Tensor& x_in, const std::vector<double>& t, const Tensor& cond) const;

    // Clean-datum estimate. DenoiserX0: preconditioned D as above.
    // Velocity: converts the predicted velocity through the flow's
    // interpolant algebra (requires t > 0).
    Tensor denoise(const Tensor& x_t, const std::vector<double>& t, const Tensor& cond, const FlowSpec& flow) const;

    // The vector field fed to ODE solvers.
    Tensor velocity(const Tensor& x_t, const std::vector<double>& t, const Tensor& cond, const FlowSpec& flow) const;
};

// Sinusoidal features with log-spaced frequencies, constant w.r.t. the graph.
Matrix time_features(std::span<const double> u, int64_t feat_dim);

// Real-cast digits centered to digit - (L-1)/2, as the embedding input.
Tensor center_digits(const Tensor& digits, const CodebookConfig& cfg);

// Constant [B, d] digit tensor for a fixed code, for sampling paths.
Tensor code_to_tensor(const ConditionCode& code, int64_t batch);

// No-grad batch helpers for solvers and metrics.
Matrix velocity_matrix(const DenoiserNet& net, const FlowSpec& flow, const Matrix& x, double t,
                       const std::vector<int64_t>& digits);
Matrix denoise_matrix(const DenoiserNet& net, const FlowSpec& flow, const Matrix& x, double t,
                      const std::vector<int64_t>& digits);

// x0 and velocity views are algebraically interchangeable along the
// interpolant; exposed for tests and editing.
double x0_view_denominator(const FlowSpec& flow, double t);

}  // namespace flowlab
