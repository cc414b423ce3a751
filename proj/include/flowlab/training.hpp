#pragma once

#include <optional>

#include "flowlab/checkpoint.hpp"
#include "flowlab/config.hpp"
#include "flowlab/denoiser.hpp"
#include "flowlab/flows.hpp"
#include "flowlab/fsq.hpp"

namespace flowlab {

// Noise-level distribution p_sigma over the trained time range.
struct TimeDistribution {
    enum class Kind { Uniform, LogNormal };
    Kind kind = Kind::Uniform;
    double lo = 1e-3, hi = 1.0;
    double log_mean = -1.2, log_std = 1.2;

    double sample(Rng& rng) const;   // rejection-truncated to [lo, hi]
    double density(double t) const;  // normalized on [lo, hi]
};

struct TrainConfig {
    std::string flow = "rf";
    double t_min = 1e-3, t_max = 1.0;
    double sigma_data = 0.5;
    std::string parameterization = "velocity";  // velocity | denoiser_x0
    std::string weighting = "uniform";          // uniform | edm

    int64_t codebook_levels = 2;
    int64_t codebook_channels = 0;  // 0: unconditional baseline

    // flat-data model sizes
    int64_t hidden = 96;
    int64_t hidden_layers = 3;
    int64_t emb_dim = 32;
    std::vector<int64_t> enc_hidden = {12, 6};

    // tiny-image model sizes
    bool image = false;
    int64_t img_c = 1, img_h = 8, img_w = 8;
    int64_t conv_channels = 26;
    int64_t enc_conv_channels = 2;

    std::string optimizer = "adam";  // adam | sgd
    double lr = 2e-3;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
    double ema_decay = 0.999;  // mu, shared by parameter EMA and weight EMA
    int64_t batch = 128;
    int64_t steps = 2000;
    uint64_t seed = 1;
    double lognormal_mean = -1.2, lognormal_std = 1.2;

    int64_t data_dim() const { return image ? img_c * img_h * img_w : 2; }
    FlowSpec flow_spec() const;
    TimeDistribution time_dist() const;
    CodebookConfig codebook() const { return {codebook_levels, codebook_channels}; }
    OptimConfig optim() const;

    KvMap to_kv() const;
    static TrainConfig from_kv(const KvMap& kv);
    uint64_t config_hash() const { return fnv1a64(kv_serialize(to_kv())); }
    void validate() const;
};

// The learned condition prior over code indices. Dense storage up to 2^16
// entries, ordered-map sparse beyond that (large codebooks touch few codes).
// Entries are never negative; queries normalize so probabilities sum to 1.
class SamplingWeights {
public:
    SamplingWeights() = default;
    SamplingWeights(int64_t size, double ema_decay);

    int64_t size() const { return size_; }
    double decay() const { return decay_; }
    bool sparse() const { return size_ > (int64_t{1} << 16); }

    // Online collection: w <- mu w + (1 - mu) count/batch_size. Normalizing
    // the count vector by the batch size keeps w a probability vector.
    void ema_update_counts(std::span<const int64_t> codes);

    // Offline collection: exact normalized histogram, one pass, no EMA.
    void assign_histogram(std::span<const int64_t> codes);

    double raw_sum() const;
    double prob(int64_t index) const;
    std::vector<std::pair<int64_t, double>> nonzero() const;
    int64_t support_size() const;
    double entropy() const;  // nats, of the normalized vector
    double tv_distance(const SamplingWeights& other) const;

    std::vector<int64_t> sample_many(Rng& rng, int64_t count) const;

    void to_checkpoint(Checkpoint& ck, const std::string& prefix) const;
    static SamplingWeights from_checkpoint(const Checkpoint& ck, const std::string& prefix);

private:
    void bump(int64_t index, double delta);
    int64_t size_ = 0;
    double decay_ = 0.999;
    std::vector<double> dense_;
    std::map<int64_t, double> sparse_;
};

void collect_weights_online(SamplingWeights& w, std::span<const int64_t> codes);
SamplingWeights collect_weights_offline(const EncoderNet& ema_encoder, const FiniteDataset& data, double ema_decay);

// Encoder + denoiser pair under one flow. Construction enforces the encoder
// parameter budget: fewer than 1% of the denoiser's parameters.
struct Model {
    FlowSpec flow;
    std::string weighting = "uniform";
    EncoderNet encoder;
    DenoiserNet denoiser;

    bool conditional() const { return denoiser.codebook.enabled(); }
};

Model build_model(const TrainConfig& cfg, Rng& rng);

// lambda(t) weighting in the x0 view, and its velocity-view equivalent
// lambda(t) (s/denom)^2; the two make the denoiser-form and velocity-form
// losses equal pointwise.
double lambda_x0(const FlowSpec& flow, const std::string& weighting, double t);
double weight_velocity(const FlowSpec& flow, const std::string& weighting, double t);

struct CfmLossResult {
    Tensor loss;  // scalar, differentiable into theta and phi
    Matrix x_t;
    Matrix v_net;     // predicted velocity per row (values only)
    Matrix v_target;  // path velocity Xdot per row
};

CfmLossResult cfm_loss(const DenoiserNet& net, const FlowSpec& flow, const Matrix& x0, const Tensor& cond_ste,
                       const std::vector<double>& t, const Matrix& noise, const std::string& weighting);

struct StepStats {
    int64_t step = 0;
    double loss = 0.0;
    double l_fm = 0.0;   // batch estimate vs the dataset oracle (t above floor)
    double v = 0.0;      // batch intersection estimate
    double entropy = 0.0;
    double wall_ms = 0.0;
    bool ok = true;
};

struct TrainState {
    TrainConfig cfg;
    Model live;
    Model ema;
    AdamState opt;
    SamplingWeights weights;
    int64_t step = 0;
    Rng rng{1};
};

TrainState init_training(const TrainConfig& cfg);
StepStats train_step(TrainState& state, const FiniteDataset& data);
// Runs cfg.steps steps; when metrics_csv is nonempty, appends one row per
// step: step,l_cfm,l_fm,v,entropy,wall_ms.
void train(TrainState& state, const FiniteDataset& data, const std::string& metrics_csv = "");

void save_state(const TrainState& state, const std::string& path);
TrainState load_state(const std::string& path);

// ---- bias-variance decomposition of the CFM loss ----

struct McConfig {
    int64_t samples = 100000;
    uint64_t seed = 7;
};

struct Decomposition {
    double l_cfm = 0, l_fm = 0, v = 0;       // MC means of the three terms
    double se_cfm = 0, se_fm = 0, se_v = 0;  // standard errors
    double residual = 0;                     // l_cfm - l_fm - v on shared samples
    double residual_se = 0;                  // MC standard error of the cross term
    int64_t samples = 0;
};

// Monte-Carlo decomposition L_CFM = L_FM + V over (x0, noise, t), with
// E[Xdot|X_t(,Y)] from the dataset oracle. Conditional models slice the
// posterior by the encoder's code of each x0. Times are drawn from the
// model's p_sigma truncated to the oracle floor.
Decomposition decompose_loss(const Model& model, const FiniteDataset& data, const TimeDistribution& tdist,
                             const McConfig& mc);

// V depends only on the coupling and the code partition; this variant takes
// explicit codes instead of an encoder (partition-refinement tests).
Decomposition decompose_loss_with_codes(const DenoiserNet& net, const FlowSpec& flow, const std::string& weighting,
                                        const FiniteDataset& coded_data, const TimeDistribution& tdist,
                                        const McConfig& mc);

// Decomposition against an arbitrary velocity field standing in for the net
// (e.g. the oracle itself, for which L_FM = 0 and L_CFM = V). `digits` is
// null when no code partition is in play.
using BatchVelocityFn = std::function<Matrix(const Matrix& x_t, const std::vector<double>& t, const Matrix* digits)>;
Decomposition decompose_loss_field(const BatchVelocityFn& field, const FlowSpec& flow, const std::string& weighting,
                                   const FiniteDataset& data, const std::vector<int64_t>* codes,
                                   const TimeDistribution& tdist, const McConfig& mc);

// Batched per-row-time velocity evaluation (no gradients).
Matrix batch_velocity(const DenoiserNet& net, const FlowSpec& flow, const Matrix& x_t,
                      const std::vector<double>& t, const Matrix* digits);

std::vector<int64_t> dataset_codes(const EncoderNet& enc, const FiniteDataset& data);

}  // namespace flowlab
