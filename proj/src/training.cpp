#include "flowlab/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <unordered_map>

namespace flowlab {

namespace {

double norm_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace

double TimeDistribution::sample(Rng& rng) const {
    if (kind == Kind::Uniform) return rng.uniform(lo, hi);
    for (int attempt = 0; attempt < 10000; ++attempt) {
        double t = std::exp(log_mean + log_std * rng.normal());
        if (t >= lo && t <= hi) return t;
    }
    throw NumericError("time distribution: rejection sampling failed; support [" + std::to_string(lo) + ", " +
                       std::to_string(hi) + "] has negligible mass");
}

double TimeDistribution::density(double t) const {
    if (t < lo || t > hi) return 0.0;
    if (kind == Kind::Uniform) return 1.0 / (hi - lo);
    double zl = (std::log(lo) - log_mean) / log_std;
    double zh = (std::log(hi) - log_mean) / log_std;
    double mass = norm_cdf(zh) - norm_cdf(zl);
    double z = (std::log(t) - log_mean) / log_std;
    double pdf = std::exp(-0.5 * z * z) / (t * log_std * std::sqrt(2.0 * 3.14159265358979323846));
    return pdf / mass;
}

FlowSpec TrainConfig::flow_spec() const {
    FlowSpec f;
    f.family = flow_family_from_name(flow);
    f.t_min = t_min;
    f.t_max = t_max;
    f.sigma_data = sigma_data;
    return f;
}

TimeDistribution TrainConfig::time_dist() const {
    TimeDistribution d;
    if (flow == "edm") {
        d.kind = TimeDistribution::Kind::LogNormal;
        d.log_mean = lognormal_mean;
        d.log_std = lognormal_std;
    }
    d.lo = t_min;
    d.hi = t_max;
    return d;
}

OptimConfig TrainConfig::optim() const {
    OptimConfig oc;
    oc.kind = optimizer == "sgd" ? OptimizerKind::Sgd : OptimizerKind::Adam;
    oc.lr = lr;
    oc.beta1 = adam_beta1;
    oc.beta2 = adam_beta2;
    oc.eps = adam_eps;
    return oc;
}

void TrainConfig::validate() const {
    flow_family_from_name(flow);
    parameterization_from_name(parameterization);
    if (weighting != "uniform" && weighting != "edm")
        throw ValidationError("config: weighting must be uniform|edm, got '" + weighting + "'");
    if (optimizer != "adam" && optimizer != "sgd")
        throw ValidationError("config: optimizer must be adam|sgd, got '" + optimizer + "'");
    if (!(ema_decay > 0.0 && ema_decay < 1.0))
        throw ValidationError("config: ema_decay must lie in (0,1), got " + std::to_string(ema_decay));
    if (batch < 1 || steps < 0) throw ValidationError("config: batch/steps out of range");
    if (!(t_min < t_max)) throw ValidationError("config: t_min must be below t_max");
    if (codebook_channels > 0) CodebookConfig{codebook_levels, codebook_channels}.validate();
}

namespace {

std::string join_i64(const std::vector<int64_t>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(v[i]);
    }
    return s;
}

std::vector<int64_t> split_i64(const std::string& s) {
    std::vector<int64_t> out;
    size_t pos = 0;
    while (pos < s.size()) {
        size_t comma = s.find(',', pos);
        if (comma == std::string::npos) comma = s.size();
        out.push_back(std::stoll(s.substr(pos, comma - pos)));
        pos = comma + 1;
    }
    return out;
}

std::string fmt_f64(double v) {
    char buf[64];
    snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

KvMap TrainConfig::to_kv() const {
    KvMap kv;
    kv["flow"] = flow;
    kv["t_min"] = fmt_f64(t_min);
    kv["t_max"] = fmt_f64(t_max);
    kv["sigma_data"] = fmt_f64(sigma_data);
    kv["parameterization"] = parameterization;
    kv["weighting"] = weighting;
    kv["codebook_levels"] = std::to_string(codebook_levels);
    kv["codebook_channels"] = std::to_string(codebook_channels);
    kv["hidden"] = std::to_string(hidden);
    kv["hidden_layers"] = std::to_string(hidden_layers);
    kv["emb_dim"] = std::to_string(emb_dim);
    kv["enc_hidden"] = join_i64(enc_hidden);
    kv["image"] = image ? "1" : "0";
    kv["img_c"] = std::to_string(img_c);
    kv["img_h"] = std::to_string(img_h);
    kv["img_w"] = std::to_string(img_w);
    kv["conv_channels"] = std::to_string(conv_channels);
    kv["enc_conv_channels"] = std::to_string(enc_conv_channels);
    kv["optimizer"] = optimizer;
    kv["lr"] = fmt_f64(lr);
    kv["adam_beta1"] = fmt_f64(adam_beta1);
    kv["adam_beta2"] = fmt_f64(adam_beta2);
    kv["adam_eps"] = fmt_f64(adam_eps);
    kv["ema_decay"] = fmt_f64(ema_decay);
    kv["batch"] = std::to_string(batch);
    kv["steps"] = std::to_string(steps);
    kv["seed"] = std::to_string(seed);
    kv["lognormal_mean"] = fmt_f64(lognormal_mean);
    kv["lognormal_std"] = fmt_f64(lognormal_std);
    return kv;
}

TrainConfig TrainConfig::from_kv(const KvMap& kv) {
    TrainConfig c;
    c.flow = kv_get(kv, "flow", c.flow);
    // family defaults, overridable by explicit keys below
    if (c.flow == "edm") {
        c.t_min = 0.002;
        c.t_max = 80.0;
        c.parameterization = "denoiser_x0";
        c.weighting = "edm";
    } else if (c.flow == "ve") {
        c.t_min = 1e-4;
        c.t_max = 100.0;
    }
    c.t_min = kv_get_f64(kv, "t_min", c.t_min);
    c.t_max = kv_get_f64(kv, "t_max", c.t_max);
    c.sigma_data = kv_get_f64(kv, "sigma_data", c.sigma_data);
    c.parameterization = kv_get(kv, "parameterization", c.parameterization);
    c.weighting = kv_get(kv, "weighting", c.weighting);
    c.codebook_levels = kv_get_i64(kv, "codebook_levels", c.codebook_levels);
    c.codebook_channels = kv_get_i64(kv, "codebook_channels", c.codebook_channels);
    c.hidden = kv_get_i64(kv, "hidden", c.hidden);
    c.hidden_layers = kv_get_i64(kv, "hidden_layers", c.hidden_layers);
    c.emb_dim = kv_get_i64(kv, "emb_dim", c.emb_dim);
    if (kv.count("enc_hidden")) c.enc_hidden = split_i64(kv.at("enc_hidden"));
    c.image = kv_get_i64(kv, "image", c.image ? 1 : 0) != 0;
    c.img_c = kv_get_i64(kv, "img_c", c.img_c);
    c.img_h = kv_get_i64(kv, "img_h", c.img_h);
    c.img_w = kv_get_i64(kv, "img_w", c.img_w);
    c.conv_channels = kv_get_i64(kv, "conv_channels", c.conv_channels);
    c.enc_conv_channels = kv_get_i64(kv, "enc_conv_channels", c.enc_conv_channels);
    c.optimizer = kv_get(kv, "optimizer", c.optimizer);
    c.lr = kv_get_f64(kv, "lr", c.lr);
    c.adam_beta1 = kv_get_f64(kv, "adam_beta1", c.adam_beta1);
    c.adam_beta2 = kv_get_f64(kv, "adam_beta2", c.adam_beta2);
    c.adam_eps = kv_get_f64(kv, "adam_eps", c.adam_eps);
    c.ema_decay = kv_get_f64(kv, "ema_decay", c.ema_decay);
    c.batch = kv_get_i64(kv, "batch", c.batch);
    c.steps = kv_get_i64(kv, "steps", c.steps);
    c.seed = kv_get_u64(kv, "seed", c.seed);
    c.lognormal_mean = kv_get_f64(kv, "lognormal_mean", c.lognormal_mean);
    c.lognormal_std = kv_get_f64(kv, "lognormal_std", c.lognormal_std);
    c.validate();
    return c;
}

// ---- SamplingWeights ----

SamplingWeights::SamplingWeights(int64_t size, double ema_decay) : size_(size), decay_(ema_decay) {
    if (size < 1) throw ValidationError("sampling weights: size must be positive");
    if (!(ema_decay > 0.0 && ema_decay <= 1.0))
        throw ValidationError("sampling weights: decay must lie in (0,1]");
    if (!sparse()) dense_.assign(static_cast<size_t>(size), 0.0);
}

void SamplingWeights::bump(int64_t index, double delta) {
    if (index < 0 || index >= size_)
        throw ValidationError("sampling weights: index " + std::to_string(index) + " outside [0, " +
                              std::to_string(size_) + ")");
    if (sparse())
        sparse_[index] += delta;
    else
        dense_[static_cast<size_t>(index)] += delta;
}

void SamplingWeights::ema_update_counts(std::span<const int64_t> codes) {
    if (codes.empty()) throw ValidationError("sampling weights: empty batch");
    for (int64_t c : codes)
        if (c < 0 || c >= size_)
            throw ValidationError("sampling weights: code " + std::to_string(c) + " outside [0, " +
                                  std::to_string(size_) + ")");
    if (sparse())
        for (auto& [k, v] : sparse_) v *= decay_;
    else
        for (double& v : dense_) v *= decay_;
    const double add = (1.0 - decay_) / static_cast<double>(codes.size());
    for (int64_t c : codes) bump(c, add);
}

void SamplingWeights::assign_histogram(std::span<const int64_t> codes) {
    if (codes.empty()) throw ValidationError("sampling weights: empty code list");
    sparse_.clear();
    if (!sparse()) dense_.assign(static_cast<size_t>(size_), 0.0);
    const double add = 1.0 / static_cast<double>(codes.size());
    for (int64_t c : codes) bump(c, add);
}

double SamplingWeights::raw_sum() const {
    double s = 0.0;
    if (sparse())
        for (const auto& [k, v] : sparse_) s += v;
    else
        for (double v : dense_) s += v;
    return s;
}

double SamplingWeights::prob(int64_t index) const {
    if (index < 0 || index >= size_)
        throw ValidationError("sampling weights: index " + std::to_string(index) + " outside [0, " +
                              std::to_string(size_) + ")");
    double total = raw_sum();
    if (total <= 0.0) throw ValidationError("sampling weights: all-zero vector has no distribution");
    double raw = sparse() ? (sparse_.count(index) ? sparse_.at(index) : 0.0) : dense_[static_cast<size_t>(index)];
    return raw / total;
}

std::vector<std::pair<int64_t, double>> SamplingWeights::nonzero() const {
    std::vector<std::pair<int64_t, double>> out;
    if (sparse()) {
        for (const auto& [k, v] : sparse_)
            if (v > 0.0) out.emplace_back(k, v);
    } else {
        for (int64_t i = 0; i < size_; ++i)
            if (dense_[static_cast<size_t>(i)] > 0.0) out.emplace_back(i, dense_[static_cast<size_t>(i)]);
    }
    return out;
}

int64_t SamplingWeights::support_size() const { return static_cast<int64_t>(nonzero().size()); }

double SamplingWeights::entropy() const {
    double total = raw_sum();
    if (total <= 0.0) return 0.0;
    double h = 0.0;
    for (const auto& [k, v] : nonzero()) {
        double p = v / total;
        h -= p * std::log(p);
    }
    return h;
}

double SamplingWeights::tv_distance(const SamplingWeights& other) const {
    if (size_ != other.size_)
        throw ValidationError("sampling weights: tv distance between vectors of different sizes");
    double ta = raw_sum(), tb = other.raw_sum();
    if (ta <= 0.0 || tb <= 0.0) throw ValidationError("sampling weights: tv distance needs nonzero vectors");
    std::map<int64_t, double> diff;
    for (const auto& [k, v] : nonzero()) diff[k] += v / ta;
    for (const auto& [k, v] : other.nonzero()) diff[k] -= v / tb;
    double l1 = 0.0;
    for (const auto& [k, v] : diff) l1 += std::abs(v);
    return 0.5 * l1;
}

std::vector<int64_t> SamplingWeights::sample_many(Rng& rng, int64_t count) const {
    auto nz = nonzero();
    if (nz.empty()) throw ValidationError("sampling weights: all-zero vector cannot be sampled");
    std::vector<double> cum(nz.size());
    double acc = 0.0;
    for (size_t i = 0; i < nz.size(); ++i) {
        acc += nz[i].second;
        cum[i] = acc;
    }
    std::vector<int64_t> out(static_cast<size_t>(count));
    for (int64_t k = 0; k < count; ++k) {
        double u = rng.uniform() * acc;
        size_t j = static_cast<size_t>(std::lower_bound(cum.begin(), cum.end(), u) - cum.begin());
        if (j >= nz.size()) j = nz.size() - 1;
        out[static_cast<size_t>(k)] = nz[j].first;
    }
    return out;
}

void SamplingWeights::to_checkpoint(Checkpoint& ck, const std::string& prefix) const {
    ck.put_i64(prefix + "/size", size_);
    ck.put_scalar(prefix + "/decay", decay_);
    auto nz = nonzero();
    const int64_t n = static_cast<int64_t>(nz.size());
    std::vector<double> idx(nz.size()), val(nz.size());
    for (size_t i = 0; i < nz.size(); ++i) {
        idx[i] = static_cast<double>(nz[i].first);
        val[i] = nz[i].second;
    }
    ck.put_array(prefix + "/idx", {n}, std::move(idx));
    ck.put_array(prefix + "/val", {n}, std::move(val));
}

SamplingWeights SamplingWeights::from_checkpoint(const Checkpoint& ck, const std::string& prefix) {
    SamplingWeights w(ck.get_i64(prefix + "/size"), ck.get_scalar(prefix + "/decay"));
    const auto& idx = ck.get(prefix + "/idx").f64;
    const auto& val = ck.get(prefix + "/val").f64;
    for (size_t i = 0; i < idx.size(); ++i) w.bump(static_cast<int64_t>(idx[i]), val[i]);
    return w;
}

void collect_weights_online(SamplingWeights& w, std::span<const int64_t> codes) { w.ema_update_counts(codes); }

SamplingWeights collect_weights_offline(const EncoderNet& ema_encoder, const FiniteDataset& data,
                                        double ema_decay) {
    SamplingWeights w(ema_encoder.codebook.codebook_size(), ema_decay);
    auto codes = encode_indices(ema_encoder, data.points);
    w.assign_histogram(codes);
    return w;
}

// ---- model assembly ----

Model build_model(const TrainConfig& cfg, Rng& rng) {
    cfg.validate();
    Model m;
    m.flow = cfg.flow_spec();
    m.weighting = cfg.weighting;
    Parameterization param = parameterization_from_name(cfg.parameterization);
    Preconditioning pre = param == Parameterization::DenoiserX0 ? Preconditioning::edm(cfg.sigma_data)
                                                                : Preconditioning::identity();
    CodebookConfig cb = cfg.codebook();
    std::vector<int64_t> hidden(static_cast<size_t>(cfg.hidden_layers), cfg.hidden);
    if (cfg.image) {
        m.denoiser = DenoiserNet::make_conv(param, pre, cb, cfg.img_c, cfg.img_h, cfg.img_w, cfg.conv_channels,
                                            cfg.emb_dim, rng);
        if (cb.enabled())
            m.encoder = EncoderNet::make_conv(cb, cfg.img_c, cfg.img_h, cfg.img_w, cfg.enc_conv_channels, rng);
    } else {
        m.denoiser = DenoiserNet::make_mlp(param, pre, cb, 2, hidden, cfg.emb_dim, rng);
        if (cb.enabled()) m.encoder = EncoderNet::make_mlp(cb, 2, cfg.enc_hidden, rng);
    }
    if (cb.enabled()) {
        int64_t enc_n = m.encoder.param_count();
        int64_t den_n = m.denoiser.param_count();
        if (enc_n * 100 >= den_n)
            throw ValidationError("encoder budget: " + std::to_string(enc_n) +
                                  " parameters is not below 1% of the denoiser's " + std::to_string(den_n));
    }
    return m;
}

// ---- loss weightings ----

double lambda_x0(const FlowSpec& flow, const std::string& weighting, double t) {
    if (weighting == "edm") {
        double sd = flow.sigma_data;
        return (t * t + sd * sd) / sqr(t * sd);
    }
    // uniform velocity-view weight expressed in the x0 view
    double denom = x0_view_denominator(flow, t);
    return sqr(denom / flow.s(t));
}

double weight_velocity(const FlowSpec& flow, const std::string& weighting, double t) {
    double denom = x0_view_denominator(flow, t);
    return lambda_x0(flow, weighting, t) * sqr(flow.s(t) / denom);
}

// ---- CFM loss ----

CfmLossResult cfm_loss(const DenoiserNet& net, const FlowSpec& flow, const Matrix& x0, const Tensor& cond_ste,
                       const std::vector<double>& t, const Matrix& noise, const std::string& weighting) {
    const int64_t b = x0.rows, dim = x0.cols;
    if (b == 0) throw ValidationError("cfm_loss: empty batch");
    if (noise.rows != b || noise.cols != dim || static_cast<int64_t>(t.size()) != b)
        throw ValidationError("cfm_loss: batch pieces disagree in size");

    CfmLossResult res;
    res.x_t = Matrix(b, dim);
    res.v_target = Matrix(b, dim);
    for (int64_t r = 0; r < b; ++r) {
        double ti = t[static_cast<size_t>(r)];
        flow.check_time(ti);
        double at = flow.a(ti), st = flow.s(ti), dat = flow.da(ti), dst = flow.ds(ti);
        for (int64_t j = 0; j < dim; ++j) {
            res.x_t(r, j) = at * x0(r, j) + st * noise(r, j);
            res.v_target(r, j) = dat * x0(r, j) + dst * noise(r, j);
        }
    }

    Tensor x_t_tensor = Tensor::from_matrix(res.x_t);
    std::vector<double> w_rows(t.size());
    Tensor diff;
    if (net.parameterization == Parameterization::DenoiserX0) {
        Tensor d = net.denoise(x_t_tensor, t, cond_ste, flow);
        // recover the velocity view for diagnostics
        res.v_net = Matrix(b, dim);
        auto dv = d.data();
        for (int64_t r = 0; r < b; ++r) {
            double ti = t[static_cast<size_t>(r)];
            double at = flow.a(ti), st = flow.s(ti), dat = flow.da(ti), dst = flow.ds(ti);
            for (int64_t j = 0; j < dim; ++j) {
                double dval = dv[static_cast<size_t>(r * dim + j)];
                res.v_net(r, j) = dat * dval + dst * (res.x_t(r, j) - at * dval) / st;
            }
            w_rows[static_cast<size_t>(r)] = lambda_x0(flow, weighting, ti);
        }
        diff = sub(Tensor::from_matrix(x0), d);
    } else {
        Tensor v = net.velocity(x_t_tensor, t, cond_ste, flow);
        res.v_net = v.to_matrix();
        for (size_t r = 0; r < t.size(); ++r) w_rows[r] = weight_velocity(flow, weighting, t[r]);
        diff = sub(Tensor::from_matrix(res.v_target), v);
    }

    std::vector<double> wfull(static_cast<size_t>(b * dim));
    for (int64_t r = 0; r < b; ++r)
        std::fill_n(wfull.begin() + r * dim, dim, w_rows[static_cast<size_t>(r)]);
    Tensor weights = Tensor::from_data({b, dim}, std::move(wfull));
    res.loss = scale(sum_all(mul(square(diff), weights)), 1.0 / static_cast<double>(b));
    return res;
}

// ---- training loop ----

namespace {

ParamList trainable_params(Model& m) {
    ParamList ps = m.denoiser.params("denoiser");
    if (m.conditional()) {
        ParamList enc = m.encoder.params("encoder");
        ps.insert(ps.end(), enc.begin(), enc.end());
    }
    return ps;
}

void copy_params(ParamList& dst, const ParamList& src) {
    if (dst.size() != src.size()) throw ValidationError("copy_params: layout mismatch");
    for (size_t i = 0; i < dst.size(); ++i) {
        auto d = dst[i].t.raw_data();
        auto s = src[i].t.data();
        std::copy(s.begin(), s.end(), d.begin());
    }
}

}  // namespace

TrainState init_training(const TrainConfig& cfg) {
    cfg.validate();
    TrainState st;
    st.cfg = cfg;
    st.rng = Rng(cfg.seed);
    st.live = build_model(cfg, st.rng);
    Rng shadow_rng(Rng::derive(cfg.seed, 0xeea));
    st.ema = build_model(cfg, shadow_rng);
    ParamList lp = trainable_params(st.live), ep = trainable_params(st.ema);
    copy_params(ep, lp);  // theta_minus = theta
    st.weights = SamplingWeights(st.live.conditional() ? cfg.codebook().codebook_size() : 1, cfg.ema_decay);
    return st;
}

std::vector<int64_t> dataset_codes(const EncoderNet& enc, const FiniteDataset& data) {
    return encode_indices(enc, data.points);
}

Matrix batch_velocity(const DenoiserNet& net, const FlowSpec& flow, const Matrix& x_t,
                      const std::vector<double>& t, const Matrix* digits) {
    NoGradGuard ng;
    Tensor cond;
    if (digits) cond = Tensor::from_matrix(*digits);
    Tensor v = net.velocity(Tensor::from_matrix(x_t), t, cond, flow);
    return v.to_matrix();
}

StepStats train_step(TrainState& st, const FiniteDataset& data) {
    auto t_start = std::chrono::steady_clock::now();
    data.validate();
    const TrainConfig& cfg = st.cfg;
    const FlowSpec flow = st.live.flow;
    const int64_t b = cfg.batch, dim = data.dim;
    if (dim != cfg.data_dim())
        throw ValidationError("train_step: dataset dim " + std::to_string(dim) + " vs configured " +
                              std::to_string(cfg.data_dim()));
    TimeDistribution tdist = cfg.time_dist();

    StepStats stats;
    stats.step = st.step + 1;

    // line 4: sample x ~ D, t ~ p_sigma, z ~ N(0, I)
    Matrix x0(b, dim), z(b, dim);
    std::vector<double> t(static_cast<size_t>(b));
    std::vector<int64_t> picked(static_cast<size_t>(b));
    for (int64_t r = 0; r < b; ++r) {
        int64_t i = st.rng.uniform_int(data.size());
        picked[static_cast<size_t>(r)] = i;
        auto p = data.points.row(i);
        std::copy(p.begin(), p.end(), x0.row(r).begin());
        t[static_cast<size_t>(r)] = tdist.sample(st.rng);
        for (int64_t j = 0; j < dim; ++j) z(r, j) = st.rng.normal();
    }

    try {
        // lines 5-6: encode and STE-quantize the clean batch
        Tensor cond;
        std::vector<int64_t> batch_codes;
        if (st.live.conditional()) {
            EncodeResult er = encode(st.live.encoder, Tensor::from_matrix(x0));
            cond = er.ste;
            batch_codes.reserve(er.codes.size());
            for (const auto& c : er.codes) batch_codes.push_back(c.index);
        }

        // diagnostics need dataset codes under the same pre-update encoder
        FiniteDataset coded = data;
        if (st.live.conditional()) coded.codes = dataset_codes(st.live.encoder, data);

        // lines 7-8: noise and the conditional CFM loss
        CfmLossResult lr = cfm_loss(st.live.denoiser, flow, x0, cond, t, z, cfg.weighting);
        stats.loss = lr.loss.item();

        // line 9: gradient step on theta and phi
        backward(lr.loss);
        ParamList params = trainable_params(st.live);
        bool stepped = optimizer_step(params, st.opt, cfg.optim());
        if (!stepped) {
            stats.ok = false;
            std::fprintf(stderr, "step %lld: non-finite gradient, update skipped\n",
                         static_cast<long long>(stats.step));
        }

        // line 10: EMA of both nets
        ParamList live_ps = trainable_params(st.live), ema_ps = trainable_params(st.ema);
        ema_update(ema_ps, live_ps, cfg.ema_decay);

        // lines 11-12: collect batch sampling weights
        if (st.live.conditional()) {
            collect_weights_online(st.weights, batch_codes);
            std::unordered_map<int64_t, int64_t> hist;
            for (int64_t c : batch_codes) hist[c]++;
            double h = 0.0;
            for (const auto& [k, n] : hist) {
                double p = static_cast<double>(n) / static_cast<double>(b);
                h -= p * std::log(p);
            }
            stats.entropy = h;
        }

        // diagnostics: batch-level L_FM and V against the dataset oracle,
        // restricted to rows above the oracle's t floor
        double fm = 0.0, vv = 0.0;
        int64_t valid = 0;
        std::vector<double> vo(static_cast<size_t>(dim));
        for (int64_t r = 0; r < b; ++r) {
            double ti = t[static_cast<size_t>(r)];
            if (ti < flow.oracle_t_floor()) continue;
            std::optional<int64_t> code;
            if (st.live.conditional()) code = coded.codes[static_cast<size_t>(picked[static_cast<size_t>(r)])];
            oracle_velocity(flow, coded, lr.x_t.row(r), ti, vo, code);
            double w = weight_velocity(flow, cfg.weighting, ti);
            double dfm = 0.0, dv = 0.0;
            for (int64_t j = 0; j < dim; ++j) {
                dfm += sqr(vo[static_cast<size_t>(j)] - lr.v_net(r, j));
                dv += sqr(lr.v_target(r, j) - vo[static_cast<size_t>(j)]);
            }
            fm += w * dfm;
            vv += w * dv;
            ++valid;
        }
        stats.l_fm = valid ? fm / static_cast<double>(valid) : std::nan("");
        stats.v = valid ? vv / static_cast<double>(valid) : std::nan("");
    } catch (const NumericError& e) {
        stats.ok = false;
        stats.loss = std::nan("");
        std::fprintf(stderr, "step %lld aborted: %s\n", static_cast<long long>(stats.step), e.what());
    }

    st.step += 1;
    stats.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start).count();
    return stats;
}

void train(TrainState& st, const FiniteDataset& data, const std::string& metrics_csv) {
    std::ofstream csv;
    if (!metrics_csv.empty()) {
        bool fresh = !std::ifstream(metrics_csv).good();
        csv.open(metrics_csv, std::ios::app);
        if (!csv) throw ValidationError("train: cannot open metrics csv '" + metrics_csv + "'");
        if (fresh) csv << "step,l_cfm,l_fm,v,entropy,wall_ms\n";
    }
    while (st.step < st.cfg.steps) {
        StepStats s = train_step(st, data);
        if (csv.is_open()) {
            csv << s.step << "," << fmt_f64(s.loss) << "," << fmt_f64(s.l_fm) << "," << fmt_f64(s.v) << ","
                << fmt_f64(s.entropy) << "," << fmt_f64(s.wall_ms) << "\n";
        }
    }
}

// ---- checkpointing ----

void save_state(const TrainState& st, const std::string& path) {
    Checkpoint ck;
    ck.put_string("config/text", kv_serialize(st.cfg.to_kv()));
    ck.put_u64("config/hash", st.cfg.config_hash());
    ck.put_i64("meta/step", st.step);
    ck.put_string("meta/rng", st.rng.state());
    Model& live = const_cast<Model&>(st.live);
    Model& ema = const_cast<Model&>(st.ema);
    ck.put_params("live", trainable_params(live));
    ck.put_params("ema", trainable_params(ema));
    ck.put_i64("opt/step", st.opt.step);
    ParamList ps = trainable_params(live);
    for (size_t k = 0; k < st.opt.m.size(); ++k) {
        ck.put_array("opt/m/" + ps[k].name, ps[k].t.shape(), st.opt.m[k]);
        ck.put_array("opt/v/" + ps[k].name, ps[k].t.shape(), st.opt.v[k]);
    }
    st.weights.to_checkpoint(ck, "weights");
    ck.save(path);
}

TrainState load_state(const std::string& path) {
    Checkpoint ck = Checkpoint::load(path);
    TrainConfig cfg = TrainConfig::from_kv(kv_parse(ck.get_string("config/text")));
    if (ck.get_u64("config/hash") != cfg.config_hash())
        throw ValidationError("checkpoint: embedded config hash mismatch");
    TrainState st = init_training(cfg);
    ParamList lp = trainable_params(st.live), ep = trainable_params(st.ema);
    ck.load_params("live", lp);
    ck.load_params("ema", ep);
    st.step = ck.get_i64("meta/step");
    Rng r(0);
    r.set_state(ck.get_string("meta/rng"));
    st.rng = r;
    st.opt.step = ck.get_i64("opt/step");
    if (st.opt.step > 0) {
        st.opt.m.resize(lp.size());
        st.opt.v.resize(lp.size());
        for (size_t k = 0; k < lp.size(); ++k) {
            st.opt.m[k] = ck.get("opt/m/" + lp[k].name).f64;
            st.opt.v[k] = ck.get("opt/v/" + lp[k].name).f64;
        }
    }
    st.weights = SamplingWeights::from_checkpoint(ck, "weights");
    return st;
}

// ---- decomposition ----

namespace {

Decomposition decompose_impl(const BatchVelocityFn& field, const CodebookConfig& field_codebook,
                             const FlowSpec& flow, const std::string& weighting,
                             const FiniteDataset& data, const std::vector<int64_t>* codes,
                             const TimeDistribution& tdist_in, const McConfig& mc) {
    if (mc.samples < 1000)
        throw ValidationError("decompose_loss: needs at least 1e3 MC samples, got " + std::to_string(mc.samples));
    data.validate();
    if (field_codebook.enabled() && !codes)
        throw ValidationError("decompose_loss: conditional net needs dataset codes");
    const int64_t dim = data.dim;
    FiniteDataset coded = data;
    if (codes) coded.codes = *codes;

    TimeDistribution tdist = tdist_in;
    tdist.lo = std::max(tdist.lo, flow.oracle_t_floor());

    Rng rng(mc.seed);
    const int64_t chunk = 512;
    double sum_cfm = 0, sum_fm = 0, sum_v = 0, sum_cross = 0;
    double sq_cfm = 0, sq_fm = 0, sq_v = 0, sq_cross = 0;

    Matrix x_t(chunk, dim), vt(chunk, dim), vo(chunk, dim);
    Matrix digits_mat;
    const int64_t d_channels = field_codebook.channels;
    if (field_codebook.enabled()) digits_mat = Matrix(chunk, d_channels);
    std::vector<double> t(static_cast<size_t>(chunk));

    int64_t done = 0;
    while (done < mc.samples) {
        int64_t n = std::min(chunk, mc.samples - done);
        for (int64_t r = 0; r < n; ++r) {
            int64_t i = rng.uniform_int(data.size());
            double ti = tdist.sample(rng);
            t[static_cast<size_t>(r)] = ti;
            auto p = data.points.row(i);
            double at = flow.a(ti), s = flow.s(ti), dat = flow.da(ti), dst = flow.ds(ti);
            for (int64_t j = 0; j < dim; ++j) {
                double zj = rng.normal();
                x_t(r, j) = at * p[static_cast<size_t>(j)] + s * zj;
                vt(r, j) = dat * p[static_cast<size_t>(j)] + dst * zj;
            }
            std::optional<int64_t> code;
            if (codes) code = (*codes)[static_cast<size_t>(i)];
            if (field_codebook.enabled()) {
                auto dg = code_digits(*code, field_codebook);
                for (int64_t j = 0; j < d_channels; ++j)
                    digits_mat(r, j) = static_cast<double>(dg[static_cast<size_t>(j)]);
            }
            oracle_velocity(flow, coded, x_t.row(r), ti, vo.row(r), code);
        }
        Matrix x_chunk(n, dim), dg_chunk;
        std::copy_n(x_t.a.begin(), n * dim, x_chunk.a.begin());
        std::vector<double> t_chunk(t.begin(), t.begin() + n);
        const Matrix* dg_ptr = nullptr;
        if (field_codebook.enabled()) {
            dg_chunk = Matrix(n, d_channels);
            std::copy_n(digits_mat.a.begin(), n * d_channels, dg_chunk.a.begin());
            dg_ptr = &dg_chunk;
        }
        Matrix vn = field(x_chunk, t_chunk, dg_ptr);

        for (int64_t r = 0; r < n; ++r) {
            double w = weight_velocity(flow, weighting, t[static_cast<size_t>(r)]);
            double term_cfm = 0, term_fm = 0, term_v = 0, term_cross = 0;
            for (int64_t j = 0; j < dim; ++j) {
                double e_net = vt(r, j) - vn(r, j);
                double e_fm = vo(r, j) - vn(r, j);
                double e_v = vt(r, j) - vo(r, j);
                term_cfm += e_net * e_net;
                term_fm += e_fm * e_fm;
                term_v += e_v * e_v;
                term_cross += e_v * e_fm;
            }
            term_cfm *= w;
            term_fm *= w;
            term_v *= w;
            term_cross *= 2.0 * w;
            sum_cfm += term_cfm;
            sq_cfm += term_cfm * term_cfm;
            sum_fm += term_fm;
            sq_fm += term_fm * term_fm;
            sum_v += term_v;
            sq_v += term_v * term_v;
            sum_cross += term_cross;
            sq_cross += term_cross * term_cross;
        }
        done += n;
    }

    auto finish = [&](double s, double sq, double& mean, double& se) {
        double n = static_cast<double>(mc.samples);
        mean = s / n;
        double var = std::max(0.0, sq / n - mean * mean);
        se = std::sqrt(var / n);
    };
    Decomposition d;
    d.samples = mc.samples;
    finish(sum_cfm, sq_cfm, d.l_cfm, d.se_cfm);
    finish(sum_fm, sq_fm, d.l_fm, d.se_fm);
    finish(sum_v, sq_v, d.v, d.se_v);
    finish(sum_cross, sq_cross, d.residual, d.residual_se);
    return d;
}

}  // namespace

namespace {

BatchVelocityFn net_field(const DenoiserNet& net, const FlowSpec& flow) {
    return [&net, flow](const Matrix& x_t, const std::vector<double>& t, const Matrix* digits) {
        return batch_velocity(net, flow, x_t, t, digits);
    };
}

}  // namespace

Decomposition decompose_loss(const Model& model, const FiniteDataset& data, const TimeDistribution& tdist,
                             const McConfig& mc) {
    if (model.conditional()) {
        auto codes = dataset_codes(model.encoder, data);
        return decompose_impl(net_field(model.denoiser, model.flow), model.denoiser.codebook, model.flow,
                              model.weighting, data, &codes, tdist, mc);
    }
    return decompose_impl(net_field(model.denoiser, model.flow), model.denoiser.codebook, model.flow,
                          model.weighting, data, nullptr, tdist, mc);
}

Decomposition decompose_loss_with_codes(const DenoiserNet& net, const FlowSpec& flow, const std::string& weighting,
                                        const FiniteDataset& coded_data, const TimeDistribution& tdist,
                                        const McConfig& mc) {
    if (!coded_data.has_codes()) throw ValidationError("decompose_loss_with_codes: dataset carries no codes");
    return decompose_impl(net_field(net, flow), net.codebook, flow, weighting, coded_data, &coded_data.codes,
                          tdist, mc);
}

Decomposition decompose_loss_field(const BatchVelocityFn& field, const FlowSpec& flow, const std::string& weighting,
                                   const FiniteDataset& data, const std::vector<int64_t>* codes,
                                   const TimeDistribution& tdist, const McConfig& mc) {
    // the field receives no digits; code restriction applies to the oracle only
    CodebookConfig none{2, 0};
    return decompose_impl(field, none, flow, weighting, data, codes, tdist, mc);
}

}  // namespace flowlab
