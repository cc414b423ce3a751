#include "flowlab/fsq.hpp"

#include <cmath>
#include <limits>

namespace flowlab {

int64_t CodebookConfig::codebook_size() const {
    validate();
    int64_t size = 1;
    for (int64_t i = 0; i < channels; ++i) {
        if (size > std::numeric_limits<int64_t>::max() / levels)
            throw ValidationError("codebook: L^d overflows 64-bit (L=" + std::to_string(levels) +
                                  ", d=" + std::to_string(channels) + ")");
        size *= levels;
    }
    return size;
}

void CodebookConfig::validate() const {
    if (levels < 2) throw ValidationError("codebook: levels must be >= 2, got " + std::to_string(levels));
    if (channels < 1) throw ValidationError("codebook: channels must be >= 1, got " + std::to_string(channels));
}

int64_t quantize_channel(double y, int64_t levels) {
    if (!std::isfinite(y)) throw NumericError("quantize: non-finite input");
    double sig = 1.0 / (1.0 + std::exp(-y));
    int64_t digit = static_cast<int64_t>(std::floor(static_cast<double>(levels) * sig));
    return std::min(digit, levels - 1);  // sigmoid(y)=1 boundary
}

std::vector<int64_t> quantize(std::span<const double> y, const CodebookConfig& cfg) {
    cfg.validate();
    if (static_cast<int64_t>(y.size()) != cfg.channels)
        throw ValidationError("quantize: input width " + std::to_string(y.size()) + " vs d=" +
                              std::to_string(cfg.channels));
    std::vector<int64_t> digits(y.size());
    for (size_t i = 0; i < y.size(); ++i) digits[i] = quantize_channel(y[i], cfg.levels);
    return digits;
}

Tensor ste_quantize(const Tensor& y, const CodebookConfig& cfg) {
    cfg.validate();
    if (y.shape().empty() || y.shape().back() != cfg.channels)
        throw ValidationError("ste_quantize: trailing extent of " + shape_str(y.shape()) + " must equal d=" +
                              std::to_string(cfg.channels));
    const int64_t levels = cfg.levels;
    return ste_unary(
        y, [levels](double v) { return static_cast<double>(quantize_channel(v, levels)); }, "ste_quantize");
}

int64_t code_index(std::span<const int64_t> digits, const CodebookConfig& cfg) {
    cfg.validate();
    if (static_cast<int64_t>(digits.size()) != cfg.channels)
        throw ValidationError("code_index: digit count " + std::to_string(digits.size()) + " vs d=" +
                              std::to_string(cfg.channels));
    int64_t index = 0, base = 1;
    for (int64_t i = 0; i < cfg.channels; ++i) {
        int64_t d = digits[static_cast<size_t>(i)];
        if (d < 0 || d >= cfg.levels)
            throw ValidationError("code_index: digit " + std::to_string(d) + " at channel " + std::to_string(i) +
                                  " outside [0, " + std::to_string(cfg.levels) + ")");
        index += d * base;
        base *= cfg.levels;
    }
    return index;
}

std::vector<int64_t> code_digits(int64_t index, const CodebookConfig& cfg) {
    int64_t size = cfg.codebook_size();
    if (index < 0 || index >= size)
        throw ValidationError("code_digits: index " + std::to_string(index) + " outside [0, " +
                              std::to_string(size) + ")");
    std::vector<int64_t> digits(static_cast<size_t>(cfg.channels));
    for (int64_t i = 0; i < cfg.channels; ++i) {
        digits[static_cast<size_t>(i)] = index % cfg.levels;
        index /= cfg.levels;
    }
    return digits;
}

EncoderNet EncoderNet::make_mlp(const CodebookConfig& cfg, int64_t input_dim, const std::vector<int64_t>& hidden,
                                Rng& rng) {
    cfg.validate();
    EncoderNet net;
    net.codebook = cfg;
    std::vector<int64_t> widths{input_dim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(cfg.channels);
    net.mlp = Mlp(widths, rng);
    return net;
}

EncoderNet EncoderNet::make_conv(const CodebookConfig& cfg, int64_t c, int64_t h, int64_t w, int64_t conv_channels,
                                 Rng& rng) {
    cfg.validate();
    if (h % 4 != 0 || w % 4 != 0)
        throw ValidationError("conv encoder: spatial extents must be divisible by 4 for the two pools");
    EncoderNet net;
    net.codebook = cfg;
    net.conv = true;
    net.img_c = c;
    net.img_h = h;
    net.img_w = w;
    net.conv1 = Conv2dLayer(c, conv_channels, 3, rng);
    net.conv2 = Conv2dLayer(conv_channels, conv_channels, 3, rng);
    int64_t flat = conv_channels * (h / 4) * (w / 4);
    net.mlp = Mlp({flat, cfg.channels}, rng);  // linear head
    return net;
}

Tensor EncoderNet::forward(const Tensor& x) const {
    if (!conv) return mlp.forward(x);
    if (x.shape().size() != 2 || x.shape()[1] != img_c * img_h * img_w)
        throw ValidationError("conv encoder: expected [B, " + std::to_string(img_c * img_h * img_w) +
                              "] input, got " + shape_str(x.shape()));
    Tensor img = reshape(x, {x.shape()[0], img_c, img_h, img_w});
    Tensor h1 = avg_pool2(tanh_op(conv1.forward(img)));
    Tensor h2 = avg_pool2(tanh_op(conv2.forward(h1)));
    return mlp.forward(reshape(h2, {h2.shape()[0], h2.numel() / h2.shape()[0]}));
}

ParamList EncoderNet::params(const std::string& prefix) const {
    ParamList out;
    if (conv) {
        conv1.collect(prefix + "/conv1", out);
        conv2.collect(prefix + "/conv2", out);
    }
    mlp.collect(prefix + "/mlp", out);
    return out;
}

int64_t EncoderNet::param_count() const {
    int64_t n = mlp.param_count();
    if (conv) n += conv1.param_count() + conv2.param_count();
    return n;
}

EncodeResult encode(const EncoderNet& net, const Tensor& x) {
    Tensor y = net.forward(x);
    Tensor ste = ste_quantize(y, net.codebook);
    EncodeResult res;
    res.ste = ste;
    auto vals = ste.data();
    const int64_t b = ste.shape()[0], d = net.codebook.channels;
    res.codes.reserve(static_cast<size_t>(b));
    for (int64_t r = 0; r < b; ++r) {
        ConditionCode code;
        code.digits.resize(static_cast<size_t>(d));
        for (int64_t j = 0; j < d; ++j)
            code.digits[static_cast<size_t>(j)] = static_cast<int64_t>(vals[static_cast<size_t>(r * d + j)]);
        code.index = code_index(code.digits, net.codebook);
        res.codes.push_back(std::move(code));
    }
    return res;
}

std::vector<int64_t> encode_indices(const EncoderNet& net, const Matrix& x) {
    NoGradGuard ng;
    EncodeResult res = encode(net, Tensor::from_matrix(x));
    std::vector<int64_t> idx(res.codes.size());
    for (size_t i = 0; i < res.codes.size(); ++i) idx[i] = res.codes[i].index;
    return idx;
}

}  // namespace flowlab
