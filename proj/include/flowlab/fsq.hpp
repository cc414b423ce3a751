#pragma once

#include "flowlab/nn.hpp"

namespace flowlab {

// Finite scalar quantization of a d-channel encoder output into L levels per
// channel: digit_i = min(floor(L * sigmoid(y_i)), L - 1). The clamp covers
// the unattainable sigmoid(y) = 1 boundary so the codomain is exactly
// {0, ..., L-1}^d, an implicit codebook of size L^d.
struct CodebookConfig {
    int64_t levels = 2;    // L
    int64_t channels = 0;  // d; 0 means unconditional (no codebook)

    bool enabled() const { return channels > 0; }
    int64_t codebook_size() const;  // L^d, overflow-checked
    void validate() const;
};

struct ConditionCode {
    std::vector<int64_t> digits;  // length d, each in [0, L)
    int64_t index = 0;            // little-endian base-L encoding of digits
};

int64_t quantize_channel(double y, int64_t levels);
std::vector<int64_t> quantize(std::span<const double> y, const CodebookConfig& cfg);

// Straight-through quantization: forward is exactly quantize(y) cast to
// reals (bitwise — small integers are representable); the backward Jacobian
// is exactly the identity, so downstream gradients reach the encoder.
Tensor ste_quantize(const Tensor& y, const CodebookConfig& cfg);

// index = sum_i digits[i] * L^i
int64_t code_index(std::span<const int64_t> digits, const CodebookConfig& cfg);
std::vector<int64_t> code_digits(int64_t index, const CodebookConfig& cfg);

// Condition encoder: an MLP for flat data, or two conv blocks
// (conv/tanh/pool twice) and a linear head for tiny images. Output is the
// d-dimensional pre-quantization vector.
struct EncoderNet {
    CodebookConfig codebook;
    bool conv = false;

    Mlp mlp;  // flat path, or the linear head when conv

    // conv path
    int64_t img_c = 0, img_h = 0, img_w = 0;
    Conv2dLayer conv1, conv2;

    static EncoderNet make_mlp(const CodebookConfig& cfg, int64_t input_dim, const std::vector<int64_t>& hidden,
                               Rng& rng);
    static EncoderNet make_conv(const CodebookConfig& cfg, int64_t c, int64_t h, int64_t w, int64_t conv_channels,
                                Rng& rng);

    Tensor forward(const Tensor& x) const;  // x [B, input_dim] -> [B, d]
    ParamList params(const std::string& prefix = "encoder") const;
    int64_t param_count() const;
};

struct EncodeResult {
    std::vector<ConditionCode> codes;  // one per batch row
    Tensor ste;                        // [B, d] straight-through tensor for training
};

// Deterministic batch encode: network forward then STE quantization; the
// returned codes are the integer view of the STE tensor's rows.
EncodeResult encode(const EncoderNet& net, const Tensor& x);

// Code indices only (no gradient tracking), for weight collection and eval.
std::vector<int64_t> encode_indices(const EncoderNet& net, const Matrix& x);

}  // namespace flowlab
