#pragma once

#include <string>

#include "binformer/tensor.hpp"

namespace binformer {

// Codomain of a binarizer. Non-negative activations (post-softmax, post-ReLU)
// binarize to {0,1}; everything else to {-1,+1}.
enum class BinarizerKind { SignedSym, UnsignedZeroOne };

const char* kind_name(BinarizerKind k);

// Learnable scale/threshold pair of one quantization site (layer-wise).
struct ElasticParams {
    float alpha = 1.0f;
    float beta = 0.0f;
    BinarizerKind kind = BinarizerKind::SignedSym;
};

// Bit widths for embeddings, weights and activations ("e-w-a"). 32 means full
// precision; valid values are {1,2,4,8,32}.
struct QuantSpec {
    int e_bits = 32;
    int w_bits = 32;
    int a_bits = 32;

    bool full_precision() const { return e_bits == 32 && w_bits == 32 && a_bits == 32; }
    bool operator==(const QuantSpec&) const = default;
    std::string str() const;

    static QuantSpec parse(const std::string& s);  // "1-1-2"
    static bool valid_bits(int b);
};

// Componentwise partial order with at least one strict inequality.
bool strictly_lower(const QuantSpec& a, const QuantSpec& b);

// --- forward binarizers -----------------------------------------------------

// Elementwise sign with sign(0) = +1; codomain {-1,+1}.
Tensor binarize_sign(const Tensor& x);

// Mean absolute value; the scale minimizing the l2 binarization error for the
// {-1,+1} codomain.
float optimal_scale_sign(const Tensor& x);

// Round-clip to {0,1}: 0 where x < 0.5, 1 where x >= 0.5.
Tensor binarize_round01(const Tensor& x);

// Mean of entries >= 0.5; the optimal scale for the {0,1} codomain. Returns
// 1.0 when no entry reaches 0.5 (degenerate but trainable).
float optimal_scale_01(const Tensor& x);

// Per-tensor weight binarization: scale * sign(w - mean(w)). The scale is the
// mean absolute value of the uncentered weights; `center_scale` switches to
// the centered variant.
Tensor binarize_weights(const Tensor& w, bool center_scale = false);
float weight_scale(const Tensor& w, bool center_scale = false);
Tensor weight_sign_hat(const Tensor& w);  // sign(w - mean(w)), unscaled

// --- elastic binarization ---------------------------------------------------

// UnsignedZeroOne: alpha * round(clip((x - beta)/alpha, 0, 1)), values in
// {0, alpha}. SignedSym: alpha * sign(x - beta), values in {-alpha, +alpha}.
Tensor elastic_forward(const Tensor& x, const ElasticParams& p);

struct ElasticGrads {
    Tensor x;      // same shape as input
    float alpha = 0.0f;  // summed over elements (layer-wise parameter)
    float beta = 0.0f;
};

// STE gradients of the elastic binarizer. UnsignedZeroOne follows the
// four-case rule for alpha and the [beta, alpha+beta) window for beta and x.
// SignedSym uses sign(x - beta) for alpha and the symmetric window
// |x - beta| <= alpha for beta and x.
ElasticGrads elastic_backward(const Tensor& x, const ElasticParams& p, const Tensor& upstream);

// --- multi-bit quantization -------------------------------------------------

// Learned-clip uniform quantizer for b in {2,4,8}. UnsignedZeroOne:
// alpha * round(clip((x-beta)/alpha, 0, 1) * (2^b - 1)) / (2^b - 1).
// SignedSym: symmetric analog on [-1,1] with 2^b - 1 levels.
Tensor quantize_multibit(const Tensor& x, const ElasticParams& p, int bits);
ElasticGrads multibit_backward(const Tensor& x, const ElasticParams& p, int bits,
                               const Tensor& upstream);

// --- diagnostics ------------------------------------------------------------

// l2 binarization error J(alpha) = ||x - alpha * hat(x)||^2 with hat(x) from
// the sign or round-clip binarizer.
double binarization_error(const Tensor& x, float alpha, BinarizerKind kind);

}  // namespace binformer
