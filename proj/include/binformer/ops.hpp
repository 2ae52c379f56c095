#pragma once

#include <functional>
#include <vector>

#include "binformer/tensor.hpp"

namespace binformer {

// Forward ops. All are eager: the output value is computed on the spot and a
// backward rule is recorded when grads are enabled and any input requires
// them. Shapes are validated and mismatches throw DimensionError.

Tensor matmul(const Tensor& a, const Tensor& b);              // [m,k]x[k,n]
Tensor bmm(const Tensor& a, const Tensor& b);                 // [B,m,k]x[B,k,n]
Tensor add(const Tensor& a, const Tensor& b);                 // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);                 // elementwise or scalar*scalar
Tensor add_bias(const Tensor& x, const Tensor& b);            // b over last dim
Tensor scale(const Tensor& x, float c);
Tensor scale_by(const Tensor& x, const Tensor& c);            // c is a scalar tensor
Tensor relu(const Tensor& x);
Tensor softmax_last(const Tensor& x);
Tensor log_softmax_last(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps = 1e-5f);
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids,
                        int64_t batch, int64_t seq);
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);
Tensor sum(const Tensor& x);                                  // scalar
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor transpose2d(const Tensor& x);
Tensor transpose_last2(const Tensor& x);
Tensor select_seq(const Tensor& x, int64_t pos);              // [B,S,D] -> [B,D]
// scores [B*H,S,S] += -1e9 where key position is masked out. mask is one
// float per (batch, key position), 1 = attend, 0 = masked.
Tensor add_key_mask(const Tensor& scores, const std::vector<float>& mask,
                    int64_t batch, int64_t heads);

// Injects a custom forward with a caller-supplied gradient rule; this is the
// hook quantizers use for straight-through estimators. `backward_fn` receives
// the input values and the output gradient and must return one gradient per
// input (an undefined Tensor marks an input as non-differentiable).
using CustomForward =
    std::function<Tensor(const std::vector<Tensor>&)>;
using CustomBackward = std::function<std::vector<Tensor>(
    const std::vector<Tensor>& inputs, const Tensor& output_grad)>;

Tensor custom_grad(const std::vector<Tensor>& inputs, const CustomForward& fwd,
                   CustomBackward bwd, const char* op_name = "custom",
                   int site = -1);

// Value-level matmul used by both the graph op and test oracles.
void matmul_values(const float* a, const float* b, float* out, int64_t m,
                   int64_t k, int64_t n);

}  // namespace binformer
