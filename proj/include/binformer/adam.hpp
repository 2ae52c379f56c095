#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "binformer/tensor.hpp"

namespace binformer {

// Per-parameter Adam moment buffers; sized on first use.
struct AdamState {
    std::vector<float> m;
    std::vector<float> v;
    int64_t step = 0;
};

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;  // decoupled
};

// Standard Adam with decoupled weight decay. Throws TrainingError naming the
// parameter when the gradient contains a NaN.
void adam_step(Tensor& param, std::span<const float> grad, AdamState& state,
               const AdamConfig& cfg, std::string_view name);

}  // namespace binformer
