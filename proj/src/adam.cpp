#include "binformer/adam.hpp"

#include <cmath>

namespace binformer {

void adam_step(Tensor& param, std::span<const float> grad, AdamState& state,
               const AdamConfig& cfg, std::string_view name) {
    const size_t n = static_cast<size_t>(param.numel());
    if (grad.size() != n) {
        throw DimensionError("adam_step: grad size " + std::to_string(grad.size()) +
                             " does not match parameter '" + std::string(name) + "' of " +
                             std::to_string(n));
    }
    if (state.m.empty()) state.m.assign(n, 0.0f);
    if (state.v.empty()) state.v.assign(n, 0.0f);
    if (state.m.size() != n || state.v.size() != n) {
        throw DimensionError("adam_step: state buffers do not match parameter '" +
                             std::string(name) + "'");
    }
    for (float g : grad) {
        if (std::isnan(g)) {
            throw TrainingError("NaN gradient for parameter '" + std::string(name) + "'");
        }
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(state.step));
    auto p = param.mutable_data();
    for (size_t i = 0; i < n; ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0f - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0f - cfg.beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        const double update = mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p[i];
        p[i] -= static_cast<float>(cfg.lr * update);
    }
}

}  // namespace binformer
