#pragma once

#include "bridgediff/tensor.hpp"

namespace bridgediff {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Per-parameter first/second moment accumulators plus a global step counter.
struct AdamState {
    struct Moments {
        Tensor m;
        Tensor v;
    };
    std::map<std::string, Moments> moments;
    int64_t step = 0;
};

// Bias-corrected Adam update, applied in place to exactly the parameters
// present in `grads`. Throws if a gradient key has no matching parameter.
void adam_step(ParamMap& params, const GradientMap& grads, AdamState& state, const AdamConfig& cfg);

}  // namespace bridgediff
