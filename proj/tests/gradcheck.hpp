#pragma once

// Central finite-difference gradient oracle, independent of the backward
// implementation it checks. 64-bit inputs only.

#include <bridgediff/tensor.hpp>

#include <doctest.h>

#include <functional>
#include <vector>

namespace bdtest {

using bridgediff::Tensor;

// Builds a scalar loss from the inputs; called repeatedly under perturbation.
using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheck {
    double max_rel = 0.0;  // max |fd - bp| / max(1, max |fd|)
};

inline GradCheck gradcheck(const LossFn& fn, std::vector<Tensor> inputs, double h = 1e-6) {
    using namespace bridgediff;
    for (auto& t : inputs) t.set_requires_grad(true);
    Tensor loss = fn(inputs);
    GradientMap named = backward(loss);
    (void)named;

    double max_abs_fd = 0.0, max_diff = 0.0;
    for (auto& t : inputs) {
        Tensor bp = t.grad();
        REQUIRE(bp.defined());
        for (int64_t i = 0; i < t.numel(); ++i) {
            double orig = t.at(i);
            double step = h * (1.0 + std::abs(orig));
            t.set(i, orig + step);
            double lp;
            {
                NoGradGuard ng;
                lp = fn(inputs).at(0);
            }
            t.set(i, orig - step);
            double lm;
            {
                NoGradGuard ng;
                lm = fn(inputs).at(0);
            }
            t.set(i, orig);
            double fd = (lp - lm) / (2.0 * step);
            max_abs_fd = std::max(max_abs_fd, std::abs(fd));
            max_diff = std::max(max_diff, std::abs(fd - bp.at(i)));
        }
        t.set_requires_grad(false);
        t.clear_grad();
    }
    GradCheck r;
    r.max_rel = max_diff / std::max(1.0, max_abs_fd);
    return r;
}

// scalarizes an arbitrary tensor with a fixed random projection so every
// output element affects the loss
inline Tensor project_to_scalar(const Tensor& y, bridgediff::RngStream proj_rng) {
    Tensor w = Tensor::randu(y.shape(), proj_rng, y.dtype());
    return bridgediff::sum_all(bridgediff::mul(y, w));
}

}  // namespace bdtest
