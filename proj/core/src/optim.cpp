#include "bridgediff/optim.hpp"

#include <cmath>

namespace bridgediff {

void adam_step(ParamMap& params, const GradientMap& grads, AdamState& state,
               const AdamConfig& cfg) {
    BD_CHECK(cfg.lr > 0 && cfg.beta1 > 0 && cfg.beta1 < 1 && cfg.beta2 > 0 && cfg.beta2 < 1 &&
                 cfg.eps > 0,
             "adam_step: invalid hyperparameters");
    BD_CHECK(state.step >= 0, "adam_step: negative step counter");
    state.step += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

    for (const auto& [name, grad] : grads) {
        auto it = params.find(name);
        BD_CHECK(it != params.end(), "adam_step: gradient for unknown parameter '{}'", name);
        Tensor& p = it->second;
        BD_CHECK(grad.shape() == p.shape(), "adam_step: gradient shape {} vs parameter {} for '{}'",
                 shape_str(grad.shape()), shape_str(p.shape()), name);
        BD_CHECK(grad.dtype() == p.dtype(), "adam_step: dtype mismatch for '{}'", name);

        auto& mom = state.moments[name];
        if (!mom.m.defined()) {
            mom.m = Tensor::zeros(p.shape(), p.dtype());
            mom.v = Tensor::zeros(p.shape(), p.dtype());
        }
        int64_t n = p.numel();
        if (p.dtype() == DType::F32) {
            float* pv = p.data_f32();
            const float* gv = grad.data_f32();
            float* m = mom.m.data_f32();
            float* v = mom.v.data_f32();
            float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
            float lr = static_cast<float>(cfg.lr), eps = static_cast<float>(cfg.eps);
            float c1 = static_cast<float>(bc1), c2 = static_cast<float>(bc2);
            for (int64_t i = 0; i < n; ++i) {
                m[i] = b1 * m[i] + (1.f - b1) * gv[i];
                v[i] = b2 * v[i] + (1.f - b2) * gv[i] * gv[i];
                float mh = m[i] / c1;
                float vh = v[i] / c2;
                pv[i] -= lr * mh / (std::sqrt(vh) + eps);
            }
        } else {
            double* pv = p.data_f64();
            const double* gv = grad.data_f64();
            double* m = mom.m.data_f64();
            double* v = mom.v.data_f64();
            for (int64_t i = 0; i < n; ++i) {
                m[i] = cfg.beta1 * m[i] + (1. - cfg.beta1) * gv[i];
                v[i] = cfg.beta2 * v[i] + (1. - cfg.beta2) * gv[i] * gv[i];
                double mh = m[i] / bc1;
                double vh = v[i] / bc2;
                pv[i] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
            }
        }
    }
}

}  // namespace bridgediff
