#pragma once

// Internal parameter construction/registration helpers for the model builders.

#include "bridgediff/networks.hpp"

#include <cmath>

namespace bridgediff::detail {

inline Tensor reg(ParamMap& params, const std::string& name, Tensor t) {
    t.set_name(name);
    auto [it, inserted] = params.emplace(name, t);
    BD_CHECK(inserted, "parameter '{}' registered twice", name);
    return it->second;
}

inline Conv make_conv(ParamMap& p, const std::string& name, int cin, int cout, RngStream& rng,
                      DType dt, double stddev = -1) {
    if (stddev < 0) stddev = std::sqrt(2.0 / (9.0 * cin));
    Conv c;
    c.w = reg(p, name + ".w", Tensor::randn({3, 3, cin, cout}, rng, dt, stddev));
    c.b = reg(p, name + ".b", Tensor::zeros({cout}, dt));
    return c;
}

inline Conv make_conv_zero(ParamMap& p, const std::string& name, int cin, int cout, DType dt) {
    Conv c;
    c.w = reg(p, name + ".w", Tensor::zeros({3, 3, cin, cout}, dt));
    c.b = reg(p, name + ".b", Tensor::zeros({cout}, dt));
    return c;
}

inline Norm make_norm(ParamMap& p, const std::string& name, int c, DType dt) {
    Norm n;
    n.g = reg(p, name + ".g", Tensor::full({c}, 1.0, dt));
    n.b = reg(p, name + ".b", Tensor::zeros({c}, dt));
    return n;
}

inline Tensor make_weight(ParamMap& p, const std::string& name, int din, int dout, RngStream& rng,
                          DType dt, double stddev = -1) {
    if (stddev < 0) stddev = 1.0 / std::sqrt(static_cast<double>(din));
    return reg(p, name, Tensor::randn({din, dout}, rng, dt, stddev));
}

inline Tensor make_bias(ParamMap& p, const std::string& name, int d, DType dt) {
    return reg(p, name, Tensor::zeros({d}, dt));
}

}  // namespace bridgediff::detail

namespace bridgediff {
Vae build_vae(const NetConfig& cfg, RngStream& rng, ParamMap& p);
TextEncoder build_text_encoder(const NetConfig& cfg, RngStream& rng, ParamMap& p);
Denoiser build_denoiser(const NetConfig& cfg, RngStream& rng, ParamMap& p);
}  // namespace bridgediff
