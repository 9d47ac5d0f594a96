#include "bridgediff/networks.hpp"

#include "net_init.hpp"

namespace bridgediff {

ModelBundle build_model(const NetConfig& cfg, RngStream& rng) {
    BD_CHECK(cfg.resolution >= 8 && cfg.resolution % 4 == 0,
             "build_model: resolution {} must be a positive multiple of 4", cfg.resolution);
    BD_CHECK(cfg.resolution / 4 % 2 == 0, "build_model: latent side {} must be even",
             cfg.resolution / 4);
    ModelBundle b;
    b.cfg = cfg;
    RngStream vae_rng = rng.split(1);
    RngStream text_rng = rng.split(2);
    RngStream den_rng = rng.split(3);
    b.vae = build_vae(cfg, vae_rng, b.params);
    b.text = build_text_encoder(cfg, text_rng, b.params);
    b.den = build_denoiser(cfg, den_rng, b.params);
    return b;
}

ModelBundle clone_bundle(const ModelBundle& bundle) {
    RngStream scratch(0, 0);
    ModelBundle copy = build_model(bundle.cfg, scratch);
    for (auto& [name, t] : copy.params) {
        const Tensor& src = bundle.params.at(name);
        BD_CHECK(src.shape() == t.shape(), "clone_bundle: shape drift for '{}'", name);
        for (int64_t i = 0; i < t.numel(); ++i) t.set(i, src.at(i));
    }
    copy.vae_trained = bundle.vae_trained;
    copy.base_trained = bundle.base_trained;
    return copy;
}

Tensor hypernet_apply(const HypernetMlp& mlp, const Tensor& x, const std::string& activation,
                      bool residual, double weight) {
    if (weight == 0.0) return x;
    Tensor h = x;
    for (size_t i = 0; i < mlp.weights.size(); ++i) {
        h = linear(h, mlp.weights[i], mlp.biases[i]);
        if (i + 1 < mlp.weights.size()) {
            if (activation == "relu") {
                h = relu(h);
            } else if (activation == "silu") {
                h = silu(h);
            }
            // "linear" keeps the value as-is
        }
    }
    if (weight != 1.0) h = mul_scalar(h, weight);
    return residual ? add(x, h) : h;
}

ParamMap LoraArtifact::params() const {
    ParamMap p;
    for (const auto& [site, entry] : sites) {
        auto put = [&](const char* proj, const LoraEntry& e) {
            p.emplace(fmt::format("lora.{}.{}.a", site, proj), e.a);
            p.emplace(fmt::format("lora.{}.{}.b", site, proj), e.b);
        };
        put("q", entry.q);
        put("k", entry.k);
        put("v", entry.v);
        put("o", entry.o);
    }
    return p;
}

std::vector<int> HypernetArtifact::layer_widths(int d_txt) const {
    std::vector<int> w;
    for (int m : multipliers) w.push_back(m * d_txt);
    return w;
}

ParamMap HypernetArtifact::params() const {
    ParamMap p;
    for (const auto& [site, entry] : sites) {
        for (size_t i = 0; i < entry.key_mlp.weights.size(); ++i) {
            p.emplace(fmt::format("hn.{}.k.w{}", site, i), entry.key_mlp.weights[i]);
            p.emplace(fmt::format("hn.{}.k.b{}", site, i), entry.key_mlp.biases[i]);
            p.emplace(fmt::format("hn.{}.v.w{}", site, i), entry.value_mlp.weights[i]);
            p.emplace(fmt::format("hn.{}.v.b{}", site, i), entry.value_mlp.biases[i]);
        }
    }
    return p;
}

}  // namespace bridgediff
