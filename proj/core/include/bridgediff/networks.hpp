#pragma once

#include "bridgediff/adapters.hpp"
#include "bridgediff/rng.hpp"
#include "bridgediff/tensor.hpp"

#include <functional>
#include <optional>
#include <utility>

namespace bridgediff {

// Desk-scale model dimensions. Every architectural role of the full system is
// kept; only the sizes shrink.
struct NetConfig {
    int resolution = 32;      // square input, divisible by 4
    int latent_channels = 4;  // VAE latent channels
    int vae_channels = 32;    // VAE base width
    int d_model = 64;         // denoiser width
    int d_txt = 64;           // text embedding width
    int n_heads = 2;
    int l_max = 16;  // fixed token sequence length
    int text_blocks = 2;
    int temb_dim = 64;      // sinusoidal embedding fed to the denoiser
    int temb_hidden = 128;  // timestep MLP width
    int gn_groups = 8;
    int vocab_size = 0;  // V_total at build time
    DType dtype = DType::F32;
};

struct Conv {
    Tensor w;  // [3,3,Cin,Cout]
    Tensor b;  // [Cout]
};

struct Norm {
    Tensor g;
    Tensor b;
};

struct Vae {
    // encoder: two stride-2 stages -> downsample factor 4
    Conv enc0;
    Norm en1;
    Conv enc1;  // stride 2
    Norm en2;
    Conv enc2;  // stride 2
    Norm en3;
    Conv enc3;
    Norm en4;
    Conv enc4;  // -> 2*latent_channels (mean | log-variance)
    // decoder
    Conv dec0;
    Norm dn1;
    Conv dec1;
    Norm dn2;
    Conv dec2;  // after first upsample
    Norm dn3;
    Conv dec3;  // after second upsample
    Norm dn4;
    Conv dec4;  // -> 3, sigmoid
    int gn_groups = 8;
    int latent_channels = 4;
};

struct TextAttn {
    Tensor wq, wk, wv, wo;  // [dt,dt]
};

struct TextBlock {
    Norm ln1;
    TextAttn attn;
    Norm ln2;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct TextEncoder {
    Tensor tok_emb;  // [V_total, d_txt]; grows when placeholders are added
    Tensor pos_emb;  // [l_max, d_txt]
    std::vector<TextBlock> blocks;
    Norm ln_final;
    int d_txt = 64;
    int l_max = 16;
    int n_heads = 2;
    int pad_id = 0;
};

// Hookable conditioning site: queries from latent features, keys/values from
// the text context.
struct CrossAttentionSite {
    std::string id;
    Tensor wq;  // [d_model, d_model]
    Tensor wk;  // [d_txt, d_model]
    Tensor wv;  // [d_txt, d_model]
    Tensor wo;  // [d_model, d_model]
    int heads = 2;
};

struct ResBlock {
    Norm n1;
    Conv c1;
    Tensor temb_w, temb_b;  // [temb_hidden, Cout], [Cout]
    Norm n2;
    Conv c2;
    Tensor skip_w;  // [Cin, Cout] when Cin != Cout, else undefined
};

struct AttnBlock {
    Norm ln;
    CrossAttentionSite site;
};

struct Denoiser {
    Conv conv_in;
    Tensor temb_w1, temb_b1, temb_w2, temb_b2;
    ResBlock down0_res;
    AttnBlock down0_attn;  // 8x8
    Conv down_conv;        // stride 2
    ResBlock down1_res;
    AttnBlock down1_attn;  // 4x4
    ResBlock mid_res1;
    AttnBlock mid_attn;
    ResBlock mid_res2;
    ResBlock up0_res;
    AttnBlock up0_attn;  // 4x4, after skip concat
    Conv up_conv;        // after upsample
    ResBlock up1_res;
    AttnBlock up1_attn;  // 8x8, after skip concat
    Norm out_norm;
    Conv conv_out;
    int gn_groups = 8;

    std::vector<const CrossAttentionSite*> sites() const;
    std::vector<std::string> site_ids() const;
};

// The three components plus the named-parameter registry covering every
// trainable tensor exactly once.
struct ModelBundle {
    NetConfig cfg;
    Vae vae;
    TextEncoder text;
    Denoiser den;
    ParamMap params;
    bool vae_trained = false;
    bool base_trained = false;
};

ModelBundle build_model(const NetConfig& cfg, RngStream& rng);

// deep copy: fresh tensors, same values/flags
ModelBundle clone_bundle(const ModelBundle& bundle);

// image [H,W,3] or [B,H,W,3] in [0,1] -> (mean, log_variance) over the latent grid
std::pair<Tensor, Tensor> encode_image(const Vae& vae, const Tensor& image);
// mean + exp(0.5*log_var) * eps,  eps ~ N(0,1) from rng
Tensor sample_latent(const Tensor& mean, const Tensor& log_variance, RngStream& rng);
Tensor sample_latent(const Tensor& mean, const Tensor& log_variance, const Tensor& eps);
// latent [h,w,4] or [B,h,w,4] -> image [4h,4w,3] in [0,1]
Tensor decode_latent(const Vae& vae, const Tensor& latent);

// token ids (padded to l_max) -> context sequence [L,d_txt] / [B,L,d_txt];
// lengths give the number of real tokens per row (attention masked beyond)
Tensor encode_text(const TextEncoder& te, const std::vector<std::vector<int>>& ids,
                   const std::vector<int>& lengths);
Tensor encode_text(const TextEncoder& te, const std::vector<int>& ids, int length);

// optional hook transforming the context on the key/value paths
using KvTransform =
    std::function<std::pair<Tensor, Tensor>(const Tensor& keys, const Tensor& values)>;

struct LoraScaled {
    const LoraSiteEntry* entry;
    double scale;  // directive weight * alpha / rank
};

// Multi-head softmax(Q K^T / sqrt(d_head)) V with output projection.
// x [N,d_model] or [B,N,d_model]; context [L,d_txt] or [B,L,d_txt].
Tensor cross_attention(const CrossAttentionSite& site, const Tensor& x, const Tensor& context,
                       const KvTransform* kv_transform = nullptr,
                       const std::vector<LoraScaled>& loras = {});

// noisy latents [B,h,w,c] + sinusoidal timestep embedding [B,temb_dim] +
// context [B,L,d_txt] -> predicted noise, same shape as the latents
Tensor predict_noise(const Denoiser& den, const Tensor& noisy_latents, const Tensor& t_embedding,
                     const Tensor& context, const AdapterSet& adapters = {});

// y = x.w + b for trailing-axis features
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace bridgediff
