#include "bridgediff/networks.hpp"

#include "net_init.hpp"

namespace bridgediff {

namespace {

Tensor split_heads(const Tensor& x, int heads) {
    int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    Tensor y = reshape(x, {b, n, heads, d / heads});
    y = permute(y, {0, 2, 1, 3});
    return reshape(y, {b * heads, n, d / heads});
}

Tensor merge_heads(const Tensor& x, int heads) {
    int64_t bh = x.dim(0), n = x.dim(1), dh = x.dim(2);
    Tensor y = reshape(x, {bh / heads, heads, n, dh});
    y = permute(y, {0, 2, 1, 3});
    return reshape(y, {bh / heads, n, heads * dh});
}

// x . w plus any active low-rank deltas on this projection
Tensor project(const Tensor& x, const Tensor& w, const std::vector<LoraScaled>& loras,
               const LoraEntry LoraSiteEntry::* proj) {
    Tensor y = linear(x, w, Tensor());
    for (const auto& ls : loras) {
        if (ls.scale == 0.0) continue;
        const LoraEntry& e = ls.entry->*proj;
        y = add(y, mul_scalar(linear(linear(x, e.a, Tensor()), e.b, Tensor()), ls.scale));
    }
    return y;
}

}  // namespace

Tensor cross_attention(const CrossAttentionSite& site, const Tensor& x, const Tensor& context,
                       const KvTransform* kv_transform, const std::vector<LoraScaled>& loras) {
    bool batched = x.rank() == 3;
    BD_CHECK(batched || x.rank() == 2, "cross_attention: x must be [N,d] or [B,N,d], got {}",
             shape_str(x.shape()));
    Tensor xq = batched ? x : reshape(x, {1, x.dim(0), x.dim(1)});
    Tensor ctx = context.rank() == 3 ? context
                                     : reshape(context, {1, context.dim(0), context.dim(1)});
    BD_CHECK(xq.dim(0) == ctx.dim(0), "cross_attention: batch {} vs {}", xq.dim(0), ctx.dim(0));
    BD_CHECK(xq.dim(2) == site.wq.dim(0), "cross_attention: query width {} vs site d_model {}",
             xq.dim(2), site.wq.dim(0));
    BD_CHECK(ctx.dim(2) == site.wk.dim(0), "cross_attention: context width {} vs site d_txt {}",
             ctx.dim(2), site.wk.dim(0));

    Tensor ctx_k = ctx, ctx_v = ctx;
    if (kv_transform && *kv_transform) {
        auto [k2, v2] = (*kv_transform)(ctx_k, ctx_v);
        BD_CHECK(k2.shape() == ctx.shape() && v2.shape() == ctx.shape(),
                 "cross_attention: kv_transform must preserve shapes");
        ctx_k = k2;
        ctx_v = v2;
    }

    int heads = site.heads;
    int64_t dm = site.wq.dim(1);
    int64_t dh = dm / heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor q = split_heads(project(xq, site.wq, loras, &LoraSiteEntry::q), heads);
    Tensor k = split_heads(project(ctx_k, site.wk, loras, &LoraSiteEntry::k), heads);
    Tensor v = split_heads(project(ctx_v, site.wv, loras, &LoraSiteEntry::v), heads);
    Tensor attn = softmax_lastdim(mul_scalar(bmm(q, permute(k, {0, 2, 1})), scale));
    Tensor o = merge_heads(bmm(attn, v), heads);
    o = project(o, site.wo, loras, &LoraSiteEntry::o);
    if (!batched) o = reshape(o, {o.dim(1), o.dim(2)});
    return o;
}

// ---------------- builders ----------------

namespace {

ResBlock make_resblock(ParamMap& p, const std::string& base, int cin, int cout, int temb_hidden,
                       RngStream& rng, DType dt) {
    ResBlock r;
    r.n1 = detail::make_norm(p, base + ".n1", cin, dt);
    r.c1 = detail::make_conv(p, base + ".c1", cin, cout, rng, dt);
    r.temb_w = detail::make_weight(p, base + ".temb.w", temb_hidden, cout, rng, dt);
    r.temb_b = detail::make_bias(p, base + ".temb.b", cout, dt);
    r.n2 = detail::make_norm(p, base + ".n2", cout, dt);
    r.c2 = detail::make_conv(p, base + ".c2", cout, cout, rng, dt);
    if (cin != cout) r.skip_w = detail::make_weight(p, base + ".skip.w", cin, cout, rng, dt);
    return r;
}

AttnBlock make_attnblock(ParamMap& p, const std::string& base, const std::string& site_id,
                         int d_model, int d_txt, int heads, RngStream& rng, DType dt) {
    AttnBlock a;
    a.ln = detail::make_norm(p, base + ".ln", d_model, dt);
    a.site.id = site_id;
    a.site.heads = heads;
    a.site.wq = detail::make_weight(p, base + ".wq", d_model, d_model, rng, dt);
    a.site.wk = detail::make_weight(p, base + ".wk", d_txt, d_model, rng, dt);
    a.site.wv = detail::make_weight(p, base + ".wv", d_txt, d_model, rng, dt);
    a.site.wo = detail::make_weight(p, base + ".wo", d_model, d_model, rng, dt);
    return a;
}

}  // namespace

Denoiser build_denoiser(const NetConfig& cfg, RngStream& rng, ParamMap& p) {
    BD_CHECK(cfg.d_model % cfg.n_heads == 0, "build_denoiser: d_model {} not divisible by {} heads",
             cfg.d_model, cfg.n_heads);
    Denoiser d;
    d.gn_groups = cfg.gn_groups;
    int C = cfg.d_model;
    int lc = cfg.latent_channels;
    DType dt = cfg.dtype;
    d.conv_in = detail::make_conv(p, "den.conv_in", lc, C, rng, dt);
    d.temb_w1 = detail::make_weight(p, "den.temb.w1", cfg.temb_dim, cfg.temb_hidden, rng, dt);
    d.temb_b1 = detail::make_bias(p, "den.temb.b1", cfg.temb_hidden, dt);
    d.temb_w2 = detail::make_weight(p, "den.temb.w2", cfg.temb_hidden, cfg.temb_hidden, rng, dt);
    d.temb_b2 = detail::make_bias(p, "den.temb.b2", cfg.temb_hidden, dt);

    d.down0_res = make_resblock(p, "den.down0.res", C, C, cfg.temb_hidden, rng, dt);
    d.down0_attn = make_attnblock(p, "den.down0.attn", "down0", C, cfg.d_txt, cfg.n_heads, rng, dt);
    d.down_conv = detail::make_conv(p, "den.down_conv", C, C, rng, dt);
    d.down1_res = make_resblock(p, "den.down1.res", C, C, cfg.temb_hidden, rng, dt);
    d.down1_attn = make_attnblock(p, "den.down1.attn", "down1", C, cfg.d_txt, cfg.n_heads, rng, dt);
    d.mid_res1 = make_resblock(p, "den.mid.res1", C, C, cfg.temb_hidden, rng, dt);
    d.mid_attn = make_attnblock(p, "den.mid.attn", "mid", C, cfg.d_txt, cfg.n_heads, rng, dt);
    d.mid_res2 = make_resblock(p, "den.mid.res2", C, C, cfg.temb_hidden, rng, dt);
    d.up0_res = make_resblock(p, "den.up0.res", 2 * C, C, cfg.temb_hidden, rng, dt);
    d.up0_attn = make_attnblock(p, "den.up0.attn", "up0", C, cfg.d_txt, cfg.n_heads, rng, dt);
    d.up_conv = detail::make_conv(p, "den.up_conv", C, C, rng, dt);
    d.up1_res = make_resblock(p, "den.up1.res", 2 * C, C, cfg.temb_hidden, rng, dt);
    d.up1_attn = make_attnblock(p, "den.up1.attn", "up1", C, cfg.d_txt, cfg.n_heads, rng, dt);
    d.out_norm = detail::make_norm(p, "den.out_norm", C, dt);
    d.conv_out = detail::make_conv_zero(p, "den.conv_out", C, lc, dt);
    return d;
}

std::vector<const CrossAttentionSite*> Denoiser::sites() const {
    return {&down0_attn.site, &down1_attn.site, &mid_attn.site, &up0_attn.site, &up1_attn.site};
}

std::vector<std::string> Denoiser::site_ids() const {
    std::vector<std::string> ids;
    for (const auto* s : sites()) ids.push_back(s->id);
    return ids;
}

// ---------------- forward ----------------

namespace {

struct SiteHooks {
    KvTransform kv;
    std::vector<LoraScaled> loras;
};

SiteHooks hooks_for_site(const AdapterSet& adapters, const std::string& site_id) {
    SiteHooks h;
    std::vector<std::tuple<const HypernetArtifact*, const HypernetSiteEntry*, double>> hns;
    for (const auto& [art, weight] : adapters.hypernets) {
        if (weight == 0.0) continue;
        auto it = art->sites.find(site_id);
        BD_CHECK(it != art->sites.end(), "hypernetwork '{}' has no entry for site '{}'", art->name,
                 site_id);
        hns.emplace_back(art, &it->second, weight);
    }
    if (!hns.empty()) {
        h.kv = [hns](const Tensor& keys, const Tensor& values) {
            Tensor k = keys, v = values;
            for (const auto& [art, entry, weight] : hns) {
                k = hypernet_apply(entry->key_mlp, k, art->activation, art->residual, weight);
                v = hypernet_apply(entry->value_mlp, v, art->activation, art->residual, weight);
            }
            return std::make_pair(k, v);
        };
    }
    for (const auto& [art, weight] : adapters.loras) {
        if (weight == 0.0) continue;
        auto it = art->sites.find(site_id);
        BD_CHECK(it != art->sites.end(), "lora '{}' has no entry for site '{}'", art->name,
                 site_id);
        h.loras.push_back({&it->second, weight * art->alpha / art->rank});
    }
    return h;
}

Tensor resblock_forward(const ResBlock& r, const Tensor& x, const Tensor& temb, int groups) {
    Tensor h = silu(group_norm(x, groups, r.n1.g, r.n1.b));
    h = conv2d(h, r.c1.w, r.c1.b, 1);
    Tensor tproj = linear(silu(temb), r.temb_w, r.temb_b);  // [B, Cout]
    tproj = reshape(tproj, {tproj.dim(0), 1, 1, tproj.dim(1)});
    h = add(h, tproj);
    h = silu(group_norm(h, groups, r.n2.g, r.n2.b));
    h = conv2d(h, r.c2.w, r.c2.b, 1);
    Tensor skip = r.skip_w.defined() ? linear(x, r.skip_w, Tensor()) : x;
    return add(skip, h);
}

Tensor attnblock_forward(const AttnBlock& a, const Tensor& x, const Tensor& ctx,
                         const AdapterSet& adapters) {
    int64_t b = x.dim(0), hh = x.dim(1), ww = x.dim(2), c = x.dim(3);
    Tensor seq = reshape(x, {b, hh * ww, c});
    Tensor xn = layer_norm(seq, a.ln.g, a.ln.b);
    SiteHooks hooks = hooks_for_site(adapters, a.site.id);
    Tensor att = cross_attention(a.site, xn, ctx, hooks.kv ? &hooks.kv : nullptr, hooks.loras);
    return reshape(add(seq, att), {b, hh, ww, c});
}

}  // namespace

Tensor predict_noise(const Denoiser& den, const Tensor& noisy_latents, const Tensor& t_embedding,
                     const Tensor& context, const AdapterSet& adapters) {
    BD_CHECK(noisy_latents.rank() == 4, "predict_noise: latents must be [B,h,w,c], got {}",
             shape_str(noisy_latents.shape()));
    BD_CHECK(t_embedding.rank() == 2 && t_embedding.dim(0) == noisy_latents.dim(0),
             "predict_noise: timestep embedding must be [B,temb_dim]");
    BD_CHECK(context.rank() == 3 && context.dim(0) == noisy_latents.dim(0),
             "predict_noise: context must be [B,L,d_txt]");
    int g = den.gn_groups;

    Tensor temb = linear(silu(linear(t_embedding, den.temb_w1, den.temb_b1)), den.temb_w2,
                         den.temb_b2);

    Tensor h0 = conv2d(noisy_latents, den.conv_in.w, den.conv_in.b, 1);
    Tensor h1 = resblock_forward(den.down0_res, h0, temb, g);
    h1 = attnblock_forward(den.down0_attn, h1, context, adapters);
    Tensor h2 = conv2d(h1, den.down_conv.w, den.down_conv.b, 2);
    Tensor h3 = resblock_forward(den.down1_res, h2, temb, g);
    h3 = attnblock_forward(den.down1_attn, h3, context, adapters);

    Tensor m = resblock_forward(den.mid_res1, h3, temb, g);
    m = attnblock_forward(den.mid_attn, m, context, adapters);
    m = resblock_forward(den.mid_res2, m, temb, g);

    Tensor u0 = resblock_forward(den.up0_res, concat({m, h3}, 3), temb, g);
    u0 = attnblock_forward(den.up0_attn, u0, context, adapters);
    Tensor u = conv2d(upsample_nearest2x(u0), den.up_conv.w, den.up_conv.b, 1);
    Tensor u1 = resblock_forward(den.up1_res, concat({u, h1}, 3), temb, g);
    u1 = attnblock_forward(den.up1_attn, u1, context, adapters);

    Tensor out = silu(group_norm(u1, g, den.out_norm.g, den.out_norm.b));
    return conv2d(out, den.conv_out.w, den.conv_out.b, 1);
}

}  // namespace bridgediff
