#include "bridgediff/networks.hpp"

#include "net_init.hpp"

namespace bridgediff {

namespace {

Tensor gn_silu(const Tensor& x, const Norm& n, int groups) {
    return silu(group_norm(x, groups, n.g, n.b));
}

}  // namespace

Vae build_vae(const NetConfig& cfg, RngStream& rng, ParamMap& p) {
    Vae v;
    v.gn_groups = cfg.gn_groups;
    v.latent_channels = cfg.latent_channels;
    int vc = cfg.vae_channels;
    int lc = cfg.latent_channels;
    DType dt = cfg.dtype;
    v.enc0 = detail::make_conv(p, "vae.enc0", 3, vc, rng, dt);
    v.en1 = detail::make_norm(p, "vae.en1", vc, dt);
    v.enc1 = detail::make_conv(p, "vae.enc1", vc, vc, rng, dt);
    v.en2 = detail::make_norm(p, "vae.en2", vc, dt);
    v.enc2 = detail::make_conv(p, "vae.enc2", vc, 2 * vc, rng, dt);
    v.en3 = detail::make_norm(p, "vae.en3", 2 * vc, dt);
    v.enc3 = detail::make_conv(p, "vae.enc3", 2 * vc, 2 * vc, rng, dt);
    v.en4 = detail::make_norm(p, "vae.en4", 2 * vc, dt);
    v.enc4 = detail::make_conv(p, "vae.enc4", 2 * vc, 2 * lc, rng, dt, 0.01);
    v.dec0 = detail::make_conv(p, "vae.dec0", lc, 2 * vc, rng, dt);
    v.dn1 = detail::make_norm(p, "vae.dn1", 2 * vc, dt);
    v.dec1 = detail::make_conv(p, "vae.dec1", 2 * vc, 2 * vc, rng, dt);
    v.dn2 = detail::make_norm(p, "vae.dn2", 2 * vc, dt);
    v.dec2 = detail::make_conv(p, "vae.dec2", 2 * vc, vc, rng, dt);
    v.dn3 = detail::make_norm(p, "vae.dn3", vc, dt);
    v.dec3 = detail::make_conv(p, "vae.dec3", vc, vc, rng, dt);
    v.dn4 = detail::make_norm(p, "vae.dn4", vc, dt);
    v.dec4 = detail::make_conv(p, "vae.dec4", vc, 3, rng, dt, 0.01);
    return v;
}

std::pair<Tensor, Tensor> encode_image(const Vae& vae, const Tensor& image) {
    bool batched = image.rank() == 4;
    BD_CHECK(batched || image.rank() == 3, "encode_image: expected [H,W,3] or [B,H,W,3], got {}",
             shape_str(image.shape()));
    Tensor x = batched ? image
                       : reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
    int64_t h = x.dim(1), w = x.dim(2);
    BD_CHECK(x.dim(3) == 3, "encode_image: expected 3 channels, got {}", x.dim(3));
    BD_CHECK(h == w, "encode_image: image must be square, got {}x{}", h, w);
    BD_CHECK(h % 4 == 0, "encode_image: side {} not divisible by 4", h);

    Tensor y = conv2d(x, vae.enc0.w, vae.enc0.b, 1);
    y = gn_silu(y, vae.en1, vae.gn_groups);
    y = conv2d(y, vae.enc1.w, vae.enc1.b, 2);
    y = gn_silu(y, vae.en2, vae.gn_groups);
    y = conv2d(y, vae.enc2.w, vae.enc2.b, 2);
    y = gn_silu(y, vae.en3, vae.gn_groups);
    y = conv2d(y, vae.enc3.w, vae.enc3.b, 1);
    y = gn_silu(y, vae.en4, vae.gn_groups);
    y = conv2d(y, vae.enc4.w, vae.enc4.b, 1);

    int lc = vae.latent_channels;
    Tensor mean = narrow(y, 3, 0, lc);
    Tensor logvar = narrow(y, 3, lc, lc);
    if (!batched) {
        Shape s = mean.shape();
        mean = reshape(mean, {s[1], s[2], s[3]});
        logvar = reshape(logvar, {s[1], s[2], s[3]});
    }
    return {mean, logvar};
}

Tensor sample_latent(const Tensor& mean, const Tensor& log_variance, RngStream& rng) {
    BD_CHECK(mean.shape() == log_variance.shape(), "sample_latent: shape {} vs {}",
             shape_str(mean.shape()), shape_str(log_variance.shape()));
    Tensor eps = Tensor::randn(mean.shape(), rng, mean.dtype());
    return sample_latent(mean, log_variance, eps);
}

Tensor sample_latent(const Tensor& mean, const Tensor& log_variance, const Tensor& eps) {
    BD_CHECK(mean.shape() == log_variance.shape() && mean.shape() == eps.shape(),
             "sample_latent: shape {} vs {} vs {}", shape_str(mean.shape()),
             shape_str(log_variance.shape()), shape_str(eps.shape()));
    return add(mean, mul(exp(mul_scalar(log_variance, 0.5)), eps));
}

Tensor decode_latent(const Vae& vae, const Tensor& latent) {
    bool batched = latent.rank() == 4;
    BD_CHECK(batched || latent.rank() == 3, "decode_latent: expected [h,w,c] or [B,h,w,c], got {}",
             shape_str(latent.shape()));
    Tensor z = batched ? latent
                       : reshape(latent, {1, latent.dim(0), latent.dim(1), latent.dim(2)});
    BD_CHECK(z.dim(3) == vae.latent_channels, "decode_latent: expected {} channels, got {}",
             vae.latent_channels, z.dim(3));

    Tensor y = conv2d(z, vae.dec0.w, vae.dec0.b, 1);
    y = gn_silu(y, vae.dn1, vae.gn_groups);
    y = conv2d(y, vae.dec1.w, vae.dec1.b, 1);
    y = upsample_nearest2x(y);
    y = gn_silu(y, vae.dn2, vae.gn_groups);
    y = conv2d(y, vae.dec2.w, vae.dec2.b, 1);
    y = upsample_nearest2x(y);
    y = gn_silu(y, vae.dn3, vae.gn_groups);
    y = conv2d(y, vae.dec3.w, vae.dec3.b, 1);
    y = gn_silu(y, vae.dn4, vae.gn_groups);
    y = conv2d(y, vae.dec4.w, vae.dec4.b, 1);
    y = sigmoid(y);
    if (!batched) {
        Shape s = y.shape();
        y = reshape(y, {s[1], s[2], s[3]});
    }
    return y;
}

}  // namespace bridgediff
