#include "bridgediff/scheduler.hpp"

#include <cmath>

namespace bridgediff {

NoiseSchedule build_schedule(int train_timesteps, double beta_start, double beta_end) {
    BD_CHECK(train_timesteps >= 1, "build_schedule: need T >= 1, got {}", train_timesteps);
    BD_CHECK(beta_start >= 0 && beta_start <= beta_end && beta_end < 1,
             "build_schedule: need 0 <= beta_start <= beta_end < 1, got {} / {}", beta_start,
             beta_end);
    NoiseSchedule s;
    s.train_timesteps = train_timesteps;
    s.betas.resize(static_cast<size_t>(train_timesteps));
    s.alphas.resize(static_cast<size_t>(train_timesteps));
    s.alpha_bars.resize(static_cast<size_t>(train_timesteps));
    double prod = 1.0;
    for (int t = 0; t < train_timesteps; ++t) {
        double frac = train_timesteps == 1 ? 0.0 : static_cast<double>(t) / (train_timesteps - 1);
        double beta = beta_start + (beta_end - beta_start) * frac;
        s.betas[static_cast<size_t>(t)] = beta;
        s.alphas[static_cast<size_t>(t)] = 1.0 - beta;
        prod *= 1.0 - beta;
        s.alpha_bars[static_cast<size_t>(t)] = prod;
    }
    return s;
}

Tensor add_noise(const NoiseSchedule& sched, const Tensor& x0, const Tensor& eps,
                 const std::vector<int>& timesteps) {
    BD_CHECK(x0.shape() == eps.shape(), "add_noise: shape {} vs {}", shape_str(x0.shape()),
             shape_str(eps.shape()));
    BD_CHECK(x0.rank() >= 1, "add_noise: scalar input");
    int64_t b = x0.dim(0);
    BD_CHECK(static_cast<int64_t>(timesteps.size()) == b,
             "add_noise: {} timesteps for batch of {}", timesteps.size(), b);
    Shape cshape(static_cast<size_t>(x0.rank()), 1);
    cshape[0] = b;
    Tensor c1 = Tensor::zeros(cshape, x0.dtype());
    Tensor c2 = Tensor::zeros(cshape, x0.dtype());
    for (int64_t i = 0; i < b; ++i) {
        int t = timesteps[static_cast<size_t>(i)];
        BD_CHECK(t >= 0 && t < sched.train_timesteps,
                 "add_noise: timestep {} out of range [0, {})", t, sched.train_timesteps);
        double ab = sched.alpha_bars[static_cast<size_t>(t)];
        c1.set(i, std::sqrt(ab));
        c2.set(i, std::sqrt(1.0 - ab));
    }
    return add(mul(x0, c1), mul(eps, c2));
}

Tensor timestep_embedding(int t, int dim, DType dt) {
    BD_CHECK(dim > 0 && dim % 2 == 0, "timestep_embedding: dim must be positive even, got {}", dim);
    BD_CHECK(t >= 0, "timestep_embedding: negative timestep {}", t);
    int half = dim / 2;
    Tensor out = Tensor::zeros({dim}, dt);
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        double arg = static_cast<double>(t) * freq;
        out.set(i, std::sin(arg));
        out.set(half + i, std::cos(arg));
    }
    return out;
}

Tensor guided_prediction(const Tensor& uncond, const Tensor& cond, double w) {
    BD_CHECK(uncond.shape() == cond.shape(), "guided_prediction: shape {} vs {}",
             shape_str(uncond.shape()), shape_str(cond.shape()));
    if (w == 0.0) return uncond.clone();
    if (w == 1.0) return cond.clone();
    return add(uncond, mul_scalar(sub(cond, uncond), w));
}

std::vector<int> inference_timesteps(int train_timesteps, int steps) {
    BD_CHECK(steps >= 1 && steps <= train_timesteps,
             "inference steps must satisfy 1 <= S <= T, got S={} T={}", steps, train_timesteps);
    // trailing spacing: the first step sits at T-1 for any S
    std::vector<int> ts(static_cast<size_t>(steps));
    for (int i = 0; i < steps; ++i) {
        int64_t num = static_cast<int64_t>(train_timesteps) * (steps - i) + steps - 1;
        ts[static_cast<size_t>(i)] = static_cast<int>(num / steps - 1);
    }
    return ts;  // strictly decreasing
}

namespace {

Tensor batch_timestep_embedding(int t, int dim, int batch, DType dt) {
    Tensor one = timestep_embedding(t, dim, dt);
    std::vector<Tensor> rows(static_cast<size_t>(batch), reshape(one, {1, dim}));
    return batch == 1 ? reshape(one, {1, dim}) : concat(rows, 0);
}

}  // namespace

Tensor sample(const ModelBundle& model, const Tensor& context, const Tensor& uncond_context,
              const NoiseSchedule& sched, const SamplerConfig& cfg, RngStream& rng,
              const AdapterSet& adapters) {
    BD_CHECK(cfg.guidance >= 0, "sample: guidance must be >= 0, got {}", cfg.guidance);
    NoGradGuard ng;
    Tensor ctx = context.rank() == 2 ? reshape(context, {1, context.dim(0), context.dim(1)})
                                     : context;
    Tensor uctx = uncond_context.rank() == 2
                      ? reshape(uncond_context, {1, uncond_context.dim(0), uncond_context.dim(1)})
                      : uncond_context;
    int64_t b = ctx.dim(0);
    int side = model.cfg.resolution / 4;
    Tensor x = Tensor::randn({b, side, side, model.cfg.latent_channels}, rng, model.cfg.dtype);

    std::vector<int> ts = inference_timesteps(sched.train_timesteps, cfg.steps);
    for (size_t i = 0; i < ts.size(); ++i) {
        int t = ts[i];
        Tensor temb =
            batch_timestep_embedding(t, model.cfg.temb_dim, static_cast<int>(b), model.cfg.dtype);
        Tensor eps_hat;
        if (cfg.guidance == 0.0) {
            eps_hat = predict_noise(model.den, x, temb, uctx, adapters);
        } else if (cfg.guidance == 1.0) {
            eps_hat = predict_noise(model.den, x, temb, ctx, adapters);
        } else {
            Tensor eps_u = predict_noise(model.den, x, temb, uctx, adapters);
            Tensor eps_c = predict_noise(model.den, x, temb, ctx, adapters);
            eps_hat = guided_prediction(eps_u, eps_c, cfg.guidance);
        }

        double ab_t = sched.alpha_bars[static_cast<size_t>(t)];
        double ab_prev = i + 1 < ts.size() ? sched.alpha_bars[static_cast<size_t>(ts[i + 1])] : 1.0;
        if (cfg.kind == SamplerKind::DeterministicSkip) {
            // x0 = (x - sqrt(1-ab_t) eps) / sqrt(ab_t); x_prev = sqrt(ab_prev) x0
            //      + sqrt(1-ab_prev) eps
            Tensor x0 = mul_scalar(sub(x, mul_scalar(eps_hat, std::sqrt(1.0 - ab_t))),
                                   1.0 / std::sqrt(ab_t));
            x = add(mul_scalar(x0, std::sqrt(ab_prev)),
                    mul_scalar(eps_hat, std::sqrt(1.0 - ab_prev)));
        } else {
            // ancestral: posterior mean plus sigma * z
            double alpha_step = ab_t / ab_prev;
            Tensor x0 = mul_scalar(sub(x, mul_scalar(eps_hat, std::sqrt(1.0 - ab_t))),
                                   1.0 / std::sqrt(ab_t));
            double var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - alpha_step);
            double c0 = std::sqrt(ab_prev) * (1.0 - alpha_step) / (1.0 - ab_t);
            double c1 = std::sqrt(alpha_step) * (1.0 - ab_prev) / (1.0 - ab_t);
            x = add(mul_scalar(x0, c0), mul_scalar(x, c1));
            if (i + 1 < ts.size() && var > 0) {
                Tensor z = Tensor::randn(x.shape(), rng, x.dtype());
                x = add(x, mul_scalar(z, std::sqrt(var)));
            }
        }
    }
    if (context.rank() == 2) {
        Shape s = x.shape();
        return reshape(x, {s[1], s[2], s[3]});
    }
    return x;
}

}  // namespace bridgediff
