#pragma once

#include "bridgediff/networks.hpp"
#include "bridgediff/rng.hpp"
#include "bridgediff/tensor.hpp"

#include <vector>

namespace bridgediff {

// Diffusion timestep constants. alpha_bars[t] is the cumulative product of
// (1 - beta) up to and including t; betas are linear between the endpoints.
struct NoiseSchedule {
    int train_timesteps = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;
    double latent_scale = 0.18215;
};

NoiseSchedule build_schedule(int train_timesteps, double beta_start, double beta_end);

// x_t = sqrt(a_bar_t) * x0 + sqrt(1 - a_bar_t) * eps, per batch element.
// x0 [B,...] with one timestep per leading-axis element.
Tensor add_noise(const NoiseSchedule& sched, const Tensor& x0, const Tensor& eps,
                 const std::vector<int>& timesteps);

// Sinusoidal embedding: [sin(t*f_0..f_{h-1}), cos(t*f_0..f_{h-1})] with
// f_i = 10000^(-i/h), h = dim/2.
Tensor timestep_embedding(int t, int dim, DType dt = DType::F32);

// uncond + w * (cond - uncond)
Tensor guided_prediction(const Tensor& uncond, const Tensor& cond, double w);

enum class SamplerKind { DeterministicSkip, Ancestral };

struct SamplerConfig {
    SamplerKind kind = SamplerKind::DeterministicSkip;
    int steps = 50;        // S <= T
    double guidance = 7.5; // w >= 0
};

// Strictly decreasing subsequence of [0, T) used for inference.
std::vector<int> inference_timesteps(int train_timesteps, int steps);

// Reverse loop from a standard-normal latent; returns the final latent
// (pre-VAE-decode, still in scaled-latent space). context/uncond_context are
// encode_text outputs; both shaped [L,d_txt] or [B,L,d_txt].
Tensor sample(const ModelBundle& model, const Tensor& context, const Tensor& uncond_context,
              const NoiseSchedule& sched, const SamplerConfig& cfg, RngStream& rng,
              const AdapterSet& adapters = {});

}  // namespace bridgediff
