#pragma once

#include "bridgediff/data.hpp"
#include "bridgediff/networks.hpp"
#include "bridgediff/optim.hpp"
#include "bridgediff/scheduler.hpp"

#include <functional>
#include <set>

namespace bridgediff {

enum class Method { Pretrain, TextualInversion, Dreambooth, Hypernetwork, Lora };
const char* method_name(Method m);

// Explicit set of parameter ids eligible for update; every other parameter
// stays bit-identical across a run.
struct TrainableSelector {
    Method method = Method::Pretrain;
    std::set<std::string> param_ids;
    int64_t keep_embedding_row = -1;  // textual inversion: masked row of text.tok_emb
};

TrainableSelector pretrain_selector(const ModelBundle& bundle);
TrainableSelector vae_selector(const ModelBundle& bundle);
TrainableSelector ti_selector(const ModelBundle& bundle, int64_t placeholder_id);
TrainableSelector dreambooth_selector(const ModelBundle& bundle,
                                      bool include_text_encoder = false);
TrainableSelector lora_selector(const LoraArtifact& artifact);
TrainableSelector hypernet_selector(const HypernetArtifact& artifact);

struct Batch {
    Tensor images;                            // [B,H,W,3]
    std::vector<std::vector<int>> token_ids;  // rows padded to l_max
    std::vector<int> lengths;
};

Batch make_batch(const Corpus& corpus, const std::vector<size_t>& indices, const Vocab& vocab,
                 const std::function<std::string(const ImageTextPair&)>& caption_fn, int l_max,
                 DType dtype);

// mean over all axes of (noise_pred - noise)^2
Tensor diffusion_loss(const Tensor& noise_pred, const Tensor& noise);

// One training step: encode -> scale by 0.18215 -> noise -> uniform timesteps
// -> add_noise -> encode_text -> timestep embeddings -> predict_noise -> MSE
// -> backward restricted to the selector (row-masked for textual inversion)
// -> Adam. Returns the scalar loss.
double train_step(ModelBundle& bundle, const NoiseSchedule& sched, const Batch& batch,
                  const TrainableSelector& sel, AdamState& opt, const AdamConfig& acfg,
                  RngStream& rng, const AdapterSet& adapters = {},
                  GradientMap* out_grads = nullptr);

struct TrainRunOptions {
    int steps = 0;
    double lr = 1e-3;
    int batch_size = 8;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double caption_dropout = 0.0;  // base pretraining only
    double kl_weight = 1e-4;       // VAE pretraining only
    std::string prompt_template = "a picture of [filewords], art by [name]";

    AdamConfig adam() const { return {lr, beta1, beta2, eps}; }
};

struct TrainHooks {
    std::function<void(int step, double loss, const GradientMap& grads)> on_step;
};

using CaptionFn = std::function<std::string(const ImageTextPair&)>;

// reconstruction + KL pretraining of the VAE; freezes nothing else
std::vector<double> pretrain_vae(ModelBundle& bundle, const Corpus& corpus,
                                 const TrainRunOptions& opts, RngStream& rng,
                                 const TrainHooks& hooks = {});

// denoiser pretraining over shuffled batches with raw captions (and optional
// caption dropout for classifier-free guidance)
std::vector<double> pretrain(ModelBundle& bundle, const NoiseSchedule& sched, const Corpus& corpus,
                             const Vocab& vocab, const TrainRunOptions& opts, RngStream& rng,
                             const TrainHooks& hooks = {});

// plain full fine-tuning of the denoiser on one corpus (the lambda=0
// comparator for Dreambooth)
std::vector<double> finetune_full(ModelBundle& bundle, const NoiseSchedule& sched,
                                  const Corpus& corpus, const Vocab& vocab, CaptionFn caption_fn,
                                  const TrainRunOptions& opts, RngStream& rng,
                                  const TrainHooks& hooks = {});

// ---- textual inversion ----

// Appends one vocabulary row initialized from init_word's embedding; the new
// token id equals the previous total vocabulary size.
TiArtifact ti_extend_vocab(ModelBundle& bundle, Vocab& vocab, const std::string& placeholder,
                           const std::string& init_word);

struct TiResult {
    TiArtifact artifact;
    std::vector<double> losses;
};

TiResult ti_train(ModelBundle& bundle, Vocab& vocab, const NoiseSchedule& sched,
                  const Corpus& corpus, const std::string& placeholder,
                  const TrainRunOptions& opts, RngStream& rng, const TrainHooks& hooks = {});

// ---- dreambooth ----

struct DreamboothRun {
    std::string instance_token = "beike";
    std::string class_token = "bridge";
    Corpus class_images;
    double prior_weight = 1.0;  // lambda
    bool train_text_encoder = false;
};

Corpus db_generate_class_images(const ModelBundle& bundle, const Vocab& vocab,
                                const std::string& class_prompt, int count,
                                const SamplerConfig& scfg, const NoiseSchedule& sched,
                                RngStream& rng);

// full-model fine-tune; per step loss = L_instance + lambda * L_prior
std::vector<double> db_train(ModelBundle& bundle, Vocab& vocab, const NoiseSchedule& sched,
                             const Corpus& instance_corpus, const DreamboothRun& run,
                             const TrainRunOptions& opts, RngStream& rng,
                             const TrainHooks& hooks = {});

// ---- hypernetwork ----

HypernetArtifact hn_build(const ModelBundle& bundle, const std::vector<int>& multipliers,
                          const std::string& activation, const std::string& init, RngStream& rng,
                          const std::string& name = "hypernet");

std::vector<double> hn_train(ModelBundle& bundle, const NoiseSchedule& sched, const Corpus& corpus,
                             const Vocab& vocab, HypernetArtifact& artifact,
                             const TrainRunOptions& opts, RngStream& rng,
                             const TrainHooks& hooks = {});

// ---- lora ----

// A ~ N(0, 0.01^2), B = 0 so attachment is behavior-preserving
LoraArtifact lora_attach(const ModelBundle& bundle, int rank, double alpha, RngStream& rng,
                         const std::string& name = "lora");

std::vector<double> lora_train(ModelBundle& bundle, const NoiseSchedule& sched,
                               const Corpus& corpus, const Vocab& vocab, LoraArtifact& artifact,
                               const TrainRunOptions& opts, RngStream& rng,
                               const TrainHooks& hooks = {});

// W' = W + (alpha/r) * A.B   (storage layout [d_in,d_out])
Tensor lora_merge(const Tensor& w, const LoraEntry& entry, double alpha, int rank);
// applies lora_merge to every site projection of the bundle, in place
void merge_lora(ModelBundle& bundle, const LoraArtifact& artifact, double weight = 1.0);

// byte-level fingerprints of every parameter, for selector-isolation audits
std::map<std::string, uint64_t> param_fingerprints(const ParamMap& params);

// ---- text-to-image ----

// Loaded artifacts available to prompt triggers; TI embeddings apply to the
// vocabulary unconditionally.
struct AdapterRegistry {
    std::map<std::string, LoraArtifact> loras;
    std::map<std::string, HypernetArtifact> hypernets;
    std::vector<TiArtifact> embeddings;
};

// prompt -> parse triggers -> tokenize -> encode_text -> reverse sampling with
// adapters active -> unscale -> decode. One image per count, each from an
// independent stream derived from (rng, image index).
std::vector<Tensor> generate(ModelBundle& bundle, Vocab& vocab, const std::string& prompt,
                             const AdapterRegistry& registry, const SamplerConfig& scfg,
                             const NoiseSchedule& sched, RngStream& rng, int count = 1);

}  // namespace bridgediff
