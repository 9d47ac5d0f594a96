#include "bridgediff/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace bridgediff {

const char* method_name(Method m) {
    switch (m) {
        case Method::Pretrain: return "pretrain";
        case Method::TextualInversion: return "textual_inversion";
        case Method::Dreambooth: return "dreambooth";
        case Method::Hypernetwork: return "hypernetwork";
        case Method::Lora: return "lora";
    }
    return "?";
}

namespace {

std::set<std::string> ids_with_prefix(const ParamMap& params, const std::string& prefix) {
    std::set<std::string> out;
    for (const auto& [name, t] : params) {
        if (name.rfind(prefix, 0) == 0) out.insert(name);
    }
    return out;
}

}  // namespace

TrainableSelector pretrain_selector(const ModelBundle& bundle) {
    return {Method::Pretrain, ids_with_prefix(bundle.params, "den."), -1};
}

TrainableSelector vae_selector(const ModelBundle& bundle) {
    return {Method::Pretrain, ids_with_prefix(bundle.params, "vae."), -1};
}

TrainableSelector ti_selector(const ModelBundle& bundle, int64_t placeholder_id) {
    BD_CHECK(bundle.params.count("text.tok_emb"), "ti_selector: no embedding table registered");
    BD_CHECK(placeholder_id >= 0 && placeholder_id < bundle.text.tok_emb.dim(0),
             "ti_selector: placeholder id {} outside embedding table", placeholder_id);
    return {Method::TextualInversion, {"text.tok_emb"}, placeholder_id};
}

TrainableSelector dreambooth_selector(const ModelBundle& bundle, bool include_text_encoder) {
    std::set<std::string> ids = ids_with_prefix(bundle.params, "den.");
    if (include_text_encoder) {
        auto text = ids_with_prefix(bundle.params, "text.");
        ids.insert(text.begin(), text.end());
    }
    return {Method::Dreambooth, std::move(ids), -1};
}

TrainableSelector lora_selector(const LoraArtifact& artifact) {
    std::set<std::string> ids;
    for (const auto& [name, t] : artifact.params()) ids.insert(name);
    return {Method::Lora, std::move(ids), -1};
}

TrainableSelector hypernet_selector(const HypernetArtifact& artifact) {
    std::set<std::string> ids;
    for (const auto& [name, t] : artifact.params()) ids.insert(name);
    return {Method::Hypernetwork, std::move(ids), -1};
}

Batch make_batch(const Corpus& corpus, const std::vector<size_t>& indices, const Vocab& vocab,
                 const CaptionFn& caption_fn, int l_max, DType dtype) {
    BD_CHECK(!indices.empty(), "make_batch: empty index list");
    int64_t b = static_cast<int64_t>(indices.size());
    const Tensor& first = corpus.pairs.at(indices[0]).image;
    int64_t h = first.dim(0), w = first.dim(1);
    Batch batch;
    batch.images = Tensor::zeros({b, h, w, 3}, dtype);
    for (int64_t i = 0; i < b; ++i) {
        const ImageTextPair& pair = corpus.pairs.at(indices[static_cast<size_t>(i)]);
        BD_CHECK(pair.image.dim(0) == h && pair.image.dim(1) == w,
                 "make_batch: image size mismatch in corpus");
        int64_t count = h * w * 3;
        if (dtype == DType::F32 && pair.image.dtype() == DType::F32) {
            std::memcpy(batch.images.data_f32() + i * count, pair.image.data_f32(),
                        static_cast<size_t>(count) * 4);
        } else {
            for (int64_t j = 0; j < count; ++j) batch.images.set(i * count + j, pair.image.at(j));
        }
        TokenizedPrompt tp = tokenize(vocab, caption_fn(pair), l_max);
        batch.token_ids.push_back(std::move(tp.ids));
        batch.lengths.push_back(tp.length);
    }
    return batch;
}

Tensor diffusion_loss(const Tensor& noise_pred, const Tensor& noise) {
    return mean_all(squared_error(noise_pred, noise));
}

namespace detail_ft {

// collected registry view: bundle parameters plus any adapter parameters
ParamMap all_params(const ModelBundle& bundle, const AdapterSet& adapters) {
    ParamMap all = bundle.params;
    for (const auto& [art, w] : adapters.loras) {
        for (auto& [name, t] : art->params()) all.emplace(name, t);
    }
    for (const auto& [art, w] : adapters.hypernets) {
        for (auto& [name, t] : art->params()) all.emplace(name, t);
    }
    return all;
}

void set_trainable(ParamMap& params, const std::set<std::string>& ids) {
    for (auto& [name, t] : params) t.set_requires_grad(ids.count(name) > 0);
}

void clear_trainable(ParamMap& params) {
    for (auto& [name, t] : params) t.set_requires_grad(false);
}

// Fig-5 forward: returns the scalar loss tensor with the graph attached.
Tensor fig5_loss(ModelBundle& bundle, const NoiseSchedule& sched, const Batch& batch,
                 RngStream& rng, const AdapterSet& adapters) {
    BD_CHECK(batch.images.rank() == 4, "train_step: batch images must be [B,H,W,3]");
    int64_t b = batch.images.dim(0);
    BD_CHECK(static_cast<int64_t>(batch.token_ids.size()) == b,
             "train_step: {} caption rows for batch of {}", batch.token_ids.size(), b);

    auto [mean_t, logvar_t] = encode_image(bundle.vae, batch.images);
    Tensor latents = sample_latent(mean_t, logvar_t, rng);
    latents = mul_scalar(latents, sched.latent_scale);

    Tensor noise = Tensor::randn(latents.shape(), rng, latents.dtype());
    std::vector<int> timesteps(static_cast<size_t>(b));
    for (auto& t : timesteps)
        t = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(sched.train_timesteps)));
    Tensor noisy = add_noise(sched, latents, noise, timesteps);

    Tensor ctx = encode_text(bundle.text, batch.token_ids, batch.lengths);
    std::vector<Tensor> temb_rows;
    temb_rows.reserve(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) {
        temb_rows.push_back(reshape(
            timestep_embedding(timesteps[static_cast<size_t>(i)], bundle.cfg.temb_dim,
                               bundle.cfg.dtype),
            {1, bundle.cfg.temb_dim}));
    }
    Tensor temb = temb_rows.size() == 1 ? temb_rows[0] : concat(temb_rows, 0);

    Tensor pred = predict_noise(bundle.den, noisy, temb, ctx, adapters);
    return diffusion_loss(pred, noise);
}

// shared post-backward path: selector filtering, TI row masking, Adam
double apply_gradients(ParamMap& all, const Tensor& loss, const TrainableSelector& sel,
                       AdamState& opt, const AdamConfig& acfg, GradientMap* out_grads) {
    GradientMap grads = backward(loss);
    GradientMap kept;
    for (auto& [name, g] : grads) {
        if (!sel.param_ids.count(name)) continue;
        if (sel.method == Method::TextualInversion && name == "text.tok_emb") {
            kept.emplace(name, mask_embedding_gradient(g, sel.keep_embedding_row));
        } else {
            kept.emplace(name, g);
        }
    }
    adam_step(all, kept, opt, acfg);
    double value = loss.at(0);
    if (out_grads) *out_grads = std::move(kept);
    return value;
}

}  // namespace detail_ft

double train_step(ModelBundle& bundle, const NoiseSchedule& sched, const Batch& batch,
                  const TrainableSelector& sel, AdamState& opt, const AdamConfig& acfg,
                  RngStream& rng, const AdapterSet& adapters, GradientMap* out_grads) {
    ParamMap all = detail_ft::all_params(bundle, adapters);
    for (const auto& id : sel.param_ids)
        BD_CHECK(all.count(id), "train_step: selector references unknown parameter '{}'", id);
    detail_ft::set_trainable(all, sel.param_ids);
    Tensor loss = detail_ft::fig5_loss(bundle, sched, batch, rng, adapters);
    double v = detail_ft::apply_gradients(all, loss, sel, opt, acfg, out_grads);
    detail_ft::clear_trainable(all);
    return v;
}

// ---------------- training loops ----------------

namespace {

struct Shuffler {
    std::vector<size_t> order;
    size_t pos = 0;
    RngStream stream;

    Shuffler(size_t n, RngStream s) : stream(s) {
        order.resize(n);
        for (size_t i = 0; i < n; ++i) order[i] = i;
        reshuffle();
    }
    void reshuffle() {
        for (size_t i = order.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(stream.uniform_int(i));
            std::swap(order[i - 1], order[j]);
        }
    }
    std::vector<size_t> take(size_t k) {
        std::vector<size_t> out;
        out.reserve(k);
        for (size_t i = 0; i < k; ++i) {
            if (pos == order.size()) {
                reshuffle();
                pos = 0;
            }
            out.push_back(order[pos++]);
        }
        return out;
    }
};

struct PriorSide {
    const Corpus* corpus = nullptr;
    CaptionFn caption_fn;
    double weight = 0.0;
};

// The single loop behind pretrain / finetune_full / db_train / ti_train /
// hn_train / lora_train. Stream layout is fixed so that runs that share the
// instance side consume randomness identically.
std::vector<double> run_training_loop(ModelBundle& bundle, const NoiseSchedule& sched,
                                      const Corpus& corpus, const Vocab& vocab,
                                      const CaptionFn& caption_fn, const TrainableSelector& sel,
                                      const TrainRunOptions& opts, RngStream& rng,
                                      const AdapterSet& adapters, const TrainHooks& hooks,
                                      const PriorSide* prior) {
    BD_CHECK(!corpus.empty(), "training: empty corpus");
    BD_CHECK(opts.steps >= 0, "training: negative step budget");
    BD_CHECK(bundle.vae_trained, "training: VAE must be pretrained first");
    size_t batch_size = std::min(static_cast<size_t>(opts.batch_size), corpus.size());

    ParamMap all = detail_ft::all_params(bundle, adapters);
    for (const auto& id : sel.param_ids)
        BD_CHECK(all.count(id), "training: selector references unknown parameter '{}'", id);

    RngStream shuffle_stream = rng.split(1);
    RngStream step_stream = rng.split(2);
    RngStream dropout_stream = rng.split(3);
    RngStream prior_shuffle_stream = rng.split(4);
    RngStream prior_step_stream = rng.split(5);

    Shuffler shuffler(corpus.size(), shuffle_stream);
    std::optional<Shuffler> prior_shuffler;
    bool use_prior = prior && prior->weight != 0.0;
    if (use_prior) {
        BD_CHECK(!prior->corpus->empty(), "training: empty prior corpus");
        prior_shuffler.emplace(prior->corpus->size(), prior_shuffle_stream);
    }

    detail_ft::set_trainable(all, sel.param_ids);
    AdamState opt;
    AdamConfig acfg = opts.adam();
    std::vector<double> losses;
    losses.reserve(static_cast<size_t>(opts.steps));

    for (int step = 1; step <= opts.steps; ++step) {
        std::vector<size_t> idx = shuffler.take(batch_size);
        Batch batch;
        if (opts.caption_dropout > 0.0) {
            std::vector<bool> drop(batch_size);
            for (size_t i = 0; i < batch_size; ++i)
                drop[i] = dropout_stream.uniform() < opts.caption_dropout;
            CaptionFn fn = caption_fn;
            size_t cursor = 0;
            // per-sample dropout replaces the caption with the empty prompt
            std::vector<std::string> captions(batch_size);
            for (size_t i = 0; i < batch_size; ++i)
                captions[i] = drop[i] ? std::string() : caption_fn(corpus.pairs[idx[i]]);
            batch = make_batch(
                corpus, idx, vocab,
                [&captions, &cursor](const ImageTextPair&) { return captions[cursor++]; },
                bundle.cfg.l_max, bundle.cfg.dtype);
        } else {
            batch = make_batch(corpus, idx, vocab, caption_fn, bundle.cfg.l_max,
                               bundle.cfg.dtype);
        }

        Tensor loss = detail_ft::fig5_loss(bundle, sched, batch, step_stream, adapters);
        if (use_prior) {
            std::vector<size_t> pidx = prior_shuffler->take(batch_size);
            Batch pbatch = make_batch(*prior->corpus, pidx, vocab, prior->caption_fn,
                                      bundle.cfg.l_max, bundle.cfg.dtype);
            Tensor ploss =
                detail_ft::fig5_loss(bundle, sched, pbatch, prior_step_stream, adapters);
            loss = add(loss, mul_scalar(ploss, prior->weight));
        }
        BD_CHECK(std::isfinite(loss.at(0)), "training: non-finite loss at step {}", step);

        GradientMap grads;
        double v = detail_ft::apply_gradients(all, loss, sel, opt, acfg,
                                              hooks.on_step ? &grads : nullptr);
        losses.push_back(v);
        if (hooks.on_step) hooks.on_step(step, v, grads);
    }
    detail_ft::clear_trainable(all);
    return losses;
}

std::string raw_caption(const ImageTextPair& pair) { return join_tags(pair.tags); }

}  // namespace

std::vector<double> pretrain(ModelBundle& bundle, const NoiseSchedule& sched, const Corpus& corpus,
                             const Vocab& vocab, const TrainRunOptions& opts, RngStream& rng,
                             const TrainHooks& hooks) {
    std::vector<double> losses =
        run_training_loop(bundle, sched, corpus, vocab, raw_caption, pretrain_selector(bundle),
                          opts, rng, {}, hooks, nullptr);
    if (opts.steps > 0) bundle.base_trained = true;
    return losses;
}

std::vector<double> finetune_full(ModelBundle& bundle, const NoiseSchedule& sched,
                                  const Corpus& corpus, const Vocab& vocab, CaptionFn caption_fn,
                                  const TrainRunOptions& opts, RngStream& rng,
                                  const TrainHooks& hooks) {
    TrainRunOptions o = opts;
    o.caption_dropout = 0.0;
    return run_training_loop(bundle, sched, corpus, vocab, caption_fn,
                             dreambooth_selector(bundle), o, rng, {}, hooks, nullptr);
}

TiArtifact ti_extend_vocab(ModelBundle& bundle, Vocab& vocab, const std::string& placeholder,
                           const std::string& init_word) {
    BD_CHECK(!vocab.contains(placeholder), "ti_extend_vocab: placeholder '{}' already in vocabulary",
             placeholder);
    BD_CHECK(init_word.find(' ') == std::string::npos &&
                 init_word.find(',') == std::string::npos,
             "ti_extend_vocab: init word '{}' is not a single token", init_word);
    BD_CHECK(vocab.contains(init_word), "ti_extend_vocab: init word '{}' not in vocabulary",
             init_word);
    int init_id = vocab.id_of(init_word);
    int new_id = vocab.add_placeholder(placeholder);

    NoGradGuard ng;
    Tensor old = bundle.text.tok_emb;
    int64_t v = old.dim(0), d = old.dim(1);
    BD_CHECK(new_id == v, "ti_extend_vocab: vocabulary ({}) and embedding table ({}) out of sync",
             new_id, v);
    Tensor grown = Tensor::zeros({v + 1, d}, old.dtype());
    for (int64_t i = 0; i < v * d; ++i) grown.set(i, old.at(i));
    for (int64_t j = 0; j < d; ++j) grown.set(v * d + j, old.at(init_id * d + j));
    grown.set_name("text.tok_emb");
    bundle.text.tok_emb = grown;
    bundle.params["text.tok_emb"] = grown;
    bundle.cfg.vocab_size = static_cast<int>(v + 1);

    TiArtifact art;
    art.placeholder = placeholder;
    art.token_id = new_id;
    art.vectors = Tensor::zeros({1, d}, old.dtype());
    for (int64_t j = 0; j < d; ++j) art.vectors.set(j, grown.at(v * d + j));
    return art;
}

TiResult ti_train(ModelBundle& bundle, Vocab& vocab, const NoiseSchedule& sched,
                  const Corpus& corpus, const std::string& placeholder,
                  const TrainRunOptions& opts, RngStream& rng, const TrainHooks& hooks) {
    BD_CHECK(vocab.contains(placeholder), "ti_train: placeholder '{}' absent from vocabulary",
             placeholder);
    int id = vocab.id_of(placeholder);
    BD_CHECK(id >= vocab.base_size, "ti_train: '{}' is a base token, not a placeholder",
             placeholder);
    std::string caption = "a photo of a " + placeholder;
    TrainableSelector sel = ti_selector(bundle, id);
    std::vector<double> losses = run_training_loop(
        bundle, sched, corpus, vocab, [caption](const ImageTextPair&) { return caption; }, sel,
        opts, rng, {}, hooks, nullptr);

    TiArtifact art;
    art.placeholder = placeholder;
    art.token_id = id;
    int64_t d = bundle.text.tok_emb.dim(1);
    art.vectors = Tensor::zeros({1, d}, bundle.text.tok_emb.dtype());
    for (int64_t j = 0; j < d; ++j) art.vectors.set(j, bundle.text.tok_emb.at(id * d + j));
    return {std::move(art), std::move(losses)};
}

Corpus db_generate_class_images(const ModelBundle& bundle, const Vocab& vocab,
                                const std::string& class_prompt, int count,
                                const SamplerConfig& scfg, const NoiseSchedule& sched,
                                RngStream& rng) {
    BD_CHECK(bundle.base_trained, "db_generate_class_images: bundle is not pretrained");
    BD_CHECK(count >= 1, "db_generate_class_images: count must be >= 1, got {}", count);
    NoGradGuard ng;
    TokenizedPrompt cond = tokenize(vocab, class_prompt, bundle.cfg.l_max);
    TokenizedPrompt uncond = tokenize(vocab, "", bundle.cfg.l_max);
    Tensor ctx = encode_text(bundle.text, cond.ids, cond.length);
    Tensor uctx = encode_text(bundle.text, uncond.ids, uncond.length);

    Corpus corpus;
    std::vector<std::string> tags = split_tags(class_prompt);
    for (int i = 0; i < count; ++i) {
        RngStream img_rng = rng.split(static_cast<uint64_t>(i) + 1);
        Tensor latent = sample(bundle, ctx, uctx, sched, scfg, img_rng);
        latent = mul_scalar(latent, 1.0 / sched.latent_scale);
        Tensor img = decode_latent(bundle.vae, latent);
        corpus.pairs.push_back({img, tags, fmt::format("class_{:04d}", i)});
    }
    return corpus;
}

std::vector<double> db_train(ModelBundle& bundle, Vocab& vocab, const NoiseSchedule& sched,
                             const Corpus& instance_corpus, const DreamboothRun& run,
                             const TrainRunOptions& opts, RngStream& rng,
                             const TrainHooks& hooks) {
    BD_CHECK(run.instance_token.find(' ') == std::string::npos,
             "db_train: instance token '{}' is not a single token", run.instance_token);
    BD_CHECK(vocab.contains(run.instance_token), "db_train: instance token '{}' not in vocabulary",
             run.instance_token);
    BD_CHECK(vocab.contains(run.class_token), "db_train: class token '{}' not in vocabulary",
             run.class_token);
    BD_CHECK(run.instance_token != run.class_token,
             "db_train: instance and class token must differ");

    std::string instance_caption = fmt::format("a {} {}", run.instance_token, run.class_token);
    std::string class_caption = fmt::format("a {}", run.class_token);
    PriorSide prior;
    prior.corpus = &run.class_images;
    prior.caption_fn = [class_caption](const ImageTextPair&) { return class_caption; };
    prior.weight = run.prior_weight;

    TrainableSelector sel = dreambooth_selector(bundle, run.train_text_encoder);
    return run_training_loop(
        bundle, sched, instance_corpus, vocab,
        [instance_caption](const ImageTextPair&) { return instance_caption; }, sel, opts, rng, {},
        hooks, &prior);
}

// ---------------- hypernetwork ----------------

HypernetArtifact hn_build(const ModelBundle& bundle, const std::vector<int>& multipliers,
                          const std::string& activation, const std::string& init, RngStream& rng,
                          const std::string& name) {
    BD_CHECK(multipliers.size() >= 2, "hn_build: need at least two layer multipliers");
    BD_CHECK(multipliers.front() == 1, "hn_build: multipliers must start with 1 (input width d_txt)");
    BD_CHECK(multipliers.back() == 1,
             "hn_build: multipliers must end with 1 (output width must equal d_txt)");
    for (int m : multipliers) BD_CHECK(m >= 1, "hn_build: non-positive multiplier {}", m);
    std::string act = activation == "identity" ? "linear" : activation;
    BD_CHECK(act == "linear" || act == "relu" || act == "silu",
             "hn_build: unknown activation '{}' (expected linear|relu|silu)", activation);
    BD_CHECK(init == "normal" || init == "zero-final",
             "hn_build: unknown init '{}' (expected normal|zero-final)", init);

    HypernetArtifact art;
    art.name = name;
    art.multipliers = multipliers;
    art.activation = act;
    art.residual = true;
    int dt = bundle.cfg.d_txt;
    DType dtype = bundle.cfg.dtype;
    std::vector<int> widths = art.layer_widths(dt);

    auto build_mlp = [&](RngStream& r) {
        HypernetMlp mlp;
        for (size_t i = 0; i + 1 < widths.size(); ++i) {
            bool final_layer = i + 2 == widths.size();
            bool zero = init == "zero-final" && final_layer;
            Tensor w = zero ? Tensor::zeros({widths[i], widths[i + 1]}, dtype)
                            : Tensor::randn({widths[i], widths[i + 1]}, r, dtype, 0.01);
            mlp.weights.push_back(w);
            mlp.biases.push_back(Tensor::zeros({widths[i + 1]}, dtype));
        }
        return mlp;
    };

    uint64_t tag = 1;
    for (const auto* site : bundle.den.sites()) {
        RngStream rk = rng.split(tag++);
        RngStream rv = rng.split(tag++);
        HypernetSiteEntry entry;
        entry.key_mlp = build_mlp(rk);
        entry.value_mlp = build_mlp(rv);
        art.sites.emplace(site->id, std::move(entry));
    }
    return art;
}

namespace {

void check_adapter_sites(const std::map<std::string, HypernetSiteEntry>& sites,
                         const ModelBundle& bundle, const std::string& what) {
    auto ids = bundle.den.site_ids();
    BD_CHECK(sites.size() == ids.size(), "{}: artifact has {} sites, bundle has {}", what,
             sites.size(), ids.size());
    for (const auto& id : ids)
        BD_CHECK(sites.count(id), "{}: artifact missing site '{}'", what, id);
}

}  // namespace

std::vector<double> hn_train(ModelBundle& bundle, const NoiseSchedule& sched, const Corpus& corpus,
                             const Vocab& vocab, HypernetArtifact& artifact,
                             const TrainRunOptions& opts, RngStream& rng,
                             const TrainHooks& hooks) {
    check_adapter_sites(artifact.sites, bundle, "hn_train");
    AdapterSet adapters;
    adapters.hypernets.emplace_back(&artifact, 1.0);
    std::string tmpl = opts.prompt_template;
    std::string name = artifact.name;
    CaptionFn caption_fn = [tmpl, name](const ImageTextPair& pair) {
        return template_prompt(tmpl, pair, name);
    };
    return run_training_loop(bundle, sched, corpus, vocab, caption_fn,
                             hypernet_selector(artifact), opts, rng, adapters, hooks, nullptr);
}

// ---------------- lora ----------------

LoraArtifact lora_attach(const ModelBundle& bundle, int rank, double alpha, RngStream& rng,
                         const std::string& name) {
    BD_CHECK(rank >= 1, "lora_attach: rank must be >= 1, got {}", rank);
    LoraArtifact art;
    art.name = name;
    art.rank = rank;
    art.alpha = alpha > 0 ? alpha : static_cast<double>(rank);
    DType dt = bundle.cfg.dtype;
    uint64_t tag = 1;
    for (const auto* site : bundle.den.sites()) {
        auto make_entry = [&](const Tensor& w) {
            int64_t din = w.dim(0), dout = w.dim(1);
            BD_CHECK(rank <= std::min(din, dout),
                     "lora_attach: rank {} exceeds min(d_in,d_out)={} at site '{}'", rank,
                     std::min(din, dout), site->id);
            RngStream r = rng.split(tag++);
            LoraEntry e;
            e.a = Tensor::randn({din, rank}, r, dt, 0.01);
            e.b = Tensor::zeros({rank, dout}, dt);
            return e;
        };
        LoraSiteEntry entry;
        entry.q = make_entry(site->wq);
        entry.k = make_entry(site->wk);
        entry.v = make_entry(site->wv);
        entry.o = make_entry(site->wo);
        art.sites.emplace(site->id, std::move(entry));
    }
    return art;
}

std::vector<double> lora_train(ModelBundle& bundle, const NoiseSchedule& sched,
                               const Corpus& corpus, const Vocab& vocab, LoraArtifact& artifact,
                               const TrainRunOptions& opts, RngStream& rng,
                               const TrainHooks& hooks) {
    auto ids = bundle.den.site_ids();
    BD_CHECK(artifact.sites.size() == ids.size(), "lora_train: artifact has {} sites, bundle has {}",
             artifact.sites.size(), ids.size());
    for (const auto& id : ids)
        BD_CHECK(artifact.sites.count(id), "lora_train: artifact missing site '{}'", id);
    AdapterSet adapters;
    adapters.loras.emplace_back(&artifact, 1.0);
    return run_training_loop(bundle, sched, corpus, vocab, raw_caption, lora_selector(artifact),
                             opts, rng, adapters, hooks, nullptr);
}

Tensor lora_merge(const Tensor& w, const LoraEntry& entry, double alpha, int rank) {
    BD_CHECK(rank >= 1, "lora_merge: bad rank {}", rank);
    BD_CHECK(entry.a.dim(0) == w.dim(0) && entry.b.dim(1) == w.dim(1) &&
                 entry.a.dim(1) == rank && entry.b.dim(0) == rank,
             "lora_merge: shapes A{} B{} incompatible with W{}", shape_str(entry.a.shape()),
             shape_str(entry.b.shape()), shape_str(w.shape()));
    NoGradGuard ng;
    return add(w, mul_scalar(matmul(entry.a, entry.b), alpha / rank));
}

void merge_lora(ModelBundle& bundle, const LoraArtifact& artifact, double weight) {
    NoGradGuard ng;
    auto merge_into = [&](Tensor& w, const LoraEntry& e) {
        Tensor merged = lora_merge(w, e, weight * artifact.alpha, artifact.rank);
        merged.set_name(w.name());
        bundle.params[w.name()] = merged;
        w = merged;
    };
    auto site_of = [&](const std::string& id) -> AttnBlock& {
        if (id == "down0") return bundle.den.down0_attn;
        if (id == "down1") return bundle.den.down1_attn;
        if (id == "mid") return bundle.den.mid_attn;
        if (id == "up0") return bundle.den.up0_attn;
        if (id == "up1") return bundle.den.up1_attn;
        fail("merge_lora: unknown site '{}'", id);
    };
    for (const auto& [id, entry] : artifact.sites) {
        AttnBlock& blk = site_of(id);
        merge_into(blk.site.wq, entry.q);
        merge_into(blk.site.wk, entry.k);
        merge_into(blk.site.wv, entry.v);
        merge_into(blk.site.wo, entry.o);
    }
}

std::map<std::string, uint64_t> param_fingerprints(const ParamMap& params) {
    std::map<std::string, uint64_t> out;
    for (const auto& [name, t] : params) out.emplace(name, tensor_fingerprint(t));
    return out;
}

// ---------------- VAE pretraining ----------------

std::vector<double> pretrain_vae(ModelBundle& bundle, const Corpus& corpus,
                                 const TrainRunOptions& opts, RngStream& rng,
                                 const TrainHooks& hooks) {
    BD_CHECK(!corpus.empty(), "pretrain_vae: empty corpus");
    size_t batch_size = std::min(static_cast<size_t>(opts.batch_size), corpus.size());
    TrainableSelector sel = vae_selector(bundle);
    ParamMap all = bundle.params;
    detail_ft::set_trainable(all, sel.param_ids);

    RngStream shuffle_stream = rng.split(1);
    RngStream step_stream = rng.split(2);
    Shuffler shuffler(corpus.size(), shuffle_stream);

    AdamState opt;
    AdamConfig acfg = opts.adam();
    std::vector<double> losses;
    Vocab dummy;  // captions unused for the VAE objective
    dummy.tokens = {"<pad>", "<begin>", "<end>"};
    for (size_t i = 0; i < dummy.tokens.size(); ++i)
        dummy.ids.emplace(dummy.tokens[i], static_cast<int>(i));
    dummy.base_size = 3;

    for (int step = 1; step <= opts.steps; ++step) {
        std::vector<size_t> idx = shuffler.take(batch_size);
        Batch batch = make_batch(
            corpus, idx, dummy, [](const ImageTextPair&) { return std::string(); },
            bundle.cfg.l_max, bundle.cfg.dtype);

        auto [mean_t, logvar_t] = encode_image(bundle.vae, batch.images);
        Tensor latent = sample_latent(mean_t, logvar_t, step_stream);
        Tensor recon = decode_latent(bundle.vae, latent);
        Tensor rec_loss = mean_all(squared_error(recon, batch.images));
        // KL(q || N(0,1)) = -0.5 * mean(1 + logvar - mean^2 - exp(logvar))
        Tensor kl = mean_all(sub(sub(add_scalar(logvar_t, 1.0), mul(mean_t, mean_t)),
                                 exp(logvar_t)));
        kl = mul_scalar(kl, -0.5);
        Tensor loss = add(rec_loss, mul_scalar(kl, opts.kl_weight));
        BD_CHECK(std::isfinite(loss.at(0)), "pretrain_vae: non-finite loss at step {}", step);

        GradientMap grads;
        double v = detail_ft::apply_gradients(all, loss, sel, opt, acfg,
                                              hooks.on_step ? &grads : nullptr);
        losses.push_back(v);
        if (hooks.on_step) hooks.on_step(step, v, grads);
    }
    detail_ft::clear_trainable(all);
    if (opts.steps > 0) bundle.vae_trained = true;
    return losses;
}

}  // namespace bridgediff
