#include "bridgediff/finetune.hpp"
#include "bridgediff/prompt.hpp"

#include <atomic>
#include <cstring>
#include <thread>

namespace bridgediff {

namespace {

// Extends the vocabulary/embedding table with a learned placeholder row.
// Idempotent when the same artifact is already applied.
void apply_ti(ModelBundle& bundle, Vocab& vocab, const TiArtifact& art) {
    BD_CHECK(art.vectors.defined() && art.vectors.rank() == 2,
             "apply_ti: artifact '{}' has no vectors", art.placeholder);
    int64_t d = bundle.text.tok_emb.dim(1);
    BD_CHECK(art.vectors.dim(1) == d, "apply_ti: artifact width {} vs text encoder d_txt {}",
             art.vectors.dim(1), d);
    if (vocab.contains(art.placeholder)) {
        int id = vocab.id_of(art.placeholder);
        BD_CHECK(id >= vocab.base_size, "apply_ti: '{}' collides with a base token",
                 art.placeholder);
        for (int64_t j = 0; j < d; ++j)
            bundle.text.tok_emb.set(id * d + j, art.vectors.at(j));
        return;
    }
    int id = vocab.add_placeholder(art.placeholder);
    NoGradGuard ng;
    Tensor old = bundle.text.tok_emb;
    int64_t v = old.dim(0);
    BD_CHECK(id == v, "apply_ti: vocabulary and embedding table out of sync");
    Tensor grown = Tensor::zeros({v + 1, d}, old.dtype());
    for (int64_t i = 0; i < v * d; ++i) grown.set(i, old.at(i));
    for (int64_t j = 0; j < d; ++j) grown.set(v * d + j, art.vectors.at(j));
    grown.set_name("text.tok_emb");
    bundle.text.tok_emb = grown;
    bundle.params["text.tok_emb"] = grown;
    bundle.cfg.vocab_size = static_cast<int>(v + 1);
}

std::string available_names(const AdapterRegistry& reg) {
    std::string out;
    for (const auto& [name, a] : reg.loras) out += fmt::format(" lora:{}", name);
    for (const auto& [name, a] : reg.hypernets) out += fmt::format(" hypernet:{}", name);
    return out.empty() ? " (none)" : out;
}

}  // namespace

std::vector<Tensor> generate(ModelBundle& bundle, Vocab& vocab, const std::string& prompt,
                             const AdapterRegistry& registry, const SamplerConfig& scfg,
                             const NoiseSchedule& sched, RngStream& rng, int count) {
    BD_CHECK(count >= 1, "generate: count must be >= 1, got {}", count);
    for (const auto& ti : registry.embeddings) apply_ti(bundle, vocab, ti);

    ParsedPrompt parsed = parse_prompt(prompt);
    AdapterSet adapters;
    for (const auto& d : parsed.directives) {
        if (d.kind == PromptDirective::Kind::Lora) {
            auto it = registry.loras.find(d.name);
            BD_CHECK(it != registry.loras.end(),
                     "generate: unknown lora '{}'; available adapters:{}", d.name,
                     available_names(registry));
            adapters.loras.emplace_back(&it->second, d.weight);
        } else {
            auto it = registry.hypernets.find(d.name);
            BD_CHECK(it != registry.hypernets.end(),
                     "generate: unknown hypernetwork '{}'; available adapters:{}", d.name,
                     available_names(registry));
            adapters.hypernets.emplace_back(&it->second, d.weight);
        }
    }

    NoGradGuard ng;
    TokenizedPrompt cond = tokenize(vocab, parsed.text, bundle.cfg.l_max);
    TokenizedPrompt uncond = tokenize(vocab, "", bundle.cfg.l_max);
    Tensor ctx = encode_text(bundle.text, cond.ids, cond.length);
    Tensor uctx = encode_text(bundle.text, uncond.ids, uncond.length);

    std::vector<Tensor> images(static_cast<size_t>(count));
    auto render_one = [&](int i) {
        NoGradGuard guard;
        RngStream img_rng = rng.split(static_cast<uint64_t>(i) + 1);
        Tensor latent = sample(bundle, ctx, uctx, sched, scfg, img_rng, adapters);
        latent = mul_scalar(latent, 1.0 / sched.latent_scale);
        images[static_cast<size_t>(i)] = decode_latent(bundle.vae, latent);
    };

    unsigned workers = std::min<unsigned>(std::thread::hardware_concurrency(),
                                          static_cast<unsigned>(count));
    if (workers <= 1 || count == 1) {
        for (int i = 0; i < count; ++i) render_one(i);
    } else {
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        for (unsigned w = 0; w < workers; ++w) {
            pool.emplace_back([&]() {
                int i;
                while ((i = next.fetch_add(1)) < count) render_one(i);
            });
        }
        for (auto& t : pool) t.join();
    }
    return images;
}

}  // namespace bridgediff
