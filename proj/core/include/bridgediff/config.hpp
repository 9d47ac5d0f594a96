#pragma once

#include "bridgediff/common.hpp"
#include "bridgediff/networks.hpp"
#include "bridgediff/scheduler.hpp"

#include <filesystem>
#include <map>
#include <string>

namespace bridgediff {

// Resolved run configuration. Every field has a documented default; unknown
// keys in a config file or override are rejected.
struct RunConfig {
    // model dimensions
    int resolution = 32;
    int latent_channels = 4;
    int vae_channels = 32;
    int d_model = 64;
    int d_txt = 64;
    int n_heads = 2;
    int l_max = 16;
    int text_blocks = 2;
    int temb_dim = 64;
    int temb_hidden = 128;
    int gn_groups = 8;

    // schedule
    int train_timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    // sampling
    std::string sampler = "ddim";  // ddim | ancestral
    int sample_steps = 50;
    double guidance = 7.5;

    // shared training knobs
    int batch_size = 8;
    uint64_t seed = 0;

    // base pretraining
    int vae_steps = 1500;
    double vae_lr = 2e-3;
    double kl_weight = 1e-4;
    int pretrain_steps = 2000;
    double pretrain_lr = 1e-3;
    double caption_dropout = 0.1;

    // textual inversion
    int ti_steps = 500;
    double ti_lr = 5e-3;
    std::string ti_placeholder = "<the core bridge>";
    std::string ti_init_word = "bridge";

    // dreambooth
    int db_steps = 400;
    double db_lr = 1e-5;
    double db_prior_weight = 1.0;
    std::string db_instance_token = "beike";
    std::string db_class_token = "bridge";
    int db_class_per_instance = 5;
    bool db_train_text_encoder = false;

    // hypernetwork
    int hn_steps = 300;
    double hn_lr = 5e-4;
    std::string hn_multipliers = "1,2,1";
    std::string hn_activation = "linear";
    std::string hn_init = "normal";
    std::string hn_template = "a picture of [filewords], art by [name]";

    // lora
    int lora_steps = 300;
    double lora_lr = 1e-4;
    int lora_rank = 4;
    double lora_alpha = 0;  // 0 means "equal to lora_rank"

    NetConfig net_config(int vocab_size) const;
    SamplerConfig sampler_config() const;
    std::vector<int> hn_multiplier_list() const;
    double resolved_lora_alpha() const { return lora_alpha > 0 ? lora_alpha : lora_rank; }

    void set(const std::string& key, const std::string& value);  // unknown key -> error
    std::map<std::string, std::string> to_map() const;           // every field, resolved
};

// key = value lines, '#' comments, blank lines ignored
RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {});

// resolved-config manifest written into each run directory
void write_run_manifest(const std::filesystem::path& path, const std::string& command,
                        const RunConfig& cfg,
                        const std::map<std::string, std::string>& extra = {});

}  // namespace bridgediff
