#include "bridgediff/config.hpp"

#include "bridgediff/data.hpp"

#include <json.hpp>

#include <fstream>
#include <functional>

namespace bridgediff {

namespace {

struct Field {
    const char* name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

int to_int(const std::string& v, const char* key) {
    try {
        size_t used = 0;
        int r = std::stoi(v, &used);
        BD_CHECK(used == v.size(), "config: bad integer '{}' for key '{}'", v, key);
        return r;
    } catch (const Error&) {
        throw;
    } catch (const std::exception&) {
        fail("config: bad integer '{}' for key '{}'", v, key);
    }
}

double to_double(const std::string& v, const char* key) {
    try {
        size_t used = 0;
        double r = std::stod(v, &used);
        BD_CHECK(used == v.size(), "config: bad number '{}' for key '{}'", v, key);
        return r;
    } catch (const Error&) {
        throw;
    } catch (const std::exception&) {
        fail("config: bad number '{}' for key '{}'", v, key);
    }
}

bool to_bool(const std::string& v, const char* key) {
    if (v == "1" || v == "true" || v == "on") return true;
    if (v == "0" || v == "false" || v == "off") return false;
    fail("config: bad boolean '{}' for key '{}'", v, key);
}

#define INT_FIELD(f)                                                        \
    Field{#f, [](const RunConfig& c) { return std::to_string(c.f); },       \
          [](RunConfig& c, const std::string& v) { c.f = to_int(v, #f); }}
#define DBL_FIELD(f)                                                        \
    Field{#f, [](const RunConfig& c) { return fmt::format("{}", c.f); },    \
          [](RunConfig& c, const std::string& v) { c.f = to_double(v, #f); }}
#define STR_FIELD(f)                                                        \
    Field{#f, [](const RunConfig& c) { return c.f; },                       \
          [](RunConfig& c, const std::string& v) { c.f = v; }}
#define BOOL_FIELD(f)                                                       \
    Field{#f, [](const RunConfig& c) { return std::string(c.f ? "1" : "0"); }, \
          [](RunConfig& c, const std::string& v) { c.f = to_bool(v, #f); }}

const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        INT_FIELD(resolution),
        INT_FIELD(latent_channels),
        INT_FIELD(vae_channels),
        INT_FIELD(d_model),
        INT_FIELD(d_txt),
        INT_FIELD(n_heads),
        INT_FIELD(l_max),
        INT_FIELD(text_blocks),
        INT_FIELD(temb_dim),
        INT_FIELD(temb_hidden),
        INT_FIELD(gn_groups),
        INT_FIELD(train_timesteps),
        DBL_FIELD(beta_start),
        DBL_FIELD(beta_end),
        STR_FIELD(sampler),
        INT_FIELD(sample_steps),
        DBL_FIELD(guidance),
        INT_FIELD(batch_size),
        Field{"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
              [](RunConfig& c, const std::string& v) {
                  try {
                      c.seed = std::stoull(v);
                  } catch (const std::exception&) {
                      fail("config: bad integer '{}' for key 'seed'", v);
                  }
              }},
        INT_FIELD(vae_steps),
        DBL_FIELD(vae_lr),
        DBL_FIELD(kl_weight),
        INT_FIELD(pretrain_steps),
        DBL_FIELD(pretrain_lr),
        DBL_FIELD(caption_dropout),
        INT_FIELD(ti_steps),
        DBL_FIELD(ti_lr),
        STR_FIELD(ti_placeholder),
        STR_FIELD(ti_init_word),
        INT_FIELD(db_steps),
        DBL_FIELD(db_lr),
        DBL_FIELD(db_prior_weight),
        STR_FIELD(db_instance_token),
        STR_FIELD(db_class_token),
        INT_FIELD(db_class_per_instance),
        BOOL_FIELD(db_train_text_encoder),
        INT_FIELD(hn_steps),
        DBL_FIELD(hn_lr),
        STR_FIELD(hn_multipliers),
        STR_FIELD(hn_activation),
        STR_FIELD(hn_init),
        STR_FIELD(hn_template),
        INT_FIELD(lora_steps),
        DBL_FIELD(lora_lr),
        INT_FIELD(lora_rank),
        DBL_FIELD(lora_alpha),
    };
    return f;
}

#undef INT_FIELD
#undef DBL_FIELD
#undef STR_FIELD
#undef BOOL_FIELD

}  // namespace

NetConfig RunConfig::net_config(int vocab_size) const {
    NetConfig n;
    n.resolution = resolution;
    n.latent_channels = latent_channels;
    n.vae_channels = vae_channels;
    n.d_model = d_model;
    n.d_txt = d_txt;
    n.n_heads = n_heads;
    n.l_max = l_max;
    n.text_blocks = text_blocks;
    n.temb_dim = temb_dim;
    n.temb_hidden = temb_hidden;
    n.gn_groups = gn_groups;
    n.vocab_size = vocab_size;
    n.dtype = DType::F32;
    return n;
}

SamplerConfig RunConfig::sampler_config() const {
    SamplerConfig s;
    if (sampler == "ddim") {
        s.kind = SamplerKind::DeterministicSkip;
    } else if (sampler == "ancestral") {
        s.kind = SamplerKind::Ancestral;
    } else {
        fail("config: unknown sampler '{}' (expected ddim|ancestral)", sampler);
    }
    s.steps = sample_steps;
    s.guidance = guidance;
    return s;
}

std::vector<int> RunConfig::hn_multiplier_list() const {
    std::vector<int> out;
    for (const auto& tag : split_tags(hn_multipliers)) out.push_back(to_int(tag, "hn_multipliers"));
    return out;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    for (const auto& f : fields()) {
        if (key == f.name) {
            f.set(*this, value);
            return;
        }
    }
    fail("config: unknown key '{}'", key);
}

std::map<std::string, std::string> RunConfig::to_map() const {
    std::map<std::string, std::string> out;
    for (const auto& f : fields()) out.emplace(f.name, f.get(*this));
    return out;
}

RunConfig load_config_file(const std::filesystem::path& path, RunConfig base) {
    std::ifstream in(path);
    BD_CHECK(in.good(), "config: cannot open '{}'", path.string());
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        size_t a = line.find_first_not_of(" \t\r");
        if (a == std::string::npos) continue;
        size_t eq = line.find('=');
        BD_CHECK(eq != std::string::npos, "config: '{}' line {}: expected key = value",
                 path.string(), lineno);
        auto trim = [](std::string s) {
            size_t x = s.find_first_not_of(" \t\r");
            if (x == std::string::npos) return std::string();
            size_t y = s.find_last_not_of(" \t\r");
            return s.substr(x, y - x + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        BD_CHECK(!key.empty(), "config: '{}' line {}: empty key", path.string(), lineno);
        base.set(key, value);
    }
    return base;
}

void write_run_manifest(const std::filesystem::path& path, const std::string& command,
                        const RunConfig& cfg, const std::map<std::string, std::string>& extra) {
    nlohmann::json j;
    j["command"] = command;
    j["config"] = cfg.to_map();
    for (const auto& [k, v] : extra) j[k] = v;
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        BD_CHECK(out.good(), "cannot write manifest '{}'", path.string());
        out << j.dump(2) << "\n";
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace bridgediff
