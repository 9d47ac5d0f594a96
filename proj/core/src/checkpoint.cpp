#include "bridgediff/checkpoint.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

namespace bridgediff {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kMagic = "bridgediff-checkpoint v1";

[[noreturn]] void ckpt_fail(CheckpointErrorKind kind, const std::string& msg) {
    throw CheckpointError(kind, msg);
}

const void* raw_data(const Tensor& t) {
    return t.dtype() == DType::F32 ? static_cast<const void*>(t.data_f32())
                                   : static_cast<const void*>(t.data_f64());
}

void* raw_data(Tensor& t) {
    return t.dtype() == DType::F32 ? static_cast<void*>(t.data_f32())
                                   : static_cast<void*>(t.data_f64());
}

}  // namespace

void save_checkpoint(const fs::path& path, const ParamMap& tensors,
                     const std::map<std::string, std::string>& metadata) {
    BD_CHECK(!tensors.empty(), "save_checkpoint: no tensors to write");
    json manifest = json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        BD_CHECK(t.defined(), "save_checkpoint: undefined tensor '{}'", name);
        uint64_t nbytes = static_cast<uint64_t>(t.numel()) * dtype_size(t.dtype());
        json entry;
        entry["name"] = name;
        entry["dtype"] = dtype_name(t.dtype());
        entry["shape"] = t.shape();
        entry["offset"] = offset;
        entry["nbytes"] = nbytes;
        manifest.push_back(entry);
        offset += nbytes;
    }
    json header;
    header["version"] = 1;
    header["metadata"] = metadata;
    header["tensors"] = manifest;
    std::string hdr = header.dump();

    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        BD_CHECK(out.good(), "save_checkpoint: cannot open '{}' for writing", tmp.string());
        out << kMagic << " " << hdr.size() << "\n" << hdr << "\n";
        for (const auto& [name, t] : tensors) {
            out.write(static_cast<const char*>(raw_data(t)),
                      static_cast<std::streamsize>(t.numel() * dtype_size(t.dtype())));
        }
        BD_CHECK(out.good(), "save_checkpoint: write to '{}' failed", tmp.string());
    }
    fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) ckpt_fail(CheckpointErrorKind::CorruptHeader,
                              fmt::format("cannot open checkpoint '{}'", path.string()));
    std::string magic_line;
    std::getline(in, magic_line);
    size_t sp = magic_line.rfind(' ');
    if (sp == std::string::npos || magic_line.substr(0, sp) != kMagic)
        ckpt_fail(CheckpointErrorKind::CorruptHeader,
                  fmt::format("'{}' is not a bridgediff checkpoint", path.string()));
    uint64_t hdr_len = 0;
    try {
        hdr_len = std::stoull(magic_line.substr(sp + 1));
    } catch (const std::exception&) {
        ckpt_fail(CheckpointErrorKind::CorruptHeader, "bad header length field");
    }
    std::string hdr(hdr_len, '\0');
    in.read(hdr.data(), static_cast<std::streamsize>(hdr_len));
    char nl = 0;
    in.get(nl);
    if (!in.good() || nl != '\n')
        ckpt_fail(CheckpointErrorKind::CorruptHeader, "header shorter than declared");
    json header = json::parse(hdr, nullptr, false);
    if (header.is_discarded() || !header.contains("version") || !header.contains("tensors"))
        ckpt_fail(CheckpointErrorKind::CorruptHeader, "header is not valid JSON");
    if (header["version"].get<int>() != 1)
        ckpt_fail(CheckpointErrorKind::CorruptHeader,
                  fmt::format("unsupported format version {}", header["version"].dump()));

    std::streampos payload_start = in.tellg();
    in.seekg(0, std::ios::end);
    uint64_t payload_len = static_cast<uint64_t>(in.tellg() - payload_start);

    Checkpoint ck;
    if (header.contains("metadata")) {
        for (auto& [k, v] : header["metadata"].items())
            ck.metadata.emplace(k, v.get<std::string>());
    }

    uint64_t expected_offset = 0;
    struct Entry {
        std::string name;
        DType dtype;
        Shape shape;
        uint64_t offset, nbytes;
    };
    std::vector<Entry> entries;
    for (const auto& e : header["tensors"]) {
        Entry ent;
        ent.name = e.at("name").get<std::string>();
        std::string dt = e.at("dtype").get<std::string>();
        if (dt == "f32") {
            ent.dtype = DType::F32;
        } else if (dt == "f64") {
            ent.dtype = DType::F64;
        } else {
            ckpt_fail(CheckpointErrorKind::BadManifest,
                      fmt::format("unknown dtype '{}' for tensor '{}'", dt, ent.name));
        }
        ent.shape = e.at("shape").get<Shape>();
        ent.offset = e.at("offset").get<uint64_t>();
        ent.nbytes = e.at("nbytes").get<uint64_t>();
        if (ent.offset != expected_offset)
            ckpt_fail(CheckpointErrorKind::BadManifest,
                      fmt::format("tensor '{}' offset {} overlaps or leaves a gap (expected {})",
                                  ent.name, ent.offset, expected_offset));
        uint64_t numel = static_cast<uint64_t>(shape_numel(ent.shape));
        if (ent.nbytes != numel * dtype_size(ent.dtype))
            ckpt_fail(CheckpointErrorKind::BadManifest,
                      fmt::format("tensor '{}' byte length {} does not match shape", ent.name,
                                  ent.nbytes));
        expected_offset += ent.nbytes;
        entries.push_back(std::move(ent));
    }
    if (payload_len != expected_offset)
        ckpt_fail(CheckpointErrorKind::TruncatedPayload,
                  fmt::format("payload is {} bytes, manifest declares {}", payload_len,
                              expected_offset));

    in.seekg(payload_start);
    for (const auto& ent : entries) {
        Tensor t = Tensor::zeros(ent.shape, ent.dtype);
        in.read(static_cast<char*>(raw_data(t)), static_cast<std::streamsize>(ent.nbytes));
        if (!in.good())
            ckpt_fail(CheckpointErrorKind::TruncatedPayload,
                      fmt::format("payload read failed for tensor '{}'", ent.name));
        auto [it, inserted] = ck.tensors.emplace(ent.name, std::move(t));
        if (!inserted)
            ckpt_fail(CheckpointErrorKind::BadManifest,
                      fmt::format("duplicate tensor name '{}'", ent.name));
    }
    return ck;
}

std::string checkpoint_manifest(const fs::path& path) {
    Checkpoint ck = load_checkpoint(path);
    std::string out = fmt::format("{}\n", kMagic);
    for (const auto& [k, v] : ck.metadata) out += fmt::format("meta  {} = {}\n", k, v);
    uint64_t total = 0;
    for (const auto& [name, t] : ck.tensors) {
        out += fmt::format("tensor  {:<40} {} {}\n", name, dtype_name(t.dtype()),
                           shape_str(t.shape()));
        total += static_cast<uint64_t>(t.numel());
    }
    out += fmt::format("{} tensors, {} values\n", ck.tensors.size(), total);
    return out;
}

// ---------------- model / artifact persistence ----------------

namespace {

std::string vocab_to_json(const Vocab& v) {
    json j;
    j["tokens"] = v.tokens;
    j["base_size"] = v.base_size;
    return j.dump();
}

Vocab vocab_from_json(const std::string& s) {
    json j = json::parse(s);
    Vocab v;
    v.tokens = j.at("tokens").get<std::vector<std::string>>();
    v.base_size = j.at("base_size").get<int>();
    for (size_t i = 0; i < v.tokens.size(); ++i)
        v.ids.emplace(v.tokens[i], static_cast<int>(i));
    return v;
}

}  // namespace

void save_bundle(const fs::path& path, const ModelBundle& bundle, const Vocab& vocab) {
    std::map<std::string, std::string> meta;
    meta["kind"] = "model";
    const NetConfig& c = bundle.cfg;
    meta["resolution"] = std::to_string(c.resolution);
    meta["latent_channels"] = std::to_string(c.latent_channels);
    meta["vae_channels"] = std::to_string(c.vae_channels);
    meta["d_model"] = std::to_string(c.d_model);
    meta["d_txt"] = std::to_string(c.d_txt);
    meta["n_heads"] = std::to_string(c.n_heads);
    meta["l_max"] = std::to_string(c.l_max);
    meta["text_blocks"] = std::to_string(c.text_blocks);
    meta["temb_dim"] = std::to_string(c.temb_dim);
    meta["temb_hidden"] = std::to_string(c.temb_hidden);
    meta["gn_groups"] = std::to_string(c.gn_groups);
    meta["vocab_size"] = std::to_string(c.vocab_size);
    meta["dtype"] = dtype_name(c.dtype);
    meta["vae_trained"] = bundle.vae_trained ? "1" : "0";
    meta["base_trained"] = bundle.base_trained ? "1" : "0";
    meta["vocab"] = vocab_to_json(vocab);
    save_checkpoint(path, bundle.params, meta);
}

std::pair<ModelBundle, Vocab> load_bundle(const fs::path& path) {
    Checkpoint ck = load_checkpoint(path);
    BD_CHECK(ck.metadata.count("kind") && ck.metadata.at("kind") == "model",
             "load_bundle: '{}' is not a model checkpoint", path.string());
    auto geti = [&](const char* k) { return std::stoi(ck.metadata.at(k)); };
    NetConfig c;
    c.resolution = geti("resolution");
    c.latent_channels = geti("latent_channels");
    c.vae_channels = geti("vae_channels");
    c.d_model = geti("d_model");
    c.d_txt = geti("d_txt");
    c.n_heads = geti("n_heads");
    c.l_max = geti("l_max");
    c.text_blocks = geti("text_blocks");
    c.temb_dim = geti("temb_dim");
    c.temb_hidden = geti("temb_hidden");
    c.gn_groups = geti("gn_groups");
    c.vocab_size = geti("vocab_size");
    c.dtype = ck.metadata.at("dtype") == "f64" ? DType::F64 : DType::F32;

    RngStream init_rng(0, 0);
    ModelBundle bundle = build_model(c, init_rng);
    BD_CHECK(bundle.params.size() == ck.tensors.size(),
             "load_bundle: checkpoint has {} tensors, model expects {}", ck.tensors.size(),
             bundle.params.size());
    for (auto& [name, param] : bundle.params) {
        auto it = ck.tensors.find(name);
        BD_CHECK(it != ck.tensors.end(), "load_bundle: checkpoint missing parameter '{}'", name);
        BD_CHECK(it->second.shape() == param.shape() && it->second.dtype() == param.dtype(),
                 "load_bundle: parameter '{}' has shape {} in checkpoint, model expects {}", name,
                 shape_str(it->second.shape()), shape_str(param.shape()));
        std::memcpy(raw_data(param), raw_data(it->second),
                    static_cast<size_t>(param.numel()) * dtype_size(param.dtype()));
    }
    bundle.vae_trained = ck.metadata.at("vae_trained") == "1";
    bundle.base_trained = ck.metadata.at("base_trained") == "1";
    Vocab vocab = vocab_from_json(ck.metadata.at("vocab"));
    BD_CHECK(vocab.total_size() == c.vocab_size,
             "load_bundle: vocabulary size {} does not match embedding table {}",
             vocab.total_size(), c.vocab_size);
    return {std::move(bundle), std::move(vocab)};
}

void save_ti_artifact(const fs::path& path, const TiArtifact& artifact) {
    ParamMap tensors;
    tensors.emplace(artifact.placeholder, artifact.vectors);
    std::map<std::string, std::string> meta;
    meta["kind"] = "ti";
    meta["placeholder"] = artifact.placeholder;
    meta["token_id"] = std::to_string(artifact.token_id);
    save_checkpoint(path, tensors, meta);
}

TiArtifact load_ti_artifact(const fs::path& path) {
    Checkpoint ck = load_checkpoint(path);
    BD_CHECK(ck.metadata.count("kind") && ck.metadata.at("kind") == "ti",
             "load_ti_artifact: '{}' is not a textual-inversion artifact", path.string());
    TiArtifact art;
    art.placeholder = ck.metadata.at("placeholder");
    art.token_id = std::stoi(ck.metadata.at("token_id"));
    BD_CHECK(ck.tensors.size() == 1 && ck.tensors.count(art.placeholder),
             "load_ti_artifact: expected exactly one tensor named '{}'", art.placeholder);
    art.vectors = ck.tensors.at(art.placeholder);
    return art;
}

void save_lora_artifact(const fs::path& path, const LoraArtifact& artifact) {
    std::map<std::string, std::string> meta;
    meta["kind"] = "lora";
    meta["name"] = artifact.name;
    meta["rank"] = std::to_string(artifact.rank);
    meta["alpha"] = fmt::format("{}", artifact.alpha);
    save_checkpoint(path, artifact.params(), meta);
}

LoraArtifact load_lora_artifact(const fs::path& path) {
    Checkpoint ck = load_checkpoint(path);
    BD_CHECK(ck.metadata.count("kind") && ck.metadata.at("kind") == "lora",
             "load_lora_artifact: '{}' is not a lora artifact", path.string());
    LoraArtifact art;
    art.name = ck.metadata.at("name");
    art.rank = std::stoi(ck.metadata.at("rank"));
    art.alpha = std::stod(ck.metadata.at("alpha"));
    for (const auto& [name, t] : ck.tensors) {
        // lora.<site>.<proj>.{a,b}
        std::vector<std::string> parts;
        size_t start = 0;
        while (start <= name.size()) {
            size_t dot = name.find('.', start);
            if (dot == std::string::npos) dot = name.size();
            parts.push_back(name.substr(start, dot - start));
            start = dot + 1;
        }
        BD_CHECK(parts.size() == 4 && parts[0] == "lora",
                 "load_lora_artifact: unexpected tensor name '{}'", name);
        LoraSiteEntry& site = art.sites[parts[1]];
        LoraEntry* entry = nullptr;
        if (parts[2] == "q") entry = &site.q;
        else if (parts[2] == "k") entry = &site.k;
        else if (parts[2] == "v") entry = &site.v;
        else if (parts[2] == "o") entry = &site.o;
        BD_CHECK(entry, "load_lora_artifact: unknown projection in '{}'", name);
        if (parts[3] == "a") entry->a = t;
        else if (parts[3] == "b") entry->b = t;
        else fail("load_lora_artifact: unknown tensor role in '{}'", name);
    }
    return art;
}

void save_hypernet_artifact(const fs::path& path, const HypernetArtifact& artifact) {
    std::map<std::string, std::string> meta;
    meta["kind"] = "hypernet";
    meta["name"] = artifact.name;
    std::string mults;
    for (size_t i = 0; i < artifact.multipliers.size(); ++i) {
        if (i) mults += ",";
        mults += std::to_string(artifact.multipliers[i]);
    }
    meta["multipliers"] = mults;
    meta["activation"] = artifact.activation;
    meta["residual"] = artifact.residual ? "1" : "0";
    save_checkpoint(path, artifact.params(), meta);
}

HypernetArtifact load_hypernet_artifact(const fs::path& path) {
    Checkpoint ck = load_checkpoint(path);
    BD_CHECK(ck.metadata.count("kind") && ck.metadata.at("kind") == "hypernet",
             "load_hypernet_artifact: '{}' is not a hypernetwork artifact", path.string());
    HypernetArtifact art;
    art.name = ck.metadata.at("name");
    art.multipliers.clear();
    for (const auto& tag : split_tags(ck.metadata.at("multipliers")))
        art.multipliers.push_back(std::stoi(tag));
    art.activation = ck.metadata.at("activation");
    art.residual = ck.metadata.at("residual") == "1";
    size_t layers = art.multipliers.size() - 1;
    for (const auto& [name, t] : ck.tensors) {
        // hn.<site>.{k,v}.{w,b}<i>
        std::vector<std::string> parts;
        size_t start = 0;
        while (start <= name.size()) {
            size_t dot = name.find('.', start);
            if (dot == std::string::npos) dot = name.size();
            parts.push_back(name.substr(start, dot - start));
            start = dot + 1;
        }
        BD_CHECK(parts.size() == 4 && parts[0] == "hn" && !parts[3].empty(),
                 "load_hypernet_artifact: unexpected tensor name '{}'", name);
        HypernetSiteEntry& site = art.sites[parts[1]];
        HypernetMlp& mlp = parts[2] == "k" ? site.key_mlp : site.value_mlp;
        if (mlp.weights.size() != layers) {
            mlp.weights.resize(layers);
            mlp.biases.resize(layers);
        }
        size_t idx = static_cast<size_t>(std::stoul(parts[3].substr(1)));
        BD_CHECK(idx < layers, "load_hypernet_artifact: layer index out of range in '{}'", name);
        if (parts[3][0] == 'w') mlp.weights[idx] = t;
        else if (parts[3][0] == 'b') mlp.biases[idx] = t;
        else fail("load_hypernet_artifact: unknown tensor role in '{}'", name);
    }
    return art;
}

std::string checkpoint_kind(const fs::path& path) {
    Checkpoint ck = load_checkpoint(path);
    auto it = ck.metadata.find("kind");
    return it == ck.metadata.end() ? "unknown" : it->second;
}

}  // namespace bridgediff
