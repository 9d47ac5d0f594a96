#pragma once

#include "bridgediff/adapters.hpp"
#include "bridgediff/data.hpp"
#include "bridgediff/networks.hpp"
#include "bridgediff/tensor.hpp"

#include <filesystem>
#include <map>
#include <string>

namespace bridgediff {

enum class CheckpointErrorKind { CorruptHeader, TruncatedPayload, BadManifest };

class CheckpointError : public Error {
public:
    CheckpointError(CheckpointErrorKind kind, std::string msg)
        : Error(std::move(msg)), kind_(kind) {}
    CheckpointErrorKind kind() const { return kind_; }

private:
    CheckpointErrorKind kind_;
};

// Container: one human-readable JSON header line group (format version,
// tensor manifest, metadata map) followed by concatenated little-endian
// tensor bytes. Written atomically.
void save_checkpoint(const std::filesystem::path& path, const ParamMap& tensors,
                     const std::map<std::string, std::string>& metadata);

struct Checkpoint {
    ParamMap tensors;
    std::map<std::string, std::string> metadata;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

// printable manifest: header fields, one line per tensor
std::string checkpoint_manifest(const std::filesystem::path& path);

// ---- model/artifact persistence (full bundles carry their vocabulary) ----

void save_bundle(const std::filesystem::path& path, const ModelBundle& bundle, const Vocab& vocab);
std::pair<ModelBundle, Vocab> load_bundle(const std::filesystem::path& path);

void save_ti_artifact(const std::filesystem::path& path, const TiArtifact& artifact);
TiArtifact load_ti_artifact(const std::filesystem::path& path);

void save_lora_artifact(const std::filesystem::path& path, const LoraArtifact& artifact);
LoraArtifact load_lora_artifact(const std::filesystem::path& path);

void save_hypernet_artifact(const std::filesystem::path& path, const HypernetArtifact& artifact);
HypernetArtifact load_hypernet_artifact(const std::filesystem::path& path);

// metadata "kind" of a container: model | ti | lora | hypernet
std::string checkpoint_kind(const std::filesystem::path& path);

}  // namespace bridgediff
