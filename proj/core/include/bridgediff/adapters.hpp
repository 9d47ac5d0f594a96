#pragma once

#include "bridgediff/tensor.hpp"

#include <map>
#include <string>
#include <vector>

namespace bridgediff {

// Learned placeholder-token embedding (one appended vocabulary row).
struct TiArtifact {
    std::string placeholder;  // e.g. "<the core bridge>"
    int token_id = -1;        // >= base vocab size
    Tensor vectors;           // [n_vectors, d_txt]; default n_vectors = 1
};

// Low-rank pair for one projection: delta(x) = scale * (x . a) . b with
// a [d_in, r], b [r, d_out]; equivalent to adding (alpha/r) B.A to the
// projection matrix.
struct LoraEntry {
    Tensor a;
    Tensor b;
};

struct LoraSiteEntry {
    LoraEntry q, k, v, o;
};

struct LoraArtifact {
    std::string name;  // trigger name, e.g. "aki"
    int rank = 0;
    double alpha = 0;
    std::map<std::string, LoraSiteEntry> sites;  // site id -> entries

    ParamMap params() const;  // "lora.<site>.<proj>.{a,b}"
};

// Per-site residual MLPs transforming the text context on the key and value
// paths of a cross-attention site.
struct HypernetMlp {
    std::vector<Tensor> weights;  // [w_i, w_{i+1}]
    std::vector<Tensor> biases;
};

struct HypernetSiteEntry {
    HypernetMlp key_mlp;
    HypernetMlp value_mlp;
};

struct HypernetArtifact {
    std::string name;                       // e.g. "coral_shell_bridge"
    std::vector<int> multipliers{1, 2, 1};  // layer widths as multiples of d_txt
    std::string activation = "linear";      // linear | relu | silu
    bool residual = true;
    std::map<std::string, HypernetSiteEntry> sites;

    ParamMap params() const;  // "hn.<site>.{k,v}.{w,b}<i>"
    std::vector<int> layer_widths(int d_txt) const;
};

// Adapters active during a forward pass, each at a directive weight.
struct AdapterSet {
    std::vector<std::pair<const LoraArtifact*, double>> loras;
    std::vector<std::pair<const HypernetArtifact*, double>> hypernets;
    bool empty() const { return loras.empty() && hypernets.empty(); }
};

// x + weight * mlp(x) when residual (weight 0 returns x untouched)
Tensor hypernet_apply(const HypernetMlp& mlp, const Tensor& x, const std::string& activation,
                      bool residual, double weight);

}  // namespace bridgediff
