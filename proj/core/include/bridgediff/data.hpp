#pragma once

#include "bridgediff/rng.hpp"
#include "bridgediff/tensor.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace bridgediff {

// One training image plus its ordered comma-separated caption tags.
struct ImageTextPair {
    Tensor image;  // [H,W,3] in [0,1], square
    std::vector<std::string> tags;
    std::string source;
};

struct Corpus {
    std::vector<ImageTextPair> pairs;
    bool empty() const { return pairs.empty(); }
    size_t size() const { return pairs.size(); }
};

// Whole-word vocabulary: special ids first, then corpus tags in first-seen
// order, then reserved words. Placeholders appended after V_base only.
struct Vocab {
    std::vector<std::string> tokens;
    std::map<std::string, int> ids;
    int pad_id = 0;
    int begin_id = 1;
    int end_id = 2;
    int base_size = 0;  // V_base; ids >= base_size are placeholders

    int total_size() const { return static_cast<int>(tokens.size()); }
    bool contains(const std::string& w) const { return ids.count(w) > 0; }
    int id_of(const std::string& w) const;
    int add_placeholder(const std::string& word);  // returns new id == old total
    std::vector<std::string> placeholders() const;
};

// caption tag utilities
std::vector<std::string> split_tags(const std::string& caption);  // split on ',', trim, lowercase
std::string join_tags(const std::vector<std::string>& tags);

// Directory of <stem>.png + <stem>.txt pairs (single-line comma-separated
// tags). Images resized to expected_resolution with nearest-neighbor.
Corpus load_corpus(const std::filesystem::path& directory, int expected_resolution);

void save_corpus(const std::filesystem::path& directory, const Corpus& corpus,
                 const std::string& stem_prefix = "img");

// Reserved words always present in a fresh vocabulary, covering the prompt
// vocabulary used by the samplers and trainers.
const std::vector<std::string>& default_reserved_words();

Vocab build_vocab(const std::vector<const Corpus*>& corpora,
                  const std::vector<std::string>& reserved = default_reserved_words());

struct TokenizedPrompt {
    std::vector<int> ids;  // [begin, ..., end, pad...] of length l_max
    int length = 0;        // number of non-pad ids
};

// Lowercases, splits on commas/whitespace, matches placeholder words greedily
// as whole units. Errors on out-of-vocabulary tokens.
TokenizedPrompt tokenize(const Vocab& vocab, const std::string& prompt, int l_max);
std::string detokenize(const Vocab& vocab, const std::vector<int>& ids);
std::string normalize_prompt(const std::string& prompt);

// "[filewords]" -> pair tags joined with ", "; "[name]" -> artifact name
std::string template_prompt(const std::string& tmpl, const ImageTextPair& pair,
                            const std::string& name);

enum class BridgeStyle { Arch, Truss, Suspension, Coral };
const char* style_name(BridgeStyle s);
BridgeStyle style_from_name(const std::string& name);

// Procedurally rendered bridge silhouettes with style-consistent scene tags;
// deterministic in (n, style, resolution, rng).
Corpus synth_bridges(int n, BridgeStyle style, int resolution, RngStream& rng);

// mean image of a corpus, [H,W,3]
Tensor corpus_centroid(const Corpus& corpus);

}  // namespace bridgediff
