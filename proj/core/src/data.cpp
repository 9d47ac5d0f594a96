#include "bridgediff/data.hpp"

#include "bridgediff/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

namespace bridgediff {

namespace fs = std::filesystem;

int Vocab::id_of(const std::string& w) const {
    auto it = ids.find(w);
    BD_CHECK(it != ids.end(), "token '{}' not in vocabulary", w);
    return it->second;
}

int Vocab::add_placeholder(const std::string& word) {
    BD_CHECK(!contains(word), "placeholder '{}' already in vocabulary", word);
    int id = total_size();
    tokens.push_back(word);
    ids.emplace(word, id);
    return id;
}

std::vector<std::string> Vocab::placeholders() const {
    return {tokens.begin() + base_size, tokens.end()};
}

namespace {

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

std::vector<std::string> split_tags(const std::string& caption) {
    std::vector<std::string> tags;
    size_t start = 0;
    while (start <= caption.size()) {
        size_t comma = caption.find(',', start);
        if (comma == std::string::npos) comma = caption.size();
        std::string tag = trim(lower(caption.substr(start, comma - start)));
        if (!tag.empty()) tags.push_back(tag);
        start = comma + 1;
    }
    return tags;
}

std::string join_tags(const std::vector<std::string>& tags) {
    std::string out;
    for (size_t i = 0; i < tags.size(); ++i) {
        if (i) out += ", ";
        out += tags[i];
    }
    return out;
}

Corpus load_corpus(const fs::path& directory, int expected_resolution) {
    BD_CHECK(fs::is_directory(directory), "load_corpus: '{}' is not a directory",
             directory.string());
    std::vector<fs::path> images;
    for (const auto& entry : fs::directory_iterator(directory)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = lower(entry.path().extension().string());
        if (ext == ".png") images.push_back(entry.path());
    }
    std::sort(images.begin(), images.end(),
              [](const fs::path& a, const fs::path& b) { return a.stem() < b.stem(); });
    BD_CHECK(!images.empty(), "load_corpus: no .png files in '{}'", directory.string());

    Corpus corpus;
    for (const auto& img_path : images) {
        fs::path txt_path = img_path;
        txt_path.replace_extension(".txt");
        BD_CHECK(fs::exists(txt_path), "load_corpus: no caption file for stem '{}'",
                 img_path.stem().string());
        std::ifstream in(txt_path);
        std::string caption;
        std::getline(in, caption);
        std::vector<std::string> tags = split_tags(caption);
        BD_CHECK(!tags.empty(), "load_corpus: empty caption for stem '{}'",
                 img_path.stem().string());

        Tensor img = load_png(img_path);
        BD_CHECK(img.dim(0) == img.dim(1), "load_corpus: image '{}' is not square ({}x{})",
                 img_path.filename().string(), img.dim(0), img.dim(1));
        if (img.dim(0) != expected_resolution) img = resize_nearest(img, expected_resolution);
        corpus.pairs.push_back({std::move(img), std::move(tags), img_path.stem().string()});
    }
    return corpus;
}

void save_corpus(const fs::path& directory, const Corpus& corpus, const std::string& stem_prefix) {
    fs::create_directories(directory);
    for (size_t i = 0; i < corpus.pairs.size(); ++i) {
        std::string stem = fmt::format("{}_{:04d}", stem_prefix, i);
        save_png(directory / (stem + ".png"), corpus.pairs[i].image);
        fs::path txt_tmp = directory / (stem + ".txt.tmp");
        {
            std::ofstream out(txt_tmp);
            out << join_tags(corpus.pairs[i].tags) << "\n";
        }
        fs::rename(txt_tmp, directory / (stem + ".txt"));
    }
}

const std::vector<std::string>& default_reserved_words() {
    static const std::vector<std::string> words = {
        // article/preposition glue and the trainer prompt words
        "a", "an", "the", "of", "photo", "picture", "art", "by", "beike", "bridge",
        // the caption tag pool
        "outdoors", "cloud", "scenery", "sky", "car", "tree", "day", "road", "building", "water",
        "no", "humans", "reflection",
        // synthetic corpus style words
        "arch", "truss", "suspension", "coral"};
    return words;
}

Vocab build_vocab(const std::vector<const Corpus*>& corpora,
                  const std::vector<std::string>& reserved) {
    Vocab v;
    v.tokens = {"<pad>", "<begin>", "<end>"};
    size_t caption_count = 0;
    auto add = [&](const std::string& w) {
        if (!v.ids.count(w)) {
            v.ids.emplace(w, static_cast<int>(v.tokens.size()));
            v.tokens.push_back(w);
        }
    };
    for (size_t i = 0; i < v.tokens.size(); ++i) v.ids.emplace(v.tokens[i], static_cast<int>(i));
    for (const Corpus* c : corpora) {
        for (const auto& pair : c->pairs) {
            ++caption_count;
            for (const auto& tag : pair.tags) {
                // tags may be multi-word ("no humans"): individual words tokenize
                for (const auto& w : split_tags(tag)) {
                    size_t start = 0;
                    while (start < w.size()) {
                        size_t sp = w.find(' ', start);
                        if (sp == std::string::npos) sp = w.size();
                        if (sp > start) add(w.substr(start, sp - start));
                        start = sp + 1;
                    }
                }
            }
        }
    }
    BD_CHECK(caption_count > 0, "build_vocab: no captions");
    for (const auto& w : reserved) add(lower(w));
    v.base_size = static_cast<int>(v.tokens.size());
    return v;
}

std::string normalize_prompt(const std::string& prompt) {
    std::string s = lower(prompt);
    std::string out;
    bool space = true;
    for (char c : s) {
        if (c == ',' || std::isspace(static_cast<unsigned char>(c))) {
            if (!space) out += ' ';
            space = true;
        } else {
            out += c;
            space = false;
        }
    }
    if (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

TokenizedPrompt tokenize(const Vocab& vocab, const std::string& prompt, int l_max) {
    BD_CHECK(l_max >= 2, "tokenize: l_max must fit begin/end, got {}", l_max);
    std::string text = lower(prompt);

    // greedy whole-unit match of placeholder words, longest first
    std::vector<std::string> units = vocab.placeholders();
    std::sort(units.begin(), units.end(),
              [](const std::string& a, const std::string& b) { return a.size() > b.size(); });

    std::vector<std::string> words;
    size_t pos = 0;
    auto flush_plain = [&](const std::string& seg) {
        for (const auto& w : split_tags(seg)) {
            size_t start = 0;
            while (start < w.size()) {
                size_t sp = w.find(' ', start);
                if (sp == std::string::npos) sp = w.size();
                if (sp > start) words.push_back(w.substr(start, sp - start));
                start = sp + 1;
            }
        }
    };
    while (pos < text.size()) {
        size_t best_at = std::string::npos;
        const std::string* best = nullptr;
        for (const auto& u : units) {
            size_t at = text.find(u, pos);
            if (at != std::string::npos && (best_at == std::string::npos || at < best_at)) {
                best_at = at;
                best = &u;
            }
        }
        if (!best) {
            flush_plain(text.substr(pos));
            break;
        }
        flush_plain(text.substr(pos, best_at - pos));
        words.push_back(*best);
        pos = best_at + best->size();
    }

    TokenizedPrompt out;
    out.ids.push_back(vocab.begin_id);
    for (const auto& w : words) {
        BD_CHECK(vocab.contains(w), "tokenize: token '{}' not in vocabulary", w);
        if (static_cast<int>(out.ids.size()) < l_max - 1) out.ids.push_back(vocab.ids.at(w));
    }
    out.ids.push_back(vocab.end_id);
    out.length = static_cast<int>(out.ids.size());
    while (static_cast<int>(out.ids.size()) < l_max) out.ids.push_back(vocab.pad_id);
    return out;
}

std::string detokenize(const Vocab& vocab, const std::vector<int>& ids) {
    std::string out;
    for (int id : ids) {
        BD_CHECK(id >= 0 && id < vocab.total_size(), "detokenize: id {} out of range", id);
        if (id == vocab.pad_id || id == vocab.begin_id || id == vocab.end_id) continue;
        if (!out.empty()) out += ' ';
        out += vocab.tokens[static_cast<size_t>(id)];
    }
    return out;
}

std::string template_prompt(const std::string& tmpl, const ImageTextPair& pair,
                            const std::string& name) {
    BD_CHECK(!name.empty(), "template_prompt: empty artifact name");
    BD_CHECK(tmpl.find("[filewords]") != std::string::npos &&
                 tmpl.find("[name]") != std::string::npos,
             "template_prompt: template must contain [filewords] and [name]: '{}'", tmpl);
    std::string out;
    size_t pos = 0;
    while (pos < tmpl.size()) {
        if (tmpl[pos] == '[') {
            size_t close = tmpl.find(']', pos);
            BD_CHECK(close != std::string::npos, "template_prompt: unterminated marker in '{}'",
                     tmpl);
            std::string marker = tmpl.substr(pos, close - pos + 1);
            if (marker == "[filewords]") {
                out += join_tags(pair.tags);
            } else if (marker == "[name]") {
                out += name;
            } else {
                fail("template_prompt: unknown marker '{}'", marker);
            }
            pos = close + 1;
        } else {
            out += tmpl[pos++];
        }
    }
    return out;
}

const char* style_name(BridgeStyle s) {
    switch (s) {
        case BridgeStyle::Arch: return "arch";
        case BridgeStyle::Truss: return "truss";
        case BridgeStyle::Suspension: return "suspension";
        case BridgeStyle::Coral: return "coral";
    }
    return "?";
}

BridgeStyle style_from_name(const std::string& name) {
    std::string n = lower(name);
    if (n == "arch") return BridgeStyle::Arch;
    if (n == "truss") return BridgeStyle::Truss;
    if (n == "suspension") return BridgeStyle::Suspension;
    if (n == "coral") return BridgeStyle::Coral;
    fail("unknown bridge style '{}'; expected arch|truss|suspension|coral", name);
}

Tensor corpus_centroid(const Corpus& corpus) {
    BD_CHECK(!corpus.empty(), "corpus_centroid: empty corpus");
    Tensor acc = corpus.pairs[0].image.clone();
    for (size_t i = 1; i < corpus.pairs.size(); ++i) {
        acc = add(acc, corpus.pairs[i].image);
    }
    return mul_scalar(acc, 1.0 / static_cast<double>(corpus.size()));
}

}  // namespace bridgediff
