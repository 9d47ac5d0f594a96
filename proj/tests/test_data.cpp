#include <bridgediff/data.hpp>
#include <bridgediff/image_io.hpp>

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace bridgediff;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("bridgediff_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("split_tags: the sample caption yields 11 ordered tags") {
    auto tags = split_tags(
        "bridge, outdoors, cloud, scenery, sky, car, tree, day, road, building, water");
    REQUIRE(tags.size() == 11);
    CHECK(tags[0] == "bridge");
    CHECK(tags[1] == "outdoors");
    CHECK(tags[4] == "sky");
    CHECK(tags[10] == "water");
}

TEST_CASE("split_tags: normalization is idempotent") {
    auto t1 = split_tags("  Bridge ,SKY,, day  ");
    CHECK(t1 == std::vector<std::string>{"bridge", "sky", "day"});
    auto t2 = split_tags(join_tags(t1));
    CHECK(t2 == t1);
}

TEST_CASE("load_corpus: round-trips a saved corpus deterministically") {
    RngStream rng(41, 0);
    Corpus c = synth_bridges(5, BridgeStyle::Arch, 32, rng);
    fs::path dir = temp_dir("corpus_roundtrip");
    save_corpus(dir, c);
    Corpus loaded = load_corpus(dir, 32);
    REQUIRE(loaded.size() == 5);
    for (size_t i = 0; i < 5; ++i) {
        CHECK(bitwise_equal(loaded.pairs[i].image, c.pairs[i].image) ==
              false);  // png quantizes to 8 bits
        CHECK(max_abs_diff(loaded.pairs[i].image, c.pairs[i].image) < 1.0 / 255.0 + 1e-6);
        CHECK(loaded.pairs[i].tags == c.pairs[i].tags);
    }
    // lexicographic-by-stem order
    for (size_t i = 1; i < loaded.size(); ++i)
        CHECK(loaded.pairs[i - 1].source < loaded.pairs[i].source);
}

TEST_CASE("load_corpus: missing caption file fails closed") {
    RngStream rng(42, 0);
    Corpus c = synth_bridges(3, BridgeStyle::Truss, 32, rng);
    fs::path dir = temp_dir("corpus_missing_txt");
    save_corpus(dir, c);
    fs::remove(dir / "img_0001.txt");
    CHECK_THROWS_WITH_AS(load_corpus(dir, 32), doctest::Contains("img_0001"), Error);
}

TEST_CASE("load_corpus: rejects non-square images and empty directories") {
    fs::path dir = temp_dir("corpus_bad");
    CHECK_THROWS_AS(load_corpus(dir, 32), Error);
    Tensor rect = Tensor::zeros({8, 16, 3});
    save_png(dir / "wide.png", rect);
    std::ofstream(dir / "wide.txt") << "bridge\n";
    CHECK_THROWS_AS(load_corpus(dir, 32), Error);
}

TEST_CASE("load_corpus: resizes to the expected resolution") {
    fs::path dir = temp_dir("corpus_resize");
    RngStream rng(43, 0);
    Corpus c = synth_bridges(1, BridgeStyle::Arch, 64, rng);
    save_corpus(dir, c);
    Corpus loaded = load_corpus(dir, 32);
    CHECK(loaded.pairs[0].image.shape() == Shape{32, 32, 3});
}

TEST_CASE("build_vocab: deterministic, reserved words present, append-only ids") {
    RngStream rng(44, 0);
    Corpus c1 = synth_bridges(4, BridgeStyle::Arch, 32, rng);
    Vocab v1 = build_vocab({&c1});
    Vocab v2 = build_vocab({&c1});
    CHECK(v1.tokens == v2.tokens);
    CHECK(v1.contains("beike"));
    CHECK(v1.contains("bridge"));
    CHECK(v1.contains("photo"));
    CHECK(v1.base_size == v1.total_size());

    std::vector<std::string> before = v1.tokens;
    int id = v1.add_placeholder("<the core bridge>");
    CHECK(id == static_cast<int>(before.size()));
    for (size_t i = 0; i < before.size(); ++i) CHECK(v1.tokens[i] == before[i]);
    CHECK(v1.placeholders() == std::vector<std::string>{"<the core bridge>"});
}

TEST_CASE("tokenize: the trainer prompt with a placeholder") {
    RngStream rng(45, 0);
    Corpus c = synth_bridges(2, BridgeStyle::Arch, 32, rng);
    Vocab v = build_vocab({&c});
    int base = v.base_size;
    int pid = v.add_placeholder("<the core bridge>");
    CHECK(pid == base);

    TokenizedPrompt tp = tokenize(v, "a photo of a <the core bridge>", 16);
    REQUIRE(static_cast<int>(tp.ids.size()) == 16);
    CHECK(tp.ids[0] == v.begin_id);
    CHECK(tp.ids[1] == v.id_of("a"));
    CHECK(tp.ids[2] == v.id_of("photo"));
    CHECK(tp.ids[3] == v.id_of("of"));
    CHECK(tp.ids[4] == v.id_of("a"));
    CHECK(tp.ids[5] == pid);
    CHECK(tp.ids[6] == v.end_id);
    for (int i = 7; i < 16; ++i) CHECK(tp.ids[i] == v.pad_id);
    CHECK(tp.length == 7);

    // the paper-style spelling without a space still hits the placeholder
    TokenizedPrompt tight = tokenize(v, "a photo of a<the core bridge>", 16);
    CHECK(tight.ids == tp.ids);
}

TEST_CASE("tokenize: empty prompt is begin/end/pads") {
    RngStream rng(46, 0);
    Corpus c = synth_bridges(1, BridgeStyle::Arch, 32, rng);
    Vocab v = build_vocab({&c});
    TokenizedPrompt tp = tokenize(v, "", 8);
    CHECK(tp.ids[0] == v.begin_id);
    CHECK(tp.ids[1] == v.end_id);
    for (int i = 2; i < 8; ++i) CHECK(tp.ids[i] == v.pad_id);
    CHECK(tp.length == 2);
}

TEST_CASE("tokenize: unknown token errors by name; round-trip reproduces normalized text") {
    RngStream rng(47, 0);
    Corpus c = synth_bridges(1, BridgeStyle::Arch, 32, rng);
    Vocab v = build_vocab({&c});
    CHECK_THROWS_WITH_AS(tokenize(v, "a quux bridge", 16), doctest::Contains("quux"), Error);

    std::string prompt = "A Photo of,, a bridge";
    TokenizedPrompt tp = tokenize(v, prompt, 16);
    CHECK(detokenize(v, tp.ids) == normalize_prompt(prompt));
    CHECK(normalize_prompt(prompt) == "a photo of a bridge");
}

TEST_CASE("template_prompt: marker substitution and errors") {
    ImageTextPair pair;
    pair.tags = {"bridge", "outdoors"};
    CHECK(template_prompt("a picture of [filewords], art by [name]", pair, "coral_shell_bridge") ==
          "a picture of bridge, outdoors, art by coral_shell_bridge");
    CHECK_THROWS_AS(template_prompt("no markers here", pair, "x"), Error);
    CHECK_THROWS_AS(template_prompt("a [filewords] [name] [bogus]", pair, "x"), Error);
    CHECK_THROWS_AS(template_prompt("a [filewords] by [name]", pair, ""), Error);
}

TEST_CASE("synth_bridges: deterministic, sized, tagged") {
    RngStream r1(48, 0);
    RngStream r2(48, 0);
    Corpus a = synth_bridges(20, BridgeStyle::Coral, 32, r1);
    Corpus b = synth_bridges(20, BridgeStyle::Coral, 32, r2);
    REQUIRE(a.size() == 20);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(bitwise_equal(a.pairs[i].image, b.pairs[i].image));
        CHECK(a.pairs[i].tags == b.pairs[i].tags);
        CHECK(a.pairs[i].tags[0] == "bridge");
        CHECK(a.pairs[i].image.shape() == Shape{32, 32, 3});
    }
}

TEST_CASE("synth_bridges: arch and truss separate under a nearest-centroid classifier") {
    RngStream rng(49, 0);
    RngStream ra = rng.split(1), rt = rng.split(2);
    Corpus arch = synth_bridges(30, BridgeStyle::Arch, 32, ra);
    Corpus truss = synth_bridges(30, BridgeStyle::Truss, 32, rt);
    Tensor ca = corpus_centroid(arch);
    Tensor ct = corpus_centroid(truss);
    auto dist = [](const Tensor& x, const Tensor& y) {
        double d = 0;
        for (int64_t i = 0; i < x.numel(); ++i) {
            double v = x.at(i) - y.at(i);
            d += v * v;
        }
        return d;
    };
    int correct = 0;
    for (const auto& p : arch.pairs)
        if (dist(p.image, ca) < dist(p.image, ct)) ++correct;
    for (const auto& p : truss.pairs)
        if (dist(p.image, ct) < dist(p.image, ca)) ++correct;
    CHECK(correct >= 57);  // >= 95% of 60
}

TEST_CASE("corpus centroid requires a non-empty corpus") {
    Corpus empty;
    CHECK_THROWS_AS((void)corpus_centroid(empty), Error);
}
