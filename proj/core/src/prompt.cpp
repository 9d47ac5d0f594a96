#include "bridgediff/prompt.hpp"

#include <cctype>
#include <cstdlib>

namespace bridgediff {

namespace {

std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        size_t p = s.find(sep, start);
        if (p == std::string::npos) {
            out.push_back(s.substr(start));
            break;
        }
        out.push_back(s.substr(start, p - start));
        start = p + 1;
    }
    return out;
}

// strip a comma (plus surrounding spaces) left dangling by a removal at `at`
void tidy_commas(std::string& text) {
    // ", ," or ",," runs collapse to a single comma
    for (size_t i = 0; i < text.size();) {
        if (text[i] != ',') {
            ++i;
            continue;
        }
        size_t j = i + 1;
        while (j < text.size() && std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j < text.size() && text[j] == ',') {
            text.erase(i, j - i);  // drop the first comma and the gap
        } else {
            ++i;
        }
    }
    // leading/trailing commas and whitespace
    size_t a = 0;
    while (a < text.size() &&
           (text[a] == ',' || std::isspace(static_cast<unsigned char>(text[a]))))
        ++a;
    size_t b = text.size();
    while (b > a && (text[b - 1] == ',' || std::isspace(static_cast<unsigned char>(text[b - 1]))))
        --b;
    text = text.substr(a, b - a);
}

}  // namespace

ParsedPrompt parse_prompt(const std::string& raw) {
    ParsedPrompt out;
    std::string text;
    size_t pos = 0;
    while (pos < raw.size()) {
        if (raw[pos] != '<') {
            text += raw[pos++];
            continue;
        }
        size_t close = raw.find('>', pos);
        if (close == std::string::npos) {
            text += raw.substr(pos);
            break;
        }
        std::string inner = raw.substr(pos + 1, close - pos - 1);
        if (inner.find(':') == std::string::npos) {
            // placeholder word, not a directive
            text += raw.substr(pos, close - pos + 1);
            pos = close + 1;
            continue;
        }
        std::string block = raw.substr(pos, close - pos + 1);
        std::vector<std::string> parts = split_on(inner, ':');
        BD_CHECK(parts.size() == 3, "parse_prompt: malformed directive '{}' (expected <kind:name:weight>)",
                 block);
        PromptDirective d;
        if (parts[0] == "lora") {
            d.kind = PromptDirective::Kind::Lora;
        } else if (parts[0] == "hypernet") {
            d.kind = PromptDirective::Kind::Hypernet;
        } else {
            fail("parse_prompt: unknown directive kind in '{}'", block);
        }
        BD_CHECK(!parts[1].empty(), "parse_prompt: empty artifact name in '{}'", block);
        d.name = parts[1];
        char* end = nullptr;
        d.weight = std::strtod(parts[2].c_str(), &end);
        BD_CHECK(end && *end == '\0' && !parts[2].empty(),
                 "parse_prompt: non-numeric weight in '{}'", block);
        out.directives.push_back(std::move(d));
        pos = close + 1;
    }
    tidy_commas(text);
    out.text = std::move(text);
    return out;
}

}  // namespace bridgediff
