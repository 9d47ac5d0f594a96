#pragma once

#include "bridgediff/common.hpp"

#include <string>
#include <vector>

namespace bridgediff {

// <lora:name:weight> / <hypernet:name:weight> trigger parsed out of a prompt
struct PromptDirective {
    enum class Kind { Lora, Hypernet };
    Kind kind;
    std::string name;
    double weight = 1.0;
};

struct ParsedPrompt {
    std::string text;  // directives and dangling commas removed
    std::vector<PromptDirective> directives;
};

// Extracts `<kind:name:weight>` directives in order. Angle-bracket blocks
// without colons (placeholder words) pass through untouched.
ParsedPrompt parse_prompt(const std::string& raw);

}  // namespace bridgediff
