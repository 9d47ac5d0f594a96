#pragma once

#include <fmt/format.h>

#include <stdexcept>
#include <string>

namespace bridgediff {

class Error : public std::runtime_error {
public:
    explicit Error(std::string msg) : std::runtime_error(std::move(msg)) {}
};

template <typename... Args>
[[noreturn]] void fail(fmt::format_string<Args...> f, Args&&... args) {
    throw Error(fmt::format(f, std::forward<Args>(args)...));
}

#define BD_CHECK(cond, ...)              \
    do {                                 \
        if (!(cond)) {                   \
            ::bridgediff::fail(__VA_ARGS__); \
        }                                \
    } while (0)

}  // namespace bridgediff
