// SPDX-License-Identifier: Apache-2.0
#include "mala/common.hpp"

#include <cctype>
#include <cstdio>

namespace mala {

bool LanguageTag::valid(std::string_view s) {
    if (s.size() != 8 || s[3] != '_') return false;
    for (int i = 0; i < 3; ++i)
        if (!std::islower(static_cast<unsigned char>(s[i]))) return false;
    if (!std::isupper(static_cast<unsigned char>(s[4]))) return false;
    for (int i = 5; i < 8; ++i)
        if (!std::islower(static_cast<unsigned char>(s[i]))) return false;
    return true;
}

LanguageTag LanguageTag::parse(std::string_view s) {
    if (!valid(s)) throw std::invalid_argument("invalid language tag: " + std::string(s));
    return LanguageTag{std::string(s.substr(0, 3)), std::string(s.substr(4, 4))};
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void warn(const std::string& msg) {
    std::fprintf(stderr, "[mala] warning: %s\n", msg.c_str());
}

}  // namespace mala
