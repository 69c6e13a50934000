// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mala {

inline constexpr std::string_view kToolkitVersion = "0.1.0";

/// ISO 639-3 code plus 4-letter script, e.g. "eng_Latn".
struct LanguageTag {
    std::string iso;     // [a-z]{3}
    std::string script;  // [A-Z][a-z]{3}

    static LanguageTag parse(std::string_view s);
    static bool valid(std::string_view s);
    std::string str() const { return iso + "_" + script; }

    friend bool operator==(const LanguageTag&, const LanguageTag&) = default;
    friend auto operator<=>(const LanguageTag&, const LanguageTag&) = default;
};

/// FNV-1a over a byte string; used for config/manifest fingerprints.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

/// Non-fatal diagnostics go to stderr with a common prefix.
void warn(const std::string& msg);

/// Seeded RNG wrapper so every module draws from the same engine family.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double gaussian(double sigma) {
        return sigma == 0.0 ? 0.0 : std::normal_distribution<double>(0.0, sigma)(engine_);
    }
    std::uint64_t next_u64() { return engine_(); }
    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace mala
