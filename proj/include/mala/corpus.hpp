// SPDX-License-Identifier: Apache-2.0
//
// Per-language corpus ingest, alpha-multinomial sampling plans, and
// deterministic sample realization.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mala/common.hpp"

namespace mala {

struct ManifestEntry {
    LanguageTag lang;
    std::uint64_t sentence_count = 0;
    std::uint64_t byte_count = 0;
    std::filesystem::path path;
};

struct CorpusManifest {
    std::vector<ManifestEntry> entries;  // sorted by language tag

    std::uint64_t total_sentences() const;
    /// Fingerprint over (lang, counts) rows; path-independent.
    std::string digest() const;
    nlohmann::ordered_json to_json() const;
    static CorpusManifest from_json(const nlohmann::json& j);
};

enum class SamplingPurpose { vocab_build, training };

std::string to_string(SamplingPurpose p);
SamplingPurpose sampling_purpose_from_string(std::string_view s);

struct SamplingPlan {
    double alpha = 0.3;
    std::vector<std::pair<LanguageTag, double>> probs;  // sums to 1
    SamplingPurpose purpose = SamplingPurpose::training;
    std::uint64_t target_total = 0;

    nlohmann::ordered_json to_json() const;
    static SamplingPlan from_json(const nlohmann::json& j);
};

struct SampledCorpus {
    std::vector<std::pair<LanguageTag, std::uint64_t>> allocations;
    std::uint64_t seed = 0;
    std::string source_manifest_hash;

    nlohmann::ordered_json to_json() const;
    static SampledCorpus from_json(const nlohmann::json& j);
};

/// Scans `root` for <iso>_<Script>.txt files (UTF-8, one sentence per line).
/// Files with invalid names are skipped with a diagnostic; empty files are
/// excluded with a warning. Throws if root does not exist.
CorpusManifest ingest_corpus(const std::filesystem::path& root);

/// p_i = q_i^alpha / sum_j q_j^alpha with q_i the relative sentence counts.
SamplingPlan compute_sampling(const CorpusManifest& manifest, double alpha,
                              SamplingPurpose purpose, std::uint64_t target_total);

/// Deterministic largest-remainder apportionment of target_total over the
/// plan's probabilities, clamped to per-language availability with the
/// surplus redistributed. Set multinomial_draw for a seeded categorical
/// realization instead.
SampledCorpus draw_sample(const SamplingPlan& plan, const CorpusManifest& manifest,
                          std::uint64_t seed, bool multinomial_draw = false);

/// Largest-remainder apportionment of `total` over `probs` (no caps).
std::vector<std::uint64_t> largest_remainder(const std::vector<double>& probs,
                                             std::uint64_t total);

/// Reads the allocated number of sentences per language, chosen by a seeded
/// shuffle of each file's line indices.
std::vector<std::string> materialize_sample(const SampledCorpus& sample,
                                            const CorpusManifest& manifest);

}  // namespace mala
