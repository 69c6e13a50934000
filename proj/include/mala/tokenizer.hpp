// SPDX-License-Identifier: Apache-2.0
//
// Byte-level pair-merge subword tokenizer: deterministic training, union
// merge with a base vocabulary, encode/decode with byte fallback, and
// segmentation-length reporting.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mala/common.hpp"

namespace mala {

struct TokenEntry {
    std::string bytes;
    std::uint32_t id = 0;
    std::int32_t rank = 0;
};

struct TokenizerModel {
    std::vector<TokenEntry> entries;  // ordered by id, ids contiguous 0..V-1
    std::vector<std::pair<std::string, std::string>> merges;
    bool byte_fallback = true;

    std::size_t vocab_size() const { return entries.size(); }
    bool byte_complete() const;
    const TokenEntry* find(std::string_view bytes) const;

    // Lookup tables rebuilt after any structural change.
    void rebuild_index();
    std::unordered_map<std::string, std::uint32_t> token_to_id;
    std::map<std::pair<std::string, std::string>, std::size_t> merge_index;
    // (left id, right id) -> (merge rank, merged id); derived from merge_index.
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::pair<std::size_t, std::uint32_t>> id_merge_index;
};

struct MergeReport {
    std::size_t base_size = 0;
    std::size_t trained_size = 0;
    std::size_t overlap_size = 0;
    std::size_t union_size = 0;
};

struct SegmentationRow {
    LanguageTag lang;
    std::uint64_t tokens_base = 0;
    std::uint64_t tokens_extended = 0;
    double reduction = 0.0;  // 1 - extended/base
};

struct SegmentationReport {
    std::vector<SegmentationRow> rows;
};

/// Returns the 256-entry byte-only model.
TokenizerModel byte_tokenizer();

/// Deterministic byte-pair training: starts from the 256 byte tokens and
/// repeatedly merges the most frequent adjacent pair (ties by left id, then
/// right id) until vocab_size tokens exist or no pair occurs twice.
/// `presplit_whitespace` stops pairs from crossing whitespace bytes.
TokenizerModel train_subword(const std::vector<std::string>& corpus, std::size_t vocab_size,
                             std::uint64_t seed, bool presplit_whitespace = false);

/// Union of token inventories. Base ids and ranks survive verbatim;
/// trained-only tokens are appended in trained-rank order.
std::pair<TokenizerModel, MergeReport> merge_vocabularies(const TokenizerModel& base,
                                                          const TokenizerModel& trained);

std::vector<std::uint32_t> encode(const TokenizerModel& model, std::string_view text);
std::string decode(const TokenizerModel& model, std::span<const std::uint32_t> ids);

SegmentationReport segmentation_reduction(
    const TokenizerModel& base, const TokenizerModel& extended,
    const std::vector<std::pair<LanguageTag, std::string>>& texts);

void save_tokenizer(const TokenizerModel& model, const std::filesystem::path& path);
TokenizerModel load_tokenizer(const std::filesystem::path& path);

}  // namespace mala
