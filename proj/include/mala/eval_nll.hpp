// SPDX-License-Identifier: Apache-2.0
//
// Sliding-window negative log-likelihood over concatenated per-language text.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mala/model.hpp"
#include "mala/tokenizer.hpp"

namespace mala {

struct WindowSpec {
    std::size_t start = 0;
    std::size_t end = 0;           // exclusive
    std::size_t first_scored = 0;  // offset within [start, end)
};

struct WindowPlan {
    std::size_t context_len = 0;
    std::size_t stride = 0;
    std::vector<WindowSpec> windows;
};

struct NllRecord {
    LanguageTag lang;
    double total_nll = 0.0;  // nats
    std::size_t token_count = 0;  // scored positions
    std::size_t byte_count = 0;
    std::size_t window_count = 0;
    double nll_per_token = 0.0;
    double nll_per_byte = 0.0;
};

/// Every position 1..n-1 is scored exactly once; window i>0 scores its final
/// `stride` positions (fewer in the last window) with maximal left context.
WindowPlan plan_windows(std::size_t n_tokens, std::size_t context_len, std::size_t stride);

/// Tokenizes `text`, scores it window by window, and sums -log p per scored
/// token. stride 0 defaults to context_len / 2.
NllRecord nll_for_language(const AdaptedModel& model, const TokenizerModel& tokenizer,
                           const LanguageTag& lang, std::string_view text,
                           std::size_t stride = 0);

enum class NllMode { model_comparable, language_comparable };

struct NamedModel {
    std::string name;
    const AdaptedModel* model = nullptr;
    const TokenizerModel* tokenizer = nullptr;
};

/// One record per (model, language); rows sorted by (model name, language).
/// Languages missing text are skipped with a warning.
std::vector<std::pair<std::string, NllRecord>> comparable_nll(
    const std::vector<NamedModel>& models,
    const std::vector<std::pair<LanguageTag, std::string>>& texts, NllMode mode,
    std::size_t stride = 0);

}  // namespace mala
