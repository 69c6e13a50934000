// SPDX-License-Identifier: Apache-2.0
#include "mala/eval_nll.hpp"

#include <algorithm>
#include <cmath>

namespace mala {

WindowPlan plan_windows(std::size_t n_tokens, std::size_t context_len, std::size_t stride) {
    if (n_tokens < 2) throw std::invalid_argument("need at least 2 tokens to score");
    if (stride == 0 || stride > context_len)
        throw std::invalid_argument("stride must lie in [1, context_len]");

    WindowPlan plan;
    plan.context_len = context_len;
    plan.stride = stride;

    // First window covers the stream head; position 0 has no prediction.
    const std::size_t first_end = std::min(n_tokens, context_len);
    plan.windows.push_back({0, first_end, 1});
    std::size_t scored_to = first_end;
    while (scored_to < n_tokens) {
        const std::size_t chunk_end = std::min(n_tokens, scored_to + stride);
        const std::size_t start = chunk_end > context_len ? chunk_end - context_len : 0;
        plan.windows.push_back({start, chunk_end, scored_to - start});
        scored_to = chunk_end;
    }
    return plan;
}

NllRecord nll_for_language(const AdaptedModel& model, const TokenizerModel& tokenizer,
                           const LanguageTag& lang, std::string_view text, std::size_t stride) {
    if (text.empty()) throw std::invalid_argument("empty text for " + lang.str());
    const std::vector<std::uint32_t> ids = encode(tokenizer, text);
    if (ids.size() < 2)
        throw std::invalid_argument("text tokenizes to fewer than 2 tokens for " + lang.str());

    const std::size_t ctx = model.config.context_len;
    if (stride == 0) stride = std::max<std::size_t>(1, ctx / 2);
    const WindowPlan plan = plan_windows(ids.size(), ctx, stride);

    NllRecord rec;
    rec.lang = lang;
    rec.byte_count = text.size();
    rec.window_count = plan.windows.size();
    for (const auto& w : plan.windows) {
        std::span<const std::uint32_t> window(ids.data() + w.start, w.end - w.start);
        const Matrix logits = forward_logits(model, window);
        // logits row t predicts window token t+1
        for (std::size_t t = w.first_scored; t < window.size(); ++t) {
            const double* lr = logits.row(t - 1);
            const std::size_t V = logits.cols;
            const double maxv = *std::max_element(lr, lr + V);
            double sum = 0.0;
            for (std::size_t i = 0; i < V; ++i) sum += std::exp(lr[i] - maxv);
            rec.total_nll += maxv + std::log(sum) - lr[window[t]];
            ++rec.token_count;
        }
    }
    rec.nll_per_token = rec.total_nll / static_cast<double>(rec.token_count);
    rec.nll_per_byte = rec.total_nll / static_cast<double>(rec.byte_count);
    return rec;
}

std::vector<std::pair<std::string, NllRecord>> comparable_nll(
    const std::vector<NamedModel>& models,
    const std::vector<std::pair<LanguageTag, std::string>>& texts, NllMode /*mode*/,
    std::size_t stride) {
    std::vector<std::pair<std::string, NllRecord>> rows;
    for (const auto& nm : models) {
        for (const auto& [lang, text] : texts) {
            if (text.empty()) {
                warn("missing text for " + lang.str() + ", row omitted");
                continue;
            }
            rows.emplace_back(nm.name, nll_for_language(*nm.model, *nm.tokenizer, lang, text, stride));
        }
    }
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second.lang < b.second.lang;
    });
    return rows;
}

}  // namespace mala
