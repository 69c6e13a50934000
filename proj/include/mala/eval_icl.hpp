// SPDX-License-Identifier: Apache-2.0
//
// Few-shot in-context classification: prompt rendering, label-probability
// scoring, random and retrieval-based shot selection, shot sweeps.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mala/model.hpp"
#include "mala/tokenizer.hpp"

namespace mala {

struct IclExample {
    std::string text;
    std::string label;
};

struct IclSplit {
    std::vector<IclExample> train;
    std::vector<IclExample> test;
};

struct IclTask {
    std::string name;
    std::vector<std::string> labels;  // task order breaks score ties
    std::string tmpl;                 // contains [sent] and [label] exactly once
    std::map<LanguageTag, IclSplit> data;

    void validate() const;
};

/// Loads <dir>/task.json plus per-language train.jsonl / test.jsonl files
/// found under <dir>/<lang>/.
IclTask load_task(const std::filesystem::path& dir);

struct PromptSpec {
    std::vector<IclExample> shots;
    std::string query;
    std::string rendered;  // ends right where the query's label would start
};

/// Shot lines are the template with both placeholders filled, joined by a
/// single newline; the query line is the template cut at [label], ending in
/// exactly one space. Sentences are inserted verbatim.
PromptSpec render_prompt(const IclTask& task, std::span<const IclExample> shots,
                         const std::string& query);

/// Anything that can assign a log-score to each candidate label continuation.
class LabelScorer {
public:
    virtual ~LabelScorer() = default;
    virtual std::vector<double> score(const std::string& prompt,
                                      const std::vector<std::string>& labels) const = 0;
};

/// Sums token log-probs of each label's tokens continuing the prompt.
class ModelScorer : public LabelScorer {
public:
    ModelScorer(const AdaptedModel& model, const TokenizerModel& tokenizer,
                bool length_normalize = false)
        : model_(&model), tokenizer_(&tokenizer), length_normalize_(length_normalize) {}
    std::vector<double> score(const std::string& prompt,
                              const std::vector<std::string>& labels) const override;

private:
    const AdaptedModel* model_;
    const TokenizerModel* tokenizer_;
    bool length_normalize_;
};

/// argmax over scores; exact ties resolve to the earliest label in task order.
std::size_t predict_label(std::span<const double> scores);

std::vector<IclExample> select_shots_random(std::span<const IclExample> pool, std::size_t k,
                                            std::uint64_t seed);

/// Mean-pooled hidden states at a fixed layer; default layer is the middle.
struct Embedder {
    const AdaptedModel* model = nullptr;
    const TokenizerModel* tokenizer = nullptr;
    std::size_t layer_index = 0;

    std::vector<double> embed(const std::string& text) const;
};

double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Top-k pool items by cosine similarity to the query, ordered
/// most-similar-last; ties break toward the smaller pool index.
std::vector<IclExample> select_shots_retrieval(std::span<const IclExample> pool,
                                               const std::string& query, std::size_t k,
                                               const Embedder& embedder);

struct ShotSelector {
    enum class Kind { random, retrieval } kind = Kind::random;
    std::uint64_t seed = 0;        // random selection
    Embedder embedder;             // retrieval selection
    std::string name() const { return kind == Kind::random ? "random" : "retrieval"; }
};

struct EvalReport {
    std::map<LanguageTag, double> per_language_accuracy;
    double macro_average = 0.0;
    std::size_t n_shots = 0;
    std::string selector;
    std::uint64_t seed = 0;
};

EvalReport evaluate_task(const LabelScorer& scorer, const IclTask& task, std::size_t k,
                         const ShotSelector& selector);

std::vector<EvalReport> shot_sweep(const LabelScorer& scorer, const IclTask& task,
                                   const std::vector<std::size_t>& shot_counts,
                                   const ShotSelector& selector);

}  // namespace mala
