// SPDX-License-Identifier: Apache-2.0
//
// Continued-pretraining loop: causal LM loss over packed sequences, AdamW
// restricted to trainable tensors, periodic checkpoints, early stopping.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mala/model.hpp"

namespace mala {

enum class EarlyStopMetric { validation_nll, downstream_accuracy };

std::string to_string(EarlyStopMetric m);
EarlyStopMetric early_stop_metric_from_string(std::string_view s);

struct TrainConfig {
    double learning_rate = 3e-4;
    double weight_decay = 0.01;
    std::size_t batch_size = 8;
    std::size_t context_len = 128;
    std::size_t epochs = 3;
    std::size_t checkpoint_every = 500;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t warmup_steps = 0;  // linear warmup; 0 keeps the LR constant
    std::size_t max_steps = 0;     // 0 = run all epochs
    EarlyStopMetric early_stop_metric = EarlyStopMetric::validation_nll;

    void validate() const;
};

struct Checkpoint {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double train_loss = 0.0;
    std::filesystem::path snapshot;  // empty when no run dir was given
    std::map<std::string, double> metrics;
};

/// Mean token-level cross-entropy (nats) over unmasked positions.
double causal_lm_loss(const Matrix& logits, std::span<const std::uint32_t> targets,
                      std::span<const std::uint8_t> mask);

/// Concatenates documents with an end-of-text token and cuts the stream into
/// blocks of (context_len + 1) tokens; the final partial block is dropped.
std::vector<std::vector<std::uint32_t>> pack_stream(
    const std::vector<std::vector<std::uint32_t>>& docs, std::size_t context_len,
    std::uint32_t eot_token);

/// Called after each checkpoint save; the returned map is recorded on the
/// checkpoint (e.g. {"validation_nll": ...}).
using MetricProbe = std::function<std::map<std::string, double>(const AdaptedModel&, std::size_t step)>;

/// Runs the training loop. Blocks are visited in a seed-shuffled order per
/// epoch; frozen tensors are never updated. Writes metrics.csv and
/// checkpoints/ under run_dir when given. Throws if the loss turns non-finite
/// (after writing a diagnostic checkpoint when a run dir exists).
std::vector<Checkpoint> train(AdaptedModel& model,
                              const std::vector<std::vector<std::uint32_t>>& blocks,
                              const TrainConfig& config,
                              const std::filesystem::path& run_dir = {},
                              const MetricProbe& probe = nullptr);

/// argmin for NLL-style metrics, argmax for accuracy-style; ties go to the
/// earliest step. `metric_key` selects which recorded value to compare.
Checkpoint early_stop_select(const std::vector<Checkpoint>& checkpoints,
                             const std::string& metric_key, EarlyStopMetric kind);

}  // namespace mala
