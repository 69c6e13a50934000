// SPDX-License-Identifier: Apache-2.0
//
// Small decoder-only transformer (pre-norm, learned absolute positions)
// with embedding-table resize and LoRA adapter attachment.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mala/common.hpp"
#include "mala/tensor.hpp"

namespace mala {

struct ModelConfig {
    std::size_t vocab_size = 300;
    std::size_t d_model = 32;
    std::size_t n_layers = 2;
    std::size_t n_heads = 2;
    std::size_t d_ff = 64;
    std::size_t context_len = 64;
    std::uint64_t seed = 0;

    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class LoraTarget { query, key, value, output, ff };

std::string to_string(LoraTarget t);
LoraTarget lora_target_from_string(std::string_view s);

struct LoraConfig {
    std::size_t rank = 8;
    double alpha = 32.0;
    double dropout = 0.05;
    std::vector<LoraTarget> targets{LoraTarget::query, LoraTarget::value};

    double scale() const { return alpha / static_cast<double>(rank); }
};

/// One named tensor plus its gradient, frozen flag, and optimizer slots.
struct Param {
    Matrix v;
    Matrix g;
    bool frozen = false;
    Matrix adam_m, adam_v;

    void init_shape(std::size_t r, std::size_t c) {
        v = Matrix(r, c);
        g = Matrix(r, c);
    }
};

struct LoraPair {
    Param a;  // r x d_in
    Param b;  // d_out x r
};

struct Linear {
    Param w;  // d_out x d_in
    std::optional<LoraPair> lora;
};

struct LayerParams {
    Param ln1_g, ln1_b, ln2_g, ln2_b;
    Linear wq, wk, wv, wo;  // d_model x d_model
    Linear ff1;             // d_ff x d_model
    Linear ff2;             // d_model x d_ff
    Param ff1_b, ff2_b;
};

struct ParamCounts {
    std::size_t total = 0;
    std::size_t trainable = 0;
};

struct AdaptedModel {
    ModelConfig config;
    std::optional<LoraConfig> lora;
    Param tok_emb;  // V x d_model
    Param pos_emb;  // context_len x d_model
    std::vector<LayerParams> layers;
    Param lnf_g, lnf_b;
    Param lm_head;  // V x d_model

    /// Fixed-order enumeration of every named tensor.
    std::vector<std::pair<std::string, Param*>> params();
    std::vector<std::pair<std::string, const Param*>> params() const;
    ParamCounts count_params() const;
    void zero_grads();
    /// FNV digest over the float64 bytes of all frozen tensors.
    std::uint64_t frozen_digest() const;
};

enum class ResizePolicy { mean_noise, zeros, gaussian };

std::string to_string(ResizePolicy p);
ResizePolicy resize_policy_from_string(std::string_view s);

AdaptedModel build_model(const ModelConfig& config);

/// Grows the embedding table and LM head to new_vocab_size. Existing rows are
/// preserved bit-exact; new rows follow the policy (default: column mean of
/// the old rows plus N(0, sigma^2) noise).
void resize_embeddings(AdaptedModel& model, std::size_t new_vocab_size, ResizePolicy policy,
                       std::uint64_t seed, double noise_sigma = 0.02);

/// Attaches LoRA pairs (A ~ N(0, 0.02^2), B = 0) to the configured targets and
/// freezes every base tensor except the embedding table and LM head.
void attach_lora(AdaptedModel& model, const LoraConfig& config, std::uint64_t seed);

/// Next-token logits, one row per position. Inference mode (no dropout).
Matrix forward_logits(const AdaptedModel& model, std::span<const std::uint32_t> ids);

/// Per-token hidden vectors. layer_index 0 is the token-embedding lookup;
/// layer_index L is the output of block L.
Matrix hidden_states(const AdaptedModel& model, std::span<const std::uint32_t> ids,
                     std::size_t layer_index);

/// Forward + backward for one sequence. Targets align with inputs
/// (target[i] is the next token after input[i]); mask[i]==0 skips position i.
/// Gradients accumulate into each Param's g. Loss is the mean cross-entropy
/// over unmasked positions, in nats. Pass a dropout RNG only during training.
double forward_backward(AdaptedModel& model, std::span<const std::uint32_t> input_ids,
                        std::span<const std::uint32_t> target_ids,
                        std::span<const std::uint8_t> mask, Rng* dropout_rng);

/// Forward-only loss with the same conventions (used by finite differencing).
double forward_loss(const AdaptedModel& model, std::span<const std::uint32_t> input_ids,
                    std::span<const std::uint32_t> target_ids,
                    std::span<const std::uint8_t> mask);

void save_checkpoint(const AdaptedModel& model, const std::filesystem::path& dir,
                     std::size_t step);
AdaptedModel load_checkpoint(const std::filesystem::path& dir, std::size_t* step_out = nullptr);

}  // namespace mala
