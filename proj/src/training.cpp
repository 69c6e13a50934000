// SPDX-License-Identifier: Apache-2.0
#include "mala/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace mala {

std::string to_string(EarlyStopMetric m) {
    return m == EarlyStopMetric::validation_nll ? "validation_nll" : "downstream_accuracy";
}

EarlyStopMetric early_stop_metric_from_string(std::string_view s) {
    if (s == "validation_nll") return EarlyStopMetric::validation_nll;
    if (s == "downstream_accuracy") return EarlyStopMetric::downstream_accuracy;
    throw std::invalid_argument("unknown early-stop metric: " + std::string(s));
}

void TrainConfig::validate() const {
    if (learning_rate < 0.0) throw std::invalid_argument("learning_rate must be >= 0");
    if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
    if (batch_size == 0 || context_len < 2) throw std::invalid_argument("bad batch/context size");
}

double causal_lm_loss(const Matrix& logits, std::span<const std::uint32_t> targets,
                      std::span<const std::uint8_t> mask) {
    if (logits.rows != targets.size())
        throw std::invalid_argument("logits/targets length mismatch");
    std::size_t n = 0;
    double loss = 0.0;
    for (std::size_t t = 0; t < logits.rows; ++t) {
        if (!mask.empty() && !mask[t]) continue;
        ++n;
        const double* lr = logits.row(t);
        const double maxv = *std::max_element(lr, lr + logits.cols);
        double sum = 0.0;
        for (std::size_t i = 0; i < logits.cols; ++i) sum += std::exp(lr[i] - maxv);
        loss += maxv + std::log(sum) - lr[targets[t]];
    }
    if (n == 0) throw std::invalid_argument("all positions masked");
    return loss / static_cast<double>(n);
}

std::vector<std::vector<std::uint32_t>> pack_stream(
    const std::vector<std::vector<std::uint32_t>>& docs, std::size_t context_len,
    std::uint32_t eot_token) {
    std::vector<std::uint32_t> stream;
    for (const auto& doc : docs) {
        stream.insert(stream.end(), doc.begin(), doc.end());
        stream.push_back(eot_token);
    }
    std::vector<std::vector<std::uint32_t>> blocks;
    const std::size_t block_len = context_len + 1;  // inputs + one-step-shifted targets
    for (std::size_t i = 0; i + block_len <= stream.size(); i += block_len)
        blocks.emplace_back(stream.begin() + i, stream.begin() + i + block_len);
    return blocks;
}

namespace {

void adamw_step(AdaptedModel& model, const TrainConfig& cfg, std::size_t step_1based,
                double batch_scale) {
    double lr = cfg.learning_rate;
    if (cfg.warmup_steps > 0 && step_1based <= cfg.warmup_steps)
        lr *= static_cast<double>(step_1based) / static_cast<double>(cfg.warmup_steps);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_1based));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_1based));

    for (auto& [name, p] : model.params()) {
        if (p->frozen) continue;
        if (p->adam_m.data.empty()) {
            p->adam_m = Matrix(p->v.rows, p->v.cols);
            p->adam_v = Matrix(p->v.rows, p->v.cols);
        }
        for (std::size_t i = 0; i < p->v.data.size(); ++i) {
            const double g = p->g.data[i] * batch_scale;
            double& m = p->adam_m.data[i];
            double& s = p->adam_v.data[i];
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            s = cfg.beta2 * s + (1.0 - cfg.beta2) * g * g;
            const double mhat = m / bc1;
            const double shat = s / bc2;
            double& w = p->v.data[i];
            w -= lr * mhat / (std::sqrt(shat) + cfg.adam_eps);
            w -= lr * cfg.weight_decay * w;  // decoupled decay
        }
    }
}

}  // namespace

std::vector<Checkpoint> train(AdaptedModel& model,
                              const std::vector<std::vector<std::uint32_t>>& blocks,
                              const TrainConfig& config, const std::filesystem::path& run_dir,
                              const MetricProbe& probe) {
    namespace fs = std::filesystem;
    config.validate();
    if (blocks.empty()) throw std::invalid_argument("no training blocks");
    if (model.count_params().trainable == 0)
        throw std::invalid_argument("model has no trainable tensors");

    std::ofstream metrics_csv;
    if (!run_dir.empty()) {
        fs::create_directories(run_dir / "checkpoints");
        metrics_csv.open(run_dir / "metrics.csv", std::ios::binary);
        metrics_csv << "step,epoch,loss\n";
    }

    std::vector<Checkpoint> checkpoints;
    auto save = [&](std::size_t step, std::size_t epoch, double loss) {
        Checkpoint ck;
        ck.step = step;
        ck.epoch = epoch;
        ck.train_loss = loss;
        if (!run_dir.empty()) {
            ck.snapshot = run_dir / "checkpoints" / ("step_" + std::to_string(step));
            save_checkpoint(model, ck.snapshot, step);
        }
        if (probe) ck.metrics = probe(model, step);
        checkpoints.push_back(std::move(ck));
    };

    std::mt19937_64 order_rng(config.seed);
    std::size_t step = 0;
    double last_loss = 0.0;
    bool done = false;

    for (std::size_t epoch = 0; epoch < config.epochs && !done; ++epoch) {
        std::vector<std::size_t> order(blocks.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), order_rng);

        for (std::size_t start = 0; start + config.batch_size <= order.size() || start == 0;
             start += config.batch_size) {
            if (start >= order.size()) break;
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            model.zero_grads();
            double batch_loss = 0.0;
            std::size_t n_seq = 0;
            Rng dropout_rng(config.seed ^ (0x9e3779b97f4a7c15ull * (step + 1)));
            for (std::size_t bi = start; bi < end; ++bi) {
                const auto& block = blocks[order[bi]];
                std::span<const std::uint32_t> input(block.data(), block.size() - 1);
                std::span<const std::uint32_t> target(block.data() + 1, block.size() - 1);
                batch_loss += forward_backward(model, input, target, {}, &dropout_rng);
                ++n_seq;
            }
            batch_loss /= static_cast<double>(n_seq);
            last_loss = batch_loss;

            if (!std::isfinite(batch_loss)) {
                if (!run_dir.empty())
                    save_checkpoint(model, run_dir / "checkpoints" / "diverged", step);
                throw std::runtime_error("training loss became non-finite at step " +
                                         std::to_string(step));
            }

            ++step;
            adamw_step(model, config, step, 1.0 / static_cast<double>(n_seq));
            if (metrics_csv.is_open())
                metrics_csv << step << ',' << epoch << ',' << batch_loss << '\n';
            if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0)
                save(step, epoch, batch_loss);
            if (config.max_steps > 0 && step >= config.max_steps) {
                done = true;
                break;
            }
        }
    }

    if (checkpoints.empty() || checkpoints.back().step != step) save(step, config.epochs - 1, last_loss);
    return checkpoints;
}

Checkpoint early_stop_select(const std::vector<Checkpoint>& checkpoints,
                             const std::string& metric_key, EarlyStopMetric kind) {
    const Checkpoint* best = nullptr;
    for (const auto& ck : checkpoints) {
        auto it = ck.metrics.find(metric_key);
        if (it == ck.metrics.end()) continue;
        if (!best) {
            best = &ck;
            continue;
        }
        const double cur = it->second;
        const double ref = best->metrics.at(metric_key);
        const bool better = kind == EarlyStopMetric::downstream_accuracy ? cur > ref : cur < ref;
        if (better) best = &ck;  // strict comparison keeps the earliest on ties
    }
    if (!best) throw std::runtime_error("no checkpoint carries metric " + metric_key);
    return *best;
}

}  // namespace mala
